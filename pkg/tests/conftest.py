from __future__ import annotations

import numpy as np
import pytest

from asalpp.config import RunConfig
from asalpp.embeddings import StubEmbedder
from asalpp.evolver import ScriptedBackend
from asalpp.search import Providers


def small_run_config(**overrides) -> RunConfig:
    data = {
        "outer_iterations": 3, "inner_iterations": 20, "rollout_steps": 64,
        "substrate": {"grid_size": 64}, "es": {"population": 8}, "workers": 1,
        "embedder": {"dimension": 128, "image_side": 64},
        "evolver": {"kind": "scripted", "script": ["clusters", "microbe motility", "spirals"]},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        else:
            data[key] = value
    return RunConfig.model_validate(data)


def stub_providers(config: RunConfig, script=None, loop=False) -> Providers:
    emb = StubEmbedder(config.embedder.dimension, config.embedder.image_side)
    return Providers(emb, ScriptedBackend(script if script is not None else config.evolver.script,
                                          loop=loop))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------------------------

_ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _ACCEPTANCE[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {title}")
