import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from asalpp.config import EvolverConfig
from asalpp.errors import ConfigError, EvolverExhausted, InputError, ProviderError
from asalpp.evolver import (EST_TEMPLATE, ETT_TEMPLATE, EvolverRequest, PromptChain, PromptEntry,
                            RemoteChatBackend, ScriptedBackend, build_instruction, make_backend,
                            normalize_reply, propose_distinct, propose_next, subsample_frames)
from asalpp.stubserver import create_app

FRAMES = tuple(np.full((8, 8, 3), i, np.uint8) for i in range(3))


def request(mode="ETT", prompts=("a microbe", "clusters"), suffix=None):
    return EvolverRequest(FRAMES, prompts, iteration=2, temperature=0.7, mode=mode,
                          environment_suffix=suffix)


def test_ett_instruction_lists_chain():
    text = build_instruction(request())
    assert "'a microbe, clusters'" in text
    assert "You are in iteration 2." in text
    assert text.endswith("NEXT TARGET PROMPT:")
    assert ETT_TEMPLATE.count("{all_prompts}") == 1


def test_est_instruction_only_latest():
    text = build_instruction(request("EST", ("clusters",)))
    assert "'clusters'" in text and "a microbe" not in text
    assert "{last_prompt}" in EST_TEMPLATE


def test_request_validation():
    with pytest.raises(InputError):
        EvolverRequest((), ("a",), 1, 0.7, "ETT")
    with pytest.raises(InputError):
        EvolverRequest(FRAMES * 6, ("a",), 1, 0.7, "ETT")
    with pytest.raises(InputError):
        EvolverRequest(FRAMES, (), 1, 0.7, "ETT")


def test_normalize_reply():
    assert normalize_reply("\n  spiral galaxies  \nextra") == "spiral galaxies"
    assert normalize_reply("   \n") == ""


def test_subsample_frames_evenly():
    frames = [np.full((2, 2, 3), i, np.uint8) for i in range(65)]
    picked = subsample_frames(frames, 8)
    assert [int(f[0, 0, 0]) for f in picked][0] == 0
    assert [int(f[0, 0, 0]) for f in picked][-1] == 64
    assert len(picked) == 8
    assert len(subsample_frames(frames[:3], 8)) == 3


def test_scripted_backend_logs_and_exhausts():
    b = ScriptedBackend(["one", "two"])
    assert propose_next(request(), b).text == "one"
    assert propose_next(request(), b).text == "two"
    with pytest.raises(EvolverExhausted):
        propose_next(request(), b)
    assert len(b.calls) == 3 and b.calls[0].frame_count == 3
    looping = ScriptedBackend(["x"], loop=True)
    assert [propose_next(request(), looping).text for _ in range(3)] == ["x"] * 3


def test_scripted_advance():
    b = ScriptedBackend(["one", "two", "three"])
    b.advance(2)
    assert propose_next(request(), b).text == "three"


def test_empty_replies_retried_then_error():
    b = ScriptedBackend(["", "  \n", "ok"])
    p = propose_next(request(), b, retry_limit=3)
    assert p.text == "ok"
    with pytest.raises(ProviderError):
        propose_next(request(), ScriptedBackend([""], loop=True), retry_limit=2)


def test_environment_suffix():
    p = propose_next(request(suffix="high energy"), ScriptedBackend(["swarm"]))
    assert p.text == "swarm, high energy" and p.source == "evolver+environment"


def test_propose_distinct_rejects_repeats_case_insensitively():
    b = ScriptedBackend(["A Microbe", "clusters", "rings"])
    p = propose_distinct(request(), b, ["a microbe", "clusters"], max_tries=5)
    assert p.text == "rings" and p.attempts == 3
    assert p.rejected == ["A Microbe", "clusters"]
    b = ScriptedBackend(["same"], loop=True)
    assert propose_distinct(request(), b, ["same"], max_tries=10) is None
    assert len(b.calls) == 10


def test_chain_validation_and_json():
    chain = PromptChain.seed("a microbe").append(PromptEntry("clusters", 2, "evolver", "clusters\n"))
    assert chain.texts == ["a microbe", "clusters"]
    assert PromptChain.from_json(chain.to_json()) == chain
    with pytest.raises(InputError):
        chain.append(PromptEntry("late", 2, "evolver"))
    with pytest.raises(InputError):
        PromptChain((PromptEntry("x", 1, "evolver"),))


def test_remote_chat_against_stub_server():
    app = create_app(replies=["glowing spores\nsecond line"])
    client = TestClient(app, base_url="http://stub")
    backend = RemoteChatBackend(EvolverConfig(kind="remote", endpoint="http://stub"), client=client)
    p = propose_next(request(), backend)
    assert p.text == "glowing spores"
    sent = app.state.chat_log[0]
    assert sent.model == "gemma-3-4b-it"
    parts = sent.messages[0].content
    assert parts[0].type == "text" and "NEXT TARGET PROMPT" in parts[0].text
    assert [p.type for p in parts[1:]] == ["image"] * 3


def test_remote_chat_errors():
    client = httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(500)))
    backend = RemoteChatBackend(EvolverConfig(kind="remote", endpoint="http://x", retry_limit=1),
                                client=client)
    with pytest.raises(ProviderError) as info:
        backend.complete("hi", [], 0.7)
    assert info.value.status == 500


def test_missing_chat_endpoint(monkeypatch):
    monkeypatch.delenv("ASALPP_EVOLVER_ENDPOINT", raising=False)
    with pytest.raises(ConfigError, match="ASALPP_EVOLVER_ENDPOINT"):
        make_backend(EvolverConfig(kind="remote"))
