"""Configuration models.

Every config is a frozen pydantic model that rejects unknown keys, so a typo in
a JSON file is a hard error instead of a silently applied default.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

Mode = Literal["EST", "ETT"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class LeniaConfig(_Strict):
    """Lenia substrate geometry and dynamics constants."""

    grid_size: int = Field(128, ge=1)
    channels: int = Field(3, ge=1)
    kernel_count: int = Field(9, ge=1)
    dt: float = Field(0.1, gt=0.0, le=1.0)
    init_patch: int = Field(32, ge=1)
    rollout_steps: int = Field(256, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "LeniaConfig":
        if self.init_patch > self.grid_size:
            raise ValueError(f"init_patch ({self.init_patch}) exceeds grid_size ({self.grid_size})")
        return self

    @property
    def theta_length(self) -> int:
        return 4 * self.kernel_count + self.init_patch * self.init_patch * self.channels

    def kernel_wiring(self) -> list[tuple[int, int]]:
        """(source channel, target channel) for every kernel."""
        c = self.channels
        return [(k % c, (k // c) % c) for k in range(self.kernel_count)]

    def config_hash(self) -> str:
        """Hash of the fields that determine the meaning of a theta vector."""
        payload = self.model_dump(exclude={"rollout_steps"})
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_population(n: int) -> int:
    return max(8, 4 + int(math.floor(3 * math.log(n)))) if n > 1 else 8


class EsConfig(_Strict):
    """Separable CMA-ES settings for an n-dimensional problem."""

    dimension: int = Field(..., ge=1)
    population: Optional[int] = Field(None, ge=4)
    sigma0: float = Field(0.3, gt=0.0)
    seed: int = Field(0, ge=0, lt=2**64)
    max_stagnation: int = Field(200, ge=0)

    @property
    def popsize(self) -> int:
        return self.population if self.population is not None else default_population(self.dimension)

    @property
    def parents(self) -> int:
        return self.popsize // 2


class EsSettings(_Strict):
    """The part of :class:`EsConfig` a user sets; the dimension comes from the substrate."""

    population: Optional[int] = Field(None, ge=4)
    sigma0: float = Field(0.3, gt=0.0)
    max_stagnation: int = Field(200, ge=0)

    def for_dimension(self, n: int, seed: int) -> EsConfig:
        return EsConfig(dimension=n, seed=seed, **self.model_dump())


class ObjectiveSettings(_Strict):
    softmax_coefficient: float = Field(0.3, ge=0.0, le=1.0)
    softmax_sharpness: float = Field(10.0, gt=0.0)
    checkpoints_per_prompt: int = Field(1, ge=1)


class ProviderConfig(_Strict):
    """Vision-language embedding provider."""

    kind: Literal["stub", "remote"] = "stub"
    endpoint: Optional[str] = None
    dimension: int = Field(512, ge=8)
    image_side: int = Field(224, ge=32)
    timeout: float = Field(30.0, gt=0.0)
    retry_limit: int = Field(3, ge=0)
    max_in_flight: int = Field(8, ge=1)


class EvolverConfig(_Strict):
    """Prompt-proposing foundation model backend."""

    kind: Literal["scripted", "remote"] = "scripted"
    script: list[str] = Field(default_factory=list)
    loop: bool = False
    endpoint: Optional[str] = None
    model: str = "gemma-3-4b-it"
    temperature: float = Field(0.7, ge=0.0)
    timeout: float = Field(120.0, gt=0.0)
    retry_limit: int = Field(3, ge=0)
    frames: int = Field(8, ge=1, le=16)
    max_in_flight: int = Field(8, ge=1)


class RunConfig(_Strict):
    mode: Mode = "ETT"
    seed_prompt: str = "a microbe"
    outer_iterations: int = Field(8, ge=1)
    inner_iterations: int = Field(2000, ge=1)
    rollout_steps: int = Field(256, ge=1)
    substrate: LeniaConfig = Field(default_factory=LeniaConfig)
    es: EsSettings = Field(default_factory=EsSettings)
    objective: ObjectiveSettings = Field(default_factory=ObjectiveSettings)
    embedder: ProviderConfig = Field(default_factory=ProviderConfig)
    evolver: EvolverConfig = Field(default_factory=EvolverConfig)
    run_seed: int = Field(0, ge=0, lt=2**64)
    workers: Optional[int] = Field(None, ge=1)

    @model_validator(mode="before")
    @classmethod
    def _sync_steps(cls, data: Any) -> Any:
        # The run-level rollout_steps is authoritative; the substrate copy mirrors it.
        if isinstance(data, dict):
            data = dict(data)
            steps = data.get("rollout_steps", 256)
            sub = data.get("substrate") or {}
            if isinstance(sub, LeniaConfig):
                sub = sub.model_dump(exclude_unset=True)
            sub = dict(sub)
            if "rollout_steps" in sub and sub["rollout_steps"] != steps:
                raise ValueError("substrate.rollout_steps disagrees with rollout_steps")
            sub["rollout_steps"] = steps
            data["substrate"] = sub
        return data

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if not self.seed_prompt.strip():
            raise ValueError("seed_prompt must be non-empty")
        if self.rollout_steps < self.outer_iterations * self.objective.checkpoints_per_prompt:
            raise ValueError("rollout_steps must be >= outer_iterations so temporal checkpoints fit")
        return self


class TreeConfig(_Strict):
    """Phylogenetic tree generation.

    ``depth`` counts levels including the root, so branching 2 and depth 3
    gives at most 1 + 2 + 4 nodes. ``environment_layers`` holds one list of
    ``branching`` descriptors per fork, i.e. ``depth - 1`` layers.
    """

    branching: int = Field(2, ge=1)
    depth: int = Field(3, ge=1)
    temperature: float = Field(1.0, ge=0.0)
    environment_layers: Optional[list[list[str]]] = None
    # When set and no layers are given, descriptors are requested from this model.
    environment_model: Optional[EvolverConfig] = None
    max_tries: int = Field(10, ge=1)
    base: RunConfig = Field(default_factory=RunConfig)

    @model_validator(mode="after")
    def _check(self) -> "TreeConfig":
        layers = self.environment_layers
        if layers is not None:
            if len(layers) != self.depth - 1:
                raise ValueError(
                    f"environment_layers has {len(layers)} layers, expected depth - 1 = {self.depth - 1}")
            for i, layer in enumerate(layers):
                if len(layer) != self.branching:
                    raise ValueError(
                        f"environment layer {i} has {len(layer)} descriptors, expected {self.branching}")
        if self.base.rollout_steps < self.depth * self.base.objective.checkpoints_per_prompt:
            raise ValueError("base.rollout_steps must be >= depth so temporal checkpoints fit")
        return self


def _coerce(value: str) -> Any:
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when possible."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = child
        node[parts[-1]] = _coerce(raw)
    return data


def _validate(model: type[BaseModel], data: dict):
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid {model.__name__}: {exc}") from exc


def run_config_from_dict(data: dict, overrides: list[str] = ()) -> RunConfig:
    return _validate(RunConfig, apply_overrides(data, list(overrides)))


def load_run_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return run_config_from_dict(data, overrides)


def load_tree_config(path: str | Path | None, overrides: list[str] = ()) -> TreeConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    return _validate(TreeConfig, apply_overrides(data, list(overrides)))


def dump_config(config: BaseModel) -> str:
    return json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"
