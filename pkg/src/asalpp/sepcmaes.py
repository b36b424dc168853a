"""Separable CMA-ES (diagonal covariance) with an ask/tell interface.

Follows Ros & Hansen, "A Simple Modification in CMA-ES Achieving Linear Time
and Space Complexity" (PPSN 2008): the full-CMA recombination, cumulation and
step-size rules, with the covariance restricted to its diagonal and the
covariance learning rates scaled up by ``(n + 2) / 3``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .config import EsConfig
from .errors import ConfigError, InputError

DIAG_FLOOR = 1e-20
SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class Strategy:
    """Derived constants; a pure function of (n, lambda)."""

    n: int
    popsize: int
    parents: int
    weights: np.ndarray
    mu_eff: float
    c_sigma: float
    d_sigma: float
    c_c: float
    c_1: float
    c_mu: float
    chi_n: float

    @classmethod
    def for_config(cls, config: EsConfig) -> "Strategy":
        n, lam = config.dimension, config.popsize
        mu = max(1, lam // 2)
        raw = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
        w = raw / raw.sum()
        mu_eff = 1.0 / float(np.sum(w ** 2))
        c_sigma = (mu_eff + 2) / (n + mu_eff + 5)
        d_sigma = 1 + 2 * max(0.0, math.sqrt((mu_eff - 1) / (n + 1)) - 1) + c_sigma
        c_c = (4 + mu_eff / n) / (n + 4 + 2 * mu_eff / n)
        c_1 = 2 / ((n + 1.3) ** 2 + mu_eff)
        c_mu = min(1 - c_1, 2 * (mu_eff - 2 + 1 / mu_eff) / ((n + 2) ** 2 + mu_eff))
        # Separable variant: a diagonal is learned n times faster than a full matrix.
        boost = (n + 2) / 3
        c_1 = min(1.0, c_1 * boost)
        c_mu = min(1.0 - c_1, c_mu * boost)
        chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        return cls(n, lam, mu, w, mu_eff, c_sigma, d_sigma, c_c, c_1, c_mu, chi_n)


@dataclass
class EsState:
    mean: np.ndarray
    diag: np.ndarray
    sigma: float
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0
    best_theta: np.ndarray | None = None
    best_loss: float = math.inf
    stagnation: int = 0
    history: list[float] = field(default_factory=list)  # best-so-far after each tell

    def copy(self) -> "EsState":
        return replace(
            self, mean=self.mean.copy(), diag=self.diag.copy(), p_sigma=self.p_sigma.copy(),
            p_c=self.p_c.copy(),
            best_theta=None if self.best_theta is None else self.best_theta.copy(),
            history=list(self.history))


def es_init(config: EsConfig, x0) -> EsState:
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.size != config.dimension:
        raise ConfigError(f"x0 has length {x0.size}, optimizer dimension is {config.dimension}")
    n = config.dimension
    return EsState(mean=x0.copy(), diag=np.ones(n), sigma=float(config.sigma0),
                   p_sigma=np.zeros(n), p_c=np.zeros(n))


def _rng(config: EsConfig, generation: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, generation]))


def es_ask(state: EsState, config: EsConfig) -> list[np.ndarray]:
    """Sample ``popsize`` candidates; the stream depends only on (seed, generation)."""
    z = _rng(config, state.generation).standard_normal((config.popsize, config.dimension))
    x = state.mean + state.sigma * np.sqrt(state.diag) * z
    return list(x)


def es_tell(state: EsState, config: EsConfig, candidates: Sequence, losses: Sequence[float],
            strategy: Strategy | None = None) -> EsState:
    """Return the updated state after ranking ``candidates`` by ``losses``."""
    s = strategy or Strategy.for_config(config)
    if len(candidates) != s.popsize or len(losses) != s.popsize:
        raise InputError(
            f"expected {s.popsize} candidates and losses, got {len(candidates)} and {len(losses)}")
    x = np.asarray([np.asarray(c, dtype=np.float64).reshape(-1) for c in candidates])
    if x.shape[1] != s.n:
        raise InputError(f"candidates have dimension {x.shape[1]}, expected {s.n}")
    f = np.asarray(losses, dtype=np.float64)
    f = np.where(np.isfinite(f), f, np.inf)
    order = np.argsort(f, kind="stable")

    new = state.copy()
    m_old, sigma = state.mean, state.sigma
    y = (x[order[: s.parents]] - m_old) / sigma
    y_w = s.weights @ y
    new.mean = m_old + sigma * y_w

    sqrt_d = np.sqrt(state.diag)
    new.p_sigma = (1 - s.c_sigma) * state.p_sigma + math.sqrt(
        s.c_sigma * (2 - s.c_sigma) * s.mu_eff) * (y_w / sqrt_d)
    ps_norm = float(np.linalg.norm(new.p_sigma))
    denom = math.sqrt(1 - (1 - s.c_sigma) ** (2 * (state.generation + 1)))
    h_sigma = 1.0 if ps_norm / denom / s.chi_n < 1.4 + 2 / (s.n + 1) else 0.0
    new.p_c = (1 - s.c_c) * state.p_c + h_sigma * math.sqrt(s.c_c * (2 - s.c_c) * s.mu_eff) * y_w

    rank_one = new.p_c ** 2 + (1 - h_sigma) * s.c_c * (2 - s.c_c) * state.diag
    rank_mu = s.weights @ (y ** 2)
    diag = (1 - s.c_1 - s.c_mu) * state.diag + s.c_1 * rank_one + s.c_mu * rank_mu
    new.diag = np.maximum(diag, DIAG_FLOOR)

    exponent = (s.c_sigma / s.d_sigma) * (ps_norm / s.chi_n - 1)
    new.sigma = max(SIGMA_FLOOR, sigma * math.exp(min(1.0, exponent)))
    new.generation = state.generation + 1

    best = int(order[0])
    if f[best] < state.best_loss:
        new.best_loss = float(f[best])
        new.best_theta = np.asarray(candidates[best]).copy()
        new.stagnation = 0
    else:
        new.stagnation = state.stagnation + 1
    new.history.append(new.best_loss)
    return new


def is_stagnant(state: EsState, config: EsConfig) -> bool:
    return config.max_stagnation > 0 and state.stagnation >= config.max_stagnation


class SepCMAES:
    """Stateful convenience wrapper around :func:`es_ask` / :func:`es_tell`."""

    def __init__(self, config: EsConfig, x0, state: EsState | None = None):
        self.config = config
        self.strategy = Strategy.for_config(config)
        self.state = state if state is not None else es_init(config, x0)

    def ask(self) -> list[np.ndarray]:
        return es_ask(self.state, self.config)

    def tell(self, candidates, losses) -> None:
        self.state = es_tell(self.state, self.config, candidates, losses, self.strategy)

    @property
    def best_loss(self) -> float:
        return self.state.best_loss

    def stagnant(self) -> bool:
        return is_stagnant(self.state, self.config)


_MAGIC = b"SEPCMA01"


def state_to_bytes(state: EsState, config: EsConfig) -> bytes:
    """``magic | u32 header length | JSON header | little-endian float32 arrays``."""
    best = state.best_theta if state.best_theta is not None else np.zeros(0)
    arrays = {"mean": state.mean, "diag": state.diag, "p_sigma": state.p_sigma,
              "p_c": state.p_c, "best_theta": best}
    header = {
        "config": config.model_dump(mode="json"),
        "sigma": state.sigma,
        "generation": state.generation,
        "best_loss": state.best_loss if math.isfinite(state.best_loss) else None,
        "stagnation": state.stagnation,
        "history": state.history,
        "arrays": [[k, int(np.asarray(v).size)] for k, v in arrays.items()],
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.asarray(v, dtype="<f4").tobytes() for v in arrays.values())
    return _MAGIC + struct.pack("<I", len(head)) + head + body


def state_from_bytes(blob: bytes) -> tuple[EsState, EsConfig]:
    if blob[:8] != _MAGIC:
        raise ConfigError("not an optimizer checkpoint")
    (hlen,) = struct.unpack("<I", blob[8:12])
    header = json.loads(blob[12:12 + hlen])
    offset = 12 + hlen
    arrays = {}
    for name, size in header["arrays"]:
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).astype(np.float64)
        offset += 4 * size
    if offset != len(blob):
        raise ConfigError("optimizer checkpoint has trailing or missing bytes")
    config = EsConfig.model_validate(header["config"])
    best_loss = header["best_loss"]
    state = EsState(
        mean=arrays["mean"], diag=arrays["diag"], sigma=float(header["sigma"]),
        p_sigma=arrays["p_sigma"], p_c=arrays["p_c"], generation=int(header["generation"]),
        best_theta=arrays["best_theta"].astype(np.float32) if arrays["best_theta"].size else None,
        best_loss=math.inf if best_loss is None else float(best_loss),
        stagnation=int(header["stagnation"]), history=[float(v) for v in header["history"]])
    return state, config
