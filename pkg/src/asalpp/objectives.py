"""Alignment objectives and the open-endedness score."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InputError


def _as_matrix(vectors: Sequence[np.ndarray]) -> np.ndarray:
    mat = np.asarray([np.asarray(v, dtype=np.float64) for v in vectors])
    if mat.ndim != 2:
        raise InputError("embeddings must share one dimension")
    return mat


def score_single_target(final_embedding: np.ndarray, prompt_embedding: np.ndarray) -> float:
    """Cosine similarity of the final-frame and prompt embeddings (both unit norm)."""
    a = np.asarray(final_embedding, dtype=np.float64)
    b = np.asarray(prompt_embedding, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(a @ b)


def similarity_matrix(frame_embeddings: Sequence[np.ndarray],
                      prompt_embeddings: Sequence[np.ndarray]) -> np.ndarray:
    """(checkpoints, prompts) matrix of inner products."""
    f = _as_matrix(frame_embeddings)
    p = _as_matrix(prompt_embeddings)
    if f.shape[1] != p.shape[1]:
        raise InputError(f"dimension mismatch: {f.shape[1]} vs {p.shape[1]}")
    return f @ p.T


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def score_temporal(sim: np.ndarray, beta: float, alpha: float = 10.0) -> float:
    """Blend of diagonal alignment and a bidirectional soft-max matching term.

    ``beta`` weights the soft-max term; ``alpha`` sharpens it. With
    ``beta == 0`` only the diagonal matters.
    """
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1] or sim.shape[0] == 0:
        raise InputError(f"temporal scoring needs a non-empty square matrix, got {sim.shape}")
    return float(score_temporal_batch(sim[None], beta, alpha)[0])


def score_temporal_batch(sims: np.ndarray, beta: float, alpha: float = 10.0) -> np.ndarray:
    """:func:`score_temporal` over a stack of square matrices, shape (B, P, P)."""
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 3 or sims.shape[1] != sims.shape[2] or sims.shape[1] == 0:
        raise InputError(f"expected a stack of square matrices, got {sims.shape}")
    if not 0.0 <= beta <= 1.0:
        raise InputError("beta must lie in [0, 1]")
    if alpha <= 0:
        raise InputError("alpha must be positive")
    diag = np.diagonal(sims, axis1=1, axis2=2).mean(axis=1)
    if beta == 0.0:
        return diag
    over_frames = (_softmax(alpha * sims, axis=1) * sims).sum(axis=1).mean(axis=1)
    over_prompts = (_softmax(alpha * sims, axis=2) * sims).sum(axis=2).mean(axis=1)
    return (1.0 - beta) * diag + beta * 0.5 * (over_frames + over_prompts)


def segment_mean(sim: np.ndarray, per_prompt: int) -> np.ndarray:
    """Average consecutive groups of ``per_prompt`` checkpoint rows."""
    sim = np.asarray(sim, dtype=np.float64)
    if per_prompt == 1:
        return sim
    rows, cols = sim.shape
    if rows != cols * per_prompt:
        raise InputError(f"{rows} checkpoints do not split into {cols} segments of {per_prompt}")
    return sim.reshape(cols, per_prompt, cols).mean(axis=1)


def select_checkpoints(mode: str, prompt_count: int, steps: int, per_prompt: int = 1) -> list[int]:
    """Rollout steps at which frames are scored.

    Temporal mode splits the rollout into ``prompt_count`` equal segments and
    returns their ends (``per_prompt`` evenly spaced points per segment when
    greater than one). Single mode scores only the last step.
    """
    if prompt_count < 1:
        raise InputError("prompt_count must be >= 1")
    if mode == "single":
        return [steps]
    if mode != "temporal":
        raise InputError(f"unknown objective mode {mode!r}")
    slots = prompt_count * per_prompt
    if steps < slots:
        raise InputError(f"rollout of {steps} steps cannot hold {slots} checkpoints")
    return [(m * steps) // slots for m in range(1, slots + 1)]


@dataclass(frozen=True)
class OeSeries:
    per_frame: tuple[float, ...]   # entry i is the score of frame i + 1
    mean: float
    std: float


def _series(values: Sequence[float]) -> OeSeries:
    arr = np.asarray(values, dtype=np.float64)
    return OeSeries(per_frame=tuple(float(v) for v in arr), mean=float(arr.mean()),
                    std=float(arr.std()))


def oe_score(frame_embeddings: Sequence[np.ndarray]) -> OeSeries:
    """Per-frame novelty: one minus the highest similarity to any earlier frame."""
    emb = _as_matrix(frame_embeddings) if len(frame_embeddings) else np.empty((0, 0))
    if emb.shape[0] < 2:
        raise InputError("OE score needs at least two frames")
    # Each similarity is correctly rounded so the result does not depend on how
    # the products are grouped.
    values = []
    for t in range(1, emb.shape[0]):
        products = emb[:t] * emb[t]
        sims = [math.fsum(row) for row in products.tolist()]
        values.append(1.0 - max(sims))
    return _series(values)


def delta_oe(final: OeSeries, initial: OeSeries) -> float:
    return final.mean - initial.mean


def write_oe_csv(path: Path, series: OeSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "oe"])
        for i, v in enumerate(series.per_frame, start=1):
            w.writerow([i, repr(v)])


def read_oe_csv(path: Path) -> OeSeries:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return _series([float(r["oe"]) for r in rows])


METRIC_COLUMNS = ["run_id", "iteration", "prompt_index", "oe_mean", "oe_std", "best_loss"]


def write_metrics_csv(path: Path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
