"""On-disk layout of runs and trees.

::

    runs/{run_id}/config.json
    runs/{run_id}/iter_{n:02}/prompts.json
                             best_theta.bin  best_theta.json
                             loss_curve.csv  oe.csv  record.json
                             frames/frame_{t:04}.png
    runs/{run_id}/metrics.csv
    runs/{run_id}/summary.json

``record.json`` is written last and marks an iteration as complete. A
``es_state.bin`` next to it holds the optimizer of an interrupted iteration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import substrate
from .config import LeniaConfig, RunConfig, TreeConfig, dump_config
from .errors import ConfigError, InputError
from .evolver import PromptChain
from .objectives import (OeSeries, read_oe_csv, write_metrics_csv, write_oe_csv)
from .search import InnerLoopAborted, IterationRecord, ResumePoint, RunResult, evaluate_run
from .sepcmaes import state_from_bytes, state_to_bytes
from .tree import TreeNode, dumps_tree, tree_document, tree_to_dot


def created_at() -> str:
    """UTC timestamp, pinned by ``SOURCE_DATE_EPOCH`` for reproducible artifacts."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = float(epoch) if epoch else time.time()
    return datetime.fromtimestamp(ts, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def make_run_id(seed: int) -> str:
    stamp = created_at().replace("-", "").replace(":", "")
    return f"{stamp}-{hashlib.sha256(str(seed).encode()).hexdigest()[:6]}"


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


# -- theta ---------------------------------------------------------------------------------------

def save_theta(path: Path, theta: np.ndarray, config: LeniaConfig) -> None:
    theta = substrate.as_theta(theta, config)
    path.write_bytes(substrate.theta_to_bytes(theta))
    _write_json(path.with_suffix(".json"), {
        "config_hash": config.config_hash(), "length": int(theta.size), "created_at": created_at()})


def load_theta(path: Path, config: LeniaConfig | None = None) -> np.ndarray:
    path = Path(path)
    theta = substrate.theta_from_bytes(path.read_bytes())
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        if meta.get("length") != theta.size:
            raise ConfigError(f"{path}: sidecar says {meta.get('length')} values, file holds {theta.size}")
        if config is not None and meta.get("config_hash") not in (None, config.config_hash()):
            raise ConfigError(f"{path}: theta was produced under a different substrate config")
    if config is not None and theta.size != config.theta_length:
        raise ConfigError(
            f"{path}: theta has {theta.size} values, substrate config expects {config.theta_length}")
    return theta


# -- frames --------------------------------------------------------------------------------------

def save_frames(directory: Path, frames: Sequence[np.ndarray], start: int = 0) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames, start=start):
        p = directory / f"frame_{t:04d}.png"
        Image.fromarray(frame, mode="RGB").save(p, format="PNG")
        paths.append(p)
    return paths


def load_frames(directory: Path) -> list[np.ndarray]:
    paths = sorted(Path(directory).glob("frame_*.png"))
    return [np.asarray(Image.open(p).convert("RGB")) for p in paths]


def save_gif(path: Path, frames: Sequence[np.ndarray], fps: int = 20) -> None:
    images = [Image.fromarray(f, mode="RGB") for f in frames]
    images[0].save(path, save_all=True, append_images=images[1:], duration=int(1000 / fps), loop=0)


# -- loss curves ---------------------------------------------------------------------------------

def write_loss_curve(path: Path, curve: Sequence[float]) -> None:
    best = math.inf
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["generation", "loss", "best_so_far"])
        for g, loss in enumerate(curve, start=1):
            best = min(best, loss)
            w.writerow([g, repr(float(loss)), repr(float(best))])


def read_loss_curve(path: Path) -> list[float]:
    with open(path, newline="") as fh:
        return [float(r["loss"]) for r in csv.DictReader(fh)]


# -- runs ----------------------------------------------------------------------------------------

class RunStore:
    """Writes and reads one run directory."""

    def __init__(self, root: Path):
        self.root = Path(root)

    @classmethod
    def create(cls, output_root: Path, config: RunConfig, run_id: str | None = None) -> "RunStore":
        run_id = run_id or make_run_id(config.run_seed)
        root = Path(output_root) / run_id
        root.mkdir(parents=True, exist_ok=False)
        store = cls(root)
        (root / "config.json").write_text(dump_config(config))
        return store

    @property
    def run_id(self) -> str:
        return self.root.name

    def config(self) -> RunConfig:
        return RunConfig.model_validate_json((self.root / "config.json").read_text())

    def iter_dir(self, n: int) -> Path:
        return self.root / f"iter_{n:02d}"

    def write_record(self, record: IterationRecord, lenia: LeniaConfig) -> Path:
        d = self.iter_dir(record.iteration)
        d.mkdir(parents=True, exist_ok=True)
        _write_json(d / "prompts.json", {"chain": record.chain.to_json(),
                                         "objective_prompts": list(record.objective_prompts)})
        save_theta(d / "best_theta.bin", record.best_theta, lenia)
        write_loss_curve(d / "loss_curve.csv", record.loss_curve)
        save_frames(d / "frames", record.frames)
        write_oe_csv(d / "oe.csv", record.oe)
        for stale in ("es_state.bin", "theta0.bin", "theta0.json", "generation_losses.json"):
            (d / stale).unlink(missing_ok=True)
        _write_json(d / "record.json", {
            "iteration": record.iteration, "best_loss": _finite(record.best_loss),
            "es_seed": record.es_seed, "evaluations": record.evaluations,
            "oe_mean": record.oe.mean, "oe_std": record.oe.std,
            "theta0_sha256": hashlib.sha256(substrate.theta_to_bytes(record.theta0)).hexdigest()})
        return d

    def write_abort(self, exc: InnerLoopAborted, lenia: LeniaConfig) -> Path:
        """Persist enough of an interrupted inner loop to continue it."""
        d = self.iter_dir(exc.iteration)
        d.mkdir(parents=True, exist_ok=True)
        _write_json(d / "prompts.json", {"chain": exc.chain.to_json(), "objective_prompts": []})
        save_theta(d / "theta0.bin", exc.theta0, lenia)
        (d / "es_state.bin").write_bytes(state_to_bytes(exc.state, exc.es_config))
        _write_json(d / "generation_losses.json",
                    [[_finite(v) for v in g] for g in exc.generation_losses])
        return d

    def completed_iterations(self) -> list[int]:
        done = []
        for d in sorted(self.root.glob("iter_*")):
            if (d / "record.json").exists():
                done.append(int(d.name.split("_")[1]))
        return done

    def load_record(self, n: int, lenia: LeniaConfig) -> IterationRecord:
        d = self.iter_dir(n)
        meta = json.loads((d / "record.json").read_text())
        prompts = json.loads((d / "prompts.json").read_text())
        best = load_theta(d / "best_theta.bin", lenia)
        curve = read_loss_curve(d / "loss_curve.csv")
        best_loss = meta["best_loss"]
        return IterationRecord(
            iteration=n, chain=PromptChain.from_json(prompts["chain"]),
            objective_prompts=tuple(prompts["objective_prompts"]), theta0=np.zeros(0, np.float32),
            es_seed=int(meta["es_seed"]), best_theta=best,
            best_loss=math.inf if best_loss is None else float(best_loss),
            loss_curve=curve, generation_losses=[], frames=load_frames(d / "frames"),
            oe=read_oe_csv(d / "oe.csv"), evaluations=int(meta["evaluations"]))

    def load_abort(self, n: int, lenia: LeniaConfig):
        d = self.iter_dir(n)
        blob = d / "es_state.bin"
        if not blob.exists():
            return None
        state, _ = state_from_bytes(blob.read_bytes())
        chain = PromptChain.from_json(json.loads((d / "prompts.json").read_text())["chain"])
        theta0 = load_theta(d / "theta0.bin", lenia)
        losses = [[math.inf if v is None else float(v) for v in g]
                  for g in json.loads((d / "generation_losses.json").read_text())]
        return chain, theta0, state, losses

    def resume_point(self) -> ResumePoint:
        """Completed iterations plus any interrupted one, in the form ``run_asalpp`` accepts."""
        config = self.config()
        lenia = config.substrate
        done = self.completed_iterations()
        if done != list(range(1, len(done) + 1)):
            raise ConfigError(f"{self.root}: completed iterations {done} are not contiguous from 1")
        records = [self.load_record(n, lenia) for n in done]
        point = ResumePoint(records=records)
        pending = self.load_abort(len(done) + 1, lenia)
        if pending is not None:
            point.chain, point.theta, point.state, point.prior_losses = pending
        return point

    def write_summary(self, result: RunResult, config: RunConfig) -> dict:
        rows = []
        for r in result.records:
            rows.append({"run_id": self.run_id, "iteration": r.iteration,
                         "prompt_index": len(r.chain) - 1, "oe_mean": r.oe.mean,
                         "oe_std": r.oe.std, "best_loss": r.best_loss})
        write_metrics_csv(self.root / "metrics.csv", rows)
        summary = {
            "run_id": self.run_id, "mode": config.mode, "seed_prompt": config.seed_prompt,
            "iterations": len(result.records), "truncated": result.truncated,
            "reason": result.reason,
            "final_chain": result.records[-1].chain.texts if result.records else [],
            "iterations_detail": [
                {"iteration": r.iteration, "prompt": r.chain.last.text,
                 "best_loss": _finite(r.best_loss), "oe_mean": r.oe.mean, "oe_std": r.oe.std}
                for r in result.records],
        }
        if result.records:
            summary["delta_oe"] = evaluate_run(result.records).delta_oe
        _write_json(self.root / "summary.json", summary)
        return summary


def _finite(x: float):
    return x if math.isfinite(x) else None


# -- trees ---------------------------------------------------------------------------------------

class TreeStore:
    def __init__(self, root: Path):
        self.root = Path(root)

    @classmethod
    def create(cls, output_root: Path, config: TreeConfig, run_id: str | None = None) -> "TreeStore":
        run_id = run_id or make_run_id(config.base.run_seed)
        root = Path(output_root) / run_id
        root.mkdir(parents=True, exist_ok=False)
        (root / "config.json").write_text(dump_config(config))
        return cls(root)

    def write_node(self, node: TreeNode, lenia: LeniaConfig) -> None:
        d = self.root / "nodes" / node.id
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(node.final_frame, mode="RGB").save(d / "final.png", format="PNG")
        save_theta(d / "best_theta.bin", node.best_theta, lenia)
        if node.oe.per_frame:
            write_oe_csv(d / "oe.csv", node.oe)
        _write_json(d / "prompts.json", {"chain": node.chain.to_json()})

    def write_tree(self, nodes: Sequence[TreeNode]) -> dict:
        doc = tree_document(nodes)
        (self.root / "tree.json").write_text(dumps_tree(doc))
        (self.root / "tree.dot").write_text(tree_to_dot(doc))
        return doc


def iteration_dirs(path: Path) -> list[Path]:
    path = Path(path)
    if (path / "config.json").exists() and list(path.glob("iter_*")):
        return sorted(p for p in path.glob("iter_*") if (p / "frames").is_dir())
    return []


def frames_dir(path: Path) -> Path:
    path = Path(path)
    if (path / "frames").is_dir():
        return path / "frames"
    if list(path.glob("frame_*.png")):
        return path
    raise InputError(f"{path}: no frames found")


__all__ = ["RunStore", "TreeStore", "save_theta", "load_theta", "save_frames", "load_frames",
           "save_gif", "created_at", "make_run_id", "OeSeries"]
