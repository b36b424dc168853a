"""Command-line entry point: ``asalpp {run,tree,score,render,resume}``.

Exit status is 0 on success, 1 on any error and 2 when a run stops early
because the evolver ran dry.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pydantic import ValidationError

from . import substrate
from .config import LeniaConfig, RunConfig, load_run_config, load_tree_config, run_config_from_dict
from .embeddings import make_embedder
from .errors import AsalppError, InputError
from .evolver import ScriptedBackend
from .objectives import write_oe_csv
from .runstore import (RunStore, TreeStore, frames_dir, iteration_dirs, load_frames, load_theta,
                       save_frames, save_gif)
from .search import InnerLoopAborted, IterationRecord, Providers, run_asalpp, score_frames
from .tree import TreeNode, grow_tree

EXIT_OK, EXIT_ERROR, EXIT_TRUNCATED = 0, 1, 2

log = logging.getLogger("asalpp")


def _print_record(record: IterationRecord) -> None:
    print(f"iter {record.iteration:02d}  loss {record.best_loss:.6f}  "
          f"OE {record.oe.mean:.4f} ± {record.oe.std:.4f}  prompt: {record.chain.last.text}",
          flush=True)


def _with_workers(config, workers: int | None):
    if workers is None:
        return config
    return config.model_copy(update={"workers": workers})


def _execute(store: RunStore, config: RunConfig, resume=None) -> int:
    providers = Providers.from_config(config)
    if resume is not None and isinstance(providers.evolver, ScriptedBackend):
        chain = resume.chain or (resume.records[-1].chain if resume.records else None)
        providers.evolver.advance(len(chain) - 1 if chain else 0)
    try:
        def on_record(record: IterationRecord) -> None:
            store.write_record(record, config.substrate)
            _print_record(record)

        try:
            result = run_asalpp(config, providers, resume=resume, on_record=on_record)
        except InnerLoopAborted as exc:
            store.write_abort(exc, config.substrate)
            print(f"error: {exc}\nstate saved; continue with: asalpp resume {store.root}",
                  file=sys.stderr)
            return EXIT_ERROR
    finally:
        providers.close()
    summary = store.write_summary(result, config)
    print(f"run {store.run_id}: {summary['iterations']} iterations -> {store.root}")
    if result.truncated:
        print(f"truncated: {result.reason}", file=sys.stderr)
        return EXIT_TRUNCATED
    return EXIT_OK


def cmd_run(args) -> int:
    config = _with_workers(load_run_config(args.config, args.overrides), args.workers)
    # Fail on provider configuration before creating the run directory.
    Providers.from_config(config).close()
    store = RunStore.create(Path(args.out), config, args.run_id)
    return _execute(store, config)


def cmd_resume(args) -> int:
    store = RunStore(Path(args.run_dir))
    config = _with_workers(store.config(), args.workers)
    point = store.resume_point()
    for record in point.records:
        _print_record(record)
    return _execute(store, config, resume=point)


def cmd_tree(args) -> int:
    config = load_tree_config(args.config, args.overrides)
    if args.workers is not None:
        config = config.model_copy(update={"base": _with_workers(config.base, args.workers)})
    providers = Providers.from_config(config.base)
    try:
        store = TreeStore.create(Path(args.out), config, args.run_id)
        lenia = config.base.substrate

        def on_node(node: TreeNode) -> None:
            store.write_node(node, lenia)
            print(f"{node.id:>4} depth {node.depth}  loss {node.best_loss:.6f}  "
                  f"OE {node.oe.mean:.4f}  prompt: {node.chain.last.text}", flush=True)

        nodes = grow_tree(config, providers, on_node)
    finally:
        providers.close()
    store.write_tree(nodes)
    print(f"tree of {len(nodes)} nodes -> {store.root}")
    return EXIT_OK


def _find_run_config(path: Path) -> Path | None:
    for parent in [path, *path.parents][:4]:
        candidate = parent / "config.json"
        if candidate.exists():
            return candidate
    return None


def _stored_run_data(source: Path | None) -> dict:
    data = json.loads(source.read_text()) if source else {}
    return data.get("base", data)  # tree configs nest a run config


def _score_config(path: Path, args) -> RunConfig:
    source = Path(args.config) if args.config else _find_run_config(path.resolve())
    return run_config_from_dict(_stored_run_data(source), args.overrides)


def cmd_score(args) -> int:
    path = Path(args.path)
    config = _score_config(path, args)
    targets = iteration_dirs(path) or [frames_dir(path)]
    embedder = make_embedder(config.embedder)
    try:
        for target in targets:
            fdir = target / "frames" if (target / "frames").is_dir() else target
            frames = load_frames(fdir)
            if len(frames) < 2:
                raise InputError(f"{fdir}: OE needs at least 2 frames, found {len(frames)}")
            series = score_frames(frames, embedder)
            out = Path(args.out) if args.out and len(targets) == 1 else \
                (target / "oe.csv" if fdir != target else fdir / "oe.csv")
            write_oe_csv(out, series)
            print(f"{target.name}: OE {series.mean:.4f} ± {series.std:.4f}  ({len(frames)} frames)")
    finally:
        embedder.close()
    return EXIT_OK


def _lenia_config(theta_path: Path, config_path: str | None, overrides: Sequence[str]) -> LeniaConfig:
    source = Path(config_path) if config_path else _find_run_config(theta_path.resolve().parent)
    data = _stored_run_data(source)
    if data and "substrate" not in data and "grid_size" in data:  # a bare substrate config
        data = {"substrate": data, "rollout_steps": data.get("rollout_steps", 256)}
    return run_config_from_dict(data, list(overrides)).substrate


def cmd_render(args) -> int:
    theta_path = Path(args.theta)
    lenia = _lenia_config(theta_path, args.config, args.overrides)
    theta = load_theta(theta_path, lenia)
    steps = lenia.rollout_steps if args.steps is None else args.steps
    if steps < 0:
        raise InputError("--steps must be >= 0")
    frames = substrate.rollout(theta, lenia, steps=steps)
    out = Path(args.out)
    save_frames(out, frames)
    if args.gif:
        save_gif(Path(args.gif), frames, fps=args.fps)
    print(f"{len(frames)} frames -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asalpp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--overrides", nargs="*", default=[], metavar="KEY=VALUE",
                       help="dotted-key overrides, e.g. es.population=8 mode=EST")
        if out_default:
            p.add_argument("--out", default=out_default, help="output root")

    p = sub.add_parser("run", help="run the outer prompt-evolution loop")
    common(p, "runs")
    p.add_argument("--workers", type=int, help="rollout threads (default: logical cores)")
    p.add_argument("--run-id", help="explicit run directory name")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("tree", help="grow a branching tree of prompt chains")
    common(p, "trees")
    p.add_argument("--workers", type=int)
    p.add_argument("--run-id")
    p.set_defaults(func=cmd_tree)

    p = sub.add_parser("score", help="recompute OE from stored frames")
    p.add_argument("path", help="run directory, iteration directory or frames directory")
    common(p)
    p.add_argument("--out", help="oe.csv destination (single target only)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("render", help="re-simulate a stored parameter vector")
    p.add_argument("--theta", required=True, help="best_theta.bin")
    common(p)
    p.add_argument("--steps", type=int, help="rollout length T (default: config)")
    p.add_argument("--out", required=True, help="directory for frame PNGs")
    p.add_argument("--gif", help="also write an animated GIF here")
    p.add_argument("--fps", type=int, default=20)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_dir")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_resume)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AsalppError, ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
