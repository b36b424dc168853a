"""Branching prompt trajectories grown from a single seed simulation.

Each node's simulation is optimised for the prompt chain from the root to
that node. Children come from resampling the evolver several times at a
higher temperature, optionally forked by per-layer environment descriptors.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig, TreeConfig
from .errors import EvolverExhausted, ProviderError, TreeStructureError
from .evolver import (EvolverBackend, PromptChain, PromptEntry, make_backend, normalize_reply,
                      propose_distinct)
from .objectives import OeSeries
from .search import (InnerLoopAborted, IterationRecord, Providers, derive_seed, evolver_request,
                     initial_theta, run_inner)

log = logging.getLogger(__name__)

TREE_FORMAT = "asalpp-tree/1"


@dataclass
class TreeNode:
    id: str
    parent: Optional[str]
    depth: int
    chain: PromptChain
    best_theta: np.ndarray
    best_loss: float
    final_frame: np.ndarray
    oe: OeSeries
    exhausted: bool = False
    record: Optional[IterationRecord] = field(default=None, repr=False)
    proposal_attempts: int = 0


def _ett(config: RunConfig) -> RunConfig:
    return config if config.mode == "ETT" else config.model_copy(update={"mode": "ETT"})


def _node_from_record(node_id: str, parent: Optional[str], depth: int,
                      record: IterationRecord) -> TreeNode:
    return TreeNode(node_id, parent, depth, record.chain, record.best_theta, record.best_loss,
                    record.frames[-1], record.oe, record=record)


def grow_tree(config: TreeConfig, providers: Providers,
              on_node: Callable[[TreeNode], None] | None = None) -> list[TreeNode]:
    """Breadth-first expansion to ``config.depth`` levels.

    A node stops expanding as soon as one sibling slot cannot find a new
    prompt within ``max_tries`` proposals, so trees may split unevenly.
    Provider failures mark the node exhausted instead of aborting the tree.
    """
    base = _ett(config.base)
    layers = config.environment_layers
    if layers is None and config.environment_model is not None and config.depth > 1:
        env_backend = make_backend(config.environment_model)
        try:
            layers = generate_environment_layers(env_backend, base.seed_prompt, config.depth - 1,
                                                 config.branching,
                                                 config.environment_model.temperature)
        finally:
            env_backend.close()
    root_record = run_inner(initial_theta(base), PromptChain.seed(base.seed_prompt), base, providers,
                            iteration=1, es_seed=derive_seed(base.run_seed, 0))
    nodes = [_node_from_record("n0", None, 0, root_record)]
    if on_node:
        on_node(nodes[0])
    frontier = deque(nodes)
    while frontier:
        node = frontier.popleft()
        if node.depth >= config.depth - 1:
            continue
        existing = list(node.chain.texts)
        accepted: list[PromptEntry] = []
        for b in range(config.branching):
            suffix = layers[node.depth][b] if layers else None
            request = evolver_request(node.record, base, environment_suffix=suffix,
                                      temperature=config.temperature)
            try:
                proposal = propose_distinct(request, providers.evolver, existing,
                                            max_tries=config.max_tries,
                                            retry_limit=base.evolver.retry_limit)
            except (EvolverExhausted, ProviderError) as exc:
                log.warning("node %s: evolver failed: %s", node.id, exc)
                node.exhausted = True
                break
            if proposal is None:
                log.info("node %s: no new prompt after %d tries", node.id, config.max_tries)
                node.exhausted = True
                break
            node.proposal_attempts += proposal.attempts
            existing.append(proposal.text)
            accepted.append(PromptEntry(proposal.text, node.depth + 2, proposal.source, proposal.raw))

        for entry in accepted:
            index = len(nodes)
            try:
                record = run_inner(node.best_theta, node.chain.append(entry), base, providers,
                                   iteration=node.depth + 2, es_seed=derive_seed(base.run_seed, index))
            except InnerLoopAborted as exc:
                log.warning("node %s: child optimisation failed: %s", node.id, exc)
                node.exhausted = True
                continue
            child = _node_from_record(f"n{index}", node.id, node.depth + 1, record)
            nodes.append(child)
            frontier.append(child)
            if on_node:
                on_node(child)
    return nodes


ENVIRONMENT_INSTRUCTION = (
    "Suggest {count} contrasting one- or two-word environmental conditions for an evolving "
    "artificial life simulation that started from '{seed}'. Output them on one line separated "
    "by commas and nothing else."
)


def generate_environment_layers(backend: EvolverBackend, seed_prompt: str, forks: int,
                                branching: int, temperature: float = 0.7) -> list[list[str]]:
    """Ask a chat model for ``branching`` descriptors per fork."""
    layers = []
    for _ in range(forks):
        reply = normalize_reply(backend.complete(
            ENVIRONMENT_INSTRUCTION.format(count=branching, seed=seed_prompt), [], temperature))
        words = [w.strip() for w in reply.split(",") if w.strip()]
        if len(words) < branching:
            raise ProviderError(f"environment model returned {len(words)} descriptors, "
                                f"needed {branching}")
        layers.append(words[:branching])
    return layers


# -- export ------------------------------------------------------------------------------------

def _finite(x: float) -> Optional[float]:
    return x if math.isfinite(x) else None


def node_summary(node: TreeNode) -> dict:
    return {
        "id": node.id,
        "parent": node.parent,
        "depth": node.depth,
        "chain": node.chain.to_json(),
        "best_loss": _finite(node.best_loss),
        "oe_mean": node.oe.mean,
        "oe_std": node.oe.std,
        "exhausted": node.exhausted,
        "final_frame": f"nodes/{node.id}/final.png",
        "best_theta": f"nodes/{node.id}/best_theta.bin",
    }


def validate_structure(summaries: Sequence[dict]) -> None:
    """Raise unless the summaries form exactly one rooted tree with consistent chains."""
    by_id = {}
    for s in summaries:
        if s["id"] in by_id:
            raise TreeStructureError(f"duplicate node id {s['id']!r}")
        by_id[s["id"]] = s
    roots = [s for s in summaries if s["parent"] is None]
    if len(roots) != 1:
        raise TreeStructureError(f"expected exactly one root, found {len(roots)}")
    for s in summaries:
        if s["parent"] is not None and s["parent"] not in by_id:
            raise TreeStructureError(f"node {s['id']!r} has unknown parent {s['parent']!r}")
    for s in summaries:
        seen, cur = set(), s
        while cur["parent"] is not None:
            if cur["id"] in seen:
                raise TreeStructureError(f"cycle through node {cur['id']!r}")
            seen.add(cur["id"])
            cur = by_id[cur["parent"]]
        if cur is not roots[0]:
            raise TreeStructureError(f"node {s['id']!r} does not reach the root")
        if s["parent"] is not None:
            parent = by_id[s["parent"]]
            if s["chain"][:-1] != parent["chain"] or len(s["chain"]) != len(parent["chain"]) + 1:
                raise TreeStructureError(f"node {s['id']!r} chain does not extend its parent's")
            if s["depth"] != parent["depth"] + 1:
                raise TreeStructureError(f"node {s['id']!r} has inconsistent depth")


def tree_document(nodes: Sequence[TreeNode] | Sequence[dict]) -> dict:
    summaries = [n if isinstance(n, dict) else node_summary(n) for n in nodes]
    validate_structure(summaries)
    edges = [[s["parent"], s["id"]] for s in summaries if s["parent"] is not None]
    return {"format": TREE_FORMAT, "nodes": summaries, "edges": edges}


def dumps_tree(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def loads_tree(text: str) -> dict:
    doc = json.loads(text)
    if doc.get("format") != TREE_FORMAT:
        raise TreeStructureError(f"unsupported tree format {doc.get('format')!r}")
    rebuilt = tree_document(doc["nodes"])
    if rebuilt["edges"] != doc["edges"]:
        raise TreeStructureError("edge list disagrees with node parents")
    return doc


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def tree_to_dot(doc: dict) -> str:
    lines = ["digraph tree {", "  node [shape=box];"]
    for s in doc["nodes"]:
        label = s["chain"][-1]["text"]
        oe = s["oe_mean"]
        lines.append(f'  "{s["id"]}" [label="{_dot_escape(label)}\\nOE {oe:.4f}"];')
    for parent, child in doc["edges"]:
        lines.append(f'  "{parent}" -> "{child}";')
    lines.append("}")
    return "\n".join(lines) + "\n"
