"""The outer prompt-evolution loop wrapped around inner sep-CMA-ES alignment."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import substrate
from .config import EsConfig, LeniaConfig, RunConfig
from .embeddings import Embedder, make_embedder
from .errors import AsalppError, EvolverExhausted, NumericFault, ProviderError
from .evolver import (EvolverBackend, EvolverRequest, PromptChain, PromptEntry, make_backend,
                      propose_next, subsample_frames)
from .objectives import (OeSeries, delta_oe, oe_score, score_single_target, score_temporal,
                         segment_mean, select_checkpoints, similarity_matrix)
from .sepcmaes import EsState, SepCMAES

log = logging.getLogger(__name__)


@dataclass
class Providers:
    embedder: Embedder
    evolver: EvolverBackend

    @classmethod
    def from_config(cls, config: RunConfig) -> "Providers":
        return cls(make_embedder(config.embedder), make_backend(config.evolver))

    def close(self) -> None:
        self.embedder.close()
        self.evolver.close()


@dataclass
class IterationRecord:
    iteration: int
    chain: PromptChain
    objective_prompts: tuple[str, ...]
    theta0: np.ndarray
    es_seed: int
    best_theta: np.ndarray
    best_loss: float
    loss_curve: list[float]               # lowest loss within each generation
    generation_losses: list[list[float]]
    frames: list[np.ndarray]              # full rollout of best_theta, steps 0..T
    oe: OeSeries
    evaluations: int = 0

    @property
    def best_so_far(self) -> list[float]:
        return np.minimum.accumulate(np.asarray(self.loss_curve)).tolist()


class InnerLoopAborted(AsalppError):
    """A provider failure interrupted the inner loop; ``state`` allows resumption."""

    def __init__(self, cause: Exception, state: EsState, es_config: EsConfig,
                 generation_losses: list[list[float]], *, iteration: int = 1,
                 chain: PromptChain | None = None, theta0: np.ndarray | None = None):
        super().__init__(f"inner loop aborted at generation {state.generation}: {cause}")
        self.cause = cause
        self.state = state
        self.es_config = es_config
        self.generation_losses = generation_losses
        self.iteration = iteration
        self.chain = chain
        self.theta0 = theta0


class Objective:
    """Loss of a rollout against the active prompts.

    One active prompt scores the final frame by cosine similarity; several
    active prompts score evenly spaced checkpoints with the temporal blend.
    """

    def __init__(self, prompts: Sequence[str], config: RunConfig, embedder: Embedder):
        self.prompts = tuple(prompts)
        self.settings = config.objective
        self.temporal = len(self.prompts) > 1
        steps = config.rollout_steps
        if self.temporal:
            self.checkpoints = select_checkpoints("temporal", len(self.prompts), steps,
                                                  self.settings.checkpoints_per_prompt)
        else:
            self.checkpoints = select_checkpoints("single", 1, steps)
        self.prompt_embeddings = embedder.embed_text_batch(list(self.prompts))

    def score(self, frame_embeddings: Sequence[np.ndarray]) -> float:
        if not self.temporal:
            return score_single_target(frame_embeddings[-1], self.prompt_embeddings[0])
        sim = similarity_matrix(frame_embeddings, self.prompt_embeddings)
        sim = segment_mean(sim, self.settings.checkpoints_per_prompt)
        return score_temporal(sim, self.settings.softmax_coefficient,
                              self.settings.softmax_sharpness)

    def loss(self, frame_embeddings: Sequence[np.ndarray]) -> float:
        return -self.score(frame_embeddings)


def active_prompts(chain: PromptChain, mode: str) -> tuple[str, ...]:
    return tuple(chain.texts) if mode == "ETT" else (chain.last.text,)


def initial_theta(config: RunConfig) -> np.ndarray:
    return substrate.neutral_theta(config.substrate)


def derive_seed(run_seed: int, *path: int) -> int:
    words = np.random.SeedSequence([run_seed, *path]).generate_state(2, dtype=np.uint32)
    return int(words[0]) | (int(words[1]) << 32)


def worker_count(config: RunConfig) -> int:
    return config.workers or os.cpu_count() or 1


def _simulate(theta: np.ndarray, lenia: LeniaConfig, checkpoints: list[int]):
    try:
        return substrate.rollout(theta, lenia, checkpoints)
    except NumericFault as exc:
        return exc


def evaluate_population(candidates: Sequence[np.ndarray], objective: Objective, lenia: LeniaConfig,
                        embedder: Embedder, pool: ThreadPoolExecutor | None = None) -> list[float]:
    """Losses of every candidate, in candidate order; numeric faults score +inf."""
    if pool is None:
        results = [_simulate(c, lenia, objective.checkpoints) for c in candidates]
    else:
        results = list(pool.map(lambda c: _simulate(c, lenia, objective.checkpoints), candidates))
    batch, owners = [], []
    for i, frames in enumerate(results):
        if isinstance(frames, NumericFault):
            continue
        batch.extend(frames)
        owners.append(i)
    losses = [math.inf] * len(candidates)
    if batch:
        emb = embedder.embed_image_batch(batch)
        k = len(objective.checkpoints)
        for j, i in enumerate(owners):
            losses[i] = objective.loss(emb[j * k:(j + 1) * k])
    return losses


def full_rollout(theta: np.ndarray, lenia: LeniaConfig) -> list[np.ndarray]:
    try:
        return substrate.rollout(theta, lenia)
    except NumericFault:
        log.warning("best theta faults on re-simulation; keeping the initial frame only")
        return substrate.rollout(theta, lenia, [0])


def score_frames(frames: Sequence[np.ndarray], embedder: Embedder) -> OeSeries:
    return oe_score(embedder.embed_image_batch(list(frames)))


def run_inner(theta0, chain: PromptChain, config: RunConfig, providers: Providers, *,
              iteration: int = 1, es_seed: int | None = None, mode: str | None = None,
              state: EsState | None = None, prior_losses: list[list[float]] | None = None,
              on_generation: Callable[[int, float], None] | None = None) -> IterationRecord:
    """Align one simulation with the chain's active prompts.

    The optimizer mean starts at ``theta0``; its covariance, paths and step
    size start fresh unless ``state`` resumes an interrupted run.
    """
    mode = mode or config.mode
    lenia = config.substrate
    theta0 = np.asarray(theta0, dtype=np.float32)
    if es_seed is None:
        es_seed = derive_seed(config.run_seed, iteration)
    es_config = config.es.for_dimension(lenia.theta_length, es_seed)
    es = SepCMAES(es_config, theta0, state=state)
    prompts = active_prompts(chain, mode)
    generation_losses = list(prior_losses or [])

    def aborted(exc: Exception) -> InnerLoopAborted:
        return InnerLoopAborted(exc, es.state, es_config, generation_losses, iteration=iteration,
                                chain=chain, theta0=theta0)

    try:
        objective = Objective(prompts, config, providers.embedder)
    except ProviderError as exc:
        raise aborted(exc) from exc

    workers = worker_count(config)
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while es.state.generation < config.inner_iterations:
            # Candidates are evaluated and told in float32, the precision theta is stored in.
            candidates = [c.astype(np.float32) for c in es.ask()]
            try:
                losses = evaluate_population(candidates, objective, lenia, providers.embedder, pool)
            except ProviderError as exc:
                raise aborted(exc) from exc
            es.tell(candidates, losses)
            generation_losses.append(losses)
            if on_generation:
                on_generation(es.state.generation, es.best_loss)
            if es.stagnant():
                log.info("stopping after %d stagnant generations", es.state.stagnation)
                break
    finally:
        if pool is not None:
            pool.shutdown()

    best = es.state.best_theta if es.state.best_theta is not None else theta0
    best = np.asarray(best, dtype=np.float32)
    frames = full_rollout(best, lenia)
    try:
        oe = score_frames(frames, providers.embedder) if len(frames) >= 2 else OeSeries((), 0.0, 0.0)
    except ProviderError as exc:
        raise aborted(exc) from exc
    curve = [min(g) if g else math.inf for g in generation_losses]
    return IterationRecord(
        iteration=iteration, chain=chain, objective_prompts=prompts, theta0=theta0,
        es_seed=es_seed, best_theta=best, best_loss=float(es.best_loss), loss_curve=curve,
        generation_losses=generation_losses, frames=frames, oe=oe,
        evaluations=sum(len(g) for g in generation_losses))


def run_asal(config: RunConfig, providers: Providers) -> IterationRecord:
    """Plain supervised-target alignment on the seed prompt (the single-iteration baseline)."""
    chain = PromptChain.seed(config.seed_prompt)
    return run_inner(initial_theta(config), chain, config, providers, iteration=1, mode="EST")


@dataclass
class RunResult:
    records: list[IterationRecord]
    truncated: bool = False
    reason: Optional[str] = None


@dataclass
class ResumePoint:
    """Where an interrupted run picks up."""

    records: list[IterationRecord] = field(default_factory=list)
    chain: Optional[PromptChain] = None
    theta: Optional[np.ndarray] = None
    state: Optional[EsState] = None
    prior_losses: Optional[list[list[float]]] = None


def evolver_request(record: IterationRecord, config: RunConfig,
                    environment_suffix: str | None = None,
                    temperature: float | None = None) -> EvolverRequest:
    frames = tuple(subsample_frames(record.frames, config.evolver.frames))
    return EvolverRequest(
        frames=frames, prompts=active_prompts(record.chain, config.mode), iteration=record.iteration,
        temperature=config.evolver.temperature if temperature is None else temperature,
        mode=config.mode, environment_suffix=environment_suffix)


def run_asalpp(config: RunConfig, providers: Providers, *,
               resume: ResumePoint | None = None,
               on_record: Callable[[IterationRecord], None] | None = None,
               on_generation: Callable[[int, int, float], None] | None = None) -> RunResult:
    """Run ``outer_iterations`` rounds of alignment followed by prompt proposal.

    ETT optimises the whole accumulated chain; EST only its newest prompt.
    The evolver failing or running dry ends the run early with
    ``truncated=True``.
    """
    resume = resume or ResumePoint()
    records = list(resume.records)
    if records:
        chain = resume.chain or records[-1].chain
        theta = resume.theta if resume.theta is not None else records[-1].best_theta
    else:
        chain = resume.chain or PromptChain.seed(config.seed_prompt)
        theta = resume.theta if resume.theta is not None else initial_theta(config)
    state, prior = resume.state, resume.prior_losses

    # A resume point carries either a finished last record (needs a proposal)
    # or a chain whose newest prompt has not been optimised yet.
    need_proposal = bool(records) and len(chain) == len(records)
    n = len(records) + (0 if need_proposal else 1)
    while True:
        if need_proposal:
            if len(records) >= config.outer_iterations:
                break
            last = records[-1]
            try:
                proposal = propose_next(evolver_request(last, config), providers.evolver,
                                        config.evolver.retry_limit)
            except (EvolverExhausted, ProviderError) as exc:
                log.warning("evolver stopped the run after iteration %d: %s", last.iteration, exc)
                return RunResult(records, truncated=True, reason=str(exc))
            chain = chain.append(PromptEntry(proposal.text, last.iteration + 1, proposal.source,
                                             proposal.raw))
            theta = last.best_theta
            n = last.iteration + 1
        hook = (lambda g, b, _n=n: on_generation(_n, g, b)) if on_generation else None
        record = run_inner(theta, chain, config, providers, iteration=n, state=state,
                           prior_losses=prior, on_generation=hook)
        state = prior = None
        records.append(record)
        if on_record:
            on_record(record)
        need_proposal = True
    return RunResult(records)


@dataclass
class RunMetrics:
    oe_mean: list[float]
    oe_std: list[float]
    delta_oe: float


def evaluate_run(records: Sequence[IterationRecord], embedder: Embedder | None = None) -> RunMetrics:
    """OE of every iteration's simulation and the final-minus-first difference.

    With ``embedder`` the stored frames are re-embedded; otherwise the OE
    series computed at the end of each inner loop is used.
    """
    if not records:
        raise ValueError("no records to evaluate")
    series = [score_frames(r.frames, embedder) if embedder else r.oe for r in records]
    return RunMetrics([s.mean for s in series], [s.std for s in series],
                      delta_oe(series[-1], series[0]))
