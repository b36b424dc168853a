"""Next-target proposal by a multimodal foundation model.

The instruction is rendered from a template, sent with a handful of rollout
frames to a chat backend, and the reply is normalised to one line.
"""

from __future__ import annotations

import base64
import hashlib
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import httpx
import numpy as np

from .config import EvolverConfig
from .embeddings import encode_png
from .errors import ConfigError, EvolverExhausted, InputError, ProviderError

ENDPOINT_ENV = "ASALPP_EVOLVER_ENDPOINT"

ETT_TEMPLATE = (
    "This artificial life simulation has been optimised to follow this sequence of prompts:\n"
    "'{all_prompts}'.\n"
    "\n"
    "Consider these as constraints: ecological niches that have already been explored.\n"
    "\n"
    "You are in iteration {i}.  Your task is to propose the NEXT TARGET PROMPT to determine "
    "the next stage of evolution.  This is an opportunity to propose a direction that is "
    "significantly different from the past, but leads to interesting lifelike behaviour.  "
    "Can we recreate open-ended evolution of life?  Be bold and creative!  ONLY output the "
    "new target prompt string, and be concise. Avoid using too many adjectives.\n"
    "\n"
    "NEXT TARGET PROMPT:"
)

EST_TEMPLATE = ETT_TEMPLATE.replace(
    "optimised to follow this sequence of prompts:\n'{all_prompts}'.",
    "optimised to follow this prompt: '{last_prompt}'.",
)

PROMPT_JOIN = ", "


@dataclass(frozen=True)
class PromptEntry:
    text: str
    iteration: int
    source: str  # "seed" | "evolver" | "evolver+environment"
    raw_model_response: Optional[str] = None

    def to_json(self) -> dict:
        return {"text": self.text, "iteration": self.iteration, "source": self.source,
                "raw_model_response": self.raw_model_response}

    @classmethod
    def from_json(cls, data: dict) -> "PromptEntry":
        return cls(data["text"], int(data["iteration"]), data["source"], data.get("raw_model_response"))


@dataclass(frozen=True)
class PromptChain:
    entries: tuple[PromptEntry, ...]

    def __post_init__(self):
        if not self.entries:
            raise InputError("a prompt chain needs at least the seed entry")
        if self.entries[0].source != "seed":
            raise InputError("first chain entry must be the seed prompt")
        its = [e.iteration for e in self.entries]
        if any(b <= a for a, b in zip(its, its[1:])):
            raise InputError("chain iterations must be strictly increasing")

    @classmethod
    def seed(cls, text: str, iteration: int = 1) -> "PromptChain":
        return cls((PromptEntry(text.strip(), iteration, "seed"),))

    def append(self, entry: PromptEntry) -> "PromptChain":
        return PromptChain(self.entries + (entry,))

    @property
    def texts(self) -> list[str]:
        return [e.text for e in self.entries]

    @property
    def last(self) -> PromptEntry:
        return self.entries[-1]

    def __len__(self) -> int:
        return len(self.entries)

    def to_json(self) -> list[dict]:
        return [e.to_json() for e in self.entries]

    @classmethod
    def from_json(cls, data: list[dict]) -> "PromptChain":
        return cls(tuple(PromptEntry.from_json(d) for d in data))


@dataclass(frozen=True)
class EvolverRequest:
    frames: tuple[np.ndarray, ...]
    prompts: tuple[str, ...]  # full chain for ETT, only the latest prompt for EST
    iteration: int
    temperature: float
    mode: str
    environment_suffix: Optional[str] = None

    def __post_init__(self):
        if not 1 <= len(self.frames) <= 16:
            raise InputError(f"an evolver request carries 1 to 16 frames, got {len(self.frames)}")
        if not self.prompts:
            raise InputError("an evolver request needs at least one prompt")
        if self.mode not in ("EST", "ETT"):
            raise InputError(f"unknown mode {self.mode!r}")


def build_instruction(request: EvolverRequest) -> str:
    if request.mode == "ETT":
        return ETT_TEMPLATE.format(all_prompts=PROMPT_JOIN.join(request.prompts), i=request.iteration)
    return EST_TEMPLATE.format(last_prompt=request.prompts[-1], i=request.iteration)


def subsample_frames(frames: Sequence[np.ndarray], count: int = 8) -> list[np.ndarray]:
    """``count`` frames evenly spaced from first to last."""
    if not frames:
        raise InputError("no frames to subsample")
    if len(frames) <= count:
        return list(frames)
    idx = np.linspace(0, len(frames) - 1, count).round().astype(int)
    return [frames[i] for i in idx]


def normalize_reply(text: str) -> str:
    for line in (text or "").splitlines():
        line = line.strip()
        if line:
            return line
    return ""


def prompt_key(text: str) -> str:
    return text.strip().casefold()


class EvolverBackend:
    def complete(self, instruction: str, frames: Sequence[np.ndarray], temperature: float) -> str:
        raise NotImplementedError

    def close(self) -> None:
        pass


@dataclass
class ScriptedCall:
    instruction: str
    frame_count: int
    temperature: float
    frame_digests: tuple[str, ...] = ()


class ScriptedBackend(EvolverBackend):
    """Replays a fixed list of replies and logs every request it receives.

    With ``loop=True`` the script repeats forever; otherwise running past its
    end raises :class:`EvolverExhausted`.
    """

    def __init__(self, script: Sequence[str], loop: bool = False):
        self.script = list(script)
        self.loop = loop
        self.calls: list[ScriptedCall] = []
        self._cursor = 0
        self._lock = threading.Lock()

    def advance(self, n: int) -> None:
        """Skip ``n`` replies, e.g. those already consumed before a resume."""
        with self._lock:
            self._cursor += n

    def complete(self, instruction, frames, temperature):
        with self._lock:
            n = self._cursor
            self._cursor += 1
            digests = tuple(hashlib.sha256(np.ascontiguousarray(f).tobytes()).hexdigest()[:12]
                            for f in frames)
            self.calls.append(ScriptedCall(instruction, len(frames), temperature, digests))
            if not self.script or (n >= len(self.script) and not self.loop):
                raise EvolverExhausted(f"script of {len(self.script)} replies exhausted")
            return self.script[n % len(self.script)]


class RemoteChatBackend(EvolverBackend):
    """Client for the ``POST {endpoint}/chat`` protocol."""

    def __init__(self, config: EvolverConfig, client: httpx.Client | None = None):
        endpoint = os.environ.get(ENDPOINT_ENV) or config.endpoint
        if not endpoint:
            raise ConfigError(
                f"remote evolver needs an endpoint: set {ENDPOINT_ENV} or evolver.endpoint")
        self.endpoint = endpoint.rstrip("/")
        self.config = config
        self._client = client or httpx.Client(timeout=config.timeout)
        self._owns_client = client is None
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def payload(self, instruction: str, frames: Sequence[np.ndarray], temperature: float) -> dict:
        content = [{"type": "text", "text": instruction}]
        for frame in frames:
            content.append({"type": "image",
                            "png_base64": base64.b64encode(encode_png(frame)).decode("ascii")})
        return {"model": self.config.model, "temperature": float(temperature),
                "messages": [{"role": "user", "content": content}]}

    def complete(self, instruction, frames, temperature):
        url = f"{self.endpoint}/chat"
        body = self.payload(instruction, frames, temperature)
        status = None
        last: Exception | None = None
        for attempt in range(self.config.retry_limit + 1):
            try:
                with self._slots:
                    resp = self._client.post(url, json=body, timeout=self.config.timeout)
                status = resp.status_code
                if status == 200:
                    text = resp.json().get("text")
                    if isinstance(text, str):
                        return text
                    last = ValueError("response has no 'text' string")
                else:
                    last = None
            except (httpx.HTTPError, ValueError) as exc:
                last = exc
            if attempt < self.config.retry_limit:
                time.sleep(min(2.0, 0.1 * 2 ** attempt))
        detail = f"request failed ({last})" if last else "non-200 response"
        raise ProviderError(detail, endpoint=url, status=status)

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


def make_backend(config: EvolverConfig, client: httpx.Client | None = None) -> EvolverBackend:
    if config.kind == "scripted":
        return ScriptedBackend(config.script, loop=config.loop)
    return RemoteChatBackend(config, client=client)


@dataclass
class Proposal:
    text: str
    raw: str
    source: str
    attempts: int = 1
    rejected: list[str] = field(default_factory=list)


def propose_next(request: EvolverRequest, backend: EvolverBackend, retry_limit: int = 3) -> Proposal:
    """Ask the backend for one non-empty single-line target prompt."""
    instruction = build_instruction(request)
    for _ in range(retry_limit + 1):
        raw = backend.complete(instruction, list(request.frames), request.temperature)
        text = normalize_reply(raw)
        if text:
            if request.environment_suffix:
                return Proposal(f"{text}, {request.environment_suffix.strip()}", raw,
                                "evolver+environment")
            return Proposal(text, raw, "evolver")
    raise ProviderError(f"evolver returned empty output {retry_limit + 1} times")


def propose_distinct(request: EvolverRequest, backend: EvolverBackend, existing,
                     max_tries: int = 10, retry_limit: int = 3) -> Optional[Proposal]:
    """Propose until the reply is new (case-folded); ``None`` after ``max_tries`` repeats."""
    if max_tries < 1:
        raise InputError("max_tries must be >= 1")
    seen = {prompt_key(t) for t in existing}
    rejected = []
    for attempt in range(1, max_tries + 1):
        proposal = propose_next(request, backend, retry_limit)
        if prompt_key(proposal.text) not in seen:
            proposal.attempts = attempt
            proposal.rejected = rejected
            return proposal
        rejected.append(proposal.text)
    return None
