"""Vision-language embedding providers.

Two backends share one interface: :class:`StubEmbedder`, a deterministic
offline stand-in, and :class:`RemoteEmbedder`, a JSON-over-HTTP client for a
model server exposing ``/embed_text`` and ``/embed_image``.
"""

from __future__ import annotations

import base64
import hashlib
import io
import os
import threading
import time
from typing import Sequence

import httpx
import numpy as np
from PIL import Image

from .config import ProviderConfig
from .errors import ConfigError, InputError, ProviderError

ENDPOINT_ENV = "ASALPP_EMBED_ENDPOINT"

_STUB_SIDE = 16
_STUB_FEATURES = _STUB_SIDE * _STUB_SIDE * 3
_PROJECTION_SEED = 0x5EED_C11B


def normalize(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v)
    if not np.isfinite(norm) or norm == 0:
        raise InputError("cannot normalise a zero or non-finite embedding")
    return v / norm


def resize_frame(frame: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resize of an (H, W, 3) uint8 frame to (side, side, 3)."""
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[2] != 3 or frame.dtype != np.uint8:
        raise InputError(f"expected an (H, W, 3) uint8 frame, got {frame.shape} {frame.dtype}")
    img = Image.fromarray(frame, mode="RGB")
    if img.size != (side, side):
        img = img.resize((side, side), Image.BILINEAR)
    return np.asarray(img)


def encode_png(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(frame, dtype=np.uint8), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def canonical_text(prompt: str) -> str:
    text = prompt.strip().casefold()
    if not text:
        raise InputError("prompt is empty")
    return text


class Embedder:
    """Common batch behaviour; subclasses implement the two single-item calls."""

    dimension: int

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed_text(self, prompt: str) -> np.ndarray:
        raise NotImplementedError

    def embed_image_batch(self, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(frames) == 0:
            raise InputError("empty frame batch")
        out = []
        for i, frame in enumerate(frames):
            try:
                out.append(self.embed_image(frame))
            except (InputError, ProviderError) as exc:
                raise ProviderError(f"batch element failed: {exc}", index=i) from exc
        return out

    def embed_text_batch(self, prompts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed_text(p) for p in prompts]

    def close(self) -> None:
        pass


class StubEmbedder(Embedder):
    """Deterministic embeddings computed from input bytes alone.

    Text is case-folded and trimmed, hashed to a 64-bit seed and expanded to a
    Gaussian vector. Images are resized, pooled to 16x16x3, centred on mid-grey
    and projected by a fixed random matrix.
    """

    def __init__(self, dimension: int = 512, image_side: int = 224):
        if dimension < 8:
            raise ConfigError("embedding dimension must be >= 8")
        self.dimension = dimension
        self.image_side = image_side
        rng = np.random.default_rng(_PROJECTION_SEED)
        self._projection = rng.standard_normal((dimension, _STUB_FEATURES)) / np.sqrt(_STUB_FEATURES)

    def embed_text(self, prompt: str) -> np.ndarray:
        digest = hashlib.sha256(canonical_text(prompt).encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "little")
        return normalize(np.random.default_rng(seed).standard_normal(self.dimension))

    def _features(self, frame: np.ndarray) -> np.ndarray:
        resized = resize_frame(frame, self.image_side)
        small = Image.fromarray(resized, mode="RGB").resize((_STUB_SIDE, _STUB_SIDE), Image.BOX)
        return np.asarray(small, dtype=np.float64).reshape(-1) / 255.0 - 0.5

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        feats = self._features(frame)
        if not np.any(feats):
            # exactly mid-grey everywhere; nudge to keep the map total
            feats = np.full_like(feats, 1e-3)
        return normalize(self._projection @ feats)


class RemoteEmbedder(Embedder):
    """Client for the ``/embed_text`` and ``/embed_image`` JSON protocol."""

    def __init__(self, config: ProviderConfig, client: httpx.Client | None = None):
        endpoint = os.environ.get(ENDPOINT_ENV) or config.endpoint
        if not endpoint:
            raise ConfigError(
                f"remote embedder needs an endpoint: set {ENDPOINT_ENV} or embedder.endpoint")
        self.endpoint = endpoint.rstrip("/")
        self.config = config
        self.dimension = config.dimension
        self._client = client or httpx.Client(timeout=config.timeout)
        self._owns_client = client is None
        self._slots = threading.BoundedSemaphore(config.max_in_flight)

    def _post(self, route: str, payload: dict) -> list[np.ndarray]:
        url = f"{self.endpoint}/{route}"
        status = None
        last: Exception | None = None
        for attempt in range(self.config.retry_limit + 1):
            try:
                with self._slots:
                    resp = self._client.post(url, json=payload, timeout=self.config.timeout)
                status = resp.status_code
                if status == 200:
                    return self._parse(resp.json(), url)
                last = None
            except httpx.HTTPError as exc:
                last = exc
            if attempt < self.config.retry_limit:
                time.sleep(min(2.0, 0.1 * 2 ** attempt))
        detail = f"request failed ({last})" if last else "non-200 response"
        raise ProviderError(detail, endpoint=url, status=status)

    def _parse(self, body: dict, url: str) -> list[np.ndarray]:
        try:
            rows = body["embeddings"]
            dim = int(body.get("dim", self.dimension))
        except (KeyError, TypeError, ValueError) as exc:
            raise ProviderError(f"malformed response: {exc}", endpoint=url, status=200) from exc
        if dim != self.dimension:
            raise ProviderError(f"server returned dim {dim}, expected {self.dimension}",
                                endpoint=url, status=200)
        out = []
        for i, row in enumerate(rows):
            vec = np.asarray(row, dtype=np.float64)
            if vec.shape != (self.dimension,):
                raise ProviderError("embedding has wrong shape", endpoint=url, status=200, index=i)
            try:
                out.append(normalize(vec))
            except InputError as exc:
                raise ProviderError(str(exc), endpoint=url, status=200, index=i) from exc
        return out

    def embed_text(self, prompt: str) -> np.ndarray:
        return self.embed_text_batch([prompt])[0]

    def embed_text_batch(self, prompts: Sequence[str]) -> list[np.ndarray]:
        for p in prompts:
            canonical_text(p)
        texts = [p.strip() for p in prompts]
        out = self._post("embed_text", {"texts": texts})
        if len(out) != len(texts):
            raise ProviderError(f"expected {len(texts)} embeddings, got {len(out)}",
                                endpoint=f"{self.endpoint}/embed_text", status=200)
        return out

    def embed_image(self, frame: np.ndarray) -> np.ndarray:
        return self.embed_image_batch([frame])[0]

    def embed_image_batch(self, frames: Sequence[np.ndarray]) -> list[np.ndarray]:
        if len(frames) == 0:
            raise InputError("empty frame batch")
        images = []
        for i, frame in enumerate(frames):
            try:
                png = encode_png(resize_frame(frame, self.config.image_side))
            except InputError as exc:
                raise ProviderError(f"batch element failed: {exc}", index=i) from exc
            images.append(base64.b64encode(png).decode("ascii"))
        out = self._post("embed_image", {"images_png_base64": images})
        if len(out) != len(images):
            raise ProviderError(f"expected {len(images)} embeddings, got {len(out)}",
                                endpoint=f"{self.endpoint}/embed_image", status=200,
                                index=min(len(out), len(images) - 1))
        return out

    def close(self) -> None:
        if self._owns_client:
            self._client.close()


def make_embedder(config: ProviderConfig, client: httpx.Client | None = None) -> Embedder:
    if config.kind == "stub":
        return StubEmbedder(config.dimension, config.image_side)
    return RemoteEmbedder(config, client=client)
