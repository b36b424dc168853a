"""A local HTTP server speaking the embedding and chat protocols.

Useful for exercising the remote clients without real models::

    uvicorn asalpp.stubserver:app --port 8000
    export ASALPP_EMBED_ENDPOINT=http://127.0.0.1:8000
    export ASALPP_EVOLVER_ENDPOINT=http://127.0.0.1:8000

Embeddings come from :class:`~asalpp.embeddings.StubEmbedder`; chat replies
cycle through a fixed list. Requires the ``server`` extra (FastAPI).
"""

from __future__ import annotations

import base64
import io
import itertools
import threading
from typing import Literal, Sequence

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image
from pydantic import BaseModel, Field

from .embeddings import StubEmbedder

DEFAULT_REPLIES = ("a swarm of dividing cells", "branching filaments", "pulsating rings",
                   "drifting spores", "colliding colonies")


class EmbedTextRequest(BaseModel):
    texts: list[str] = Field(min_length=1)


class EmbedImageRequest(BaseModel):
    images_png_base64: list[str] = Field(min_length=1)


class EmbedResponse(BaseModel):
    embeddings: list[list[float]]
    dim: int


class ContentPart(BaseModel):
    type: Literal["text", "image"]
    text: str | None = None
    png_base64: str | None = None


class Message(BaseModel):
    role: str
    content: list[ContentPart]


class ChatRequest(BaseModel):
    model: str
    temperature: float = 0.7
    messages: list[Message] = Field(min_length=1)


class ChatResponse(BaseModel):
    text: str


def create_app(dimension: int = 512, image_side: int = 224,
               replies: Sequence[str] = DEFAULT_REPLIES) -> FastAPI:
    embedder = StubEmbedder(dimension, image_side)
    cycle = itertools.cycle(list(replies))
    lock = threading.Lock()
    app = FastAPI(title="asalpp stub providers")
    app.state.chat_log = []

    @app.post("/embed_text", response_model=EmbedResponse)
    def embed_text(req: EmbedTextRequest) -> EmbedResponse:
        if any(not t.strip() for t in req.texts):
            raise HTTPException(422, "empty text")
        vecs = embedder.embed_text_batch(req.texts)
        return EmbedResponse(embeddings=[v.tolist() for v in vecs], dim=dimension)

    @app.post("/embed_image", response_model=EmbedResponse)
    def embed_image(req: EmbedImageRequest) -> EmbedResponse:
        frames = []
        for i, b64 in enumerate(req.images_png_base64):
            try:
                img = Image.open(io.BytesIO(base64.b64decode(b64, validate=True))).convert("RGB")
            except Exception as exc:
                raise HTTPException(422, f"image {i}: {exc}") from exc
            frames.append(np.asarray(img))
        vecs = embedder.embed_image_batch(frames)
        return EmbedResponse(embeddings=[v.tolist() for v in vecs], dim=dimension)

    @app.post("/chat", response_model=ChatResponse)
    def chat(req: ChatRequest) -> ChatResponse:
        with lock:
            app.state.chat_log.append(req)
            return ChatResponse(text=next(cycle))

    return app


app = create_app()
