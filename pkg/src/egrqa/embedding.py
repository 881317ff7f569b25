"""Text embedding backends.

Two backends share one interface: ``RemoteEmbedder`` talks to an
OpenAI-compatible ``/embeddings`` endpoint, ``HashEmbedder`` derives a
pseudo-random unit vector from the text bytes for offline runs. Every vector
leaves this module L2-normalized, so inner product equals cosine similarity.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Callable, Literal, Protocol, Sequence

import httpx
import numpy as np

from . import prng
from ._http import RetryPolicy, api_key_from_env, post_json
from .errors import BackendError, ContractError


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray  # float32, shape (dim,)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.values.astype(np.float64)))

    def cosine(self, other: EmbeddingVector) -> float:
        a = self.values.astype(np.float64)
        b = other.values.astype(np.float64)
        return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


@dataclass(frozen=True)
class EmbedderConfig:
    backend: Literal["remote", "hash"] = "hash"
    dim: int = 1536
    endpoint_url: str = "https://api.openai.com/v1/embeddings"
    model_name: str = "text-embedding-ada-002"
    batch_size: int = 64
    timeout_ms: int = 60_000
    max_retries: int = 3

    def __post_init__(self) -> None:
        if self.backend not in ("remote", "hash"):
            raise ValueError(f"unknown embedding backend {self.backend!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class Embedder(Protocol):
    dim: int

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]: ...


def l2_normalize(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ContractError("embedding contains non-finite values")
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ContractError("cannot normalize a zero embedding")
    return (v / n).astype(np.float32)


def hash_embed(text: str, dim: int) -> EmbeddingVector:
    """Deterministic pseudo-embedding of ``text``.

    Seeds SplitMix64 with the 64-bit FNV-1a hash of the UTF-8 bytes, draws
    ``dim`` values uniform in [-1, 1] and normalizes them.
    """
    if dim <= 0:
        raise ValueError("dim must be positive")
    seed = prng.fnv1a_64(text.encode("utf-8"))
    return EmbeddingVector(l2_normalize(prng.uniform_signed(seed, dim)))


def _check_texts(texts: Sequence[str]) -> None:
    if not texts:
        raise ContractError("embed_batch needs at least one text")
    for i, t in enumerate(texts):
        if not t:
            raise ContractError(f"text {i} is empty")


class HashEmbedder:
    def __init__(self, dim: int = 1536) -> None:
        self.dim = dim

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        _check_texts(texts)
        return [hash_embed(t, self.dim) for t in texts]


class RemoteEmbedder:
    """Client for an OpenAI-compatible embeddings endpoint.

    The ``httpx.Client`` is safe to share between threads, so one instance can
    serve concurrent callers.
    """

    def __init__(
        self,
        cfg: EmbedderConfig,
        *,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ) -> None:
        self.cfg = cfg
        self.dim = cfg.dim
        self.api_key = api_key if api_key is not None else api_key_from_env()
        self.client = client or httpx.Client(timeout=cfg.timeout_ms / 1000)
        self.policy = RetryPolicy(max_retries=cfg.max_retries)
        self._sleep = sleep
        self._rng = rng

    def _embed_one_request(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        body = post_json(
            self.client,
            self.cfg.endpoint_url,
            {"model": self.cfg.model_name, "input": list(texts)},
            api_key=self.api_key,
            policy=self.policy,
            sleep=self._sleep,
            rng=self._rng,
        )
        try:
            data = sorted(body["data"], key=lambda d: d["index"])
            rows = [d["embedding"] for d in data]
            indices = [d["index"] for d in data]
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed embeddings response: {exc}") from exc
        if indices != list(range(len(texts))):
            raise ContractError(f"embeddings response indices {indices} do not cover {len(texts)} inputs")
        out = []
        for row in rows:
            if len(row) != self.cfg.dim:
                raise ContractError(f"endpoint returned dim {len(row)}, configured dim is {self.cfg.dim}")
            out.append(EmbeddingVector(l2_normalize(np.asarray(row, dtype=np.float64))))
        return out

    def embed_batch(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        _check_texts(texts)
        out: list[EmbeddingVector] = []
        step = self.cfg.batch_size
        for start in range(0, len(texts), step):
            stop = min(start + step, len(texts))
            try:
                out.extend(self._embed_one_request(texts[start:stop]))
            except BackendError as exc:
                raise BackendError(
                    f"embedding texts[{start}:{stop}] failed: {exc}", status=exc.status, attempts=exc.attempts
                ) from exc
        return out


def make_embedder(cfg: EmbedderConfig, **kwargs) -> Embedder:
    if cfg.backend == "hash":
        return HashEmbedder(cfg.dim)
    return RemoteEmbedder(cfg, **kwargs)


def embed_batch(texts: Sequence[str], cfg: EmbedderConfig) -> list[EmbeddingVector]:
    return make_embedder(cfg).embed_batch(texts)
