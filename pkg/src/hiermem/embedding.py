"""Text embeddings, cosine similarity and exact top-k selection."""

from __future__ import annotations

import hashlib
import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

import numpy as np

from .errors import ConfigurationError, DomainError, TransportError
from .graphs import id_key

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256
# Cosines are compared after rounding so that mathematically equal similarities
# computed along different float paths still tie (and fall back to id order).
COSINE_DECIMALS = 12

_TOKEN_RE = re.compile(r"[^0-9a-z]+")


@dataclass(frozen=True)
class EmbeddingVector:
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.values:
            raise DomainError("embedding must have positive dimension")
        if not all(math.isfinite(v) for v in self.values):
            raise DomainError("embedding entries must be finite")

    @property
    def dim(self) -> int:
        return len(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


@dataclass
class EmbedderConfig:
    provider: str = "fallback"  # "fallback" | "remote"
    dim: int = DEFAULT_DIM
    endpoint: str | None = None
    api_key_env: str | None = None
    normalize: bool = True
    timeout: float = 30.0

    def __post_init__(self) -> None:
        if self.dim <= 0:
            raise ConfigurationError(f"embedder dim must be positive, got {self.dim}")
        if self.provider not in ("fallback", "remote"):
            raise ConfigurationError(f"unknown embedding provider {self.provider!r}")
        if self.provider == "remote" and not self.endpoint:
            raise ConfigurationError("remote embedding provider requires an endpoint")


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> EmbeddingVector: ...


def _normalize(arr: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        return arr
    return arr / norm


def reserved_vector(dim: int) -> EmbeddingVector:
    """Vector assigned to texts without any token: uniform, unit norm."""
    return EmbeddingVector(tuple([1.0 / math.sqrt(dim)] * dim))


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_RE.split(text.lower()) if t]


def _bucket(token: str, dim: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dim


class HashingEmbedder:
    """Hashed bag-of-tokens: lowercase, split on non-alphanumerics, count per bucket."""

    def __init__(self, dim: int = DEFAULT_DIM, normalize: bool = True):
        if dim <= 0:
            raise ConfigurationError(f"embedder dim must be positive, got {dim}")
        self.dim = dim
        self.normalize = normalize

    def embed(self, text: str) -> EmbeddingVector:
        tokens = tokenize(text)
        if not tokens:
            return reserved_vector(self.dim)
        counts = np.zeros(self.dim, dtype=np.float64)
        for tok in tokens:
            counts[_bucket(tok, self.dim)] += 1.0
        if self.normalize:
            counts = _normalize(counts)
        return EmbeddingVector(tuple(float(x) for x in counts))


class RemoteEmbedder:
    """Sentence-embedding HTTP endpoint: POST {"input": [...]} -> {"embeddings": [[...]]}."""

    def __init__(self, config: EmbedderConfig, client=None):
        import httpx

        self.config = config
        self.dim = config.dim
        self.normalize = config.normalize
        self._client = client or httpx.Client(timeout=config.timeout)

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env)
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post(self, texts: list[str]) -> list[list[float]]:
        import httpx

        last: Exception | None = None
        for attempt in range(2):
            try:
                resp = self._client.post(self.config.endpoint, json={"input": texts}, headers=self._headers())
                resp.raise_for_status()
                return resp.json()["embeddings"]
            except (httpx.TransportError, httpx.HTTPStatusError) as exc:
                last = exc
                logger.warning("embedding request failed (attempt %d): %s", attempt + 1, exc)
        raise TransportError(f"embedding endpoint unreachable: {last}")

    def embed_many(self, texts: Sequence[str]) -> list[EmbeddingVector]:
        out: list[EmbeddingVector | None] = [None] * len(texts)
        pending = [i for i, t in enumerate(texts) if tokenize(t)]
        for i, t in enumerate(texts):
            if i not in pending:
                out[i] = reserved_vector(self.dim)
        if pending:
            raw = self._post([texts[i] for i in pending])
            if len(raw) != len(pending):
                raise ConfigurationError("embedding provider returned the wrong number of vectors")
            for i, vec in zip(pending, raw):
                if len(vec) != self.dim:
                    raise ConfigurationError(f"embedding provider returned dim {len(vec)}, configured {self.dim}")
                arr = np.asarray(vec, dtype=np.float64)
                if self.normalize:
                    arr = _normalize(arr)
                out[i] = EmbeddingVector(tuple(float(x) for x in arr))
        return out  # type: ignore[return-value]

    def embed(self, text: str) -> EmbeddingVector:
        return self.embed_many([text])[0]


def make_embedder(config: EmbedderConfig, client=None) -> Embedder:
    if config.provider == "remote":
        return RemoteEmbedder(config, client=client)
    return HashingEmbedder(config.dim, config.normalize)


def embed(config: EmbedderConfig | Embedder, text: str) -> EmbeddingVector:
    embedder = make_embedder(config) if isinstance(config, EmbedderConfig) else config
    return embedder.embed(text)


def _as_array(v) -> np.ndarray:
    if isinstance(v, EmbeddingVector):
        return v.as_array()
    return np.asarray(tuple(v), dtype=np.float64)


def cosine(a, b) -> float:
    """Cosine similarity of two equal-length, nonzero vectors, clipped to [-1, 1]."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DomainError(f"dimension mismatch: {x.shape[0]} vs {y.shape[0]}")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        raise DomainError("cosine undefined for a zero vector")
    return float(min(1.0, max(-1.0, float(np.dot(x, y)) / (nx * ny))))


def top_k(query_vec, candidates: Iterable[tuple[str, object]], k: int) -> list[str]:
    """Ids of the ``k`` candidates most cosine-similar to ``query_vec``.

    Ordered by descending cosine, ties broken by ascending id.
    """
    if k < 0:
        raise DomainError(f"k must be non-negative, got {k}")
    q = _as_array(query_vec)
    scored = []
    for cid, vec in candidates:
        v = _as_array(vec)
        if v.shape != q.shape:
            raise DomainError(f"candidate {cid!r} has dim {v.shape[0]}, query has {q.shape[0]}")
        scored.append((-round(cosine(q, v), COSINE_DECIMALS), id_key(cid), cid))
    if k == 0:
        return []
    scored.sort()
    return [cid for _, _, cid in scored[:k]]
