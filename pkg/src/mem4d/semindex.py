"""Embedding providers and exact cosine top-k search over semantic records.

Search is exhaustive by design: every stored embedding is scored against the
key. That keeps results exactly equal to a brute-force scan, which the test
suite relies on; approximate structures are out of scope.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import numpy as np

from .core import (
    DimensionMismatchError,
    EmptyTextError,
    ZeroVectorError,
)

_WORD_RE = re.compile(r"[a-z0-9]+")


class Embedder:
    """Maps text to a unit vector of a fixed dimension."""

    def embed(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def dimension(self) -> int:
        raise NotImplementedError


class MockEmbedder(Embedder):
    """Deterministic token-bag embedder.

    Each lowercase word hashes to one of D buckets; word counts accumulate
    and the vector is L2-normalized. Texts sharing words land near each
    other, word order is irrelevant, and the same input always yields the
    same vector (the hash is keyed by `seed`, not process-salted).
    """

    def __init__(self, dim: int = 256, seed: int = 0):
        if dim < 2:
            raise ValueError("dim must be >= 2")
        self._dim = dim
        self._seed = seed

    def dimension(self) -> int:
        return self._dim

    def _bucket(self, word: str) -> int:
        digest = hashlib.blake2b(
            word.encode("utf-8"),
            digest_size=8,
            key=str(self._seed).encode("utf-8"),
        ).digest()
        return int.from_bytes(digest, "big") % self._dim

    def embed(self, text: str) -> np.ndarray:
        words = _WORD_RE.findall(text.lower())
        if not words:
            raise EmptyTextError("cannot embed empty text")
        vec = np.zeros(self._dim, dtype=np.float64)
        for word in words:
            vec[self._bucket(word)] += 1.0
        return vec / np.linalg.norm(vec)


class HttpEmbedder(Embedder):
    """Adapter for a real text encoder behind an HTTP endpoint.

    POSTs {"text": ...} and expects {"embedding": [...]}; the dimension is
    negotiated once at registration by embedding a probe string.
    """

    def __init__(self, url: str, timeout: float = 30.0):
        self._url = url
        self._timeout = timeout
        self._dim: int | None = None

    def dimension(self) -> int:
        if self._dim is None:
            self._dim = len(self.embed("dimension probe"))
        return self._dim

    def embed(self, text: str) -> np.ndarray:
        import requests

        if not text.strip():
            raise EmptyTextError("cannot embed empty text")
        resp = requests.post(self._url, json={"text": text}, timeout=self._timeout)
        resp.raise_for_status()
        vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ZeroVectorError("embedder returned a zero vector")
        return vec / norm


def cosine(u, v) -> float:
    """u.v / (|u||v|), clipped into [-1, 1] against rounding overshoot."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise DimensionMismatchError(f"shapes {u.shape} and {v.shape} differ")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise ZeroVectorError("cosine of a zero vector is undefined")
    return float(min(1.0, max(-1.0, float(np.dot(u, v)) / (nu * nv))))


@dataclass
class SemanticHit:
    entry_id: str
    similarity: float


class SemanticIndex:
    """Entry id -> unit embedding store with exact top-k scan."""

    def __init__(self, dim: int):
        self._dim = dim
        self._vectors: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._vectors)

    def ids(self) -> set[str]:
        return set(self._vectors)

    def upsert(self, entry_id: str, embedding: np.ndarray) -> None:
        emb = np.asarray(embedding, dtype=np.float64)
        if emb.shape != (self._dim,):
            raise DimensionMismatchError(
                f"embedding has shape {emb.shape}, index dimension is {self._dim}"
            )
        self._vectors[entry_id] = emb

    def remove(self, entry_id: str) -> None:
        self._vectors.pop(entry_id, None)

    def scan(self, key: np.ndarray) -> list[SemanticHit]:
        """Similarity of every stored vector against `key`, unordered."""
        return [
            SemanticHit(entry_id, cosine(key, vec))
            for entry_id, vec in self._vectors.items()
        ]


def semantic_search(db, key_text: str, top_k: int = 10, min_sim: float = 0.0):
    """Ranked semantic hits: similarity >= min_sim, best first, at most top_k.

    Ties break by ascending entry id so results are reproducible.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    key = db.embedder.embed(key_text)
    with db.lock.read():
        hits = [h for h in db.sem_index.scan(key) if h.similarity >= min_sim]
    hits.sort(key=lambda h: (-h.similarity, h.entry_id))
    return hits[:top_k]
