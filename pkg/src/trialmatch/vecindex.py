"""Embedding providers and an exact cosine-distance top-k index over trial chunks.

The index is a deliberate exact scan (no ANN): at desk scale it is fast
enough and its output is testable against a brute-force oracle.  A trial's
score is the minimum cosine distance over its chunks.
"""

from __future__ import annotations

import hashlib
import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import requests

DEFAULT_DIM = 768

INDEX_MAGIC = b"TMVI"
INDEX_VERSION = 1


class DimensionMismatch(Exception):
    """Vector width differs from the index or counterpart vector."""


class ZeroVector(Exception):
    """Cosine distance is undefined for an all-zero vector."""


class ProviderUnavailable(Exception):
    """Embedding provider could not be reached."""


class ProviderBadResponse(Exception):
    """Embedding provider answered with an unusable payload."""


@dataclass(frozen=True)
class ChunkEntry:
    nct_id: str
    seq: int
    vector: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "vector", np.asarray(self.vector, dtype=np.float32))


@dataclass(frozen=True)
class SearchHit:
    nct_id: str
    distance: float
    best_seq: int


def _as_vector(values, name: str = "vector") -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError(f"{name} contains non-finite values")
    return vec


def cosine_distance(a, b) -> float:
    """1 - cos(a, b); 0 for identical directions, 2 for opposite."""
    va, vb = _as_vector(a, "a"), _as_vector(b, "b")
    if va.shape[0] != vb.shape[0]:
        raise DimensionMismatch(f"dim {va.shape[0]} vs {vb.shape[0]}")
    na = float(np.linalg.norm(va))
    nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine distance is undefined for a zero vector")
    return 1.0 - float(np.dot(va, vb)) / (na * nb)


class MockEmbedder:
    """Deterministic, ecosystem-free embedder: seeded character-trigram
    hashing into dim buckets, unit-normalized.

    Pure function of the text; preserves crude lexical similarity, which is
    all the pipeline tests need.
    """

    def __init__(self, dim: int = DEFAULT_DIM, seed: int = 0):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.seed = seed

    def _bucket(self, gram: str) -> int:
        digest = hashlib.blake2b(
            gram.encode("utf-8"), digest_size=8, salt=str(self.seed).encode("utf-8")[:16]
        ).digest()
        return int.from_bytes(digest, "little") % self.dim

    def embed(self, text: str) -> np.ndarray:
        lowered = text.lower()
        grams = [lowered[i : i + 3] for i in range(len(lowered) - 2)] or [lowered]
        vec = np.zeros(self.dim, dtype=np.float64)
        for gram in grams:
            vec[self._bucket(gram)] += 1.0
        norm = float(np.linalg.norm(vec))
        if norm == 0.0:  # only possible for the empty-text singleton gram
            vec[self._bucket("")] = 1.0
            norm = 1.0
        return vec / norm

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        return [self.embed(t) for t in texts]


class RemoteEmbedder:
    """HTTP embedding provider: one endpoint taking a list of texts and
    returning a list of float vectors."""

    def __init__(self, endpoint: str, dim: int = DEFAULT_DIM, token: str = "", timeout: float = 60.0):
        self.endpoint = endpoint
        self.dim = dim
        self.token = token
        self.timeout = timeout

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            resp = requests.post(self.endpoint, json={"texts": list(texts)}, headers=headers, timeout=self.timeout)
        except requests.RequestException as exc:
            raise ProviderUnavailable(f"embedding endpoint unreachable: {exc}") from exc
        if resp.status_code != 200:
            raise ProviderUnavailable(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            body = resp.json()
        except ValueError as exc:
            raise ProviderBadResponse("embedding response is not JSON") from exc
        vectors = body.get("embeddings") if isinstance(body, dict) else body
        if not isinstance(vectors, list) or len(vectors) != len(texts):
            raise ProviderBadResponse("embedding response does not match the request length")
        out = []
        for i, values in enumerate(vectors):
            vec = np.asarray(values, dtype=np.float64)
            if vec.ndim != 1 or vec.shape[0] != self.dim or not np.all(np.isfinite(vec)):
                raise ProviderBadResponse(f"embedding {i} is not a finite vector of dim {self.dim}")
            out.append(vec)
        return out

    def embed(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]


class VectorIndex:
    """Exact cosine-distance index over (nct_id, seq) chunk vectors.

    Vectors are stored as float32 (matching the on-disk format); distances
    are accumulated in float64.  Concurrent searches are permitted; writes
    take the index lock, so a search never observes a partially written
    entry.
    """

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self._entries: dict[tuple[str, int], np.ndarray] = {}
        self._lock = threading.RLock()
        self._cache: Optional[tuple[list[tuple[str, int]], np.ndarray, np.ndarray]] = None

    def __len__(self) -> int:
        return len(self._entries)

    def index_chunks(self, entries: Iterable[ChunkEntry]) -> int:
        count = 0
        with self._lock:
            for entry in entries:
                vec = np.asarray(entry.vector, dtype=np.float32)
                if vec.ndim != 1 or vec.shape[0] != self.dim:
                    raise DimensionMismatch(
                        f"entry ({entry.nct_id},{entry.seq}) has dim {vec.shape[-1] if vec.ndim else 0}, index dim {self.dim}"
                    )
                if not np.all(np.isfinite(vec)):
                    raise ValueError(f"entry ({entry.nct_id},{entry.seq}) contains non-finite values")
                if not np.any(vec):
                    raise ZeroVector(f"entry ({entry.nct_id},{entry.seq}) is a zero vector")
                self._entries[(entry.nct_id, entry.seq)] = vec
                count += 1
            self._cache = None
        return count

    def _snapshot(self) -> tuple[list[tuple[str, int]], np.ndarray, np.ndarray]:
        with self._lock:
            if self._cache is None:
                keys = sorted(self._entries)
                if keys:
                    matrix = np.stack([self._entries[k] for k in keys]).astype(np.float64)
                    norms = np.array([float(np.linalg.norm(row)) for row in matrix])
                else:
                    matrix = np.zeros((0, self.dim), dtype=np.float64)
                    norms = np.zeros(0)
                self._cache = (keys, matrix, norms)
            return self._cache

    def search(self, query, k: int, allow_set: Optional[set[str]] = None) -> list[SearchHit]:
        """Top-k trials by best (minimum) chunk distance, exact.

        Restricted to trials in allow_set when given.  Hits are sorted by
        ascending distance, ties broken by lexicographic nct_id; each trial
        appears at most once.
        """
        if k < 1:
            raise ValueError("k must be >= 1")
        q = _as_vector(query, "query")
        if q.shape[0] != self.dim:
            raise DimensionMismatch(f"query dim {q.shape[0]}, index dim {self.dim}")
        qnorm = float(np.linalg.norm(q))
        if qnorm == 0.0:
            raise ZeroVector("query is a zero vector")
        keys, matrix, norms = self._snapshot()
        best: dict[str, tuple[float, int]] = {}
        for i, (nct_id, seq) in enumerate(keys):
            if allow_set is not None and nct_id not in allow_set:
                continue
            distance = 1.0 - float(np.dot(matrix[i], q)) / (norms[i] * qnorm)
            current = best.get(nct_id)
            if current is None or distance < current[0] or (distance == current[0] and seq < current[1]):
                best[nct_id] = (distance, seq)
        hits = [SearchHit(nct_id=nct_id, distance=d, best_seq=seq) for nct_id, (d, seq) in best.items()]
        hits.sort(key=lambda h: (h.distance, h.nct_id))
        return hits[:k]

    def save(self, path: str | Path) -> None:
        """Bit-exact file format: magic "TMVI", u32 LE version, u32 LE dim,
        u64 LE count, then per entry u16 LE id length + id bytes, u32 LE seq,
        dim f32 LE values."""
        with self._lock:
            keys = sorted(self._entries)
            entries = [(k, self._entries[k]) for k in keys]
        with open(path, "wb") as fh:
            fh.write(INDEX_MAGIC)
            fh.write(struct.pack("<I", INDEX_VERSION))
            fh.write(struct.pack("<I", self.dim))
            fh.write(struct.pack("<Q", len(entries)))
            for (nct_id, seq), vec in entries:
                id_bytes = nct_id.encode("utf-8")
                if len(id_bytes) > 0xFFFF:
                    raise ValueError(f"id too long to serialize: {nct_id!r}")
                fh.write(struct.pack("<H", len(id_bytes)))
                fh.write(id_bytes)
                fh.write(struct.pack("<I", seq))
                fh.write(vec.astype("<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "VectorIndex":
        data = Path(path).read_bytes()
        view = memoryview(data)
        if bytes(view[:4]) != INDEX_MAGIC:
            raise ValueError(f"{path}: bad magic, not a vector index file")
        (version,) = struct.unpack_from("<I", view, 4)
        if version != INDEX_VERSION:
            raise ValueError(f"{path}: unsupported index version {version}")
        (dim,) = struct.unpack_from("<I", view, 8)
        (count,) = struct.unpack_from("<Q", view, 12)
        offset = 20
        index = cls(dim=dim)
        entries = []
        for _ in range(count):
            (id_len,) = struct.unpack_from("<H", view, offset)
            offset += 2
            nct_id = bytes(view[offset : offset + id_len]).decode("utf-8")
            offset += id_len
            (seq,) = struct.unpack_from("<I", view, offset)
            offset += 4
            vec = np.frombuffer(data, dtype="<f4", count=dim, offset=offset).copy()
            offset += 4 * dim
            entries.append(ChunkEntry(nct_id=nct_id, seq=seq, vector=vec))
        index.index_chunks(entries)
        return index
