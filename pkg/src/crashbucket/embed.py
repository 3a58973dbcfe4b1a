"""Embedding providers, the hash-keyed vector cache, and vector algebra."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import httpx
import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DIM = 64
UNIT_TOL = 1e-6
DEGENERATE_NORM = 1e-12


class EmbeddingError(Exception):
    pass


class DegenerateVectorError(EmbeddingError):
    pass


class ProviderProtocolError(EmbeddingError):
    """The provider answered, but not with one vector per input."""


class ProviderTransportError(EmbeddingError):
    """A request failed; retrying later may succeed.

    ``unresolved`` lists the content hashes still lacking a vector.
    """

    def __init__(self, message: str, unresolved: Sequence[str]):
        super().__init__(message)
        self.unresolved = list(unresolved)


@dataclass(frozen=True, eq=False)
class EmbeddingVector:
    values: np.ndarray
    unit: bool = False

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("embedding must be a non-empty 1-d vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("embedding has non-finite entries")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        if self.unit and abs(np.linalg.norm(values) - 1.0) > UNIT_TOL:
            raise ValueError("vector marked unit-norm is not")

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EmbeddingVector):
            return NotImplemented
        return self.unit == other.unit and np.array_equal(self.values, other.values)


def truncate_normalize(vector: EmbeddingVector, dim: int, name: str = "") -> EmbeddingVector:
    """First ``dim`` coordinates rescaled to unit length."""
    if dim > vector.dim:
        raise ValueError(f"cannot truncate a {vector.dim}-d vector to {dim} dimensions")
    prefix = vector.values[:dim]
    norm = np.linalg.norm(prefix)
    if norm < DEGENERATE_NORM:
        label = f" for {name}" if name else ""
        raise DegenerateVectorError(f"zero-norm {dim}-d prefix{label}")
    return EmbeddingVector(prefix / norm, unit=True)


def combine_sources(per_source: Mapping[object, EmbeddingVector]) -> EmbeddingVector:
    """Sum of the per-source unit directions, renormalized.

    Absent sources simply do not appear in ``per_source``.
    """
    vectors = list(per_source.values())
    if not vectors:
        raise ValueError("no source vectors to combine")
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"source vectors differ in dimension: {sorted(dims)}")
    total = np.zeros(vectors[0].dim)
    for v in vectors:
        norm = np.linalg.norm(v.values)
        if norm < DEGENERATE_NORM:
            raise DegenerateVectorError("zero-norm source vector")
        total += v.values / norm
    norm = np.linalg.norm(total)
    if norm < DEGENERATE_NORM:
        raise DegenerateVectorError("source vectors cancel out")
    return EmbeddingVector(total / norm, unit=True)


# --- offline feature-hashing embedder ------------------------------------

_TOKEN = re.compile(r"[A-Za-z0-9]+")


def _bucket(feature: str, dim: int, seed: int) -> tuple[int, float]:
    digest = hashlib.blake2b(feature.encode("utf-8"), digest_size=8, salt=seed.to_bytes(8, "little", signed=True)).digest()
    word = int.from_bytes(digest, "little")
    return (word >> 1) % dim, (1.0 if word & 1 else -1.0)


def hashed_features(text: str) -> list[str]:
    tokens = _TOKEN.findall(text)
    feats = [f"u:{t}" for t in tokens]
    feats += [f"t:{tokens[i]} {tokens[i + 1]} {tokens[i + 2]}" for i in range(len(tokens) - 2)]
    return feats


def hashed_counts(text: str, dim: int, seed: int) -> np.ndarray:
    counts = np.zeros(dim)
    for feature in hashed_features(text):
        index, sign = _bucket(feature, dim, seed)
        counts[index] += sign
    return counts


def offline_embed(text: str, dim: int, seed: int = 0) -> EmbeddingVector:
    """Deterministic signed feature-hashing embedding of unigrams and token trigrams.

    Text without tokens, or whose hashed counts cancel exactly, maps to the
    first basis vector so the result is always unit length.
    """
    if dim < 8:
        raise ValueError("offline embedding needs dim >= 8")
    counts = hashed_counts(text, dim, seed)
    norm = np.linalg.norm(counts)
    if norm == 0.0:
        counts = np.zeros(dim)
        counts[0] = 1.0
        norm = 1.0
    return EmbeddingVector(counts / norm, unit=True)


# --- providers -----------------------------------------------------------

@dataclass(frozen=True)
class ProviderConfig:
    kind: str = "offline"
    model: str = "offline-hash-v1"
    endpoint: str = ""
    api_key_env: str = "DEDUP_API_KEY"
    batch_size: int = 100
    target_dim: int = DEFAULT_DIM
    seed: int = 0
    offline_dim: int = DEFAULT_DIM
    timeout: float = 60.0
    max_workers: int = 1

    def __post_init__(self) -> None:
        if self.kind not in ("offline", "remote"):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.batch_size < 1 or self.target_dim < 1 or self.offline_dim < 1:
            raise ValueError("batch size and dimensions must be positive")
        if self.kind == "offline" and self.target_dim > self.offline_dim:
            raise ValueError("target dim exceeds the offline provider's output dim")
        if self.kind == "remote" and not self.endpoint:
            raise ValueError("remote provider needs an endpoint URL")

    @property
    def model_id(self) -> str:
        """Cache namespace; offline vectors depend on seed and width too."""
        if self.kind == "offline":
            return f"{self.model}:dim={self.offline_dim}:seed={self.seed}"
        return self.model


class OfflineProvider:
    def __init__(self, config: ProviderConfig):
        self.config = config
        self.model_id = config.model_id
        self.calls: list[int] = []

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        self.calls.append(len(texts))
        return [offline_embed(t, self.config.offline_dim, self.config.seed).values.tolist() for t in texts]


class RemoteProvider:
    """Client for an ``/embeddings`` endpoint speaking the common JSON shape."""

    def __init__(self, config: ProviderConfig, transport: httpx.BaseTransport | None = None):
        self.config = config
        self.model_id = config.model_id
        self.calls: list[int] = []
        headers = {}
        key = os.environ.get(config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        self._client = httpx.Client(
            base_url=config.endpoint.rstrip("/"), headers=headers, timeout=config.timeout, transport=transport
        )

    def embed_batch(self, texts: Sequence[str]) -> list[list[float]]:
        self.calls.append(len(texts))
        response = self._client.post("/embeddings", json={"model": self.config.model, "input": list(texts)})
        response.raise_for_status()
        try:
            data = response.json()["data"]
            ordered = sorted(data, key=lambda item: item["index"])
            vectors = [item["embedding"] for item in ordered]
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderProtocolError(f"malformed embeddings response: {exc}") from exc
        if [item["index"] for item in ordered] != list(range(len(texts))):
            raise ProviderProtocolError(f"expected {len(texts)} embeddings, got indices {[i['index'] for i in ordered]}")
        return vectors

    def close(self) -> None:
        self._client.close()


def make_provider(config: ProviderConfig, transport: httpx.BaseTransport | None = None):
    if config.kind == "offline":
        return OfflineProvider(config)
    return RemoteProvider(config, transport=transport)


# --- cache ---------------------------------------------------------------

class EmbeddingCache:
    """(model id, content hash) -> full-width vector, persisted as JSON lines.

    Each store appends one line; reopening the file replays them. Writes are
    serialized by a lock, reads are plain dict lookups.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._data: dict[tuple[str, str], EmbeddingVector] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            self._load()

    def _load(self) -> None:
        with self.path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    values = row["values"]
                    if len(values) != row["dim"]:
                        raise ValueError("dim mismatch")
                    self._data[(row["model"], row["hash"])] = EmbeddingVector(values)
                except (ValueError, KeyError) as exc:
                    # a torn final write must not poison the whole cache
                    log.warning("skipping bad cache line %s:%d (%s)", self.path, lineno, exc)

    def __len__(self) -> int:
        return len(self._data)

    def get(self, model: str, digest: str) -> EmbeddingVector | None:
        return self._data.get((model, digest))

    def put_many(self, model: str, entries: Iterable[tuple[str, EmbeddingVector]]) -> None:
        entries = list(entries)
        with self._lock:
            lines = []
            for digest, vector in entries:
                self._data[(model, digest)] = vector
                row = {"model": model, "hash": digest, "dim": vector.dim, "values": vector.values.tolist()}
                lines.append(json.dumps(row) + "\n")
            if self.path is not None and lines:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a", encoding="utf-8") as fh:
                    fh.writelines(lines)

    def put(self, model: str, digest: str, vector: EmbeddingVector) -> None:
        self.put_many(model, [(digest, vector)])


def embed_texts(
    provider,
    cache: EmbeddingCache,
    items: Sequence[tuple[str, str]],
    batch_size: int = 100,
    max_workers: int = 1,
) -> dict[str, EmbeddingVector]:
    """Vectors for ``(content hash, text)`` items, fetching only cache misses.

    Misses are sent in chunks of at most ``batch_size``. Every batch that
    succeeds is cached immediately, so a failure part-way keeps earlier
    progress.
    """
    model = provider.model_id
    result: dict[str, EmbeddingVector] = {}
    pending: dict[str, str] = {}
    for digest, text in items:
        if not text:
            raise ValueError(f"empty text for hash {digest}")
        if digest in result or digest in pending:
            continue
        hit = cache.get(model, digest)
        if hit is not None:
            result[digest] = hit
        else:
            pending[digest] = text

    keys = list(pending)
    batches = [keys[i : i + batch_size] for i in range(0, len(keys), batch_size)]

    def run(batch: list[str]) -> list[tuple[str, EmbeddingVector]]:
        vectors = provider.embed_batch([pending[d] for d in batch])
        if len(vectors) != len(batch):
            raise ProviderProtocolError(f"sent {len(batch)} texts, received {len(vectors)} vectors")
        entries = [(d, EmbeddingVector(v)) for d, v in zip(batch, vectors)]
        cache.put_many(model, entries)
        return entries

    failures: list[Exception] = []
    if max_workers <= 1 or len(batches) <= 1:
        for batch in batches:
            try:
                result.update(run(batch))
            except (httpx.HTTPError, OSError) as exc:
                failures.append(exc)
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(run, batch) for batch in batches]
            for future in futures:
                try:
                    result.update(future.result())
                except (httpx.HTTPError, OSError) as exc:
                    failures.append(exc)

    if failures:
        unresolved = [d for d in keys if d not in result]
        raise ProviderTransportError(f"{len(failures)} embedding request(s) failed: {failures[0]}", unresolved)
    return result
