"""Exact cosine top-k retrieval over chunk embeddings, plus retrieval-noise injection."""
from __future__ import annotations

import hashlib
import json
import math
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Collection, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .corpus import DEFAULT_TOKENIZER, Chunk, ConfigurationError, Tokenizer

INDEX_FORMAT = "discorag-index/1"
# Scores closer than this are treated as tied and ordered by chunk_id.
TIE_DECIMALS = 12


class RetrievalError(RuntimeError):
    pass


class EmbeddingBackendError(RetrievalError):
    """Provider failed on one input; safe to retry."""

    retryable = True

    def __init__(self, chunk_id: str, cause: BaseException | None = None):
        super().__init__(f"embedding failed for chunk {chunk_id!r}: {cause}")
        self.chunk_id = chunk_id


class DimensionMismatchError(ConfigurationError):
    pass


class EmbeddingProvider(Protocol):
    name: str
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class HashingEmbedder:
    """Signed feature hashing of lowercased word tokens.

    Deterministic and dependency-free; stands in for a neural embedding model
    when running offline.
    """

    def __init__(self, dim: int = 256, tok: Tokenizer = DEFAULT_TOKENIZER):
        if dim < 1:
            raise ConfigurationError("embedding dim must be >= 1")
        self.dim = dim
        self.tok = tok
        self.name = f"hashing-v1-d{dim}"

    def embed(self, text: str) -> np.ndarray:
        vec = np.zeros(self.dim, dtype=np.float64)
        for token in self.tok.tokenize(text.lower()):
            if not any(ch.isalnum() for ch in token):
                continue
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            h = int.from_bytes(digest, "little")
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        return vec


@dataclass(frozen=True)
class VectorIndex:
    ids: tuple[str, ...]
    matrix: np.ndarray  # rows are unit vectors aligned with ids
    dim: int
    provider_name: str
    doc_ids: tuple[str, ...] = ()

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ConfigurationError("duplicate chunk ids in index")

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, chunk_id: str) -> np.ndarray:
        return self.matrix[self.ids.index(chunk_id)]


@dataclass(frozen=True)
class Ranked:
    chunk_id: str
    score: float
    injected: bool = False


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple[Ranked, ...]
    k: int

    @property
    def chunk_ids(self) -> list[str]:
        return [r.chunk_id for r in self.ranked]

    @property
    def injected_ids(self) -> list[str]:
        return [r.chunk_id for r in self.ranked if r.injected]


def _normalize(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        # A zero vector has no direction; keep it zero so every cosine is 0.
        return vec.astype(np.float64)
    return vec.astype(np.float64) / norm


def build_index(chunks: Sequence[Chunk], provider: EmbeddingProvider,
                max_workers: int = 1) -> VectorIndex:
    if not chunks:
        raise ConfigurationError("cannot build an index over zero chunks")
    ids = [c.chunk_id for c in chunks]
    seen: set[str] = set()
    for cid in ids:
        if cid in seen:
            raise ConfigurationError(f"duplicate chunk_id {cid!r}")
        seen.add(cid)

    def embed_one(chunk: Chunk) -> np.ndarray:
        try:
            vec = np.asarray(provider.embed(chunk.text), dtype=np.float64)
        except Exception as exc:
            raise EmbeddingBackendError(chunk.chunk_id, exc) from exc
        if vec.shape != (provider.dim,):
            raise DimensionMismatchError(
                f"provider {provider.name} returned dim {vec.shape[-1] if vec.ndim else 0} "
                f"for chunk {chunk.chunk_id!r}, index dim is {provider.dim}")
        return _normalize(vec)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            rows = list(pool.map(embed_one, chunks))
    else:
        rows = [embed_one(c) for c in chunks]
    return VectorIndex(ids=tuple(ids), matrix=np.vstack(rows), dim=provider.dim,
                       provider_name=provider.name,
                       doc_ids=tuple(c.doc_id for c in chunks))


def retrieve_topk(index: VectorIndex, query: str, k: int, provider: EmbeddingProvider,
                  query_id: str = "", doc_scope: Collection[str] | None = None) -> RetrievalResult:
    """Exact top-k by cosine similarity; equal scores are ordered by ascending chunk_id.

    ``doc_scope`` restricts candidates to chunks of the given documents (closed-domain
    retrieval).
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("index is empty")
    q = np.asarray(provider.embed(query), dtype=np.float64)
    if q.shape != (index.dim,):
        raise DimensionMismatchError(f"query vector dim {q.shape} != index dim {index.dim}")
    scores = index.matrix @ _normalize(q)
    candidates = range(len(index))
    if doc_scope is not None:
        scope = set(doc_scope)
        candidates = [i for i in candidates if index.doc_ids[i] in scope]
    keyed = np.round(scores, TIE_DECIMALS)
    order = sorted(candidates, key=lambda i: (-keyed[i], index.ids[i]))[:k]
    ranked = tuple(Ranked(index.ids[i], float(min(1.0, max(-1.0, scores[i])))) for i in order)
    return RetrievalResult(query_id=query_id, ranked=ranked, k=k)


def noise_count(ratio: float, k: int) -> int:
    # Round half up so 0.25 * 10 -> 3 rather than banker's 2.
    return int(math.floor(ratio * k + 0.5))


def inject_noise(result: RetrievalResult, pool: Iterable[str], ratio: float,
                 seed: int) -> RetrievalResult:
    """Replace round(ratio * k) uniformly chosen ranks with chunks drawn without
    replacement from ``pool``. Surviving entries keep their rank and score; injected
    entries carry a NaN score and ``injected=True``."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError(f"noise ratio must be in [0, 1], got {ratio}")
    if ratio == 0.0:
        return result
    k = len(result.ranked)
    n = noise_count(ratio, k)
    present = set(result.chunk_ids)
    candidates = sorted(set(pool))
    overlap = present.intersection(candidates)
    if overlap:
        raise ConfigurationError(f"noise pool overlaps retrieved chunks: {sorted(overlap)[:3]}")
    if len(candidates) < n:
        raise RetrievalError(f"noise pool too small: need {n} chunks, {len(candidates)} available")
    rng = random.Random(seed)
    positions = sorted(rng.sample(range(k), n))
    replacements = rng.sample(candidates, n)
    ranked = list(result.ranked)
    for pos, cid in zip(positions, replacements):
        ranked[pos] = Ranked(cid, float("nan"), injected=True)
    return replace(result, ranked=tuple(ranked))


def save_index(index: VectorIndex, path: str | Path, extra: Mapping | None = None) -> None:
    header = {"format": INDEX_FORMAT, "provider": index.provider_name, "dim": index.dim,
              "size": len(index), **(extra or {})}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for cid, did, row in zip(index.ids, index.doc_ids, index.matrix):
            fh.write(json.dumps({"chunk_id": cid, "doc_id": did,
                                 "vector": [float(x) for x in row]}) + "\n")


def load_index(path: str | Path, provider: EmbeddingProvider) -> tuple[VectorIndex, dict]:
    """Load a JSONL index sidecar, checking provider name and dimension against ``provider``."""
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != INDEX_FORMAT:
            raise ConfigurationError(f"{path}: not a {INDEX_FORMAT} file")
        if header["provider"] != provider.name or header["dim"] != provider.dim:
            raise DimensionMismatchError(
                f"{path}: index built with {header['provider']} (dim {header['dim']}), "
                f"current provider is {provider.name} (dim {provider.dim})")
        ids, doc_ids, rows = [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            ids.append(rec["chunk_id"])
            doc_ids.append(rec["doc_id"])
            rows.append(rec["vector"])
    matrix = np.asarray(rows, dtype=np.float64).reshape(len(rows), header["dim"])
    index = VectorIndex(ids=tuple(ids), matrix=matrix, dim=header["dim"],
                        provider_name=header["provider"], doc_ids=tuple(doc_ids))
    return index, header
