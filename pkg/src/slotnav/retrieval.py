"""Exact text-to-image retrieval over unit-norm embedding tables."""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .encoder import Embedding

Array = np.ndarray

MAGIC = b"LZE1"


# ----------------------------------------------------------------------
# Domain types

@dataclass(frozen=True)
class EmbeddingIndex:
    """Immutable table of unit-norm rows addressed by stable string ids."""

    matrix: Array
    ids: tuple[str, ...]

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise ValueError("index matrix must be 2-d")
        if matrix.shape[0] != len(self.ids):
            raise ValueError("row count does not match id count")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("index ids must be unique")
        norms = np.linalg.norm(matrix, axis=1)
        if matrix.shape[0] and not np.all(np.abs(norms - 1.0) <= 1e-6):
            raise ValueError("index rows must be unit norm within 1e-6")
        matrix.flags.writeable = False
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "ids", tuple(self.ids))

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, item_id: str) -> Array:
        return self.matrix[self.ids.index(item_id)]


@dataclass(frozen=True)
class GroundTruth:
    """Per-query sets of relevant item ids; many-to-many is allowed."""

    relevant: Mapping[str, frozenset[str]]

    def for_query(self, query_id: str) -> frozenset[str]:
        return self.relevant.get(query_id, frozenset())


@dataclass(frozen=True)
class RecallReport:
    """Average recall per cutoff plus the per-query hit flags behind it."""

    values: dict[int, float]
    hits: dict[int, dict[str, bool]]

    def __post_init__(self) -> None:
        last = 0.0
        for k in sorted(self.values):
            if not 0.0 <= self.values[k] <= 1.0:
                raise ValueError("average recall must lie in [0, 1]")
            if self.values[k] < last - 1e-12:
                raise ValueError("average recall must be nondecreasing in k")
            last = self.values[k]


# ----------------------------------------------------------------------
# Index construction

def build_index(embeddings: Sequence[Array] | Array,
                ids: Sequence[str]) -> EmbeddingIndex:
    """Stack embeddings into an immutable index, renormalizing each row."""
    rows = np.asarray(embeddings, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows.reshape(1, -1)
    if rows.ndim != 2:
        raise ValueError("embeddings must stack into a 2-d matrix")
    if rows.shape[0] != len(ids):
        raise ValueError(f"{rows.shape[0]} embeddings but {len(ids)} ids")
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms <= 0.0) or not np.all(np.isfinite(norms)):
        raise ValueError("every embedding must have positive finite norm")
    return EmbeddingIndex(matrix=rows / norms[:, None],
                          ids=tuple(str(i) for i in ids))


def index_from_embeddings(items: Iterable[tuple[str, Embedding]]) -> EmbeddingIndex:
    """Build an index from (id, embedding) pairs produced by the encoder."""
    pairs = list(items)
    return build_index([e.vector for _, e in pairs], [i for i, _ in pairs])


# ----------------------------------------------------------------------
# Search

def similarity_matrix(queries: EmbeddingIndex, items: EmbeddingIndex) -> Array:
    """Dense cosine similarities, queries along rows and items along columns."""
    if queries.dim != items.dim:
        raise ValueError("query and item dimensions differ")
    return queries.matrix @ items.matrix.T


def _as_vector(query: Embedding | Array, dim: int) -> Array:
    vec = query.vector if isinstance(query, Embedding) else np.asarray(query)
    vec = vec.reshape(-1).astype(np.float64)
    if vec.shape[0] != dim:
        raise ValueError(f"query has dimension {vec.shape[0]}, index has {dim}")
    return vec


def _topk(scores: Array, ids: Sequence[str], k: int) -> list[str]:
    # Ties break toward the lexicographically smaller id so runs are stable.
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))
    return [ids[i] for i in order[:k]]


def topk_images(query: Embedding | Array, index: EmbeddingIndex, k: int) -> list[str]:
    """Ids of the k most similar images, descending similarity."""
    if not 1 <= k <= len(index):
        raise ValueError(f"k must be in [1, {len(index)}], got {k}")
    vec = _as_vector(query, index.dim)
    return _topk(index.matrix @ vec, index.ids, k)


def topk_texts(image: Embedding | Array, texts: EmbeddingIndex, k: int) -> list[str]:
    """Ids of the k most similar texts, descending similarity."""
    return topk_images(image, texts, k)


def batch_topk(queries: EmbeddingIndex, items: EmbeddingIndex,
               k: int) -> dict[str, list[str]]:
    """Top-k item ids for every query row, keyed by query id."""
    if not 1 <= k <= len(items):
        raise ValueError(f"k must be in [1, {len(items)}], got {k}")
    sims = similarity_matrix(queries, items)
    return {qid: _topk(sims[r], items.ids, k)
            for r, qid in enumerate(queries.ids)}


# ----------------------------------------------------------------------
# Metrics

def average_recall(results: Mapping[str, Sequence[str]], gt: GroundTruth,
                   ks: int | Sequence[int]) -> RecallReport:
    """Fraction of queries whose top-k results contain any relevant id."""
    cutoffs = (ks,) if isinstance(ks, int) else tuple(ks)
    if not cutoffs or min(cutoffs) < 1:
        raise ValueError("cutoffs must be positive")
    if not results:
        raise ValueError("no queries to score")
    for qid, ranked in results.items():
        if len(ranked) < max(cutoffs):
            raise ValueError(f"query {qid!r} has fewer than {max(cutoffs)} results")
    missing = sorted(set(results) - set(gt.relevant))
    if missing:
        warnings.warn(f"queries without ground truth counted as misses: {missing}",
                      stacklevel=2)
    values: dict[int, float] = {}
    hits: dict[int, dict[str, bool]] = {}
    for k in cutoffs:
        flags = {qid: bool(gt.for_query(qid) & set(ranked[:k]))
                 for qid, ranked in results.items()}
        hits[k] = flags
        values[k] = sum(flags.values()) / len(flags)
    return RecallReport(values=values, hits=hits)


# ----------------------------------------------------------------------
# File formats

def save_index(index: EmbeddingIndex, path: str) -> None:
    """Write the index: magic, counts, float32 rows, newline-terminated ids."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", len(index), index.dim))
        fh.write(index.matrix.astype("<f4").tobytes(order="C"))
        for item_id in index.ids:
            if "\n" in item_id:
                raise ValueError("ids may not contain newlines")
            fh.write(item_id.encode("utf-8") + b"\n")


def load_index(path: str) -> EmbeddingIndex:
    """Read an index written by save_index, renormalizing the float32 rows."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        payload = fh.read(4 * count * dim)
        if len(payload) != 4 * count * dim:
            raise ValueError("truncated embedding payload")
        rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
        ids = [fh.readline() for _ in range(count)]
    if any(not line.endswith(b"\n") for line in ids):
        raise ValueError("truncated id section")
    return build_index(rows.astype(np.float64),
                       [line[:-1].decode("utf-8") for line in ids])


def save_ground_truth(gt: GroundTruth, path: str) -> None:
    """Write one query_id<tab>image_id line per relevant pair."""
    with open(path, "w", encoding="utf-8") as fh:
        for qid in sorted(gt.relevant):
            for iid in sorted(gt.relevant[qid]):
                fh.write(f"{qid}\t{iid}\n")


def load_ground_truth(path: str, index: EmbeddingIndex | None = None) -> GroundTruth:
    """Read tab-separated relevance pairs, optionally checking ids exist."""
    relevant: dict[str, set[str]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"{path}: line {lineno}: expected query<tab>image")
            relevant.setdefault(parts[0], set()).add(parts[1])
    if index is not None:
        known = set(index.ids)
        for qid, iids in relevant.items():
            unknown = iids - known
            if unknown:
                raise ValueError(f"query {qid!r} references unknown ids {sorted(unknown)}")
    return GroundTruth(relevant={q: frozenset(s) for q, s in relevant.items()})
