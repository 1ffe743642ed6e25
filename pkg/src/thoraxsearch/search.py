"""Exact Euclidean k-NN over an in-memory archive, plus vote-based classification.

The index keeps rows in id-sorted order (canonical), so results never depend
on input file ordering.  Distances are computed per row in float64 as
``sum((row - query)^2)`` with a fixed reduction, squared internally and
square-rooted only for reporting.  Ties at equal distance break by ascending
id, which the canonical row order turns into a plain stable sort.  The
archive is scanned in fixed-size blocks; per-block top-k candidates are
merged with the same (distance, row) ordering, so results are identical for
any block size and worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .datamodel import DatasetManifest, FeatureConfig, FeatureMatrix, FeatureVector
from .errors import ValidationError

DEFAULT_BLOCK_SIZE = 8192


@dataclass(frozen=True)
class SearchIndex:
    ids: tuple[str, ...]
    labels: np.ndarray   # (count,) int8
    matrix: np.ndarray   # (count, dim) float32, rows in id order
    config: FeatureConfig

    def __post_init__(self):
        if not (len(self.ids) == len(self.labels) == self.matrix.shape[0]):
            raise ValidationError("ids, labels, and matrix rows must align")
        object.__setattr__(self, "_row_of", {rid: i for i, rid in enumerate(self.ids)})
        # Distances are computed in float64; cast once, not per query.
        object.__setattr__(self, "_matrix64",
                           np.ascontiguousarray(self.matrix, dtype=np.float64))

    def row_of(self, record_id: str) -> int:
        return self._row_of.get(record_id, -1)

    @property
    def matrix64(self) -> np.ndarray:
        return self._matrix64

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self):
        return len(self.ids)


@dataclass(frozen=True)
class NeighborSet:
    """Top-k retrieval result with the positive-vote likelihood m/k."""

    query_id: str
    k: int
    hits: tuple[tuple[str, float, int], ...]  # (record_id, distance, label)
    vote_m: int
    likelihood: float
    truncated: bool  # archive had fewer than k eligible rows


def build_index(features: FeatureMatrix, manifest: DatasetManifest) -> SearchIndex:
    """Attach manifest labels and put rows into canonical id-sorted order."""
    labels_by_id = manifest.labels_by_id()
    missing = [rid for rid in features.ids if rid not in labels_by_id]
    if missing:
        raise ValidationError(f"store ids missing from manifest: {missing[:5]!r}"
                              + (" ..." if len(missing) > 5 else ""))
    order = np.argsort(np.asarray(features.ids))
    ids = tuple(features.ids[i] for i in order)
    matrix = np.ascontiguousarray(features.matrix[order], dtype=np.float32)
    labels = np.array([labels_by_id[rid] for rid in ids], dtype=np.int8)
    return SearchIndex(ids=ids, labels=labels, matrix=matrix, config=features.config)


def _squared_distances(rows: np.ndarray, query64: np.ndarray) -> np.ndarray:
    if rows.dtype != np.float64:
        rows = rows.astype(np.float64)
    return np.sum((rows - query64) ** 2, axis=1)


def _block_candidates(matrix, query64, start, stop, keep):
    d2 = _squared_distances(matrix[start:stop], query64)
    if d2.size > keep:
        # Keep everything up to and including the keep-th distance so that
        # boundary ties survive into the merge (the id tie-break needs them).
        kth = np.partition(d2, keep - 1)[keep - 1]
        sel = np.flatnonzero(d2 <= kth)
    else:
        sel = np.arange(d2.size)
    return d2[sel], sel + start


def _select_topk(d2: np.ndarray, rows: np.ndarray, k: int):
    order = np.lexsort((rows, d2))[:k]
    return d2[order], rows[order]


def knn(index: SearchIndex, query: np.ndarray, k: int, *, query_id: str = "",
        exclude_query: bool = True, block_size: int = DEFAULT_BLOCK_SIZE,
        threads: int = 1) -> NeighborSet:
    """Exact top-k by Euclidean distance, ties broken by ascending id.

    ``query`` may be a raw vector or a FeatureVector (whose record_id then
    doubles as ``query_id``).  A row whose id equals ``query_id`` is excluded
    when ``exclude_query`` is set (leave-one-out safety when querying the
    archive with its own members).
    """
    if isinstance(query, FeatureVector):
        query_id = query_id or query.record_id
        query = query.values
    if len(index) == 0:
        raise ValidationError("empty index")
    if k < 1:
        raise ValidationError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.size != index.dim:
        raise ValidationError(f"query dim {q.size} != index dim {index.dim}")

    self_row = index.row_of(query_id) if (exclude_query and query_id) else -1

    # One extra candidate per block absorbs a possible self-match.
    keep = min(k + 1, len(index))
    starts = range(0, len(index), block_size)
    if threads > 1 and len(index) > block_size:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(
                lambda s: _block_candidates(index.matrix64, q, s, s + block_size, keep),
                starts))
    else:
        parts = [_block_candidates(index.matrix64, q, s, s + block_size, keep)
                 for s in starts]
    d2 = np.concatenate([p[0] for p in parts])
    rows = np.concatenate([p[1] for p in parts])
    if self_row >= 0:
        mask = rows != self_row
        d2, rows = d2[mask], rows[mask]
    if rows.size == 0:
        raise ValidationError("no eligible archive rows for this query")
    d2, rows = _select_topk(d2, rows, k)

    hits = tuple((index.ids[r], float(np.sqrt(d)), int(index.labels[r]))
                 for d, r in zip(d2, rows))
    vote_m = int(sum(label for _, _, label in hits))
    return NeighborSet(query_id=query_id, k=k, hits=hits, vote_m=vote_m,
                       likelihood=vote_m / len(hits), truncated=len(hits) < k)


def knn_batch(index: SearchIndex, queries: np.ndarray, k: int, *, query_ids=None,
              exclude_query: bool = True, block_size: int = DEFAULT_BLOCK_SIZE,
              threads: int = 1) -> list[NeighborSet]:
    """knn over query rows; parallelises across queries, result order fixed."""
    queries = np.atleast_2d(np.asarray(queries))
    if query_ids is None:
        query_ids = [""] * queries.shape[0]
    if len(query_ids) != queries.shape[0]:
        raise ValidationError("query_ids must align with query rows")

    def one(i):
        return knn(index, queries[i], k, query_id=query_ids[i],
                   exclude_query=exclude_query, block_size=block_size, threads=1)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(queries.shape[0])))
    return [one(i) for i in range(queries.shape[0])]


def vote(neighbors: NeighborSet) -> float:
    """Positive-vote likelihood m/k (m over the actual hit count if truncated)."""
    if not neighbors.hits:
        raise ValidationError("empty neighbor set")
    m = sum(label for _, _, label in neighbors.hits)
    return m / len(neighbors.hits)


def classify(likelihood: float, threshold: float) -> int:
    """Positive iff likelihood >= threshold (inclusive rule)."""
    if not (0.0 <= threshold <= 1.0):
        raise ValidationError(f"threshold must lie in [0, 1], got {threshold}")
    return 1 if likelihood >= threshold else 0
