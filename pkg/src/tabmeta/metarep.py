"""Nearest-neighbor meta-representations.

An instance is described, per class context (classification) or once
(regression), by the ascending distances to its K nearest neighbors
interleaved with label slots::

    [d_1, y_1, d_2, y_2, ..., d_K, y_K]

Classification label slots are the constant 1; regression slots carry the
standardized neighbor targets.  A context with fewer than K members repeats
its last (distance, label) pair.  Several distance kinds are concatenated
per context, and distances can be divided by the largest distance the
instance sees under each kind.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import CLASSIFICATION, EncodedDataset
from .errors import EmptyContext
from .metric import MetricSpec, distances_to, pairwise_distances

DEFAULT_K = {"classification": 128, "regression": 16}
DEFAULT_KINDS = {
    "classification": ("manhattan", "euclidean", "braycurtis"),
    "regression": ("manhattan",),
}


@dataclass(frozen=True)
class NeighborList:
    indices: np.ndarray
    distances: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class MetaRep:
    """Meta-representation of one instance.

    ``blocks`` has one row per context and ``len(kinds) * 2K`` columns.
    """

    blocks: np.ndarray
    K: int
    kinds: tuple[str, ...]

    @property
    def contexts(self) -> int:
        return self.blocks.shape[0]

    @property
    def values(self) -> np.ndarray:
        return self.blocks.reshape(-1)

    def block(self, context: int, kind: int = 0) -> np.ndarray:
        width = 2 * self.K
        return self.blocks[context, kind * width:(kind + 1) * width]


def input_dim(K: int, n_kinds: int) -> int:
    return 2 * K * n_kinds


def _reference_ids(dataset: EncodedDataset, subset) -> np.ndarray:
    if subset is None:
        return np.arange(dataset.n, dtype=np.int64)
    return np.asarray(subset, dtype=np.int64)


def query_topk(query, dataset: EncodedDataset, spec: MetricSpec, K: int, subset=None, exclude=None) -> NeighborList:
    """Exact K nearest rows of ``dataset`` (restricted to ``subset``).

    Ties are broken by ascending row index; ``exclude`` drops one row id.
    """
    ids = _reference_ids(dataset, subset)
    if exclude is not None:
        ids = ids[ids != exclude]
    if len(ids) == 0:
        raise EmptyContext("reference context is empty")
    dist = distances_to(query, dataset.X[ids], spec)
    k = min(K, len(ids))
    if k < len(ids):
        kth = np.partition(dist, k - 1)[k - 1]
        cand = np.flatnonzero(dist <= kth)
    else:
        cand = np.arange(len(ids))
    order = cand[np.lexsort((ids[cand], dist[cand]))][:k]
    return NeighborList(ids[order], dist[order], dataset.Y[ids[order]])


def _interleave(dist: np.ndarray, labels: np.ndarray, K: int) -> np.ndarray:
    m = len(dist)
    if m < K:
        dist = np.concatenate([dist, np.full(K - m, dist[-1])])
        labels = np.concatenate([labels, np.full(K - m, labels[-1])])
    out = np.empty(2 * K)
    out[0::2] = dist[:K]
    out[1::2] = labels[:K]
    return out


def class_meta_rep(query, dataset: EncodedDataset, c: int, spec: MetricSpec, K: int, exclude=None, subset=None) -> np.ndarray:
    ids = _reference_ids(dataset, subset)
    members = ids[dataset.Y[ids] == c]
    try:
        nb = query_topk(query, dataset, spec, K, subset=members, exclude=exclude)
    except EmptyContext:
        raise EmptyContext(f"class {c} has no reference members") from None
    return _interleave(nb.distances, np.ones(len(nb)), K)


def regression_meta_rep(query, dataset: EncodedDataset, spec: MetricSpec, K: int, exclude=None, subset=None) -> np.ndarray:
    nb = query_topk(query, dataset, spec, K, subset=subset, exclude=exclude)
    return _interleave(nb.distances, np.asarray(nb.labels, dtype=np.float64), K)


def _normalize(blocks: np.ndarray, K: int, n_kinds: int) -> np.ndarray:
    # blocks: (..., contexts, n_kinds * 2K); scale distance slots per kind
    width = 2 * K
    for k in range(n_kinds):
        dist = blocks[..., k * width:(k + 1) * width:2]
        peak = dist.max(axis=(-2, -1), keepdims=True)
        np.divide(dist, peak, out=dist, where=peak > 0)
        blocks[..., k * width:(k + 1) * width:2] = dist
    return blocks


def full_meta_rep(
    query,
    dataset: EncodedDataset,
    specs: Sequence[MetricSpec],
    K: int,
    exclude=None,
    subset=None,
    normalize: bool = True,
) -> MetaRep:
    """Meta-representation of one query over every context and kind."""
    kinds = tuple(s.kind for s in specs)
    if dataset.task == CLASSIFICATION:
        rows = [
            np.concatenate([class_meta_rep(query, dataset, c, s, K, exclude, subset) for s in specs])
            for c in range(dataset.n_classes)
        ]
    else:
        rows = [np.concatenate([regression_meta_rep(query, dataset, s, K, exclude, subset) for s in specs])]
    blocks = np.vstack(rows)
    if normalize:
        blocks = _normalize(blocks, K, len(specs))
    return MetaRep(blocks, K, kinds)


def _topk_sorted(D: np.ndarray, ref_ids: np.ndarray, K: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise K smallest entries of D with ties broken by ``ref_ids``.

    Returns (positions, distances); positions past a row's finite entries
    hold the padding copy of the last finite one.
    """
    n = D.shape[1]
    # ref_ids are ascending, so a stable sort on distance breaks ties by id
    order = np.argsort(D, axis=1, kind="stable")[:, :K]
    dist = np.take_along_axis(D, order, axis=1)
    valid = np.isfinite(D).sum(axis=1)
    if np.any(valid == 0):
        raise EmptyContext("a query has no reference members after exclusion")
    k = min(K, n)
    last = np.minimum(valid, k) - 1
    pad_pos = np.take_along_axis(order, last[:, None], axis=1)
    pad_dist = np.take_along_axis(dist, last[:, None], axis=1)
    slot = np.arange(k)[None, :]
    beyond = slot > last[:, None]
    order = np.where(beyond, pad_pos, order)
    dist = np.where(beyond, pad_dist, dist)
    if k < K:
        order = np.concatenate([order, np.repeat(order[:, -1:], K - k, axis=1)], axis=1)
        dist = np.concatenate([dist, np.repeat(dist[:, -1:], K - k, axis=1)], axis=1)
    return order, dist


def build_meta_batch(
    queries: np.ndarray,
    dataset: EncodedDataset,
    specs: Sequence[MetricSpec],
    K: int,
    subset=None,
    exclude=None,
    normalize: bool = True,
    dtype=np.float64,
    chunk: int = 256,
) -> np.ndarray:
    """Meta-representations for many queries at once.

    Returns an array of shape (len(queries), contexts, len(specs) * 2K).
    ``exclude`` is an optional per-query row id (or -1 for none) removed
    from that query's reference set.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    ids = np.sort(_reference_ids(dataset, subset))
    X_ref = dataset.X[ids]
    Y_ref = dataset.Y[ids]
    is_cls = dataset.task == CLASSIFICATION
    contexts = dataset.n_classes if is_cls else 1
    width = 2 * K
    out = np.empty((len(queries), contexts, width * len(specs)), dtype=dtype)
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=np.int64)
        if exclude.shape != (len(queries),):
            raise ValueError("exclude must hold one row id per query")

    if is_cls:
        members = [np.flatnonzero(Y_ref == c) for c in range(contexts)]
        for c, pos in enumerate(members):
            if len(pos) == 0:
                raise EmptyContext(f"class {c} has no reference members")
    else:
        members = [np.arange(len(ids))]

    for start in range(0, len(queries), chunk):
        stop = min(start + chunk, len(queries))
        block = np.empty((stop - start, contexts, width * len(specs)))
        for s_i, spec in enumerate(specs):
            D = pairwise_distances(queries[start:stop], X_ref, spec)
            if exclude is not None:
                excl = exclude[start:stop]
                hit = np.searchsorted(ids, excl)
                hit_ok = (hit < len(ids)) & (ids[np.minimum(hit, len(ids) - 1)] == excl)
                rows = np.flatnonzero(hit_ok)
                D[rows, hit[rows]] = np.inf
            for c, pos in enumerate(members):
                try:
                    order, dist = _topk_sorted(D[:, pos], ids[pos], K)
                except EmptyContext:
                    raise EmptyContext(f"context {c} is empty after exclusion") from None
                lo = s_i * width
                block[:, c, lo:lo + width:2] = dist
                if is_cls:
                    block[:, c, lo + 1:lo + width:2] = 1.0
                else:
                    block[:, c, lo + 1:lo + width:2] = Y_ref[pos][order]
        if normalize:
            block = _normalize(block, K, len(specs))
        out[start:stop] = block
    return out
