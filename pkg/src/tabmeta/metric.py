"""Mutual-information attribute weights and weighted distances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch

KINDS = ("manhattan", "euclidean", "braycurtis", "canberra", "cosine", "chebyshev")


@dataclass(frozen=True)
class MiConfig:
    bins: int = 16
    min_samples_per_bin: int = 1

    def __post_init__(self):
        if self.bins < 2:
            raise ValueError("bins must be >= 2")


@dataclass(frozen=True, eq=False)
class MetricSpec:
    """A distance kind with per-attribute weights.

    ``uniform_fallback`` marks weights set to 1/d because the attributes
    carried no measurable information about the label.
    """

    kind: str
    weights: np.ndarray
    uniform_fallback: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}; expected one of {KINDS}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be a finite nonnegative vector")
        object.__setattr__(self, "weights", w)

    @property
    def d(self) -> int:
        return len(self.weights)

    @classmethod
    def uniform(cls, kind: str, d: int) -> "MetricSpec":
        return cls(kind, np.full(d, 1.0 / d), uniform_fallback=True)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricSpec":
        return cls(doc["kind"], np.asarray(doc["weights"], dtype=np.float64))

    def __eq__(self, other):
        return (
            isinstance(other, MetricSpec)
            and self.kind == other.kind
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def _quantile_bins(values: np.ndarray, bins: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    interior = np.quantile(values, np.linspace(0.0, 1.0, bins + 1)[1:-1])
    edges = np.unique(interior)
    return np.searchsorted(edges, values, side="right")


def _plugin_mi(a: np.ndarray, b: np.ndarray) -> float:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    na, nb = ai.max() + 1, bi.max() + 1
    if na == 1 or nb == 1:
        return 0.0
    joint = np.zeros((na, nb))
    np.add.at(joint, (ai, bi), 1.0)
    joint /= joint.sum()
    pa = joint.sum(axis=1, keepdims=True)
    pb = joint.sum(axis=0, keepdims=True)
    nz = joint > 0
    mi = float(np.sum(joint[nz] * np.log(joint[nz] / (pa @ pb)[nz])))
    return max(mi, 0.0)


def mutual_information(column, labels, task: str = "classification", cfg: MiConfig = MiConfig()) -> float:
    """Plug-in MI estimate (nats) between one attribute and the labels.

    Continuous values go into ``cfg.bins`` equal-frequency bins; class
    labels are used as-is and regression targets are binned the same way.
    """
    column = np.asarray(column, dtype=np.float64)
    labels = np.asarray(labels)
    if len(column) != len(labels):
        raise DimensionMismatch("column and labels differ in length")
    if len(column) < 2:
        raise ValueError("mutual information needs at least 2 samples")
    xb = _quantile_bins(column, cfg.bins)
    yb = labels if task == "classification" else _quantile_bins(labels, cfg.bins)
    return _plugin_mi(xb, yb)


def _mi_weights(X, Y, task, cfg) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    mi = np.array([mutual_information(X[:, j], Y, task, cfg) for j in range(X.shape[1])])
    total = mi.sum()
    if total < 1e-12:
        return np.full(X.shape[1], 1.0 / X.shape[1]), True
    return mi / total, False


def attribute_weights(X, Y, task: str = "classification", cfg: MiConfig = MiConfig()) -> np.ndarray:
    """MI of each column with the labels, normalized to sum to one.

    Falls back to uniform 1/d weights when the total MI is below 1e-12.
    """
    return _mi_weights(X, Y, task, cfg)[0]


def metric_specs(X, Y, task: str, kinds, cfg: MiConfig = MiConfig()) -> list[MetricSpec]:
    """One MetricSpec per kind, all sharing the MI weights of (X, Y)."""
    w, fallback = _mi_weights(X, Y, task, cfg)
    return [MetricSpec(k, w, uniform_fallback=fallback) for k in kinds]


def _check(spec: MetricSpec, d: int):
    if d != spec.d:
        raise DimensionMismatch(f"vectors have dimension {d}, metric weights have {spec.d}")


def weighted_distance(a, b, spec: MetricSpec) -> float:
    """Distance between two encoded instances under ``spec``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    _check(spec, a.shape[0])
    return float(distances_to(a, b[None, :], spec)[0])


def distances_to(query, reference, spec: MetricSpec) -> np.ndarray:
    """Distances from one query vector to every row of ``reference``."""
    query = np.asarray(query, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.ndim != 2 or query.shape != (reference.shape[1],):
        raise DimensionMismatch(f"query {query.shape} vs reference {reference.shape}")
    _check(spec, query.shape[0])
    return _kernel(query[None, None, :], reference[None, :, :], spec)[0]


def pairwise_distances(A, B, spec: MetricSpec, chunk_bytes: int = 1 << 26) -> np.ndarray:
    """Full (len(A), len(B)) distance matrix, evaluated in row chunks."""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"shapes {A.shape} and {B.shape} are incompatible")
    _check(spec, A.shape[1])
    out = np.empty((A.shape[0], B.shape[0]))
    rows = max(1, chunk_bytes // (8 * max(1, B.shape[0] * max(1, B.shape[1]))))
    for start in range(0, A.shape[0], rows):
        stop = start + rows
        out[start:stop] = _kernel(A[start:stop, None, :], B[None, :, :], spec)
    return out


def _kernel(a: np.ndarray, b: np.ndarray, spec: MetricSpec) -> np.ndarray:
    # a: (m, 1, d), b: (1, n, d); reductions run over the contiguous last axis
    w = spec.weights
    kind = spec.kind
    if kind == "manhattan":
        return (w * np.abs(a - b)).sum(axis=-1)
    if kind == "euclidean":
        diff = a - b
        return np.sqrt((w * (diff * diff)).sum(axis=-1))
    if kind == "chebyshev":
        if len(w) == 0:
            return np.zeros(np.broadcast_shapes(a.shape, b.shape)[:-1])
        return (w * np.abs(a - b)).max(axis=-1)
    if kind == "braycurtis":
        num = (w * np.abs(a - b)).sum(axis=-1)
        den = (w * np.abs(a + b)).sum(axis=-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    if kind == "canberra":
        num = np.abs(a - b)
        den = np.abs(a) + np.abs(b)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        return (w * term).sum(axis=-1)
    if kind == "cosine":
        dot = (w * (a * b)).sum(axis=-1)
        sa = (w * (a * a)).sum(axis=-1)
        sb = (w * (b * b)).sum(axis=-1)
        # sqrt(sa * sa) == sa exactly, so dist(a, a) is exactly 0
        norm = np.sqrt(sa * sb)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.where(norm > 0, 1.0 - dot / np.where(norm > 0, norm, 1.0), 0.0)
        return np.maximum(dist, 0.0)
    raise ValueError(f"unknown distance kind {kind!r}")
