"""Baselines, metrics, synthetic corpora and experiment protocols."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .data import (
    CLASSIFICATION,
    NUMERICAL,
    REGRESSION,
    Column,
    DatasetSchema,
    EncodedDataset,
    RawTable,
    SplitIndices,
    prepare,
    sample_few_shot,
    split,
    table_from_columns,
)
from .errors import ConfigError, EmptyContext, LengthMismatch
from .metarep import query_topk
from .metric import MetricSpec, pairwise_distances
from .trainer import (
    CorpusMember,
    PretrainCorpus,
    TrainConfig,
    finetune,
    make_member,
    predict_batch,
    pretrain,
)

METHODS = ("metarep-direct", "metarep-finetuned", "knn-uniform", "knn-softmax", "majority", "mean")
WEIGHTINGS = ("uniform", "softmax")


def _softmax_neg(dist: np.ndarray) -> np.ndarray:
    z = -(dist - dist.min(axis=-1, keepdims=True))
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _vote(dist, labels, n_classes, weighting) -> int:
    w = np.ones(len(dist)) if weighting == "uniform" else _softmax_neg(np.asarray(dist))
    votes = np.bincount(np.asarray(labels, dtype=np.int64), weights=w, minlength=n_classes)
    return int(np.argmax(votes))


def knn_predict(query, reference: EncodedDataset, spec: MetricSpec, K: int, task: str,
                weighting: str = "uniform", subset=None):
    """K-nearest-neighbor prediction for one query.

    ``uniform`` votes (or averages) equally; ``softmax`` weights the K
    retrieved neighbors by softmax of their negative distances.
    """
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    nb = query_topk(query, reference, spec, K, subset=subset)
    if task == CLASSIFICATION:
        return _vote(nb.distances, nb.labels, reference.n_classes, weighting)
    y = np.asarray(nb.labels, dtype=np.float64)
    if weighting == "uniform":
        return float(y.mean())
    return float(_softmax_neg(nb.distances) @ y)


def knn_predict_batch(X, reference: EncodedDataset, spec: MetricSpec, K: int, task: str,
                      weighting: str = "uniform", subset=None) -> np.ndarray:
    """Vectorized :func:`knn_predict` over the rows of X."""
    if weighting not in WEIGHTINGS:
        raise ValueError(f"weighting must be one of {WEIGHTINGS}")
    ids = np.sort(np.arange(reference.n) if subset is None else np.asarray(subset, dtype=np.int64))
    if len(ids) == 0:
        raise EmptyContext("kNN reference set is empty")
    D = pairwise_distances(X, reference.X[ids], spec)
    k = min(K, len(ids))
    order = np.argsort(D, axis=1, kind="stable")[:, :k]
    dist = np.take_along_axis(D, order, axis=1)
    labels = reference.Y[ids][order]
    w = np.ones_like(dist) if weighting == "uniform" else _softmax_neg(dist)
    if task == CLASSIFICATION:
        votes = np.zeros((len(X), reference.n_classes))
        np.add.at(votes, (np.repeat(np.arange(len(X)), k), labels.reshape(-1)), w.reshape(-1))
        return np.argmax(votes, axis=1)
    return (w * labels).sum(axis=1) / w.sum(axis=1)


def metrics(preds, truths, task: str) -> float:
    """Accuracy for classification, RMSE for regression."""
    preds = np.asarray(preds)
    truths = np.asarray(truths)
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{len(preds)} predictions for {len(truths)} targets")
    if len(preds) == 0:
        raise LengthMismatch("no predictions")
    if task == CLASSIFICATION:
        return float(np.mean(preds == truths))
    diff = preds.astype(np.float64) - truths.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


def average_rank(table, direction: str = "higher") -> np.ndarray:
    """Mean per-row rank of each column (1 = best, ties share the mean rank)."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2:
        raise ValueError("table must be datasets x methods")
    if np.isnan(table).any():
        raise ValueError("table has missing cells")
    if direction not in ("higher", "lower"):
        raise ValueError("direction must be 'higher' or 'lower'")
    signed = -table if direction == "higher" else table
    ranks = np.vstack([rankdata(row, method="average") for row in signed])
    return ranks.mean(axis=0)


# -- synthetic corpora -------------------------------------------------------

@dataclass
class SyntheticSuite:
    task: str
    pretrain_tables: list[RawTable]
    heldout: list[RawTable]
    corpus: PretrainCorpus | None = None


def _one_nn_beats_majority(X, y, seed) -> bool:
    idx = split(y, seed=seed, task=CLASSIFICATION)
    Xtr, ytr = X[idx.train], y[idx.train]
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd[sd == 0] = 1.0
    Z = (X - mu) / sd
    ref = EncodedDataset(Z, y, CLASSIFICATION, int(y.max()) + 1)
    spec = MetricSpec.uniform("euclidean", X.shape[1])
    pred = knn_predict_batch(Z[idx.test], ref, spec, 1, CLASSIFICATION, subset=idx.train)
    acc = np.mean(pred == y[idx.test])
    majority = np.bincount(y[idx.test]).max() / len(idx.test)
    return acc > majority


def _make_classification(rng, name, dims, classes, sizes) -> RawTable:
    while True:
        d = int(rng.integers(dims[0], dims[1] + 1))
        C = int(rng.integers(classes[0], classes[1] + 1))
        N = int(rng.integers(sizes[0], sizes[1] + 1))
        n_inf = max(2, int(math.ceil(d * rng.uniform(0.4, 1.0))))
        n_inf = min(n_inf, d)
        means = rng.normal(size=(C, n_inf))
        gaps = [np.linalg.norm(means[i] - means[j]) for i in range(C) for j in range(i + 1, C)]
        # rescale so the closest pair of class means is 4-6 within-class stddevs apart
        means *= rng.uniform(4.0, 6.0) / min(gaps)
        props = 0.8 / C + 0.2 * rng.dirichlet(np.full(C, 8.0))
        counts = np.floor(props * N).astype(int)
        counts[: N - counts.sum()] += 1
        y = np.repeat(np.arange(C), counts)
        X = rng.normal(size=(N, d))
        X[:, :n_inf] += means[y]
        perm_cols = rng.permutation(d)
        X = X[:, perm_cols]
        X = X * rng.lognormal(0.0, 1.0, size=d) + rng.normal(0.0, 5.0, size=d)
        order = rng.permutation(N)
        X, y = X[order], y[order]
        if _one_nn_beats_majority(X, y, int(rng.integers(2**31))):
            break
    schema = DatasetSchema(name, CLASSIFICATION, tuple(Column(f"x{j}", NUMERICAL) for j in range(d)), "label")
    return table_from_columns(schema, {f"x{j}": X[:, j] for j in range(d)}, labels=y)


_SHAPES = (
    lambda x, w: np.sin(w * x),
    lambda x, w: np.tanh(w * x),
    lambda x, w: x * x,
    lambda x, w: np.abs(x),
    lambda x, w: x,
    lambda x, w: np.cos(w * x),
)


def _make_regression(rng, name, dims, sizes) -> RawTable:
    d = int(rng.integers(dims[0], dims[1] + 1))
    N = int(rng.integers(sizes[0], sizes[1] + 1))
    n_inf = min(d, max(1, int(round(d * rng.uniform(0.3, 0.8)))))
    X = rng.normal(size=(N, d))
    inf_cols = rng.choice(d, size=n_inf, replace=False)
    signal = np.zeros(N)
    for j in inf_cols:
        shape = _SHAPES[int(rng.integers(len(_SHAPES)))]
        signal += rng.uniform(0.5, 2.0) * rng.choice([-1.0, 1.0]) * shape(X[:, j], rng.uniform(0.5, 2.0))
    y = signal + rng.normal(0.0, 0.1 * signal.std(), size=N)
    y = rng.normal(0.0, 100.0) + 10.0 ** rng.uniform(-1, 3) * y
    X = X * rng.lognormal(0.0, 1.0, size=d) + rng.normal(0.0, 5.0, size=d)
    schema = DatasetSchema(name, REGRESSION, tuple(Column(f"x{j}", NUMERICAL) for j in range(d)), "target")
    return table_from_columns(schema, {f"x{j}": X[:, j] for j in range(d)}, labels=y)


def make_synthetic_corpus(task: str, T: int = 8, seed: int = 0, dims=(4, 20), classes=(2, 5),
                          sizes=(500, 2000), heldout: int = 2, cfg: TrainConfig | None = None) -> SyntheticSuite:
    """Generate T pre-training tables plus ``heldout`` downstream tables.

    Classification tables are Gaussian mixtures whose closest class means
    sit at least 4 within-class stddevs apart; regression targets are sums
    of smooth per-coordinate terms with noise at 0.1 of the signal stddev.
    With ``cfg`` given, the pre-training tables are also split, encoded and
    wrapped into a PretrainCorpus.
    """
    if T < 1 or dims[0] < 1 or dims[0] > dims[1] or sizes[0] > sizes[1] or sizes[0] < 5:
        raise ConfigError("degenerate synthetic corpus ranges")
    if task == CLASSIFICATION and (classes[0] < 2 or classes[0] > classes[1]):
        raise ConfigError("classes range must start at 2")
    rngs = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(T + heldout)]
    tables = []
    for i, rng in enumerate(rngs):
        name = f"{'cls' if task == CLASSIFICATION else 'reg'}-{seed}-{i}"
        if task == CLASSIFICATION:
            tables.append(_make_classification(rng, name, dims, classes, sizes))
        else:
            tables.append(_make_regression(rng, name, dims, sizes))
    suite = SyntheticSuite(task, tables[:T], tables[T:])
    if cfg is not None:
        suite.corpus = build_corpus(suite.pretrain_tables, cfg, split_seed=seed)
    return suite


def build_corpus(tables: Sequence[RawTable], cfg: TrainConfig, split_seed: int = 0) -> PretrainCorpus:
    members = []
    for table in tables:
        ds, sp = prepare(table, seed=split_seed)
        members.append(make_member(ds, sp, cfg.kind_list, cfg.mi_bins))
    return PretrainCorpus(members, cfg.task)


# -- protocol ----------------------------------------------------------------

@dataclass
class ExperimentReport:
    task: str
    methods: list[str]
    records: list[dict] = field(default_factory=list)
    seeds: list[int] = field(default_factory=list)
    shots: list[int] | None = None

    @property
    def metric_name(self) -> str:
        return "accuracy" if self.task == CLASSIFICATION else "rmse"

    @property
    def direction(self) -> str:
        return "higher" if self.task == CLASSIFICATION else "lower"

    def table(self) -> tuple[list[tuple[str, str]], np.ndarray]:
        """Rows keyed by (dataset, shot); cells average over seeds and repeats."""
        keys = list(dict.fromkeys((r["dataset"], r["shot"]) for r in self.records))
        cells = np.full((len(keys), len(self.methods)), np.nan)
        for i, key in enumerate(keys):
            for j, m in enumerate(self.methods):
                vals = [r["value"] for r in self.records if (r["dataset"], r["shot"]) == key and r["method"] == m]
                if vals:
                    cells[i, j] = float(np.mean(vals))
        return keys, cells

    def average_ranks(self) -> dict[str, float]:
        _, cells = self.table()
        ranks = average_rank(cells, self.direction)
        return {m: float(r) for m, r in zip(self.methods, ranks)}

    def values(self, dataset: str, method: str, shot="full") -> list[float]:
        return [r["value"] for r in self.records
                if r["dataset"] == dataset and r["method"] == method and r["shot"] == shot]

    def write_csv(self, path) -> None:
        cols = ["dataset", "method", "shot", "seed", "repeat", "metric", "value"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(cols)
            for r in self.records:
                writer.writerow([r["dataset"], r["method"], r["shot"], r["seed"], r["repeat"],
                                 self.metric_name, repr(float(r["value"]))])

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.average_ranks(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _constant_prediction(ds: EncodedDataset, ref: np.ndarray, n: int) -> np.ndarray:
    if ds.task == CLASSIFICATION:
        return np.full(n, int(np.argmax(np.bincount(ds.Y[ref], minlength=ds.n_classes))))
    mean = float(ds.Y[ref].mean())
    out = np.full(n, mean)
    return ds.stats.destandardize(out) if ds.stats is not None else out


def _truths(table: RawTable, ds: EncodedDataset, rows) -> np.ndarray:
    if ds.task == CLASSIFICATION:
        return ds.Y[rows]
    return np.asarray(table.labels, dtype=np.float64)[rows]


def evaluate_methods(table: RawTable, ds: EncodedDataset, reference: np.ndarray, test: np.ndarray,
                     methods: Sequence[str], cfg: TrainConfig, params=None, knn_k: int | None = None,
                     finetune_seed: int = 0) -> dict[str, float]:
    """Score every method on ``test`` with ``reference`` as the labeled set."""
    sp = SplitIndices(reference, np.array([], dtype=np.int64), test)
    member = make_member(ds, sp, cfg.kind_list, cfg.mi_bins)
    truths = _truths(table, ds, test)
    Xq = ds.X[test]
    k = knn_k if knn_k is not None else cfg.k
    out = {}
    for method in methods:
        if method == "metarep-direct":
            pred = predict_batch(params, ds, reference, member.specs, cfg, Xq)
        elif method == "metarep-finetuned":
            tuned = finetune(params, member, dataclasses.replace(cfg, seed=finetune_seed))
            pred = predict_batch(tuned, ds, reference, member.specs, cfg, Xq)
        elif method in ("knn-uniform", "knn-softmax"):
            pred = knn_predict_batch(Xq, ds, member.specs[0], k, ds.task, method.split("-")[1], subset=reference)
            if ds.task == REGRESSION and ds.stats is not None:
                pred = ds.stats.destandardize(pred)
        elif method in ("majority", "mean"):
            pred = _constant_prediction(ds, reference, len(test))
        else:
            raise ConfigError(f"unknown method {method!r}; valid methods: {', '.join(METHODS)}")
        out[method] = metrics(pred, truths, ds.task)
    return out


def check_methods(methods: Sequence[str]) -> list[str]:
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown method {bad[0]!r}; valid methods: {', '.join(METHODS)}")
    if not methods:
        raise ConfigError("no methods requested")
    return list(methods)


def _sub_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def run_protocol(corpus: PretrainCorpus | None, downstream: Sequence[RawTable], methods: Sequence[str],
                 cfg: TrainConfig, shots: Sequence[int] | None = None, seeds: Sequence[int] = (0, 1, 2),
                 params=None, repeats: int = 5, knn_k: int | None = None) -> ExperimentReport:
    """Evaluate methods on downstream tables, full-shot or per shot count.

    The scorer is pre-trained on ``corpus`` once unless ``params`` is given.
    Each seed draws its own 64/16/20 split; each few-shot setting is
    repeated ``repeats`` times.
    """
    methods = check_methods(methods)
    needs_scorer = any(m.startswith("metarep") for m in methods)
    if needs_scorer and params is None:
        if corpus is None:
            raise ConfigError("metarep methods need a pre-training corpus or a checkpoint")
        params = pretrain(corpus, cfg)
    report = ExperimentReport(cfg.task, methods, seeds=list(seeds), shots=list(shots) if shots else None)
    for table in downstream:
        if table.schema.task != cfg.task:
            raise ConfigError(f"{table.schema.name}: task {table.schema.task} does not match {cfg.task}")
        for seed in seeds:
            ds, sp = prepare(table, seed=seed)
            if not shots:
                cells = [("full", 0, sp.train)]
            else:
                if cfg.task != CLASSIFICATION:
                    raise ConfigError("few-shot protocols apply to classification only")
                cells = [
                    (shot, rep, sample_few_shot(sp.train, ds.Y, shot, _sub_seed(seed, shot, rep)))
                    for shot in shots for rep in range(repeats)
                ]
            for shot, rep, reference in cells:
                scores = evaluate_methods(table, ds, reference, sp.test, methods, cfg, params, knn_k,
                                          finetune_seed=_sub_seed(cfg.seed, seed, rep))
                for method in methods:
                    report.records.append({
                        "dataset": table.schema.name, "method": method, "shot": shot,
                        "seed": seed, "repeat": rep, "value": scores[method],
                    })
    return report
