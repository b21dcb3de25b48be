"""Loading, encoding and splitting of tabular datasets.

The pipeline is ``load_table -> split -> fit_encoder(train rows) -> encode``.
Splitting only needs the labels, so it runs before any statistics are
fitted and every encoding statistic comes from the training split alone.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateDataset,
    EmptyTable,
    MissingColumn,
    TooFewInstances,
    TypeMismatch,
)

CLASSIFICATION = "classification"
REGRESSION = "regression"
TASKS = (CLASSIFICATION, REGRESSION)

NUMERICAL = "numerical"
CATEGORICAL = "categorical"

MISSING_TOKENS = frozenset({"", "?", "na", "nan", "null", "none"})

DEFAULT_RATIOS = (0.64, 0.16, 0.20)


@dataclass(frozen=True)
class Column:
    name: str
    kind: str

    def __post_init__(self):
        if self.kind not in (NUMERICAL, CATEGORICAL):
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class DatasetSchema:
    """Column layout of one tabular task.

    ``columns`` lists the feature columns only; the label lives in
    ``label_column``.  ``class_count`` may be left as None until the
    labels have been seen.
    """

    name: str
    task: str
    columns: tuple[Column, ...]
    label_column: str
    class_count: int | None = None

    def __post_init__(self):
        if self.task not in TASKS:
            raise DataError(f"unknown task {self.task!r}")
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            raise DataError(f"schema {self.name!r}: duplicate column names")
        if self.label_column in names:
            raise DataError(f"schema {self.name!r}: label {self.label_column!r} listed as a feature")
        if self.class_count is not None:
            if self.task == CLASSIFICATION and self.class_count < 2:
                raise DataError("classification needs class_count >= 2")
            if self.task == REGRESSION and self.class_count != 1:
                raise DataError("regression needs class_count == 1")

    @property
    def feature_names(self) -> list[str]:
        return [c.name for c in self.columns]

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetSchema":
        try:
            label = doc["label"]
            cols = tuple(
                Column(c["name"], c["kind"]) for c in doc["columns"] if c["name"] != label
            )
            return cls(name=doc["name"], task=doc["task"], columns=cols, label_column=label)
        except KeyError as exc:
            raise DataError(f"schema is missing key {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "task": self.task,
            "label": self.label_column,
            "columns": [{"name": c.name, "kind": c.kind} for c in self.columns],
        }


def load_schema(path) -> DatasetSchema:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid schema JSON ({exc})") from None
    return DatasetSchema.from_dict(doc)


@dataclass
class RawTable:
    """Typed cells of one table.

    Numerical features are float arrays with NaN for absent cells,
    categorical features are object arrays of strings.  ``labels`` is None
    for query tables read without a label column.
    """

    schema: DatasetSchema
    features: dict[str, np.ndarray]
    labels: np.ndarray | None
    label_levels: tuple[str, ...] = ()

    @property
    def n_rows(self) -> int:
        if self.features:
            return len(next(iter(self.features.values())))
        return 0 if self.labels is None else len(self.labels)

    def take(self, rows) -> "RawTable":
        rows = np.asarray(rows, dtype=np.intp)
        return RawTable(
            schema=self.schema,
            features={k: v[rows] for k, v in self.features.items()},
            labels=None if self.labels is None else self.labels[rows],
            label_levels=self.label_levels,
        )

    def label_indices(self) -> np.ndarray:
        """Class index per row (classification only)."""
        if self.labels is None:
            raise DataError("table has no labels")
        lookup = {lv: i for i, lv in enumerate(self.label_levels)}
        return np.array([lookup[v] for v in self.labels], dtype=np.int64)


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in MISSING_TOKENS


def _parse_float(cell: str, column: str, row: int) -> float:
    try:
        value = float(cell)
    except ValueError:
        raise TypeMismatch(f"column {column!r}, row {row}: {cell!r} is not numerical") from None
    if not math.isfinite(value):
        raise TypeMismatch(f"column {column!r}, row {row}: non-finite value {cell!r}")
    return value


def _label_order(values) -> tuple[str, ...]:
    uniq = set(values)
    try:
        return tuple(sorted(uniq, key=float))
    except ValueError:
        return tuple(sorted(uniq))


def table_from_columns(schema: DatasetSchema, columns: dict[str, Sequence], labels=None) -> RawTable:
    """Build a RawTable from in-memory columns (used by the synthetic generators)."""
    features = {}
    for col in schema.columns:
        if col.name not in columns:
            raise MissingColumn(col.name)
        if col.kind == NUMERICAL:
            features[col.name] = np.asarray(columns[col.name], dtype=np.float64)
        else:
            features[col.name] = np.asarray([str(v) for v in columns[col.name]], dtype=object)
    levels: tuple[str, ...] = ()
    if labels is not None:
        if schema.task == CLASSIFICATION:
            labels = np.asarray([str(v) for v in labels], dtype=object)
            levels = _label_order(labels)
        else:
            labels = np.asarray(labels, dtype=np.float64)
    table = RawTable(schema, features, labels, levels)
    if table.n_rows == 0:
        raise EmptyTable(f"{schema.name}: no rows")
    return table


def load_table(path, schema: DatasetSchema, require_label: bool = True) -> RawTable:
    """Parse a UTF-8 CSV file against ``schema``."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyTable(f"{path}: file is empty") from None
        rows = [r for r in reader if any(cell.strip() for cell in r)]

    position = {name: i for i, name in enumerate(header)}
    for col in schema.columns:
        if col.name not in position:
            raise MissingColumn(col.name, str(path))
    has_label = schema.label_column in position
    if require_label and not has_label:
        raise MissingColumn(schema.label_column, str(path))
    known = set(schema.feature_names) | {schema.label_column}
    extra = [h for h in header if h not in known]
    if extra:
        raise DataError(f"{path}: column {extra[0]!r} is not declared in schema {schema.name!r}")
    if not rows:
        raise EmptyTable(f"{path}: header only, no data rows")

    width = len(header)
    for lineno, r in enumerate(rows, start=2):
        if len(r) != width:
            raise DataError(f"{path}: line {lineno} has {len(r)} fields, expected {width}")

    features = {}
    for col in schema.columns:
        j = position[col.name]
        if col.kind == NUMERICAL:
            vals = np.empty(len(rows))
            for i, r in enumerate(rows):
                cell = r[j]
                vals[i] = np.nan if _is_missing(cell) else _parse_float(cell, col.name, i)
        else:
            vals = np.array([r[j].strip() for r in rows], dtype=object)
        features[col.name] = vals

    labels = None
    levels: tuple[str, ...] = ()
    if has_label:
        j = position[schema.label_column]
        raw = [r[j].strip() for r in rows]
        for i, cell in enumerate(raw):
            if _is_missing(cell):
                raise TypeMismatch(f"label column {schema.label_column!r}, row {i}: missing label")
        if schema.task == CLASSIFICATION:
            labels = np.array(raw, dtype=object)
            levels = _label_order(raw)
        else:
            labels = np.array([_parse_float(c, schema.label_column, i) for i, c in enumerate(raw)])
    return RawTable(schema, features, labels, levels)


@dataclass(frozen=True)
class EncodeStats:
    """Training-split statistics; immutable once fitted."""

    schema: DatasetSchema
    numeric: dict[str, tuple[float, float]]
    levels: dict[str, tuple[str, ...]]
    label_levels: tuple[str, ...] = ()
    target_mean: float = 0.0
    target_std: float = 1.0

    @property
    def n_encoded(self) -> int:
        return sum(1 if c.kind == NUMERICAL else len(self.levels[c.name]) for c in self.schema.columns)

    def encoded_names(self) -> list[str]:
        names = []
        for c in self.schema.columns:
            if c.kind == NUMERICAL:
                names.append(c.name)
            else:
                names.extend(f"{c.name}={lv}" for lv in self.levels[c.name])
        return names

    def destandardize(self, y):
        return np.asarray(y, dtype=np.float64) * self.target_std + self.target_mean


@dataclass
class EncodedDataset:
    X: np.ndarray
    Y: np.ndarray
    task: str
    n_classes: int
    stats: EncodeStats | None = None
    name: str = ""

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def subset(self, rows) -> "EncodedDataset":
        rows = np.asarray(rows, dtype=np.intp)
        return EncodedDataset(self.X[rows], self.Y[rows], self.task, self.n_classes, self.stats, self.name)


def _population_stats(values: np.ndarray) -> tuple[float, float]:
    present = values[~np.isnan(values)]
    if present.size == 0:
        return 0.0, 0.0
    mean = float(present.mean())
    filled = np.where(np.isnan(values), mean, values)
    return mean, float(filled.std())


def fit_encoder(train_rows: RawTable) -> EncodeStats:
    """Fit standardization and one-hot maps on the training rows."""
    schema = train_rows.schema
    if train_rows.n_rows < 2:
        raise TooFewInstances(f"{schema.name}: need at least 2 training rows")
    numeric, levels = {}, {}
    for col in schema.columns:
        vals = train_rows.features[col.name]
        if col.kind == NUMERICAL:
            numeric[col.name] = _population_stats(vals)
        else:
            levels[col.name] = tuple(dict.fromkeys(vals.tolist()))

    if all(s == 0.0 for _, s in numeric.values()) and all(len(v) <= 1 for v in levels.values()):
        warnings.warn(f"{schema.name}: all training rows are identical", DegenerateDataset, stacklevel=2)

    target_mean, target_std = 0.0, 1.0
    if schema.task == REGRESSION and train_rows.labels is not None:
        y = np.asarray(train_rows.labels, dtype=np.float64)
        target_mean, target_std = float(y.mean()), float(y.std())
        if target_std == 0.0:
            target_std = 1.0
    return EncodeStats(
        schema=schema,
        numeric=numeric,
        levels=levels,
        label_levels=train_rows.label_levels,
        target_mean=target_mean,
        target_std=target_std,
    )


def encode(rows: RawTable, stats: EncodeStats) -> EncodedDataset:
    schema = stats.schema
    blocks = []
    for col in schema.columns:
        vals = rows.features[col.name]
        if col.kind == NUMERICAL:
            mean, std = stats.numeric[col.name]
            filled = np.where(np.isnan(vals), mean, vals)
            z = (filled - mean) / std if std > 0 else np.zeros_like(filled)
            blocks.append(z[:, None])
        else:
            lookup = {lv: i for i, lv in enumerate(stats.levels[col.name])}
            onehot = np.zeros((len(vals), len(lookup)))
            for i, v in enumerate(vals):
                k = lookup.get(v)
                if k is not None:
                    onehot[i, k] = 1.0
            blocks.append(onehot)
    X = np.hstack(blocks) if blocks else np.zeros((rows.n_rows, 0))
    X = np.ascontiguousarray(X, dtype=np.float64)

    if schema.task == CLASSIFICATION:
        n_classes = len(stats.label_levels)
        if rows.labels is None:
            Y = np.full(rows.n_rows, -1, dtype=np.int64)
        else:
            lookup = {lv: i for i, lv in enumerate(stats.label_levels)}
            Y = np.array([lookup[v] for v in rows.labels], dtype=np.int64)
    else:
        n_classes = 1
        if rows.labels is None:
            Y = np.full(rows.n_rows, np.nan)
        else:
            Y = (np.asarray(rows.labels, dtype=np.float64) - stats.target_mean) / stats.target_std
    return EncodedDataset(X=X, Y=Y, task=schema.task, n_classes=n_classes, stats=stats, name=schema.name)


@dataclass(frozen=True)
class SplitIndices:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int = 0

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def _apportion(total: int, weights: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportional to ``weights``."""
    quota = total * weights / weights.sum()
    alloc = np.minimum(np.floor(quota).astype(np.int64), caps)
    order = np.argsort(-(quota - np.floor(quota)), kind="stable")
    remaining = total - int(alloc.sum())
    while remaining > 0:
        progressed = False
        for k in order:
            if remaining == 0:
                break
            if alloc[k] < caps[k]:
                alloc[k] += 1
                remaining -= 1
                progressed = True
        if not progressed:
            break
    return alloc


def split(labels, ratios=DEFAULT_RATIOS, seed: int = 0, task: str | None = None) -> SplitIndices:
    """Random train/val/test split, stratified per class when possible.

    ``labels`` may be an EncodedDataset or a label vector.  Stratification
    applies to classification labels when every class has >= 3 members.
    """
    if isinstance(labels, EncodedDataset):
        task = task or labels.task
        labels = labels.Y
    labels = np.asarray(labels)
    task = task or (CLASSIFICATION if np.issubdtype(labels.dtype, np.integer) else REGRESSION)
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (3,) or np.any(ratios <= 0) or abs(ratios.sum() - 1.0) > 1e-9:
        raise DataError(f"split ratios must be 3 positive values summing to 1, got {ratios.tolist()}")
    n = len(labels)
    if n < 5:
        raise TooFewInstances(f"need at least 5 instances to split, got {n}")

    n_train = int(round(n * ratios[0]))
    n_val = int(round(n * ratios[1]))
    n_test = n - n_train - n_val
    rng = np.random.default_rng(seed)

    classes, counts = (np.unique(labels, return_counts=True) if task == CLASSIFICATION else (None, None))
    if classes is not None and counts.min() >= 3:
        members = [np.flatnonzero(labels == c) for c in classes]
        train_k = _apportion(n_train, counts.astype(float), counts)
        val_k = _apportion(n_val, counts.astype(float), counts - train_k)
        parts = ([], [], [])
        for idx, a, b in zip(members, train_k, val_k):
            perm = rng.permutation(idx)
            parts[0].append(perm[:a])
            parts[1].append(perm[a:a + b])
            parts[2].append(perm[a + b:])
        train, val, test = (np.sort(np.concatenate(p)) for p in parts)
    else:
        perm = rng.permutation(n)
        train = np.sort(perm[:n_train])
        val = np.sort(perm[n_train:n_train + n_val])
        test = np.sort(perm[n_train + n_val:])
    assert len(test) == n_test
    return SplitIndices(train.astype(np.int64), val.astype(np.int64), test.astype(np.int64), seed)


def sample_few_shot(train, labels, shots: int, seed: int = 0) -> np.ndarray:
    """Draw ``min(shots, class size)`` training rows per class."""
    train = np.asarray(train, dtype=np.int64)
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    picked = []
    train_labels = labels[train]
    for c in np.unique(train_labels):
        members = train[train_labels == c]
        picked.append(rng.choice(members, size=min(shots, len(members)), replace=False))
    return np.sort(np.concatenate(picked)) if picked else train[:0]


def prepare(table: RawTable, ratios=DEFAULT_RATIOS, seed: int = 0) -> tuple[EncodedDataset, SplitIndices]:
    """Split a raw table and encode it with training-split statistics."""
    if table.labels is None:
        raise DataError("cannot split a table without labels")
    task = table.schema.task
    labels = table.label_indices() if task == CLASSIFICATION else table.labels
    idx = split(labels, ratios, seed, task)
    stats = fit_encoder(table.take(idx.train))
    return encode(table, stats), idx


def encode_reference(table: RawTable) -> EncodedDataset:
    """Encode a table that serves entirely as a training/reference set."""
    return encode(table, fit_encoder(table))
