import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabmeta.data import CLASSIFICATION, REGRESSION, EncodedDataset, prepare
from tabmeta.errors import ConfigError, LengthMismatch
from tabmeta.evalbench import (
    ExperimentReport,
    average_rank,
    knn_predict,
    knn_predict_batch,
    make_synthetic_corpus,
    metrics,
    run_protocol,
)
from tabmeta.metric import MetricSpec
from tabmeta.trainer import TrainConfig

from conftest import random_dataset, random_spec

KNN_CFG = TrainConfig(K=8)


def test_softmax_with_equal_distances_matches_uniform():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0], [5.0]])
    ds = EncodedDataset(X, np.array([0, 1, 1, 1, 0]), CLASSIFICATION, 2)
    spec = MetricSpec.uniform("manhattan", 1)
    q = np.array([0.0])
    assert knn_predict(q, ds, spec, 4, CLASSIFICATION, "softmax") == knn_predict(q, ds, spec, 4, CLASSIFICATION)
    reg = EncodedDataset(X, np.array([1.0, 2.0, 3.0, 4.0, 9.0]), REGRESSION, 1)
    assert knn_predict(q, reg, spec, 4, REGRESSION, "softmax") == pytest.approx(2.5)
    assert knn_predict(q, reg, spec, 4, REGRESSION) == pytest.approx(2.5)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 15), scale=st.floats(0.01, 100.0))
def test_uniform_knn_is_scale_invariant(seed, K, scale):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=40, d=3, n_classes=3)
    spec = random_spec(rng, "euclidean", 3)
    Q = rng.normal(size=(10, 3))
    base = knn_predict_batch(Q, ds, spec, K, CLASSIFICATION)
    scaled = EncodedDataset(ds.X * scale, ds.Y, ds.task, ds.n_classes)
    np.testing.assert_array_equal(base, knn_predict_batch(Q * scale, scaled, spec, K, CLASSIFICATION))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 12),
       weighting=st.sampled_from(["uniform", "softmax"]), task=st.sampled_from([CLASSIFICATION, REGRESSION]))
def test_batched_knn_matches_single_queries(seed, K, weighting, task):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=30, d=2, n_classes=3, task=task, integer_grid=True)
    spec = random_spec(rng, "manhattan", 2)
    Q = rng.integers(-2, 3, size=(6, 2)).astype(float)
    batch = knn_predict_batch(Q, ds, spec, K, task, weighting)
    single = [knn_predict(q, ds, spec, K, task, weighting) for q in Q]
    np.testing.assert_allclose(batch, single, rtol=1e-12)


def test_rank_rules():
    np.testing.assert_allclose(average_rank([[0.9, 0.9, 0.5]]), [1.5, 1.5, 3.0])
    np.testing.assert_allclose(average_rank([[0.9, 0.5], [0.5, 0.9]]), [1.5, 1.5])
    np.testing.assert_allclose(average_rank([[1.0, 2.0]], direction="lower"), [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_average_ranks_are_bounded(n_datasets, n_methods, seed):
    table = np.random.default_rng(seed).integers(0, 3, size=(n_datasets, n_methods))
    ranks = average_rank(table)
    assert np.all(ranks >= 1) and np.all(ranks <= n_methods)
    assert ranks.sum() == pytest.approx(n_methods * (n_methods + 1) / 2)


def test_metrics():
    assert metrics([0, 1, 1], [0, 1, 0], CLASSIFICATION) == pytest.approx(2 / 3)
    assert metrics([1.0, 3.0], [0.0, 3.0], REGRESSION) == pytest.approx(np.sqrt(0.5))
    with pytest.raises(LengthMismatch):
        metrics([0, 1], [0], CLASSIFICATION)


def test_synthetic_corpus_contract():
    a = make_synthetic_corpus(CLASSIFICATION, 4, seed=3, dims=(4, 8), classes=(2, 5), sizes=(100, 300))
    b = make_synthetic_corpus(CLASSIFICATION, 4, seed=3, dims=(4, 8), classes=(2, 5), sizes=(100, 300))
    assert len(a.pretrain_tables) == 4 and len(a.heldout) == 2
    for ta, tb in zip(a.pretrain_tables + a.heldout, b.pretrain_tables + b.heldout):
        np.testing.assert_array_equal(ta.labels, tb.labels)
        for name in ta.features:
            np.testing.assert_array_equal(ta.features[name], tb.features[name])
    for table in a.pretrain_tables + a.heldout:
        assert 4 <= len(table.features) <= 8 and 100 <= table.n_rows <= 300
        n_classes = len(table.label_levels)
        assert 2 <= n_classes <= 5
        ds, sp = prepare(table, seed=0)
        for part in (sp.train, sp.val, sp.test):
            assert len(np.unique(ds.Y[part])) == n_classes


def test_synthetic_one_nn_beats_majority():
    suite = make_synthetic_corpus(CLASSIFICATION, 6, seed=11, sizes=(100, 300))
    for table in suite.pretrain_tables:
        ds, sp = prepare(table, seed=0)
        spec = MetricSpec.uniform("euclidean", ds.d)
        pred = knn_predict_batch(ds.X[sp.test], ds, spec, 1, CLASSIFICATION, subset=sp.train)
        majority = np.bincount(ds.Y[sp.test]).max() / len(sp.test)
        assert metrics(pred, ds.Y[sp.test], CLASSIFICATION) > majority


def test_synthetic_regression_noise_level():
    suite = make_synthetic_corpus(REGRESSION, 2, seed=5, sizes=(1500, 2000), heldout=0)
    for table in suite.pretrain_tables:
        assert table.schema.task == REGRESSION
        assert np.isfinite(table.labels).all() and np.std(table.labels) > 0


def test_synthetic_rejects_degenerate_ranges():
    with pytest.raises(ConfigError):
        make_synthetic_corpus(CLASSIFICATION, 2, dims=(5, 3))
    with pytest.raises(ConfigError):
        make_synthetic_corpus(CLASSIFICATION, 2, classes=(1, 3))


def test_protocol_shapes_and_majority_definition():
    suite = make_synthetic_corpus(CLASSIFICATION, 1, seed=2, sizes=(150, 200), heldout=1)
    table = suite.heldout[0]
    report = run_protocol(None, [table], ["majority"], KNN_CFG, seeds=[0])
    keys, cells = report.table()
    assert cells.shape == (1, 1) and keys == [(table.schema.name, "full")]
    ds, sp = prepare(table, seed=0)
    train_major = np.argmax(np.bincount(ds.Y[sp.train]))
    assert cells[0, 0] == pytest.approx(np.mean(ds.Y[sp.test] == train_major))


def test_few_shot_protocol(monkeypatch):
    from tabmeta import evalbench

    seen = []
    real = evalbench.evaluate_methods

    def spy(table, ds, reference, *args, **kw):
        seen.append(np.bincount(ds.Y[reference], minlength=ds.n_classes))
        return real(table, ds, reference, *args, **kw)

    monkeypatch.setattr(evalbench, "evaluate_methods", spy)
    suite = make_synthetic_corpus(CLASSIFICATION, 1, seed=4, classes=(2, 2), sizes=(150, 200), heldout=1)
    report = run_protocol(None, suite.heldout, ["knn-uniform", "knn-softmax"], KNN_CFG, shots=[4],
                          seeds=[0, 1], repeats=5)
    assert len(seen) == 10
    assert all(counts.sum() <= 8 and counts.max() <= 4 for counts in seen)
    assert {r["shot"] for r in report.records} == {4}
    assert len(report.values(suite.heldout[0].schema.name, "knn-uniform", shot=4)) == 10


def test_protocol_is_pure_and_reports_write(tmp_path):
    suite = make_synthetic_corpus(REGRESSION, 1, seed=6, sizes=(150, 200), heldout=2)
    cfg = TrainConfig(task=REGRESSION)
    methods = ["knn-uniform", "knn-softmax", "mean"]
    a = run_protocol(None, suite.heldout, methods, cfg, seeds=[0, 1])
    b = run_protocol(None, suite.heldout, methods, cfg, seeds=[0, 1])
    a.write_csv(tmp_path / "a.csv")
    b.write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    a.write_json(tmp_path / "a.json")
    ranks = json.loads((tmp_path / "a.json").read_text())
    assert set(ranks) == set(methods)
    assert ranks["mean"] == 3.0
    header = (tmp_path / "a.csv").read_text().splitlines()[0]
    assert header == "dataset,method,shot,seed,repeat,metric,value"


def test_protocol_errors():
    suite = make_synthetic_corpus(REGRESSION, 1, seed=6, sizes=(150, 200), heldout=1)
    with pytest.raises(ConfigError, match="valid methods"):
        run_protocol(None, suite.heldout, ["magic"], TrainConfig(task=REGRESSION))
    with pytest.raises(ConfigError):
        run_protocol(None, suite.heldout, ["metarep-direct"], TrainConfig(task=REGRESSION))
    with pytest.raises(ConfigError):
        run_protocol(None, suite.heldout, ["mean"], TrainConfig(task=REGRESSION), shots=[4])
    with pytest.raises(ConfigError):
        run_protocol(None, suite.heldout, ["mean"], TrainConfig())


def test_report_ranks_lie_in_range():
    report = ExperimentReport(CLASSIFICATION, ["a", "b", "c"])
    for ds, vals in (("x", (0.9, 0.8, 0.8)), ("y", (0.1, 0.2, 0.3))):
        for m, v in zip("abc", vals):
            report.records.append({"dataset": ds, "method": m, "shot": "full", "seed": 0, "repeat": 0, "value": v})
    ranks = report.average_ranks()
    assert ranks == {"a": 2.0, "b": 2.25, "c": 1.75}
