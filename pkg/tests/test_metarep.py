from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabmeta.data import CLASSIFICATION, REGRESSION, EncodedDataset
from tabmeta.errors import EmptyContext
from tabmeta.metarep import (
    build_meta_batch,
    class_meta_rep,
    full_meta_rep,
    input_dim,
    query_topk,
    regression_meta_rep,
)
from tabmeta.metric import KINDS, MetricSpec

from conftest import random_dataset, random_spec
from oracles import meta_rep_oracle, topk_oracle


def test_regression_hand_example():
    ds = EncodedDataset(np.array([[0.0], [1.0]]), np.array([-1.0, 1.0]), REGRESSION, 1)
    rep = regression_meta_rep(np.array([0.4]), ds, MetricSpec.uniform("euclidean", 1), K=2)
    np.testing.assert_allclose(rep, [0.4, -1.0, 0.6, 1.0])


def test_padding_repeats_last_pair():
    ds = EncodedDataset(np.array([[0.0], [1.0], [3.0]]), np.array([5.0, 6.0, 7.0]), REGRESSION, 1)
    rep = regression_meta_rep(np.array([0.0]), ds, MetricSpec.uniform("manhattan", 1), K=6)
    np.testing.assert_allclose(rep, [0, 5, 1, 6, 3, 7, 3, 7, 3, 7, 3, 7])


def test_shape_two_kinds_three_classes(rng):
    ds = random_dataset(rng, n=30, d=3, n_classes=3)
    specs = [random_spec(rng, k, 3) for k in ("manhattan", "cosine")]
    rep = full_meta_rep(rng.normal(size=3), ds, specs, K=4)
    assert rep.blocks.shape == (3, 16) == (3, input_dim(4, 2))
    assert rep.kinds == ("manhattan", "cosine")
    assert rep.values.shape == (48,)


def test_normalized_peak_is_one_per_kind(rng):
    ds = random_dataset(rng, n=40, d=3, n_classes=2)
    specs = [random_spec(rng, k, 3) for k in ("euclidean", "chebyshev")]
    rep = full_meta_rep(rng.normal(size=3), ds, specs, K=5)
    for s in range(2):
        assert rep.blocks[:, s * 10:(s + 1) * 10:2].max() == pytest.approx(1.0)


def test_single_kind_regression_matches_normalized_block(rng):
    ds = random_dataset(rng, n=25, d=2, task=REGRESSION)
    spec = random_spec(rng, "manhattan", 2)
    q = rng.normal(size=2)
    raw = regression_meta_rep(q, ds, spec, K=7)
    full = full_meta_rep(q, ds, [spec], K=7).blocks[0]
    np.testing.assert_allclose(full[1::2], raw[1::2])
    np.testing.assert_allclose(full[0::2], raw[0::2] / raw[0::2].max())


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**32 - 1),
    K=st.integers(1, 12),
    kind=st.sampled_from(KINDS),
    grid=st.booleans(),
    task=st.sampled_from([CLASSIFICATION, REGRESSION]),
)
def test_full_meta_rep_matches_oracle(seed, K, kind, grid, task):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=int(rng.integers(8, 30)), d=3, n_classes=3, task=task, integer_grid=grid)
    specs = [random_spec(rng, kind, 3), random_spec(rng, "manhattan", 3)]
    exclude = int(rng.integers(ds.n)) if task == REGRESSION else None
    q = ds.X[exclude] if exclude is not None else rng.normal(size=3)
    got = full_meta_rep(q, ds, specs, K, exclude=exclude).blocks
    np.testing.assert_allclose(got, meta_rep_oracle(q, ds, specs, K, exclude=exclude), rtol=1e-12, atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 20), task=st.sampled_from([CLASSIFICATION, REGRESSION]))
def test_batched_construction_matches_single_queries(seed, K, task):
    rng = np.random.default_rng(seed)
    ds = random_dataset(rng, n=40, d=4, n_classes=3, task=task, integer_grid=bool(seed % 2))
    specs = [random_spec(rng, k, 4) for k in ("manhattan", "euclidean", "braycurtis")]
    ref = np.sort(rng.choice(ds.n, size=30, replace=False))
    rows = ref[:10]
    if task == CLASSIFICATION and np.bincount(ds.Y[ref], minlength=3).min() < 2:
        return
    batch = build_meta_batch(ds.X[rows], ds, specs, K, subset=rng.permutation(ref), exclude=rows, chunk=3)
    for b, r in enumerate(rows):
        single = full_meta_rep(ds.X[r], ds, specs, K, exclude=r, subset=ref).blocks
        np.testing.assert_allclose(batch[b], single, rtol=1e-12, atol=1e-12)


def test_regression_self_exclusion_hides_own_target(rng):
    ds = random_dataset(rng, n=50, d=3, task=REGRESSION)
    spec = random_spec(rng, "euclidean", 3)
    rows = np.arange(ds.n)
    blocks = build_meta_batch(ds.X, ds, [spec], K=8, exclude=rows, normalize=False)
    for r in rows:
        assert ds.Y[r] not in blocks[r, 0, 1::2]
        assert blocks[r, 0, 0] > 0


def test_reference_shuffle_leaves_meta_reps_unchanged(rng):
    ds = random_dataset(rng, n=60, d=3, n_classes=2)
    specs = [random_spec(rng, "manhattan", 3)]
    perm = rng.permutation(ds.n)
    shuffled = EncodedDataset(ds.X[perm], ds.Y[perm], ds.task, ds.n_classes)
    Q = rng.normal(size=(5, 3))
    np.testing.assert_array_equal(
        build_meta_batch(Q, ds, specs, K=10), build_meta_batch(Q, shuffled, specs, K=10)
    )


def test_query_at_centroid_sees_densest_own_class(rng):
    centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    X = np.vstack([c + rng.normal(size=(40, 2)) for c in centers])
    Y = np.repeat(np.arange(3), 40)
    ds = EncodedDataset(X, Y, CLASSIFICATION, 3)
    spec = MetricSpec.uniform("euclidean", 2)
    for c, center in enumerate(centers):
        blocks = full_meta_rep(center, ds, [spec], K=16).blocks
        sums = blocks[:, 0::2].sum(axis=1)
        assert all(sums[c] < sums[o] for o in range(3) if o != c)


def test_normalization_preserves_cross_class_ordering(rng):
    ds = random_dataset(rng, n=50, d=3, n_classes=3)
    spec = random_spec(rng, "braycurtis", 3)
    q = rng.normal(size=3)
    raw = full_meta_rep(q, ds, [spec], K=6, normalize=False).blocks[:, 0::2].ravel()
    norm = full_meta_rep(q, ds, [spec], K=6).blocks[:, 0::2].ravel()
    np.testing.assert_array_equal(np.argsort(raw, kind="stable"), np.argsort(norm, kind="stable"))


def test_tie_break_by_row_index():
    X = np.array([[1.0], [-1.0], [1.0], [-1.0]])
    ds = EncodedDataset(X, np.zeros(4), REGRESSION, 1)
    nb = query_topk(np.array([0.0]), ds, MetricSpec.uniform("manhattan", 1), K=3)
    np.testing.assert_array_equal(nb.indices, [0, 1, 2])


def test_topk_matches_oracle_with_subset_and_exclusion(rng):
    ds = random_dataset(rng, n=80, d=2, integer_grid=True)
    spec = random_spec(rng, "chebyshev", 2)
    subset = rng.choice(ds.n, 50, replace=False)
    nb = query_topk(ds.X[3], ds, spec, K=9, subset=subset, exclude=int(subset[0]))
    ids, dist, _ = topk_oracle(ds.X[3], ds.X, ds.Y, subset, spec, 9, exclude=int(subset[0]))
    np.testing.assert_array_equal(nb.indices, ids)
    np.testing.assert_array_equal(nb.distances, dist)


def test_empty_class_context_raises(rng):
    ds = EncodedDataset(rng.normal(size=(5, 2)), np.array([0, 0, 0, 1, 2]), CLASSIFICATION, 3)
    spec = MetricSpec.uniform("manhattan", 2)
    with pytest.raises(EmptyContext):
        class_meta_rep(ds.X[0], ds, 1, spec, K=2, exclude=3)
    with pytest.raises(EmptyContext):
        build_meta_batch(ds.X[[3]], ds, [spec], K=2, exclude=[3])
    with pytest.raises(EmptyContext):
        full_meta_rep(ds.X[0], ds, [spec], K=2, subset=[0, 1, 2])


def test_threaded_construction_equals_sequential(rng):
    ds = random_dataset(rng, n=200, d=5, n_classes=4)
    specs = [random_spec(rng, k, 5) for k in ("manhattan", "euclidean")]
    Q = rng.normal(size=(64, 5))
    sequential = build_meta_batch(Q, ds, specs, K=16)
    with ThreadPoolExecutor(4) as pool:
        parts = list(pool.map(lambda s: build_meta_batch(Q[s:s + 16], ds, specs, K=16), range(0, 64, 16)))
    np.testing.assert_array_equal(np.concatenate(parts), sequential)
