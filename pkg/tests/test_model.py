import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tabmeta.errors import ShapeMismatch
from tabmeta.model import (
    ScorerParams,
    batch_scores,
    class_scores,
    forward,
    head_indices,
    init_optimizer,
    init_params,
    loss_and_grad,
    optimizer_step,
    predict_class,
    score_block,
)

from oracles import finite_difference_errors, random_float64_scorer


def test_architecture_and_init():
    p = init_params(24, hidden_width=16, seed=0)
    assert [t.shape for t in p.tensors()] == [(16, 24), (16,), (16, 16), (16,), (16, 16), (16,), (1, 16), (1,)]
    assert p.dtype == np.float32
    assert all(np.all(b == 0) for b in p.biases)
    bound = math.sqrt(6 / (24 + 16))
    assert np.abs(p.weights[0]).max() <= bound


def test_gradient_matches_finite_differences_small_net(rng):
    params = random_float64_scorer(rng, 12, 8)
    blocks = rng.random((4, 3, 12))
    errors = finite_difference_errors(params, blocks, rng.integers(0, 3, 4), "classification")
    assert errors.max() < 1e-6


def test_regression_gradient_matches_finite_differences(rng):
    params = random_float64_scorer(rng, 8, 6, depth=2)
    errors = finite_difference_errors(params, rng.random((5, 1, 8)), rng.normal(size=5), "regression")
    assert errors.max() < 1e-6


def test_equal_blocks_give_log_c_loss(rng):
    p = init_params(10, 8, seed=1, dtype=np.float64)
    for C in (2, 3, 5):
        blocks = np.repeat(rng.random((6, 1, 10)), C, axis=1)
        loss, _ = loss_and_grad(p, blocks, rng.integers(0, C, 6), "classification")
        assert loss == pytest.approx(math.log(C), abs=1e-12)


def test_regression_perfect_prediction_has_zero_loss_and_gradient(rng):
    p = init_params(6, 5, seed=2, dropout=0.0, dtype=np.float64)
    blocks = rng.random((4, 1, 6))
    target = batch_scores(p, blocks)[:, 0]
    loss, grads = loss_and_grad(p, blocks, target, "regression")
    assert loss == 0.0
    assert all(np.all(g == 0) for g in grads.tensors())


def test_class_symmetry(rng):
    p = init_params(8, 6, seed=3, dropout=0.0, dtype=np.float64)
    blocks = rng.random((5, 3, 8))
    labels = rng.integers(0, 3, 5)
    swapped = blocks[:, [1, 0, 2]]
    relabel = np.array([1, 0, 2])[labels]
    np.testing.assert_array_equal(batch_scores(p, swapped), batch_scores(p, blocks)[:, [1, 0, 2]])
    a = loss_and_grad(p, blocks, labels, "classification", need_grad=False)[0]
    b = loss_and_grad(p, swapped, relabel, "classification", need_grad=False)[0]
    assert a == pytest.approx(b, abs=1e-15)


def test_inference_is_deterministic_and_dropout_free(rng):
    p = init_params(8, 16, seed=4, dropout=0.5)
    X = rng.random((20, 8))
    first = forward(p, X)
    assert np.array_equal(first, forward(p, X))
    trained, trace = forward(p, X, np.random.default_rng(0))
    assert trace.masks[0] is not None and not np.array_equal(trained, first)
    assert score_block(p, X[0]) == pytest.approx(float(first[0]), rel=1e-5)


def test_dropout_mask_is_inverted_and_seeded(rng):
    p = init_params(8, 4000, seed=5, depth=1, dropout=0.25)
    X = rng.random((1, 8))
    _, trace = forward(p, X, np.random.default_rng(7))
    keep = trace.masks[0].mean()
    assert abs(keep - 0.75) < 0.03
    _, again = forward(p, X, np.random.default_rng(7))
    np.testing.assert_array_equal(trace.masks[0], again.masks[0])


def test_loss_nonnegative(rng):
    p = init_params(8, 6, seed=6)
    loss, _ = loss_and_grad(p, rng.random((7, 4, 8)), rng.integers(0, 4, 7), "classification")
    assert loss >= 0


def test_shape_errors(rng):
    p = init_params(8, 6, seed=0)
    with pytest.raises(ShapeMismatch):
        loss_and_grad(p, rng.random((3, 2, 9)), [0, 1, 0], "classification")
    with pytest.raises(ShapeMismatch):
        loss_and_grad(p, rng.random((3, 2, 8)), [0, 1], "classification")
    with pytest.raises(ShapeMismatch):
        score_block(p, np.zeros(7))
    with pytest.raises(ShapeMismatch):
        class_scores(p, np.zeros(8))


def test_predict_class_ties_and_shift():
    assert predict_class([0.5, 0.5]) == 0
    scores = np.array([0.1, 2.0, -3.0])
    assert predict_class(scores + 100.0) == predict_class(scores) == 1


def test_adam_first_step_moves_by_lr():
    p = ScorerParams.from_tensors([np.zeros((1, 1)), np.zeros(1)], dropout=0.0)
    g = ScorerParams.from_tensors([np.ones((1, 1)), np.zeros(1)], dropout=0.0)
    new, state = optimizer_step(p, g, init_optimizer(p), lr=0.001)
    assert new.weights[0][0, 0] == pytest.approx(-0.001, abs=1e-9)
    assert new.biases[0][0] == 0.0
    assert state.t == 1


def test_zero_gradient_and_zero_rate_leave_parameters(rng):
    p = init_params(6, 4, seed=8)
    new, _ = optimizer_step(p, p.zeros_like(), init_optimizer(p), lr=0.01)
    assert new.checksum() == p.checksum()
    _, grads = loss_and_grad(p, rng.random((3, 2, 6)), [0, 1, 1], "classification")
    new, _ = optimizer_step(p, grads, init_optimizer(p), lr=0.0)
    assert new.checksum() == p.checksum()


def test_optimizer_transition_ignores_dropout_seed(rng):
    p = init_params(6, 4, seed=9, dtype=np.float64)
    _, grads = loss_and_grad(p, rng.random((3, 2, 6)), [0, 1, 1], "classification", np.random.default_rng(1))
    a, sa = optimizer_step(p, grads, init_optimizer(p), 0.01)
    b, sb = optimizer_step(p, grads, init_optimizer(p), 0.01)
    assert a.checksum() == b.checksum()
    for x, y in zip(sa.m + sa.v, sb.m + sb.v):
        np.testing.assert_array_equal(x, y)


def test_sgd_step(rng):
    p = init_params(4, 3, seed=10, dtype=np.float64)
    g = ScorerParams.from_tensors([np.ones_like(t) for t in p.tensors()], p.dropout)
    new, _ = optimizer_step(p, g, init_optimizer(p, "sgd"), 0.5)
    for before, after in zip(p.tensors(), new.tensors()):
        np.testing.assert_allclose(after, before - 0.5)


def test_head_only_mask(rng):
    p = init_params(6, 4, seed=11)
    _, grads = loss_and_grad(p, rng.random((3, 1, 6)), rng.normal(size=3), "regression")
    new, _ = optimizer_step(p, grads, init_optimizer(p), 0.1, trainable=head_indices(p))
    for i, (a, b) in enumerate(zip(p.tensors(), new.tensors())):
        assert np.array_equal(a, b) == (i not in head_indices(p))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), C=st.integers(2, 5), width=st.integers(1, 32))
def test_class_gradients_sum_into_shared_parameters(seed, C, width):
    rng = np.random.default_rng(seed)
    p = init_params(6, width, seed=seed % 1000, dropout=0.0, dtype=np.float64)
    blocks = rng.random((1, C, 6))
    label = [int(rng.integers(C))]
    _, total = loss_and_grad(p, blocks, label, "classification")
    scores = batch_scores(p, blocks)[0]
    soft = np.exp(scores - scores.max())
    soft /= soft.sum()
    weight = soft - np.eye(C)[label[0]]
    # d loss / d head-bias is the sum of per-class coefficients, which is 0
    assert abs(total.biases[-1][0]) < 1e-12
    acc = sum(weight[c] * forward(p, blocks[0, c:c + 1], train=True)[1].post[-1][0] for c in range(C))
    np.testing.assert_allclose(total.weights[-1][0], acc, atol=1e-12)


def test_params_validation_and_helpers():
    p = init_params(4, 3, seed=0)
    assert p.is_finite()
    assert p.copy().checksum() == p.checksum()
    assert p.astype(np.float64).dtype == np.float64
    with pytest.raises(ValueError):
        ScorerParams.from_tensors([np.zeros((3, 4)), np.zeros(3), np.zeros((1, 2)), np.zeros(1)])
