"""Unit and gradient-oracle tests for the autodiff core."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierprune import tensor as T
from tierprune.errors import ConfigError, DataError, NumericError, ShapeError, UsageError

from oracles import central_difference, relative_error, sample_coords


def t32(a, rg=False):
    return T.Tensor(np.asarray(a, dtype=np.float32), requires_grad=rg)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    b = np.arange(9, dtype=np.float32).reshape(3, 3)
    out = T.matmul(t32(np.eye(3)), t32(b))
    np.testing.assert_array_equal(out.values, b)


def test_matmul_small():
    out = T.matmul(t32([[1.0, 2.0]]), t32([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.values, [[11.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(t32(np.zeros((2, 3))), t32(np.zeros((4, 2))))


def test_matmul_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    a_vals = rng.standard_normal((4, 5)).astype(np.float32)
    b_vals = rng.standard_normal((5, 2)).astype(np.float32)

    a, b = T.Tensor(a_vals, requires_grad=True), T.Tensor(b_vals, requires_grad=True)
    T.backward(T.tsum(T.matmul(a, b)))

    def f(arrs):
        return float(np.sum(arrs[0] @ arrs[1]))

    picks = sample_coords([a_vals.shape, b_vals.shape], 12, seed=1)
    fd = central_difference(f, [a_vals, b_vals], picks)
    analytic = np.array(
        [(a.grad if ai == 0 else b.grad).reshape(-1)[fi] for ai, fi in picks]
    )
    assert relative_error(analytic, fd).max() < 1e-3


def test_batched_matmul_gradient():
    rng = np.random.default_rng(11)
    a_vals = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    b_vals = rng.standard_normal((2, 3, 5, 4)).astype(np.float32)
    a, b = T.Tensor(a_vals, requires_grad=True), T.Tensor(b_vals, requires_grad=True)
    T.backward(T.tsum(T.matmul(a, b)))

    def f(arrs):
        return float(np.sum(arrs[0] @ arrs[1]))

    picks = sample_coords([a_vals.shape, b_vals.shape], 10, seed=2)
    fd = central_difference(f, [a_vals, b_vals], picks)
    analytic = np.array(
        [(a.grad if ai == 0 else b.grad).reshape(-1)[fi] for ai, fi in picks]
    )
    assert relative_error(analytic, fd).max() < 1e-3


# ---------------------------------------------------------------- softmax


def test_softmax_uniform():
    out = T.softmax(t32([0.0, 0.0, 0.0]), axis=0)
    np.testing.assert_allclose(out.values, [1 / 3] * 3, rtol=1e-6)


def test_softmax_stabilized():
    out = T.softmax(t32([1000.0, 1000.0]), axis=0)
    np.testing.assert_allclose(out.values, [0.5, 0.5], rtol=1e-6)


def test_softmax_gradient_vs_finite_differences():
    rng = np.random.default_rng(3)
    x_vals = rng.standard_normal((3, 6)).astype(np.float32)
    w = rng.standard_normal((3, 6)).astype(np.float32)

    x = T.Tensor(x_vals, requires_grad=True)
    T.backward(T.tsum(T.mul(T.softmax(x, axis=-1), T.Tensor(w))))

    def f(arrs):
        z = arrs[0]
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return float(np.sum(e / e.sum(axis=-1, keepdims=True) * w))

    picks = sample_coords([x_vals.shape], 10, seed=3)
    fd = central_difference(f, [x_vals], picks)
    analytic = np.array([x.grad.reshape(-1)[fi] for _, fi in picks])
    assert relative_error(analytic, fd).max() < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.integers(1, 5))
def test_softmax_rows_sum_to_one(row, nrows):
    x = t32([row] * nrows)
    out = T.softmax(x, axis=-1)
    assert np.all(out.values >= 0)
    np.testing.assert_allclose(out.values.sum(axis=-1), 1.0, atol=1e-5)


# ---------------------------------------------------------------- layer_norm


def test_layer_norm_constant_row_collapses_to_zero():
    x = t32(np.full((2, 5), 3.7))
    out = T.layer_norm(x, t32(np.ones(5)), t32(np.zeros(5)))
    np.testing.assert_allclose(out.values, 0.0, atol=1e-6)


def test_layer_norm_zero_gain_gives_bias():
    x = t32(np.random.default_rng(0).standard_normal((2, 4)))
    bias = np.array([1.0, -2.0, 0.5, 3.0], dtype=np.float32)
    out = T.layer_norm(x, t32(np.zeros(4)), t32(bias))
    np.testing.assert_allclose(out.values, np.broadcast_to(bias, (2, 4)))


def test_layer_norm_gradient_vs_finite_differences():
    rng = np.random.default_rng(5)
    x_vals = rng.standard_normal((4, 6)).astype(np.float32)
    g_vals = rng.standard_normal(6).astype(np.float32)
    b_vals = rng.standard_normal(6).astype(np.float32)
    w = rng.standard_normal((4, 6)).astype(np.float32)
    eps = 1e-5

    x = T.Tensor(x_vals, requires_grad=True)
    gain = T.Tensor(g_vals, requires_grad=True)
    bias = T.Tensor(b_vals, requires_grad=True)
    T.backward(T.tsum(T.mul(T.layer_norm(x, gain, bias, eps), T.Tensor(w))))

    def f(arrs):
        xx, gg, bb = arrs
        mu = xx.mean(axis=-1, keepdims=True)
        var = ((xx - mu) ** 2).mean(axis=-1, keepdims=True)
        xhat = (xx - mu) / np.sqrt(var + eps)
        return float(np.sum((xhat * gg + bb) * w))

    picks = sample_coords([x_vals.shape, g_vals.shape, b_vals.shape], 14, seed=4)
    fd = central_difference(f, [x_vals, g_vals, b_vals], picks)
    grads = [x.grad, gain.grad, bias.grad]
    analytic = np.array([grads[ai].reshape(-1)[fi] for ai, fi in picks])
    assert relative_error(analytic, fd).max() < 1e-3


# ---------------------------------------------------------------- cross_entropy


def test_cross_entropy_uniform_logits():
    logits = t32(np.zeros((4, 10)))
    loss = T.cross_entropy(logits, np.zeros(4, dtype=np.int64))
    assert abs(loss.item() - math.log(10)) < 1e-6


def test_cross_entropy_confident_correct():
    logits = np.zeros((2, 5), dtype=np.float32)
    logits[0, 3] = 1000.0
    logits[1, 1] = 1000.0
    loss = T.cross_entropy(t32(logits), np.array([3, 1]))
    assert loss.item() < 1e-6


def test_cross_entropy_nonnegative():
    rng = np.random.default_rng(9)
    logits = t32(rng.standard_normal((8, 4)))
    loss = T.cross_entropy(logits, rng.integers(0, 4, size=8))
    assert loss.item() >= 0.0


def test_cross_entropy_label_out_of_range():
    with pytest.raises(DataError):
        T.cross_entropy(t32(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_gradient_vs_finite_differences():
    rng = np.random.default_rng(6)
    x_vals = rng.standard_normal((2, 3)).astype(np.float32)
    labels = np.array([2, 0])

    x = T.Tensor(x_vals, requires_grad=True)
    T.backward(T.cross_entropy(x, labels))

    def f(arrs):
        z = arrs[0]
        zs = z - z.max(axis=1, keepdims=True)
        lse = np.log(np.exp(zs).sum(axis=1))
        return float(np.mean(lse - zs[np.arange(2), labels]))

    picks = sample_coords([x_vals.shape], 6, seed=5)
    fd = central_difference(f, [x_vals], picks)
    analytic = np.array([x.grad.reshape(-1)[fi] for _, fi in picks])
    assert relative_error(analytic, fd).max() < 1e-3


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    w = T.Tensor(np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32), requires_grad=True)
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.ones((3, 4), dtype=np.float32))


def test_backward_half_square_gives_weights():
    vals = np.random.default_rng(1).standard_normal(6).astype(np.float32)
    w = T.Tensor(vals, requires_grad=True)
    T.backward(T.scale(T.tsum(T.mul(w, w)), 0.5))
    np.testing.assert_allclose(w.grad, vals, rtol=1e-6)


def test_backward_accumulates_until_reset():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    T.backward(T.tsum(w))
    T.backward(T.tsum(w))
    np.testing.assert_array_equal(w.grad, np.full(3, 2.0, dtype=np.float32))
    T.zero_grads([w])
    assert w.grad is None


def test_backward_rejects_non_scalar():
    w = T.Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    with pytest.raises(UsageError):
        T.backward(T.mul(w, w))


def test_shared_subexpression_gradient():
    # y = sum((w + w) * w) = sum(2 w^2), dy/dw = 4 w
    vals = np.array([1.0, -2.0, 0.5], dtype=np.float32)
    w = T.Tensor(vals, requires_grad=True)
    T.backward(T.tsum(T.mul(T.add(w, w), w)))
    np.testing.assert_allclose(w.grad, 4 * vals, rtol=1e-6)


def test_composite_plumbing_gradient():
    # Exercise narrow/concat/transpose/broadcast/gelu in one graph.
    rng = np.random.default_rng(13)
    x_vals = rng.standard_normal((2, 4)).astype(np.float32)
    x = T.Tensor(x_vals, requires_grad=True)

    left = T.narrow(x, 1, 0, 2)
    right = T.narrow(x, 1, 2, 2)
    cat = T.concat([right, left], axis=1)
    tr = T.transpose(cat, (1, 0))
    y = T.tsum(T.gelu(tr))
    T.backward(y)

    def f(arrs):
        z = arrs[0]
        cat_ = np.concatenate([z[:, 2:], z[:, :2]], axis=1).T
        u = math.sqrt(2 / math.pi) * (cat_ + 0.044715 * cat_**3)
        return float(np.sum(0.5 * cat_ * (1 + np.tanh(u))))

    picks = sample_coords([x_vals.shape], 8, seed=8)
    fd = central_difference(f, [x_vals], picks)
    analytic = np.array([x.grad.reshape(-1)[fi] for _, fi in picks])
    assert relative_error(analytic, fd).max() < 1e-3


def test_no_grad_skips_recording():
    w = T.Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
    with T.no_grad():
        out = T.tsum(w)
    assert out._parents is None and not out.requires_grad


# ---------------------------------------------------------------- sgd_step


def test_sgd_step_zero_lr():
    p = T.Tensor(np.array([1.0, 2.0], dtype=np.float32), requires_grad=True)
    T.sgd_step([p], [np.array([5.0, 5.0], dtype=np.float32)], lr=0.0)
    np.testing.assert_array_equal(p.values, [1.0, 2.0])


def test_sgd_step_arithmetic():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    T.sgd_step([p], [np.array([2.0], dtype=np.float32)], lr=0.5)
    np.testing.assert_array_equal(p.values, [0.0])


def test_sgd_step_shape_mismatch():
    p = T.Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(ShapeError):
        T.sgd_step([p], [np.ones(3, dtype=np.float32)], lr=0.1)


def test_sgd_step_negative_lr_rejected():
    p = T.Tensor(np.ones(2, dtype=np.float32))
    with pytest.raises(ConfigError):
        T.sgd_step([p], [np.ones(2, dtype=np.float32)], lr=-0.1)


def test_sgd_deterministic_repeat():
    def run():
        rng = np.random.default_rng(42)
        p = T.Tensor(rng.standard_normal(5).astype(np.float32), requires_grad=True)
        for _ in range(10):
            T.backward(T.scale(T.tsum(T.mul(p, p)), 0.5))
            T.sgd_step([p], [p.grad], lr=0.1)
            T.zero_grads([p])
        return p.values.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- finiteness


def test_non_finite_construction_rejected():
    with pytest.raises(NumericError):
        T.Tensor(np.array([1.0, np.inf], dtype=np.float32))


def test_overflow_detected():
    big = t32(np.full((2, 2), 3e38))
    with np.errstate(over="ignore"):
        with pytest.raises(NumericError):
            T.add(big, big)
