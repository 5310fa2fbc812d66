#!/usr/bin/env python3
"""
Tests for the tensor kernels.

Checks:
- Forward kernels against brute-force loop references.
- Backward kernels against central finite differences (float64).
- Softmax / BCE analytic values and Adam closed-form steps.
"""

import math
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import DimensionError
from tensor_ops import (
    AdamState,
    BatchNormParams,
    ConvParams,
    adam_step,
    batchnorm_backward,
    batchnorm_forward,
    bce_loss,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    maxpool3x3,
    maxpool_backward,
    relu,
    softmax,
)

H = 1e-3


def numeric_grad(f, x, h=H):
    """Central differences of scalar f() w.r.t. every element of x (modified in place)."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        plus = f()
        x[idx] = old - h
        minus = f()
        x[idx] = old
        grad[idx] = (plus - minus) / (2 * h)
    return grad


def assert_grad_close(analytic, numeric):
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-6)


def conv_reference(x, w, b, stride, pad):
    n, c, hh, ww = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (hh + 2 * pad - kh) // stride + 1
    wo = (ww + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, ho, wo))
    for i in range(n):
        for o in range(oc):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, y * stride + u, z * stride + v] * w[o, ch, u, v]
                    out[i, o, y, z] = acc
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    w = np.zeros((1, 1, 3, 3), dtype=np.float32)
    w[0, 0, 1, 1] = 1.0
    out = conv2d_forward(x, ConvParams(w, np.zeros(1, dtype=np.float32), padding=1))
    np.testing.assert_array_equal(out, x)


def test_conv_constant_sum():
    c = 0.75
    x = np.full((1, 1, 4, 4), c, dtype=np.float32)
    out = conv2d_forward(x, ConvParams(np.ones((1, 1, 3, 3), dtype=np.float32), np.zeros(1, dtype=np.float32)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_allclose(out, 9 * c)


def test_conv_matches_loop_reference():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 3))
        c = int(rng.integers(1, 5))
        h = int(rng.integers(3, 10))
        w = int(rng.integers(3, 10))
        k = int(rng.choice([1, 3]))
        oc = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, 2)) if k == 3 else 0
        x = rng.normal(size=(n, c, h, w))
        wt = rng.normal(size=(oc, c, k, k))
        b = rng.normal(size=oc)
        out = conv2d_forward(x, ConvParams(wt, b, stride, pad))
        np.testing.assert_allclose(out, conv_reference(x, wt, b, stride, pad), atol=1e-6)


def test_conv_shape_mismatch():
    x = np.zeros((1, 2, 5, 5), dtype=np.float32)
    p = ConvParams(np.zeros((1, 3, 3, 3), dtype=np.float32), np.zeros(1, dtype=np.float32))
    with pytest.raises(DimensionError):
        conv2d_forward(x, p)


def test_conv_backward_trivial_identities():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 2, 5, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride=1, padding=1)
    zero = np.zeros((2, 3, 5, 5))
    dx, dw, db = conv2d_backward(x, p, zero)
    assert not dx.any() and not dw.any() and not db.any()

    g = rng.normal(size=(2, 3, 5, 5))
    _, _, db = conv2d_backward(x, p, g)
    np.testing.assert_allclose(db, g.sum(axis=(0, 2, 3)))


def test_conv_backward_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 2, 6, 5))
    p = ConvParams(rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3), stride=2, padding=1)
    g = rng.normal(size=conv2d_forward(x, p).shape)
    f = lambda: float(np.sum(g * conv2d_forward(x, p)))

    dx, dw, db = conv2d_backward(x, p, g)
    assert_grad_close(dx, numeric_grad(f, x))
    assert_grad_close(dw, numeric_grad(f, p.weights))
    assert_grad_close(db, numeric_grad(f, p.bias))


def test_conv_backward_rejects_wrong_grad_shape():
    x = np.zeros((1, 1, 5, 5))
    p = ConvParams(np.zeros((1, 1, 3, 3)), np.zeros(1))
    with pytest.raises(DimensionError):
        conv2d_backward(x, p, np.zeros((1, 1, 5, 5)))


# ---------------------------------------------------------------------------
# Max pooling
# ---------------------------------------------------------------------------

def test_maxpool_ramp():
    x = np.arange(25, dtype=np.float32).reshape(1, 1, 5, 5)
    out, _ = maxpool3x3(x, 2)
    np.testing.assert_array_equal(out[0, 0], [[12, 14], [22, 24]])


def test_maxpool_constant_and_tie_goes_to_first():
    x = np.full((1, 2, 5, 5), 3.0, dtype=np.float32)
    out, idx = maxpool3x3(x, 1)
    assert out.shape == (1, 2, 3, 3)
    assert np.all(out == 3.0)
    # window (r, c) starts at flat index r*5 + c
    expected = np.arange(3)[:, None] * 5 + np.arange(3)[None, :]
    np.testing.assert_array_equal(idx.indices[0, 0], expected)


def test_maxpool_matches_window_enumeration():
    rng = np.random.default_rng(3)
    for _ in range(50):
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        stride = int(rng.integers(1, 4))
        x = rng.normal(size=(2, 3, h, w)).astype(np.float32)
        out, _ = maxpool3x3(x, stride)
        ho, wo = (h - 3) // stride + 1, (w - 3) // stride + 1
        ref = np.zeros((2, 3, ho, wo), dtype=np.float32)
        for i in range(ho):
            for j in range(wo):
                ref[:, :, i, j] = x[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3].max(axis=(2, 3))
        np.testing.assert_array_equal(out, ref)


def test_maxpool_too_small():
    with pytest.raises(DimensionError):
        maxpool3x3(np.zeros((1, 1, 2, 5)), 1)


def test_maxpool_backward_partition():
    rng = np.random.default_rng(4)
    x = rng.permutation(36).astype(np.float64).reshape(1, 1, 6, 6)
    out, idx = maxpool3x3(x, 3)
    g = rng.normal(size=out.shape)
    grad_in = maxpool_backward(idx, g)
    assert np.count_nonzero(grad_in) == g.size
    assert math.isclose(grad_in.sum(), g.sum(), rel_tol=1e-12)
    assert sorted(grad_in[grad_in != 0].tolist()) == sorted(g.ravel().tolist())


def test_maxpool_backward_finite_differences():
    rng = np.random.default_rng(5)
    # distinct values spaced well above H so perturbations never change a winner
    x = (rng.permutation(2 * 2 * 7 * 7) * 0.01).reshape(2, 2, 7, 7)
    out, idx = maxpool3x3(x, 1)
    g = rng.normal(size=out.shape)
    f = lambda: float(np.sum(g * maxpool3x3(x, 1)[0]))
    assert_grad_close(maxpool_backward(idx, g), numeric_grad(f, x))


def test_maxpool_backward_stale_indices():
    _, idx = maxpool3x3(np.zeros((1, 1, 5, 5)), 1)
    with pytest.raises(DimensionError):
        maxpool_backward(idx, np.zeros((1, 1, 2, 2)))


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(6)
    x = rng.normal(3.0, 2.0, size=(4, 3, 5, 5))
    p = BatchNormParams.identity(3, dtype=np.float64)
    out = batchnorm_forward(x, p, "train")
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1.0) < 1e-4)


def test_batchnorm_running_stats_update():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3, 5, 5))
    p = BatchNormParams.identity(3, dtype=np.float64)
    batchnorm_forward(x, p, "train")
    np.testing.assert_allclose(p.running_mean, 0.1 * x.mean(axis=(0, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(p.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)), atol=1e-12)


def test_batchnorm_infer_identity_statistics():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    out = batchnorm_forward(x, BatchNormParams.identity(3), "infer")
    np.testing.assert_allclose(out, x / np.sqrt(1 + 1e-5), rtol=1e-6)


def test_batchnorm_matches_brute_force_statistics():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(3, 2, 4, 5))
    p = BatchNormParams(gamma=rng.normal(size=2), beta=rng.normal(size=2),
                        running_mean=np.zeros(2), running_var=np.ones(2))
    out = batchnorm_forward(x, p, "train")
    ref = np.zeros_like(x)
    for c in range(2):
        values = x[:, c].ravel()
        mean = sum(values) / values.size
        var = sum((v - mean) ** 2 for v in values) / values.size
        ref[:, c] = (x[:, c] - mean) / math.sqrt(var + 1e-5) * p.gamma[c] + p.beta[c]
    np.testing.assert_allclose(out, ref, atol=1e-6)


def test_batchnorm_backward_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(3, 2, 3, 3))
    p = BatchNormParams(gamma=rng.normal(size=2), beta=rng.normal(size=2),
                        running_mean=np.zeros(2), running_var=np.ones(2))
    g = rng.normal(size=x.shape)
    f = lambda: float(np.sum(g * batchnorm_forward(x, p, "train")))

    dx, dgamma, dbeta = batchnorm_backward(x, p, g)
    assert_grad_close(dx, numeric_grad(f, x))
    assert_grad_close(dgamma, numeric_grad(f, p.gamma))
    assert_grad_close(dbeta, numeric_grad(f, p.beta))


def test_batchnorm_flat_input_and_bad_mode():
    x = np.random.default_rng(11).normal(size=(5, 4))
    out = batchnorm_forward(x, BatchNormParams.identity(4, dtype=np.float64), "train")
    assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
    with pytest.raises(ValueError):
        batchnorm_forward(x, BatchNormParams.identity(4), "eval")


# ---------------------------------------------------------------------------
# Dense, ReLU, softmax, BCE
# ---------------------------------------------------------------------------

def test_dense_trivial_cases():
    x = np.random.default_rng(12).normal(size=(3, 4))
    np.testing.assert_allclose(dense_forward(x, np.eye(4), np.zeros(4)), x)
    b = np.array([1.0, -2.0])
    np.testing.assert_allclose(dense_forward(np.zeros((3, 4)), np.ones((2, 4)), b), np.tile(b, (3, 1)))


def test_dense_flattens_input():
    x = np.ones((2, 2, 2, 2))
    out = dense_forward(x, np.ones((3, 8)), np.zeros(3))
    np.testing.assert_allclose(out, np.full((2, 3), 8.0))
    with pytest.raises(DimensionError):
        dense_forward(x, np.ones((3, 7)), np.zeros(3))


def test_dense_backward_finite_differences():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(4, 5))
    w = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    g = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(g * dense_forward(x, w, b)))

    dx, dw, db = dense_backward(x, w, g)
    assert_grad_close(dx, numeric_grad(f, x))
    assert_grad_close(dw, numeric_grad(f, w))
    assert_grad_close(db, numeric_grad(f, b))


def test_relu():
    assert not relu(-np.abs(np.arange(1.0, 6.0))).any()
    pos = np.arange(1.0, 6.0)
    np.testing.assert_array_equal(relu(pos), pos)
    mixed = np.array([-2.0, 0.0, 3.5, -0.1, 7.0])
    np.testing.assert_array_equal(relu(mixed), [max(v, 0.0) for v in mixed])


def test_softmax_values():
    np.testing.assert_allclose(softmax(np.zeros((1, 2))), [[0.5, 0.5]])
    np.testing.assert_allclose(softmax(np.array([[0.0, math.log(3)]])), [[0.25, 0.75]], atol=1e-12)
    big = softmax(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-12)


def test_bce_values():
    loss, _ = bce_loss(np.array([[0.0, 1.0]]), np.array([1]))
    assert loss < 1e-6
    loss, _ = bce_loss(np.array([[0.5, 0.5]]), np.array([0]))
    assert math.isclose(loss, 0.693147, abs_tol=1e-6)


def test_bce_gradient_wrt_logits():
    rng = np.random.default_rng(14)
    logits = rng.normal(size=(6, 2))
    labels = rng.integers(0, 2, size=6)
    f = lambda: bce_loss(softmax(logits), labels)[0]
    _, grad = bce_loss(softmax(logits), labels)
    assert_grad_close(grad, numeric_grad(f, logits))


def test_bce_rejects_bad_labels():
    with pytest.raises(DimensionError):
        bce_loss(np.full((2, 2), 0.5), np.array([0, 2]))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    params = {"w": np.array([1.0, -2.0])}
    adam_step(params, {"w": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_closed_form():
    params = {"w": np.array([1.0])}
    state = AdamState(lr=0.01)
    adam_step(params, {"w": np.array([2.0])}, state)
    assert state.step_count == 1
    assert math.isclose(params["w"][0], 1.0 - 0.01, abs_tol=1e-8)


def test_adam_minimizes_square():
    params = {"w": np.array([1.0])}
    state = AdamState(lr=0.1)
    for _ in range(100):
        adam_step(params, {"w": 2.0 * params["w"]}, state)
    assert abs(params["w"][0]) < 0.1
    assert state.v["w"].min() >= 0


def test_adam_updates_in_place_and_checks_shapes():
    w = np.ones(3, dtype=np.float32)
    params = {"w": w}
    adam_step(params, {"w": np.ones(3)}, AdamState(lr=0.5))
    assert params["w"] is w and w.dtype == np.float32
    assert np.all(w < 1.0)
    with pytest.raises(DimensionError):
        adam_step(params, {"w": np.ones(2)}, AdamState())
    with pytest.raises(DimensionError):
        adam_step(params, {"missing": np.ones(3)}, AdamState())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
