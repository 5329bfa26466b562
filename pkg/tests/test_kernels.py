"""The compiled kernel backend and the numpy fallback must agree."""

import numpy as np
import pytest

from facepipe import _kernels
from facepipe._kernels import _numpy as fallback

native = pytest.importorskip("facepipe._kernels._native",
                             reason="compiled kernels not built")


@pytest.fixture(params=[np.float32, np.float64], ids=["f32", "f64"])
def dtype(request):
    return request.param


def _rand(rng, shape, dtype):
    return np.ascontiguousarray(rng.standard_normal(shape).astype(dtype))


def test_selected_backend_is_known():
    assert _kernels.BACKEND in ("native", "numpy")


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_agrees(dtype, stride):
    rng = np.random.default_rng(0)
    xp = _rand(rng, (9, 8, 3), dtype)
    w = _rand(rng, (3, 3, 3, 4), dtype)
    a = fallback.conv2d_valid(xp, w, stride)
    b = native.conv2d_valid(xp, w, stride)
    tol = 1e-5 if dtype == np.float32 else 1e-12
    assert a.dtype == b.dtype == dtype
    np.testing.assert_allclose(a, b, atol=tol, rtol=tol)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_grads_agree(dtype, stride):
    rng = np.random.default_rng(1)
    xp = _rand(rng, (9, 8, 2), dtype)
    w = _rand(rng, (3, 3, 2, 4), dtype)
    oh = (9 - 3) // stride + 1
    ow = (8 - 3) // stride + 1
    up = _rand(rng, (oh, ow, 4), dtype)
    tol = 1e-4 if dtype == np.float32 else 1e-12
    gi_a = fallback.conv2d_valid_input_grad(up, w, stride, 9, 8)
    gi_b = native.conv2d_valid_input_grad(up, w, stride, 9, 8)
    np.testing.assert_allclose(gi_a, gi_b, atol=tol, rtol=tol)
    gw_a = fallback.conv2d_valid_weight_grad(xp, up, stride, 3, 3)
    gw_b = native.conv2d_valid_weight_grad(xp, up, stride, 3, 3)
    np.testing.assert_allclose(gw_a, gw_b, atol=tol, rtol=tol)


def test_maxpool_agrees_including_argmax(dtype):
    rng = np.random.default_rng(2)
    x = _rand(rng, (25, 25, 3), dtype)
    ya, aa = fallback.maxpool_forward(x, 2, 2, 13, 13)
    yb, ab = native.maxpool_forward(x, 2, 2, 13, 13)
    np.testing.assert_array_equal(ya, yb)
    np.testing.assert_array_equal(aa, ab)
    up = _rand(rng, (13, 13, 3), dtype)
    da = fallback.maxpool_backward(aa, up, 25, 25)
    db = native.maxpool_backward(ab, up, 25, 25)
    np.testing.assert_array_equal(da, db)


def test_maxpool_tie_break_agrees(dtype):
    x = np.zeros((4, 4, 1), dtype=dtype)  # everything ties
    _, aa = fallback.maxpool_forward(x, 2, 2, 2, 2)
    _, ab = native.maxpool_forward(x, 2, 2, 2, 2)
    np.testing.assert_array_equal(aa, ab)
