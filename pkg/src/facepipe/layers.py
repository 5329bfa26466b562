"""Dense-tensor layer math: forward and backward passes for every layer kind
the network needs, plus a finite-difference gradient checker.

Tensors are C-order ``numpy.ndarray`` values (float64 in tests, float32
permitted for training). Images and activations are shaped (h, w, c); filter
banks are (fh, fw, c_in, c_out). No layer carries a bias term: the parameter
accounting this package guarantees is only reproducible bias-free.

All operations are pure functions of their arguments (dropout is pure given a
seed), so batch elements may be evaluated in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import _kernels
from .errors import ShapeError


# --------------------------------------------------------------------------
# Layer kinds

@dataclass(frozen=True)
class Convolution:
    filter_h: int
    filter_w: int
    stride: int
    in_channels: int
    out_channels: int
    same_padding: bool = True

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if min(self.filter_h, self.filter_w, self.in_channels, self.out_channels) < 1:
            raise ValueError("filter extents and channel counts must be >= 1")


@dataclass(frozen=True)
class MaxPool:
    window: int
    stride: int
    ceil_mode: bool = True

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")


@dataclass(frozen=True)
class AvgPool:
    window: int
    stride: int

    def __post_init__(self):
        if self.window < 1 or self.stride < 1:
            raise ValueError("window and stride must be >= 1")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class FullyConnected:
    in_dim: int
    out_dim: int

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("fc dimensions must be >= 1")


LayerKind = Union[Convolution, MaxPool, AvgPool, ReLU, Dropout, FullyConnected]


def weight_shape(kind: LayerKind) -> tuple[int, ...] | None:
    """Parameter tensor shape for a layer kind, or None if parameterless."""
    if isinstance(kind, Convolution):
        return (kind.filter_h, kind.filter_w, kind.in_channels, kind.out_channels)
    if isinstance(kind, FullyConnected):
        return (kind.in_dim, kind.out_dim)
    return None


def param_count(kind: LayerKind) -> int:
    shape = weight_shape(kind)
    return int(np.prod(shape)) if shape else 0


def output_shape(kind: LayerKind, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Declared output shape of a layer applied to `in_shape`.

    Raises ShapeError when the input cannot legally feed the layer; the
    forward passes produce exactly this shape for every valid input.
    """
    if isinstance(kind, Convolution):
        h, w, c = _expect_rank3(in_shape)
        if c != kind.in_channels:
            raise ShapeError("conv input channels", axis=2,
                             expected=kind.in_channels, actual=c)
        if kind.same_padding:
            oh = (h - 1) // kind.stride + 1
            ow = (w - 1) // kind.stride + 1
        else:
            if h < kind.filter_h:
                raise ShapeError("input shorter than filter", axis=0,
                                 expected=f">={kind.filter_h}", actual=h)
            if w < kind.filter_w:
                raise ShapeError("input narrower than filter", axis=1,
                                 expected=f">={kind.filter_w}", actual=w)
            oh = (h - kind.filter_h) // kind.stride + 1
            ow = (w - kind.filter_w) // kind.stride + 1
        return (oh, ow, kind.out_channels)
    if isinstance(kind, MaxPool):
        h, w, c = _expect_rank3(in_shape)
        oh = _pool_extent(h, kind.window, kind.stride, kind.ceil_mode, axis=0)
        ow = _pool_extent(w, kind.window, kind.stride, kind.ceil_mode, axis=1)
        return (oh, ow, c)
    if isinstance(kind, AvgPool):
        h, w, c = _expect_rank3(in_shape)
        oh = _pool_extent(h, kind.window, kind.stride, False, axis=0)
        ow = _pool_extent(w, kind.window, kind.stride, False, axis=1)
        return (oh, ow, c)
    if isinstance(kind, (ReLU, Dropout)):
        return tuple(in_shape)
    if isinstance(kind, FullyConnected):
        if len(in_shape) != 1 or in_shape[0] != kind.in_dim:
            raise ShapeError("fc input dimension", axis=0,
                             expected=kind.in_dim, actual=in_shape)
        return (kind.out_dim,)
    raise TypeError(f"unknown layer kind {kind!r}")


def _expect_rank3(shape) -> tuple[int, int, int]:
    if len(shape) != 3:
        raise ShapeError("expected h x w x c input", expected=3, actual=len(shape))
    return tuple(shape)  # type: ignore[return-value]


def _pool_extent(extent: int, window: int, stride: int, ceil_mode: bool,
                 axis: int) -> int:
    if window > extent:
        raise ShapeError("pool window larger than input", axis=axis,
                         expected=f"<={extent}", actual=window)
    if ceil_mode:
        out = -(-(extent - window) // stride) + 1
        # the last (possibly partial) window must still start inside the input
        if (out - 1) * stride > extent - 1:
            out -= 1
    else:
        out = (extent - window) // stride + 1
    return out


# --------------------------------------------------------------------------
# Convolution

def _conv_padding(kind: Convolution) -> tuple[int, int, int, int]:
    if not kind.same_padding:
        return (0, 0, 0, 0)
    pt = (kind.filter_h - 1) // 2
    pl = (kind.filter_w - 1) // 2
    return (pt, kind.filter_h - 1 - pt, pl, kind.filter_w - 1 - pl)


def _check_conv_args(x: np.ndarray, kind: Convolution, weights: np.ndarray) -> None:
    ws = weight_shape(kind)
    if weights.shape != ws:
        bad = next(i for i, (a, b) in enumerate(zip(weights.shape, ws)) if a != b) \
            if len(weights.shape) == 4 else 0
        raise ShapeError("conv weight shape", axis=bad, expected=ws,
                         actual=weights.shape)
    output_shape(kind, x.shape)  # validates rank and channel count


def conv2d_forward(x: np.ndarray, kind: Convolution, weights: np.ndarray) -> np.ndarray:
    """Cross-correlate (h, w, c_in) with a (fh, fw, c_in, c_out) filter bank.

    Same-padding uses zero fill and keeps the spatial extent at stride 1.
    """
    _check_conv_args(x, kind, weights)
    pt, pb, pl, pr = _conv_padding(kind)
    xp = np.ascontiguousarray(x)
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((pt, pb), (pl, pr), (0, 0)))
    return _kernels.conv2d_valid(xp, np.ascontiguousarray(weights), kind.stride)


def conv2d_backward(x: np.ndarray, kind: Convolution, weights: np.ndarray,
                    upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of conv2d_forward w.r.t. input and weights."""
    _check_conv_args(x, kind, weights)
    out = output_shape(kind, x.shape)
    if tuple(upstream.shape) != out:
        raise ShapeError("conv upstream shape", expected=out, actual=upstream.shape)
    pt, pb, pl, pr = _conv_padding(kind)
    xp = np.ascontiguousarray(x)
    if pt or pb or pl or pr:
        xp = np.pad(xp, ((pt, pb), (pl, pr), (0, 0)))
    up = np.ascontiguousarray(upstream)
    w = np.ascontiguousarray(weights)
    dxp = _kernels.conv2d_valid_input_grad(up, w, kind.stride,
                                           xp.shape[0], xp.shape[1])
    dw = _kernels.conv2d_valid_weight_grad(xp, up, kind.stride,
                                           kind.filter_h, kind.filter_w)
    h, w_ = x.shape[0], x.shape[1]
    dx = dxp[pt : pt + h, pl : pl + w_]
    return np.ascontiguousarray(dx), dw


# --------------------------------------------------------------------------
# Pooling

def max_pool_forward(x: np.ndarray, kind: MaxPool) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; border windows are clipped to the valid region in ceil mode.

    Returns (pooled, argmax) where argmax holds flat row*w + col source
    indices, ties resolved to the first maximal element in row-major order.
    """
    oh, ow, _ = output_shape(kind, x.shape)
    return _kernels.maxpool_forward(np.ascontiguousarray(x), kind.window,
                                    kind.stride, oh, ow)


def max_pool_backward(x_shape: tuple[int, int, int], arg: np.ndarray,
                      upstream: np.ndarray) -> np.ndarray:
    h, w, _ = x_shape
    return _kernels.maxpool_backward(np.ascontiguousarray(arg),
                                     np.ascontiguousarray(upstream), h, w)


def avg_pool_forward(x: np.ndarray, kind: AvgPool) -> np.ndarray:
    """Average pooling over full windows (floor mode)."""
    oh, ow, c = output_shape(kind, x.shape)
    s = kind.stride
    y = np.zeros((oh, ow, c), dtype=x.dtype)
    for a in range(kind.window):
        for b in range(kind.window):
            y += x[a : a + (oh - 1) * s + 1 : s, b : b + (ow - 1) * s + 1 : s]
    return y / (kind.window * kind.window)


def avg_pool_backward(x_shape: tuple[int, int, int], kind: AvgPool,
                      upstream: np.ndarray) -> np.ndarray:
    oh, ow, _ = upstream.shape
    s = kind.stride
    dx = np.zeros(x_shape, dtype=upstream.dtype)
    share = upstream / (kind.window * kind.window)
    for a in range(kind.window):
        for b in range(kind.window):
            dx[a : a + (oh - 1) * s + 1 : s, b : b + (ow - 1) * s + 1 : s] += share
    return dx


# --------------------------------------------------------------------------
# Elementwise layers

def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return upstream * (x > 0)


def dropout_mask(shape: tuple[int, ...], rate: float, seed) -> np.ndarray:
    """Keep-mask drawn independently per element; deterministic per seed."""
    rng = np.random.default_rng(seed)
    return rng.random(shape) >= rate


def dropout_forward(x: np.ndarray, rate: float, mode: str, seed) -> np.ndarray:
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time so
    inference is the exact identity."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be train or infer, got {mode!r}")
    if mode == "infer" or rate == 0.0:
        return x
    mask = dropout_mask(x.shape, rate, seed)
    return x * (mask / (1.0 - rate)).astype(x.dtype)


def dropout_backward(mask: np.ndarray, rate: float, upstream: np.ndarray) -> np.ndarray:
    return upstream * (mask / (1.0 - rate)).astype(upstream.dtype)


# --------------------------------------------------------------------------
# Fully connected

def fc_forward(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    if x.ndim != 1:
        raise ShapeError("fc input must be a vector", expected=1, actual=x.ndim)
    if weights.ndim != 2 or weights.shape[0] != x.shape[0]:
        raise ShapeError("fc weight shape", axis=0, expected=(x.shape[0], "*"),
                         actual=weights.shape)
    return x @ weights


def fc_backward(x: np.ndarray, weights: np.ndarray,
                upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    if upstream.shape != (weights.shape[1],):
        raise ShapeError("fc upstream shape", expected=(weights.shape[1],),
                         actual=upstream.shape)
    return weights @ upstream, np.outer(x, upstream)


# --------------------------------------------------------------------------
# Uniform dispatch used by the network and the gradient checker

@dataclass
class LayerCache:
    kind: LayerKind
    x: np.ndarray
    weights: np.ndarray | None = None
    arg: np.ndarray | None = None
    mask: np.ndarray | None = None


def layer_forward(kind: LayerKind, x: np.ndarray, weights: np.ndarray | None = None,
                  *, mode: str = "infer", seed=0) -> tuple[np.ndarray, LayerCache]:
    cache = LayerCache(kind, x, weights)
    if isinstance(kind, Convolution):
        return conv2d_forward(x, kind, weights), cache
    if isinstance(kind, MaxPool):
        y, arg = max_pool_forward(x, kind)
        cache.arg = arg
        return y, cache
    if isinstance(kind, AvgPool):
        return avg_pool_forward(x, kind), cache
    if isinstance(kind, ReLU):
        return relu_forward(x), cache
    if isinstance(kind, Dropout):
        if mode == "train" and kind.rate > 0.0:
            cache.mask = dropout_mask(x.shape, kind.rate, seed)
            return x * (cache.mask / (1.0 - kind.rate)).astype(x.dtype), cache
        return x, cache
    if isinstance(kind, FullyConnected):
        return fc_forward(x, weights), cache
    raise TypeError(f"unknown layer kind {kind!r}")


def layer_backward(cache: LayerCache,
                   upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Returns (input_grad, weight_grad-or-None) for a cached forward pass."""
    kind = cache.kind
    if isinstance(kind, Convolution):
        return conv2d_backward(cache.x, kind, cache.weights, upstream)
    if isinstance(kind, MaxPool):
        return max_pool_backward(cache.x.shape, cache.arg, upstream), None
    if isinstance(kind, AvgPool):
        return avg_pool_backward(cache.x.shape, kind, upstream), None
    if isinstance(kind, ReLU):
        return relu_backward(cache.x, upstream), None
    if isinstance(kind, Dropout):
        if cache.mask is None:
            return upstream, None
        return dropout_backward(cache.mask, kind.rate, upstream), None
    if isinstance(kind, FullyConnected):
        return fc_backward(cache.x, cache.weights, upstream)
    raise TypeError(f"unknown layer kind {kind!r}")


def grad_check(kind: LayerKind, x: np.ndarray, epsilon: float = 1e-5, *,
               weights: np.ndarray | None = None, mode: str = "infer",
               dropout_seed=0, probe_seed=0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes the scalar loss sum(forward(...) * R) for a fixed random R over
    every input element and, when present, every weight element. Requires
    float64 inputs; central differences are exact to roundoff for layers that
    are linear in the perturbed coordinate.
    """
    if x.dtype != np.float64 or (weights is not None and weights.dtype != np.float64):
        raise ValueError("grad_check requires float64 arrays")

    def run(xv, wv):
        y, cache = layer_forward(kind, xv, wv, mode=mode, seed=dropout_seed)
        return y, cache

    y0, cache = run(x, weights)
    probe = np.random.default_rng(probe_seed).standard_normal(y0.shape)
    dx, dw = layer_backward(cache, probe)

    worst = 0.0

    def sweep(base, analytic, rebuild):
        nonlocal worst
        flat = base.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(np.sum(run(*rebuild())[0] * probe))
            flat[i] = orig - epsilon
            lo = float(np.sum(run(*rebuild())[0] * probe))
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            a = float(analytic.ravel()[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1.0)
            worst = max(worst, err)

    xm = x.copy()
    sweep(xm, dx, lambda: (xm, weights))
    if weights is not None:
        wm = weights.copy()
        sweep(wm, dw, lambda: (x, wm))
    return worst
