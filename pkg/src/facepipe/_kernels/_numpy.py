"""Pure-numpy kernel implementations.

These are the fallback bodies for the hot inner loops (valid cross-correlation
and max pooling on a single h x w x c image). Everything is expressed as a
small number of strided-slice operations so the work stays inside numpy.
The compiled backend in ``_native.pyx`` implements the same contracts.
"""

from __future__ import annotations

import numpy as np

BACKEND = "numpy"


def conv2d_valid(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Valid cross-correlation. xp: (hp, wp, cin), w: (fh, fw, cin, cout)."""
    hp, wp, _ = xp.shape
    fh, fw, _, cout = w.shape
    oh = (hp - fh) // stride + 1
    ow = (wp - fw) // stride + 1
    y = np.zeros((oh, ow, cout), dtype=xp.dtype)
    for a in range(fh):
        for b in range(fw):
            patch = xp[a : a + (oh - 1) * stride + 1 : stride,
                       b : b + (ow - 1) * stride + 1 : stride]
            y += patch @ w[a, b]
    return y


def conv2d_valid_input_grad(up: np.ndarray, w: np.ndarray, stride: int,
                            hp: int, wp: int) -> np.ndarray:
    """Gradient of conv2d_valid w.r.t. the (padded) input."""
    oh, ow, _ = up.shape
    fh, fw, cin, _ = w.shape
    dxp = np.zeros((hp, wp, cin), dtype=up.dtype)
    for a in range(fh):
        for b in range(fw):
            dxp[a : a + (oh - 1) * stride + 1 : stride,
                b : b + (ow - 1) * stride + 1 : stride] += up @ w[a, b].T
    return dxp


def conv2d_valid_weight_grad(xp: np.ndarray, up: np.ndarray, stride: int,
                             fh: int, fw: int) -> np.ndarray:
    """Gradient of conv2d_valid w.r.t. the filter bank."""
    oh, ow, cout = up.shape
    cin = xp.shape[2]
    dw = np.empty((fh, fw, cin, cout), dtype=xp.dtype)
    for a in range(fh):
        for b in range(fw):
            patch = xp[a : a + (oh - 1) * stride + 1 : stride,
                       b : b + (ow - 1) * stride + 1 : stride]
            dw[a, b] = np.tensordot(patch, up, axes=([0, 1], [0, 1]))
    return dw


def maxpool_forward(x: np.ndarray, window: int, stride: int,
                    oh: int, ow: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling with border windows clipped to the valid region.

    Returns (pooled, arg) where arg holds the flat row*w + col source index
    of the winning element per output cell. Ties go to the first element in
    row-major window order.
    """
    h, w, c = x.shape
    need_h = max((oh - 1) * stride + window, h)
    need_w = max((ow - 1) * stride + window, w)
    if need_h > h or need_w > w:
        fill = np.finfo(x.dtype).min
        xpad = np.full((need_h, need_w, c), fill, dtype=x.dtype)
        xpad[:h, :w] = x
    else:
        xpad = x
    best = np.full((oh, ow, c), -np.inf, dtype=x.dtype)
    arg = np.zeros((oh, ow, c), dtype=np.int64)
    rows = np.arange(oh)[:, None, None] * stride
    cols = np.arange(ow)[None, :, None] * stride
    for a in range(window):
        for b in range(window):
            cand = xpad[a : a + (oh - 1) * stride + 1 : stride,
                        b : b + (ow - 1) * stride + 1 : stride]
            take = cand > best
            best = np.where(take, cand, best)
            arg = np.where(take, (rows + a) * w + (cols + b), arg)
    return best, arg


def maxpool_backward(arg: np.ndarray, up: np.ndarray, h: int, w: int) -> np.ndarray:
    """Scatter upstream gradients back to the argmax source positions."""
    c = up.shape[2]
    dx = np.zeros((h * w, c), dtype=up.dtype)
    flat_arg = arg.reshape(-1, c)
    flat_up = up.reshape(-1, c)
    for ch in range(c):
        np.add.at(dx[:, ch], flat_arg[:, ch], flat_up[:, ch])
    return dx.reshape(h, w, c)
