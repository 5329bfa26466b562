# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel bodies. Same contracts as _numpy.py; see that module.

Convolutions decompose into one small GEMM per (filter row, filter col,
output row): the strided input patch row is a valid leading-dimension view,
so BLAS does all the arithmetic. Pooling stays as straight loops."""

import numpy as np

cimport cython
from scipy.linalg.cython_blas cimport dgemm, sgemm

BACKEND = "native"

ctypedef fused real:
    float
    double


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       real* a, int lda, real* b, int ldb,
                       real* c, int ldc) noexcept nogil:
    cdef real one = 1
    cdef char tac = ta, tbc = tb
    if real is float:
        sgemm(&tac, &tbc, &m, &n, &k, &one, <float*> a, &lda,
              <float*> b, &ldb, &one, <float*> c, &ldc)
    else:
        dgemm(&tac, &tbc, &m, &n, &k, &one, <double*> a, &lda,
              <double*> b, &ldb, &one, <double*> c, &ldc)


def conv2d_valid(real[:, :, ::1] xp, real[:, :, :, ::1] w, int stride):
    cdef Py_ssize_t hp = xp.shape[0], wp = xp.shape[1], cin = xp.shape[2]
    cdef Py_ssize_t fh = w.shape[0], fw = w.shape[1], cout = w.shape[3]
    cdef Py_ssize_t oh = (hp - fh) // stride + 1
    cdef Py_ssize_t ow = (wp - fw) // stride + 1
    if real is float:
        y_arr = np.zeros((oh, ow, cout), dtype=np.float32)
    else:
        y_arr = np.zeros((oh, ow, cout), dtype=np.float64)
    cdef real[:, :, ::1] y = y_arr
    cdef Py_ssize_t i, a, b
    cdef int ld_patch = <int> (stride * cin)
    with nogil:
        for i in range(oh):
            for a in range(fh):
                for b in range(fw):
                    # row-major y[i] (ow x cout) += patch (ow x cin, ld
                    # stride*cin) @ w[a, b] (cin x cout)
                    _gemm(c'N', c'N', <int> cout, <int> ow, <int> cin,
                          &w[a, b, 0, 0], <int> cout,
                          &xp[i * stride + a, b, 0], ld_patch,
                          &y[i, 0, 0], <int> cout)
    return y_arr


def conv2d_valid_input_grad(real[:, :, ::1] up, real[:, :, :, ::1] w,
                            int stride, Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t oh = up.shape[0], ow = up.shape[1], cout = up.shape[2]
    cdef Py_ssize_t fh = w.shape[0], fw = w.shape[1], cin = w.shape[2]
    if real is float:
        dxp_arr = np.zeros((hp, wp, cin), dtype=np.float32)
    else:
        dxp_arr = np.zeros((hp, wp, cin), dtype=np.float64)
    cdef real[:, :, ::1] dxp = dxp_arr
    cdef Py_ssize_t i, a, b
    cdef int ld_patch = <int> (stride * cin)
    with nogil:
        for i in range(oh):
            for a in range(fh):
                for b in range(fw):
                    # row-major dpatch (ow x cin, ld stride*cin) +=
                    # up[i] (ow x cout) @ w[a, b]^T (cout x cin)
                    _gemm(c'T', c'N', <int> cin, <int> ow, <int> cout,
                          &w[a, b, 0, 0], <int> cout,
                          &up[i, 0, 0], <int> cout,
                          &dxp[i * stride + a, b, 0], ld_patch)
    return dxp_arr


def conv2d_valid_weight_grad(real[:, :, ::1] xp, real[:, :, ::1] up,
                             int stride, Py_ssize_t fh, Py_ssize_t fw):
    cdef Py_ssize_t oh = up.shape[0], ow = up.shape[1], cout = up.shape[2]
    cdef Py_ssize_t cin = xp.shape[2]
    if real is float:
        dw_arr = np.zeros((fh, fw, cin, cout), dtype=np.float32)
    else:
        dw_arr = np.zeros((fh, fw, cin, cout), dtype=np.float64)
    cdef real[:, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t i, a, b
    cdef int ld_patch = <int> (stride * cin)
    with nogil:
        for i in range(oh):
            for a in range(fh):
                for b in range(fw):
                    # row-major dw[a, b] (cin x cout) +=
                    # patch^T (cin x ow) @ up[i] (ow x cout)
                    _gemm(c'N', c'T', <int> cout, <int> cin, <int> ow,
                          &up[i, 0, 0], <int> cout,
                          &xp[i * stride + a, b, 0], ld_patch,
                          &dw[a, b, 0, 0], <int> cout)
    return dw_arr


def maxpool_forward(real[:, :, ::1] x, int window, int stride,
                    Py_ssize_t oh, Py_ssize_t ow):
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2]
    if real is float:
        y_arr = np.empty((oh, ow, c), dtype=np.float32)
    else:
        y_arr = np.empty((oh, ow, c), dtype=np.float64)
    arg_arr = np.empty((oh, ow, c), dtype=np.int64)
    cdef real[:, :, ::1] y = y_arr
    cdef long long[:, :, ::1] arg = arg_arr
    cdef Py_ssize_t i, j, a, b, ch, r, cc, top, left
    cdef real best, v
    cdef long long bi
    with nogil:
        for i in range(oh):
            top = i * stride
            for j in range(ow):
                left = j * stride
                for ch in range(c):
                    best = x[top, left, ch]
                    bi = top * w + left
                    for a in range(window):
                        r = top + a
                        if r >= h:
                            break
                        for b in range(window):
                            cc = left + b
                            if cc >= w:
                                break
                            v = x[r, cc, ch]
                            if v > best:
                                best = v
                                bi = r * w + cc
                    y[i, j, ch] = best
                    arg[i, j, ch] = bi
    return y_arr, arg_arr


def maxpool_backward(long long[:, :, ::1] arg, real[:, :, ::1] up,
                     Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t oh = up.shape[0], ow = up.shape[1], c = up.shape[2]
    if real is float:
        dx_arr = np.zeros((h, w, c), dtype=np.float32)
    else:
        dx_arr = np.zeros((h, w, c), dtype=np.float64)
    cdef real[:, :, ::1] dx = dx_arr
    cdef Py_ssize_t i, j, ch
    cdef long long flat
    with nogil:
        for i in range(oh):
            for j in range(ow):
                for ch in range(c):
                    flat = arg[i, j, ch]
                    dx[flat // w, flat % w, ch] += up[i, j, ch]
    return dx_arr
