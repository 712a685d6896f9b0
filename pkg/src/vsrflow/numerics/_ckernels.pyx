# cython: language_level=3, boundscheck=False, cdivision=True, initializedcheck=False
"""Compiled row kernels. Same names and semantics as ``_pykernels``."""
import numpy as np
cimport cython
from cython cimport floating
from libc.math cimport exp, sqrt, tanh


cdef double GELU_C = 0.7978845608028654


def _rows(a):
    a = np.ascontiguousarray(a)
    return a.reshape(-1, a.shape[-1]) if a.ndim else a.reshape(1, 1)


@cython.wraparound(False)
cdef void _softmax_fwd(floating[:, ::1] x, floating[:, ::1] y) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[1]
    cdef double m, s, e
    for i in range(x.shape[0]):
        m = x[i, 0]
        for j in range(1, n):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(n):
            e = exp(x[i, j] - m)
            y[i, j] = <floating>e
            s += e
        s = 1.0 / s
        for j in range(n):
            y[i, j] = <floating>(y[i, j] * s)


def softmax_forward(x):
    x2 = _rows(x)
    y2 = np.empty_like(x2)
    if x2.dtype == np.float32:
        _softmax_fwd[float](x2, y2)
    else:
        _softmax_fwd[double](x2, y2)
    return y2.reshape(np.shape(x))


@cython.wraparound(False)
cdef void _softmax_bwd(floating[:, ::1] y, floating[:, ::1] gy, floating[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t i, j, n = y.shape[1]
    cdef double d
    for i in range(y.shape[0]):
        d = 0.0
        for j in range(n):
            d += gy[i, j] * y[i, j]
        for j in range(n):
            gx[i, j] = <floating>(y[i, j] * (gy[i, j] - d))


def softmax_backward(y, gy):
    y2 = _rows(y)
    g2 = _rows(gy.astype(y2.dtype, copy=False))
    gx = np.empty_like(y2)
    if y2.dtype == np.float32:
        _softmax_bwd[float](y2, g2, gx)
    else:
        _softmax_bwd[double](y2, g2, gx)
    return gx.reshape(np.shape(y))


@cython.wraparound(False)
cdef void _ln_fwd(floating[:, ::1] x, floating[:, ::1] y, floating[::1] rstd, double eps) noexcept nogil:
    cdef Py_ssize_t i, j, n = x.shape[1]
    cdef double mu, var, d, r
    for i in range(x.shape[0]):
        mu = 0.0
        for j in range(n):
            mu += x[i, j]
        mu /= n
        var = 0.0
        for j in range(n):
            d = x[i, j] - mu
            var += d * d
        r = 1.0 / sqrt(var / n + eps)
        rstd[i] = <floating>r
        for j in range(n):
            y[i, j] = <floating>((x[i, j] - mu) * r)


def layernorm_forward(x, double eps):
    x2 = _rows(x)
    y2 = np.empty_like(x2)
    r = np.empty(x2.shape[0], dtype=x2.dtype)
    if x2.dtype == np.float32:
        _ln_fwd[float](x2, y2, r, eps)
    else:
        _ln_fwd[double](x2, y2, r, eps)
    shape = np.shape(x)
    return y2.reshape(shape), r.reshape(shape[:-1])


@cython.wraparound(False)
cdef void _ln_bwd(floating[:, ::1] xhat, floating[::1] rstd, floating[:, ::1] gy, floating[:, ::1] gx) noexcept nogil:
    cdef Py_ssize_t i, j, n = xhat.shape[1]
    cdef double mg, mgx
    for i in range(xhat.shape[0]):
        mg = 0.0
        mgx = 0.0
        for j in range(n):
            mg += gy[i, j]
            mgx += gy[i, j] * xhat[i, j]
        mg /= n
        mgx /= n
        for j in range(n):
            gx[i, j] = <floating>(rstd[i] * (gy[i, j] - mg - xhat[i, j] * mgx))


def layernorm_backward(xhat, rstd, gy):
    x2 = _rows(xhat)
    r = np.ascontiguousarray(rstd, dtype=x2.dtype).reshape(-1)
    g2 = _rows(gy.astype(x2.dtype, copy=False))
    gx = np.empty_like(x2)
    if x2.dtype == np.float32:
        _ln_bwd[float](x2, r, g2, gx)
    else:
        _ln_bwd[double](x2, r, g2, gx)
    return gx.reshape(np.shape(xhat))


@cython.wraparound(False)
cdef void _rope(floating[:, :, ::1] x, floating[:, ::1] c, floating[:, ::1] s, floating[:, :, ::1] out) noexcept nogil:
    cdef Py_ssize_t b, l, p, npair = c.shape[1]
    cdef double x0, x1, cc, ss
    for b in range(x.shape[0]):
        for l in range(x.shape[1]):
            for p in range(npair):
                x0 = x[b, l, 2 * p]
                x1 = x[b, l, 2 * p + 1]
                cc = c[l, p]
                ss = s[l, p]
                out[b, l, 2 * p] = <floating>(x0 * cc - x1 * ss)
                out[b, l, 2 * p + 1] = <floating>(x0 * ss + x1 * cc)


def rope_rotate(x, cos, sin):
    shape = np.shape(x)
    x3 = np.ascontiguousarray(x).reshape(-1, shape[-2], shape[-1])
    c = np.ascontiguousarray(cos, dtype=x3.dtype)
    s = np.ascontiguousarray(sin, dtype=x3.dtype)
    out = np.empty_like(x3)
    if x3.dtype == np.float32:
        _rope[float](x3, c, s, out)
    else:
        _rope[double](x3, c, s, out)
    return out.reshape(shape)


@cython.wraparound(False)
cdef void _gelu_fwd(floating[::1] x, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v
    for i in range(x.shape[0]):
        v = x[i]
        y[i] = <floating>(0.5 * v * (1.0 + tanh(GELU_C * (v + 0.044715 * v * v * v))))


def gelu_forward(x):
    x1 = np.ascontiguousarray(x).reshape(-1)
    y = np.empty_like(x1)
    if x1.dtype == np.float32:
        _gelu_fwd[float](x1, y)
    else:
        _gelu_fwd[double](x1, y)
    return y.reshape(np.shape(x))


@cython.wraparound(False)
cdef void _gelu_bwd(floating[::1] x, floating[::1] gy, floating[::1] gx) noexcept nogil:
    cdef Py_ssize_t i
    cdef double v, th
    for i in range(x.shape[0]):
        v = x[i]
        th = tanh(GELU_C * (v + 0.044715 * v * v * v))
        gx[i] = <floating>(gy[i] * (0.5 * (1.0 + th)
                                     + 0.5 * v * (1.0 - th * th) * GELU_C * (1.0 + 3 * 0.044715 * v * v)))


def gelu_backward(x, gy):
    x1 = np.ascontiguousarray(x).reshape(-1)
    g1 = np.ascontiguousarray(gy, dtype=x1.dtype).reshape(-1)
    gx = np.empty_like(x1)
    if x1.dtype == np.float32:
        _gelu_bwd[float](x1, g1, gx)
    else:
        _gelu_bwd[double](x1, g1, gx)
    return gx.reshape(np.shape(x))
