"""Pure numpy implementations of the fused row kernels.

Every function works on the last axis and returns new arrays; the compiled
module ``_ckernels`` exposes the same names and signatures.
"""
import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))


def softmax_forward(x):
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def layernorm_forward(x, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[..., 0]


def layernorm_backward(xhat, rstd, gy):
    n = xhat.shape[-1]
    mg = gy.sum(axis=-1, keepdims=True) / n
    mgx = (gy * xhat).sum(axis=-1, keepdims=True) / n
    return rstd[..., None] * (gy - mg - xhat * mgx)


def rope_rotate(x, cos, sin):
    # x: (..., L, 2P) interleaved pairs; cos/sin: (L, P)
    x0 = x[..., 0::2]
    x1 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos
    return out


def gelu_forward(x):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_backward(x, gy):
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner)
