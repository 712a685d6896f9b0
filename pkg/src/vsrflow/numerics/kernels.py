"""Backend selection for the fused row kernels.

The compiled module is used when it was built and ``VSRFLOW_PURE_PYTHON``
is unset; otherwise the numpy fallback is loaded. ``use_backend`` switches
at runtime (tests and the benchmark compare both).
"""
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_active = _pykernels if os.environ.get("VSRFLOW_PURE_PYTHON") or _ckernels is None else _ckernels


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "cython" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    """Select ``"python"`` or ``"cython"``; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"kernel backend {name!r} not available ({available_backends()})")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def softmax_forward(x):
    return _active.softmax_forward(x)


def softmax_backward(y, gy):
    return _active.softmax_backward(y, gy)


def layernorm_forward(x, eps):
    return _active.layernorm_forward(x, eps)


def layernorm_backward(xhat, rstd, gy):
    return _active.layernorm_backward(xhat, rstd, gy)


def rope_rotate(x, cos, sin):
    return _active.rope_rotate(x, cos, sin)


def gelu_forward(x):
    return _active.gelu_forward(x)


def gelu_backward(x, gy):
    return _active.gelu_backward(x, gy)
