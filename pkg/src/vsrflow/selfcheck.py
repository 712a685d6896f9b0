"""Quick consistency checks behind ``vsrflow selftest``."""
import numpy as np

from . import codec
from .numerics import Tensor, grad_check, kernels, precision, tsum, square
from .sampler import cfg_combine, plms_integrate, shift_timesteps


def _codec_roundtrip():
    x = np.random.default_rng(0).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    err = float(np.abs(codec.decode(codec.encode(x)) - x).max())
    return err < 1e-5, f"max error {err:.2e}"


def _grad():
    with precision("wide"):
        x = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)
        rep = grad_check(lambda t: tsum(square(t)), x, h=1e-4)
    return rep.max_abs_rel_error < 1e-6, f"max rel error {rep.max_abs_rel_error:.2e}"


def _sampler():
    z = np.zeros(4)
    out = plms_integrate(lambda z, t, n: np.ones_like(z), z, shift_timesteps(4))
    ok = np.allclose(out, 1.0, atol=1e-12) and cfg_combine(2.0, 1.0, 1.5, 3.0, 1.0) == 5.5
    return ok, f"constant field end {out[0]:.6f}"


def _backends():
    x = np.random.default_rng(1).standard_normal((5, 7))
    names = kernels.available_backends()
    outs = []
    for name in names:
        prev = kernels.use_backend(name)
        try:
            outs.append(kernels.softmax_forward(x))
        finally:
            kernels.use_backend(prev)
    err = max((float(np.abs(o - outs[0]).max()) for o in outs), default=0.0)
    return err < 1e-12, f"backends {names}, max diff {err:.1e}"


CHECKS = [("codec_roundtrip", _codec_roundtrip), ("grad_check", _grad),
          ("sampler", _sampler), ("kernel_backends", _backends)]


def run_checks():
    results = []
    for name, fn in CHECKS:
        try:
            ok, detail = fn()
        except Exception as exc:  # report, don't crash the CLI
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
