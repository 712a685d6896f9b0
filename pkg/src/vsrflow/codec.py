"""Exactly invertible toy latent codec and the pixel-space upsampler.

Encoding is per-frame space-to-depth with patch ``p`` followed by a fixed
orthonormal channel mix, so ``decode(encode(x)) == x`` up to rounding and
the latent grid is ``(frames, 3*p*p, h/p, w/p)``. There is no temporal
compression: latent frame ``i`` is pixel frame ``i``.
"""
from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import umvt


@dataclass(frozen=True)
class CodecConfig:
    patch_size: int = 4
    mixing_matrix_seed: int = 0

    @property
    def latent_channels(self):
        return 3 * self.patch_size ** 2


@functools.lru_cache(maxsize=None)
def mixing_matrix(channels, seed):
    """Orthonormal ``channels x channels`` matrix from QR of a seeded Gaussian matrix."""
    a = np.random.default_rng(seed).standard_normal((channels, channels))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))[None, :]
    q.setflags(write=False)
    return q


def _float_dtype(x):
    return x.dtype if x.dtype in (np.float32, np.float64) else np.float32


def encode(x, cfg=CodecConfig()):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected video (frames, 3, h, w), got {list(x.shape)}")
    f, c, h, w = x.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise ShapeError(f"frame {h}x{w} not divisible by patch size {p}")
    y = x.astype(np.float64).reshape(f, c, h // p, p, w // p, p)
    y = y.transpose(0, 1, 3, 5, 2, 4).reshape(f, c * p * p, h // p, w // p)
    q = mixing_matrix(c * p * p, cfg.mixing_matrix_seed)
    z = np.einsum("dc,fchw->fdhw", q, y)
    return z.astype(_float_dtype(x))


def decode(z, cfg=CodecConfig(), clamp=True):
    """Inverse of :func:`encode`. ``clamp`` limits values to [0, 1] for pixel emission."""
    z = np.asarray(z)
    p = cfg.patch_size
    if z.ndim != 4 or z.shape[1] != cfg.latent_channels:
        raise ShapeError(f"expected latent (frames, {cfg.latent_channels}, h, w), got {list(z.shape)}")
    f, d, hp, wp = z.shape
    q = mixing_matrix(d, cfg.mixing_matrix_seed)
    y = np.einsum("dc,fdhw->fchw", q, z.astype(np.float64))
    x = y.reshape(f, 3, p, p, hp, wp).transpose(0, 1, 4, 2, 5, 3).reshape(f, 3, hp * p, wp * p)
    if clamp:
        x = np.clip(x, 0.0, 1.0)
    return x.astype(_float_dtype(z))


def _axis_weights(n_in, n_out):
    # half-pixel centres (align_corners=False); sources clamped at the borders
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return m


def bilinear_resize(x, target_h, target_w):
    """Per-frame bilinear resize of ``(..., h, w)`` arrays, align-corners=False."""
    x = np.asarray(x)
    if target_h < 1 or target_w < 1:
        raise ShapeError("resize targets must be >= 1")
    mh = _axis_weights(x.shape[-2], target_h)
    mw = _axis_weights(x.shape[-1], target_w)
    out = np.einsum("ih,...hw,jw->...ij", mh, x.astype(np.float64), mw)
    return out.astype(_float_dtype(x))


def area_downsample(x, factor):
    """Average non-overlapping ``factor x factor`` blocks of ``(..., h, w)``."""
    x = np.asarray(x)
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ShapeError(f"{h}x{w} not divisible by downscale factor {factor}")
    y = x.reshape(x.shape[:-2] + (h // factor, factor, w // factor, factor))
    return y.mean(axis=(-3, -1)).astype(_float_dtype(x))


def upsample_latent(z_lr, scale, cfg=CodecConfig()):
    """Decode, bilinearly upscale by ``scale`` in pixel space, and re-encode."""
    if scale < 1:
        raise ShapeError("upsample scale must be >= 1")
    x = decode(z_lr, cfg, clamp=False)
    if scale != 1:
        x = bilinear_resize(x, x.shape[-2] * scale, x.shape[-1] * scale)
    return encode(x, cfg)


def save_video(path, video, fps=8.0, colorspace="rgb"):
    """Write ``path`` (UMVT float32) plus a ``.json`` sidecar descriptor."""
    video = np.asarray(video, dtype=np.float32)
    umvt.save(path, video)
    meta = {"frames": int(video.shape[0]), "fps": float(fps), "colorspace": colorspace,
            "dims": [int(d) for d in video.shape]}
    with open(_sidecar(path), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_video(path):
    """Return ``(video, descriptor)``; the descriptor is empty when no sidecar exists."""
    video = umvt.load(path)
    side = _sidecar(path)
    meta = {}
    if os.path.exists(side):
        with open(side) as fh:
            meta = json.load(fh)
    return video, meta


def _sidecar(path):
    root, _ = os.path.splitext(str(path))
    return root + ".json"
