"""Cascaded generation (base -> upsampler -> super-resolver) and video metrics."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import codec
from .conditioning import ConditionBundle, encode_text
from .errors import ConfigError, ShapeError
from .flowmatch import noise_augment
from .sampler import SamplerConfig, pndm_sample

PSNR_CAP = 99.0
SSIM_WINDOW = 8
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
INFERENCE_NOISE_STEP = 300


@dataclass
class MetricsRecord:
    psnr_db: float
    ssim: float
    masked_psnr_db: float | None = None

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {list(a.shape)} vs {list(b.shape)}")
    return a, b


def psnr(a, b, mask=None):
    """PSNR in dB at peak 1.0. ``mask`` (broadcastable to the inputs) selects the elements to score."""
    a, b = _pair(a, b)
    sq = (a - b) ** 2
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape) if np.ndim(mask) == a.ndim \
            else np.broadcast_to(_expand_mask(mask, a.ndim), a.shape)
        if not m.any():
            raise ShapeError("mask selects no elements")
        sq = sq[m]
    err = float(sq.mean())
    if err == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / err))


def _expand_mask(mask, ndim):
    # (F, h, w) frame masks apply to every channel of (F, C, h, w) video
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == ndim - 1:
        mask = mask[:, None]
    return mask


def _frames_gray(x):
    if x.ndim == 4:
        return x.mean(axis=1)
    if x.ndim == 3:
        return x
    raise ShapeError(f"expected (frames, C, h, w) or (frames, h, w), got {list(x.shape)}")


def ssim(a, b):
    """Mean SSIM over every 8x8 window of every frame (grayscale by channel mean)."""
    a, b = _pair(a, b)
    ga, gb = _frames_gray(a), _frames_gray(b)
    if min(ga.shape[-2:]) < SSIM_WINDOW:
        raise ShapeError(f"frame {ga.shape[-2:]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    win = (SSIM_WINDOW, SSIM_WINDOW)
    wa = sliding_window_view(ga, win, axis=(-2, -1))
    wb = sliding_window_view(gb, win, axis=(-2, -1))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float((num / den).mean())


def evaluate(pred, target, mask=None):
    """Metrics for one clip; ``mask`` marks the region scored by ``masked_psnr_db``."""
    masked = None if mask is None else psnr(pred, target, mask)
    return MetricsRecord(psnr(pred, target), ssim(pred, target), masked)


@dataclass
class GenerateRequest:
    """One cascaded generation job.

    Supplying ``lr_video`` runs simulation mode and skips the base model.
    Otherwise ``base_model`` samples an LR clip of ``base_shape`` =
    ``(frames, h, w)`` pixels from the prompt alone.
    """

    prompt: str
    sr_model: object
    scale: int = 2
    task: str = "t2v"
    lr_video: np.ndarray | None = None
    base_model: object = None
    base_shape: tuple | None = None
    id_images: list = field(default_factory=list)
    ref_video: np.ndarray | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    noise_aug_step: int = INFERENCE_NOISE_STEP
    fps: float = 8.0
    codec_cfg: codec.CodecConfig = field(default_factory=codec.CodecConfig)


def base_generate(base_model, prompt, shape, sampler=None, codec_cfg=codec.CodecConfig(), fps=8.0):
    """Text-only base model sample decoded to pixels; ``shape`` is ``(frames, h, w)``."""
    sampler = sampler or SamplerConfig()
    f, h, w = shape
    p = codec_cfg.patch_size
    bundle = ConditionBundle(encode_text(prompt), fps=fps, aspect=w / h)
    z = pndm_sample(base_model, bundle, sampler, shape=(f, codec_cfg.latent_channels, h // p, w // p))
    return codec.decode(z, codec_cfg)


def build_bundle(req, lr_video):
    """Condition bundle on the HR latent grid for ``lr_video``."""
    ccfg = req.codec_cfg
    h, w = lr_video.shape[-2] * req.scale, lr_video.shape[-1] * req.scale
    up = codec.upsample_latent(codec.encode(lr_video, ccfg), req.scale, ccfg)
    eps = np.random.default_rng([req.sampler.seed, 3]).standard_normal(up.shape).astype(up.dtype)
    lr_aug = noise_augment(up, req.noise_aug_step, eps)
    ids = []
    for img in req.id_images:
        img = np.asarray(img, dtype=np.float32)
        if img.ndim != 3 or img.shape[0] != 3:
            raise ShapeError(f"ID image must be (3, h, w), got {list(img.shape)}")
        ids.append(codec.encode(codec.bilinear_resize(img, h, w)[None], ccfg))
    ref = None
    if req.ref_video is not None:
        rv = np.asarray(req.ref_video, dtype=np.float32)
        if rv.ndim != 4 or rv.shape[1] != 3 or rv.shape[-2:] != (h, w):
            raise ShapeError(f"reference video {list(rv.shape)} must be (frames, 3, {h}, {w})")
        ref = codec.encode(rv, ccfg)
    return ConditionBundle(encode_text(req.prompt), ids, ref, lr_aug, req.noise_aug_step,
                           fps=req.fps, aspect=w / h)


def cascaded_generate(req):
    """Return the HR video ``(frames, 3, h*scale, w*scale)`` for ``req``."""
    if req.scale < 1:
        raise ConfigError("scale must be >= 1")
    if req.sr_model is None:
        raise ConfigError("super-resolution checkpoint missing")
    if req.lr_video is not None:
        lr = np.asarray(req.lr_video, dtype=np.float32)
    else:
        if req.base_model is None or req.base_shape is None:
            raise ConfigError("no LR video supplied and no base checkpoint to sample one")
        lr = base_generate(req.base_model, req.prompt, req.base_shape, req.sampler, req.codec_cfg, req.fps)
    if lr.ndim != 4 or lr.shape[1] != 3:
        raise ShapeError(f"LR video must be (frames, 3, h, w), got {list(lr.shape)}")
    bundle = build_bundle(req, lr)
    z = pndm_sample(req.sr_model, bundle, req.sampler, shape=bundle.lr_latent.shape)
    return codec.decode(z, req.codec_cfg)
