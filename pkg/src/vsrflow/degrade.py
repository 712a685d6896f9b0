"""Training-data factory: procedural HR scenes, SDEdit + synthetic degradation, references.

The LR video of every sample is ``synthetic_degrade(sdedit_degrade(hr))``:
the HR clip is shrunk to the base-model resolution, partially noised to the
grid time ``t_k`` and integrated back to t=0 by a text-only velocity model,
then blurred, noised and block-averaged.
"""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.fft import dctn, idctn
from scipy.ndimage import gaussian_filter

from . import codec
from .conditioning import ConditionBundle, encode_text
from .errors import ConfigError, ContractError
from .sampler import SamplerConfig, guided_velocity, plms_integrate, shift_timesteps

TASKS = ("t2v", "multi_id", "edit")
TASK_CODES = {"t2v": 0, "multi_id": 1, "edit": 2}


@dataclass
class DegradeRecipe:
    k_min: int = 5
    k_max: int = 25
    grid_steps: int = 50
    max_k_fraction: float = 0.6
    blur_sigma_range: tuple = (0.0, 0.8)
    noise_sigma_range: tuple = (0.0, 0.03)
    block_size: int = 2
    block_strength_range: tuple = (0.0, 0.3)
    downscale_factor: int = 2
    sdedit_prob: float = 1.0
    base_s_txt: float = 3.0
    seed: int = 0

    def validate(self):
        if not 0 <= self.k_min <= self.k_max:
            raise ConfigError(f"need 0 <= K1 <= K2, got [{self.k_min}, {self.k_max}]")
        if self.k_max > self.max_k_fraction * self.grid_steps:
            raise ConfigError(f"K2={self.k_max} exceeds {self.max_k_fraction} of the {self.grid_steps}-step grid")
        if self.downscale_factor < 1 or self.block_size < 1:
            raise ConfigError("downscale factor and block size must be >= 1")
        return self


def preset(name, **overrides):
    """``light`` keeps k in [0.1N, 0.3N]; ``heavy`` in [0.3N, 0.6N]; ``default`` in [0.1N, 0.5N]."""
    n = overrides.get("grid_steps", 50)
    ranges = {"light": (0.1, 0.3), "heavy": (0.3, 0.6), "default": (0.1, 0.5)}
    if name not in ranges:
        raise ConfigError(f"unknown preset {name!r}")
    lo, hi = ranges[name]
    kw = {"k_min": int(round(lo * n)), "k_max": int(round(hi * n))}
    kw.update(overrides)
    return DegradeRecipe(**kw).validate()


def identity_recipe(**overrides):
    kw = dict(k_min=0, k_max=0, blur_sigma_range=(0.0, 0.0), noise_sigma_range=(0.0, 0.0),
              block_size=1, block_strength_range=(0.0, 0.0))
    kw.update(overrides)
    return DegradeRecipe(**kw).validate()


class SpectralPriorVelocity:
    """Closed-form flow velocity for a Gaussian image prior with a decaying power spectrum.

    Stands in for a text-to-video base model when no trained checkpoint is
    supplied. Each frame and channel is modelled as independent Gaussian
    coefficients in the orthonormal 2-D DCT basis with variance proportional
    to ``(1 + (|k|/k0)^2)^-2`` (total per-pixel variance ``pixel_var``) and a
    flat mean of ``mean``. The codec is orthonormal, so the exact posterior
    velocity can be computed in pixel space and re-encoded. Text is ignored.
    """

    def __init__(self, mean=0.5, pixel_var=0.06, k0=1.5, codec_cfg=codec.CodecConfig()):
        self.mean, self.pixel_var, self.k0, self.codec_cfg = mean, pixel_var, k0, codec_cfg
        self.calls = 0
        self._cache = {}

    def _spectrum(self, h, w):
        if (h, w) not in self._cache:
            ky, kx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
            wgt = 1.0 / (1.0 + (ky ** 2 + kx ** 2) / self.k0 ** 2) ** 2
            var = self.pixel_var * h * w * wgt / wgt.sum()
            mean = np.zeros((h, w))
            mean[0, 0] = self.mean * np.sqrt(h * w)
            self._cache[(h, w)] = (var, mean)
        return self._cache[(h, w)]

    def __call__(self, z, t, bundle=None):
        self.calls += 1
        z = np.asarray(z)
        y = codec.decode(z, self.codec_cfg, clamp=False).astype(np.float64)
        var, mean = self._spectrum(*y.shape[-2:])
        yk = dctn(y, axes=(-2, -1), norm="ortho")
        d = yk - (1 - t) * mean
        denom = (1 - t) ** 2 * var + t ** 2
        vk = mean + ((1 - t) * var - t) * d / denom
        v = idctn(vk, axes=(-2, -1), norm="ortho")
        return codec.encode(v, self.codec_cfg).astype(z.dtype)


def draw_k(recipe, rng):
    return int(rng.integers(recipe.k_min, recipe.k_max + 1))


def sdedit_degrade(hr, base_model, recipe, rng, prompt="", codec_cfg=codec.CodecConfig(), k=None):
    """Shrink, partially noise and re-denoise ``hr`` with a text-only model; returns ``(video, k)``."""
    recipe.validate()
    x = codec.area_downsample(np.asarray(hr, dtype=np.float32), recipe.downscale_factor)
    z = codec.encode(x, codec_cfg)
    if k is None:
        k = draw_k(recipe, rng)
    eps = rng.standard_normal(z.shape).astype(z.dtype)
    if k == 0:
        return codec.decode(z, codec_cfg), 0
    times = shift_timesteps(recipe.grid_steps, 1.0)[recipe.grid_steps - k:]
    t_k = times[0]
    z_t = ((1 - t_k) * z + t_k * eps).astype(z.dtype)
    bundle = ConditionBundle(encode_text(prompt))
    sc = SamplerConfig(steps=recipe.grid_steps, s_txt=recipe.base_s_txt, s_ref=0.0, n_ref=0)
    z0 = plms_integrate(guided_velocity(base_model, bundle, sc), z_t, times)
    return codec.decode(z0, codec_cfg), k


def _block_average(x, b):
    f, c, h, w = x.shape
    hh, ww = h - h % b, w - w % b
    out = x.copy()
    blk = x[..., :hh, :ww].reshape(f, c, hh // b, b, ww // b, b).mean(axis=(3, 5))
    out[..., :hh, :ww] = np.repeat(np.repeat(blk, b, axis=2), b, axis=3)
    return out


def synthetic_degrade(x, recipe, rng):
    """Gaussian blur, additive Gaussian noise, blend toward block averages, clamp to [0, 1]."""
    x = np.asarray(x, dtype=np.float32)
    sigma = rng.uniform(*recipe.blur_sigma_range)
    noise = rng.uniform(*recipe.noise_sigma_range)
    strength = rng.uniform(*recipe.block_strength_range)
    out = x.astype(np.float64)
    if sigma > 0:
        out = gaussian_filter(out, sigma=(0, 0, sigma, sigma), mode="reflect")
    if noise > 0:
        out = out + noise * rng.standard_normal(out.shape)
    if recipe.block_size > 1 and strength > 0:
        out = (1 - strength) * out + strength * _block_average(out, recipe.block_size)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# procedural scenes

PALETTE = {
    "red": (0.9, 0.1, 0.1), "green": (0.1, 0.8, 0.2), "blue": (0.15, 0.25, 0.9),
    "yellow": (0.95, 0.9, 0.1), "cyan": (0.1, 0.85, 0.9), "magenta": (0.85, 0.1, 0.8),
    "orange": (0.95, 0.55, 0.1), "purple": (0.5, 0.15, 0.7), "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05), "gray": (0.5, 0.5, 0.5), "pink": (0.95, 0.6, 0.7),
}
COLORS = tuple(PALETTE)
KINDS = ("square", "disc")


@dataclass
class Shape:
    kind: str
    color: str
    size: int
    y0: float
    x0: float
    vy: float
    vx: float

    def footprint(self, frame, h, w):
        cy = self.y0 + self.vy * frame
        cx = self.x0 + self.vx * frame
        yy, xx = np.mgrid[0:h, 0:w] + 0.5
        r = self.size / 2
        if self.kind == "square":
            return (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


@dataclass
class Scene:
    bg_top: str
    bg_bottom: str
    shapes: list
    texture: np.ndarray = field(repr=False)

    def render(self, frames, h, w, recolor=None):
        """Render ``frames`` frames; ``recolor`` maps shape index -> colour name."""
        ramp = np.linspace(0, 1, h)[:, None, None]
        top, bot = np.array(PALETTE[self.bg_top]), np.array(PALETTE[self.bg_bottom])
        bg = ((1 - ramp) * top + ramp * bot).transpose(2, 0, 1) * np.ones((1, 1, w))
        bg = np.clip(bg + self.texture, 0, 1)
        out = np.empty((frames, 3, h, w))
        for f in range(frames):
            img = bg.copy()
            for i, s in enumerate(self.shapes):
                col = PALETTE[(recolor or {}).get(i, s.color)]
                m = s.footprint(f, h, w)
                img[:, m] = np.array(col)[:, None]
            out[f] = img
        return out.astype(np.float32)

    def prompt(self, recolor=None):
        parts = []
        for i, s in enumerate(self.shapes):
            parts.append(f"a {(recolor or {}).get(i, s.color)} {s.kind} moving {_direction(s)}")
        return " and ".join(parts) + f" over a {self.bg_top} to {self.bg_bottom} background"


def _direction(s):
    if abs(s.vx) >= abs(s.vy):
        return "right" if s.vx > 0 else "left"
    return "down" if s.vy > 0 else "up"


def random_scene(rng, h, w, n_shapes=2, texture=0.1):
    bg = rng.choice(len(COLORS), size=2, replace=False)
    shapes = []
    fg = rng.choice(len(COLORS), size=n_shapes, replace=False)
    for i in range(n_shapes):
        size = int(rng.integers(max(3, h // 5), max(4, h // 2)))
        shapes.append(Shape(
            kind=KINDS[int(rng.integers(len(KINDS)))], color=COLORS[fg[i]], size=size,
            y0=float(rng.uniform(size / 2, h - size / 2)), x0=float(rng.uniform(size / 2, w - size / 2)),
            vy=float(rng.uniform(-1, 1)), vx=float(rng.uniform(-1, 1))))
    tex = texture * rng.standard_normal((1, h, w)) if texture > 0 else np.zeros((1, h, w))
    return Scene(COLORS[bg[0]], COLORS[bg[1]], shapes, tex)


@dataclass
class TrainSample:
    task: str
    hr: np.ndarray
    lr: np.ndarray
    prompt: str
    id_images: list = field(default_factory=list)
    ref_video: np.ndarray | None = None
    edit_mask: np.ndarray | None = None
    index: int = 0
    k: int = 0

    def validate(self, factor):
        if self.lr.shape[-2] * factor != self.hr.shape[-2] or self.lr.shape[-1] * factor != self.hr.shape[-1]:
            raise ContractError("LR/HR spatial ratio differs from the downscale factor")
        if self.task == "edit" and (self.ref_video is None or self.edit_mask is None):
            raise ContractError("edit samples need a reference video and an edit mask")
        if self.task == "multi_id" and not self.id_images:
            raise ContractError("multi_id samples need at least one ID image")
        return self


def _bbox_crop(frame, mask):
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return None
    y0, y1, x0, x1 = ys.min(), ys.max() + 1, xs.min(), xs.max() + 1
    if y1 - y0 < 2 or x1 - x0 < 2:
        return None
    return frame[:, y0:y1, x0:x1].copy()


def _dilate(mask):
    out = mask.copy()
    out[..., 1:, :] |= mask[..., :-1, :]
    out[..., :-1, :] |= mask[..., 1:, :]
    out[..., :, 1:] |= mask[..., :, :-1]
    out[..., :, :-1] |= mask[..., :, 1:]
    return out


def make_sample(task, index, scene_seed, frames=7, size=16, recipe=None, base_model=None,
                texture=0.1, n_ids=2, codec_cfg=codec.CodecConfig()):
    """Render and degrade one sample; deterministic in ``(task, scene_seed, index)``."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}")
    recipe = (recipe or DegradeRecipe()).validate()
    base_model = base_model or SpectralPriorVelocity(codec_cfg=codec_cfg)
    rng = np.random.default_rng([scene_seed, TASK_CODES[task], index])
    scene = random_scene(rng, size, size, n_shapes=max(2, n_ids), texture=texture)
    hr = scene.render(frames, size, size)
    prompt = scene.prompt()
    ids, ref, mask = [], None, None
    if task == "multi_id":
        for _ in range(100):
            src = int(rng.integers(frames))
            crops = [_bbox_crop(hr[src], s.footprint(src, size, size)) for s in scene.shapes[:n_ids]]
            if all(c is not None for c in crops):
                ids = crops
                break
        if not ids:
            raise ContractError(f"sample {index}: no frame shows every ID shape")
    elif task == "edit":
        target = int(rng.integers(len(scene.shapes)))
        choices = [c for c in COLORS if c != scene.shapes[target].color]
        new = choices[int(rng.integers(len(choices)))]
        edited = scene.render(frames, size, size, recolor={target: new})
        mask = _dilate(np.stack([scene.shapes[target].footprint(f, size, size) for f in range(frames)]))
        hr, ref = edited, np.where(mask[:, None], hr, edited).astype(np.float32)
        prompt = scene.prompt(recolor={target: new})
    if rng.uniform() < recipe.sdedit_prob:
        mid, k = sdedit_degrade(hr, base_model, recipe, rng, prompt=prompt, codec_cfg=codec_cfg)
    else:
        mid, k = codec.area_downsample(hr, recipe.downscale_factor), 0
    lr = synthetic_degrade(mid, recipe, rng)
    return TrainSample(task, hr, lr, prompt, ids, ref, mask, index, k).validate(recipe.downscale_factor)


def build_corpus(task, count, scene_seed, **kwargs):
    if count < 1:
        raise ContractError("corpus count must be >= 1")
    return [make_sample(task, i, scene_seed, **kwargs) for i in range(count)]


# reference augmentation

AUGMENTS = ("flip", "scale", "jitter", "brightness")


def _scale_image(img, s):
    c, h, w = img.shape
    nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
    big = codec.bilinear_resize(img, nh, nw)
    pad_h, pad_w = max(0, h - nh), max(0, w - nw)
    big = np.pad(big, ((0, 0), (pad_h // 2, pad_h - pad_h // 2), (pad_w // 2, pad_w - pad_w // 2)), mode="edge")
    y0, x0 = (big.shape[1] - h) // 2, (big.shape[2] - w) // 2
    return big[:, y0:y0 + h, x0:x0 + w]


def _translate(img, dy, dx):
    c, h, w = img.shape
    p = max(abs(dy), abs(dx))
    if p == 0:
        return img.copy()
    padded = np.pad(img, ((0, 0), (p, p), (p, p)), mode="edge")
    return padded[:, p + dy:p + dy + h, p + dx:p + dx + w]


def augment_image(img, rng, transforms=None):
    """Apply ``transforms`` (default: each of AUGMENTS with probability 1/2) in a fixed order."""
    if transforms is None:
        transforms = [t for t in AUGMENTS if rng.uniform() < 0.5]
    out = np.asarray(img, dtype=np.float32)
    if "flip" in transforms:
        out = out[..., ::-1].copy()
    if "scale" in transforms:
        out = _scale_image(out, rng.uniform(0.8, 1.2))
    if "jitter" in transforms:
        h, w = out.shape[-2:]
        dy = int(rng.integers(-int(0.1 * h), int(0.1 * h) + 1))
        dx = int(rng.integers(-int(0.1 * w), int(0.1 * w) + 1))
        out = _translate(out, dy, dx)
    if "brightness" in transforms:
        out = np.clip(out + rng.uniform(-0.1, 0.1), 0.0, 1.0)
    return out.astype(np.float32)


def reference_augment(sample, rng, transforms=None, shift=None):
    """Perturb references to mimic cross-pair inputs.

    multi_id: per-image random subset of flip/scale/jitter/brightness.
    edit: circular shift of the reference video's start by ``shift`` frames
    (drawn from [-2, 2]), so new frame ``i`` is old frame ``(i + shift) mod f``.
    """
    if sample.task == "multi_id":
        ids = [augment_image(img, rng, transforms) for img in sample.id_images]
        return dataclasses.replace(sample, id_images=ids)
    if sample.task == "edit":
        if shift is None:
            shift = int(rng.integers(-2, 3))
        return dataclasses.replace(sample, ref_video=np.roll(sample.ref_video, -shift, axis=0))
    raise ContractError(f"reference augmentation does not apply to {sample.task!r} samples")


# corpus files

def save_corpus(samples, outdir, meta=None, fps=8.0):
    """Write UMVT tensors for every sample plus ``corpus.json``; returns the manifest path."""
    os.makedirs(outdir, exist_ok=True)
    entries = []
    for s in samples:
        stem = f"{s.task}_{s.index:04d}"
        e = {"index": s.index, "task": s.task, "prompt": s.prompt, "k": s.k,
             "hr": stem + "_hr.umvt", "lr": stem + "_lr.umvt"}
        codec.save_video(os.path.join(outdir, e["hr"]), s.hr, fps)
        codec.save_video(os.path.join(outdir, e["lr"]), s.lr, fps)
        if s.ref_video is not None:
            e["ref_video"] = stem + "_ref.umvt"
            codec.save_video(os.path.join(outdir, e["ref_video"]), s.ref_video, fps)
        if s.edit_mask is not None:
            e["edit_mask"] = stem + "_mask.umvt"
            codec.umvt.save(os.path.join(outdir, e["edit_mask"]), s.edit_mask.astype(np.float32))
        e["id_images"] = []
        for j, img in enumerate(s.id_images):
            name = f"{stem}_id{j}.umvt"
            codec.umvt.save(os.path.join(outdir, name), img)
            e["id_images"].append(name)
        entries.append(e)
    manifest = {"format": "vsrflow-corpus", "version": 1, "meta": meta or {}, "samples": entries}
    path = os.path.join(outdir, "corpus.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return path


def load_corpus(path):
    """Load a corpus from its directory or ``corpus.json``; returns ``(samples, meta)``."""
    if os.path.isdir(path):
        path = os.path.join(path, "corpus.json")
    if not os.path.exists(path):
        raise ConfigError(f"corpus manifest {path} not found")
    root = os.path.dirname(path)
    with open(path) as fh:
        manifest = json.load(fh)
    samples = []
    for e in manifest["samples"]:
        def rd(name):
            return codec.umvt.load(os.path.join(root, name))
        samples.append(TrainSample(
            task=e["task"], hr=rd(e["hr"]), lr=rd(e["lr"]), prompt=e["prompt"],
            id_images=[rd(n) for n in e.get("id_images", [])],
            ref_video=rd(e["ref_video"]) if "ref_video" in e else None,
            edit_mask=rd(e["edit_mask"]).astype(bool) if "edit_mask" in e else None,
            index=e["index"], k=e.get("k", 0)))
    return samples, manifest.get("meta", {})
