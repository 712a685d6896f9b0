"""Condition assembly: LR channel concat, reference token concat, RoPE index plans, text tokens."""
from __future__ import annotations

import dataclasses
import functools
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tensor, concat

TEXT_LEN = 32
TEXT_DIM = 32
TEXT_ROWS = 512
NULL_ROW = 0
PAD_ROW = 1


@dataclass(frozen=True)
class RopePlan:
    """Frame-index ranges: noisy video owns ``[0, f)``, reference ``i`` owns ``ref_ranges[i]``."""

    noisy_range: tuple
    ref_ranges: tuple = ()

    @property
    def frames(self):
        return self.noisy_range[1]

    def validate(self):
        f0, f1 = self.noisy_range
        if f0 != 0 or f1 < 1:
            raise ContractError(f"noisy range must be [0, f), got {self.noisy_range}")
        spans = sorted([tuple(self.noisy_range)] + [tuple(r) for r in self.ref_ranges])
        for a, b in self.ref_ranges:
            if a < f1 or b <= a:
                raise ContractError(f"reference range [{a}, {b}) invalid for f={f1}")
        for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ContractError(f"ranges [{a0},{a1}) and [{b0},{b1}) overlap")
        return self

    def frame_indices(self):
        """Frame index of every frame in sequence order (noisy first, then each reference)."""
        parts = [np.arange(*self.noisy_range)] + [np.arange(a, b) for a, b in self.ref_ranges]
        return np.concatenate(parts)


def build_rope_plan(f, ref_lengths=()):
    """Contiguous allocation: reference ``i`` starts right after everything before it."""
    if f < 1:
        raise ContractError("frame count must be >= 1")
    ranges, start = [], f
    for k in ref_lengths:
        if k < 1:
            raise ContractError("reference length must be >= 1")
        ranges.append((start, start + k))
        start += k
    return RopePlan((0, f), tuple(ranges))


def channel_concat(noisy, lr):
    """Stack ``lr`` after ``noisy`` on the channel axis of ``(..., frames, C, h, w)`` latents."""
    noisy, lr = np.asarray(noisy), np.asarray(lr)
    if noisy.shape[:-3] != lr.shape[:-3] or noisy.shape[-2:] != lr.shape[-2:] or noisy.ndim != lr.ndim:
        raise ShapeError(
            f"LR latent {list(lr.shape)} does not match noisy latent {list(noisy.shape)}; "
            "run upsample_latent first")
    return np.concatenate([noisy, lr], axis=-3)


def tokenize(latent):
    """``(..., frames, C, h, w)`` -> ``(..., frames*h*w, C)``; frame-major, row-major inside a frame."""
    latent = np.asarray(latent)
    *lead, f, c, h, w = latent.shape
    perm = tuple(range(len(lead))) + tuple(len(lead) + i for i in (0, 2, 3, 1))
    return np.ascontiguousarray(latent.transpose(perm)).reshape(*lead, f * h * w, c)


def untokenize(tokens, frames, h, w):
    tokens = np.asarray(tokens)
    *lead, n, c = tokens.shape
    if n != frames * h * w:
        raise ShapeError(f"{n} tokens cannot form {frames}x{h}x{w}")
    x = tokens.reshape(*lead, frames, h, w, c)
    k = len(lead)
    perm = tuple(range(k)) + (k, k + 3, k + 1, k + 2)
    return np.ascontiguousarray(x.transpose(perm))


@dataclass(frozen=True)
class Segment:
    label: str
    start: int
    stop: int
    frames: int


@dataclass
class TokenSequence:
    tokens: object  # Tensor or ndarray shaped (..., L, D)
    plan: RopePlan
    segments: list

    @property
    def length(self):
        return self.tokens.shape[-2]

    def frame_indices(self):
        return self.plan.frame_indices()


def reference_latents(bundle):
    """Visual references in sequence order with labels: ID images first, then the reference video."""
    refs = [("id", np.asarray(z)) for z in bundle.id_images]
    if bundle.ref_video is not None:
        refs.append(("ref_video", np.asarray(bundle.ref_video)))
    return refs


def assemble_sequence(noisy_tokens, bundle, plan, embed=None, tokens_per_frame=None):
    """Concatenate noisy tokens with tokenized references along the sequence axis.

    ``embed(tokens, label)`` maps raw reference tokens to model width; without
    it the raw latent tokens are used. Every reference must span exactly the
    number of frames its plan range allots.
    """
    refs = reference_latents(bundle)
    if len(refs) != len(plan.ref_ranges):
        raise ContractError(f"plan has {len(plan.ref_ranges)} reference ranges for {len(refs)} references")
    f = plan.frames
    n_noisy = noisy_tokens.shape[-2]
    if tokens_per_frame is None:
        if n_noisy % f:
            raise ShapeError(f"{n_noisy} noisy tokens not divisible into {f} frames")
        tokens_per_frame = n_noisy // f
    parts = [noisy_tokens]
    segments = [Segment("noisy", 0, n_noisy, f)]
    pos = n_noisy
    for (label, z), (a, b) in zip(refs, plan.ref_ranges):
        frames = z.shape[-4]
        if frames != b - a:
            raise ContractError(f"{label} has {frames} frames but plan range [{a}, {b}) holds {b - a}")
        tok = tokenize(z)
        if tok.shape[-2] != frames * tokens_per_frame:
            raise ShapeError(f"{label} grid does not match the noisy patch grid")
        tok = embed(tok, label) if embed is not None else tok
        parts.append(tok)
        segments.append(Segment(label, pos, pos + tok.shape[-2], frames))
        pos += tok.shape[-2]
    if isinstance(noisy_tokens, Tensor) or any(isinstance(p, Tensor) for p in parts):
        tokens = concat(parts, axis=-2)
    else:
        tokens = np.concatenate(parts, axis=-2)
    return TokenSequence(tokens, plan, segments)


def truncate(seq):
    """Drop every reference span, keeping the noisy-video tokens."""
    noisy = seq.segments[0]
    if noisy.label != "noisy":
        raise ContractError("sequence does not start with the noisy span")
    return seq.tokens[..., noisy.start:noisy.stop, :]


@functools.lru_cache(maxsize=8)
def text_table(seed=0):
    t = np.random.default_rng([seed, 7]).standard_normal((TEXT_ROWS, TEXT_DIM)) / np.sqrt(TEXT_DIM)
    t.setflags(write=False)
    return t


def _word_row(word):
    return 2 + zlib.crc32(word.lower().encode("utf-8")) % (TEXT_ROWS - 2)


def null_text(seed=0):
    return np.repeat(text_table(seed)[NULL_ROW][None, :], TEXT_LEN, axis=0).astype(np.float32)


def encode_text(prompt, dropout=False, seed=0):
    """Hash whitespace tokens into a fixed table; pad/truncate to 32 rows.

    ``dropout=True`` (or an empty prompt) returns the null-prompt embedding.
    """
    words = prompt.split()
    if dropout or not words:
        return null_text(seed)
    rows = [_word_row(w) for w in words[:TEXT_LEN]]
    rows += [PAD_ROW] * (TEXT_LEN - len(rows))
    return text_table(seed)[rows].astype(np.float32)


@dataclass
class ConditionBundle:
    """The full condition set for one sample.

    ``id_images`` are single-frame latents and ``ref_video`` a multi-frame
    latent, both on the target latent grid. ``lr_latent`` is already
    upsampled to the target grid (``None`` for a text-only base model).
    """

    text_tokens: np.ndarray
    id_images: list = field(default_factory=list)
    ref_video: np.ndarray | None = None
    lr_latent: np.ndarray | None = None
    noise_aug_step: int = 0
    fps: float = 8.0
    aspect: float = 1.0

    def __post_init__(self):
        for z in self.id_images:
            if np.asarray(z).shape[0] != 1:
                raise ContractError("ID image latents must have exactly one frame")

    @property
    def has_refs(self):
        return bool(self.id_images) or self.ref_video is not None

    def ref_lengths(self):
        return [np.asarray(z).shape[0] for _, z in reference_latents(self)]

    def without_text(self, seed=0):
        return dataclasses.replace(self, text_tokens=null_text(seed))

    def without_refs(self):
        return dataclasses.replace(self, id_images=[], ref_video=None)

    def structure(self):
        """Key identifying bundles that can share one batched forward pass."""
        return (len(self.id_images), None if self.ref_video is None else np.asarray(self.ref_video).shape,
                self.lr_latent is None)
