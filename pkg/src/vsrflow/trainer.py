"""Staged multi-task training with flow matching.

Stages run hardest task first: text-to-video alone, then text-to-video with
multi-ID (0.6:0.4), then all three tasks (0.5:0.3:0.2), then the same mix at
a longer frame length. Optimizer moments and the step counter carry across
stage boundaries.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .conditioning import ConditionBundle, encode_text
from .degrade import TASKS, load_corpus, reference_augment
from .errors import ConfigError, ContractError
from .flowmatch import make_training_pair, mse_loss, noise_augment, sample_noise_step
from .model import ModelConfig, forward, init_params, load_params, save_params

log = logging.getLogger(__name__)

ORDERS = ("difficult_to_easy", "easy_to_difficult", "full_training")


@dataclass
class StageSpec:
    stage_id: int
    frames: int
    tasks: list
    probabilities: list
    step_budget: int

    def __post_init__(self):
        if len(self.tasks) != len(self.probabilities):
            raise ConfigError(f"stage {self.stage_id}: tasks and probabilities differ in length")
        if abs(sum(self.probabilities) - 1.0) > 1e-9:
            raise ConfigError(f"stage {self.stage_id}: probabilities sum to {sum(self.probabilities)}")
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise ConfigError(f"unknown tasks {sorted(unknown)}")


def stage_schedule(short_frames=7, long_frames=21, budgets=(500, 500, 500, 500)):
    """The four curriculum stages.

    The reference schedule trains at 21 frames and extends to 77; at desk
    scale ``short_frames``/``long_frames`` stand in for those lengths.
    """
    return [
        StageSpec(1, short_frames, ["t2v"], [1.0], budgets[0]),
        StageSpec(2, short_frames, ["t2v", "multi_id"], [0.6, 0.4], budgets[1]),
        StageSpec(3, short_frames, ["t2v", "multi_id", "edit"], [0.5, 0.3, 0.2], budgets[2]),
        StageSpec(4, long_frames, ["t2v", "multi_id", "edit"], [0.5, 0.3, 0.2], budgets[3]),
    ]


def ordered_stages(stages, order):
    if order == "difficult_to_easy":
        return list(stages)
    if order == "easy_to_difficult":
        return list(reversed(stages))
    if order == "full_training":
        mixed = stages[2]
        return [StageSpec(0, mixed.frames, list(mixed.tasks), list(mixed.probabilities),
                          sum(s.step_budget for s in stages))]
    raise ConfigError(f"order must be one of {ORDERS}")


def sample_task(stage, rng):
    return stage.tasks[int(rng.choice(len(stage.tasks), p=stage.probabilities))]


@dataclass
class TrainConfig:
    model: dict = field(default_factory=dict)
    role: str = "sr"
    order: str = "difficult_to_easy"
    seed: int = 0
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    text_dropout: float = 0.1
    ref_dropout: float = 0.1
    noise_aug_range: tuple = (200, 600)
    augment_refs: bool = True
    short_frames: int = 7
    long_frames: int = 21
    budgets: tuple = (500, 500, 500, 500)
    stages: list | None = None
    corpora: dict = field(default_factory=dict)
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    fixed_t: float | None = None
    fixed_noise_seed: int | None = None
    codec: dict = field(default_factory=dict)
    fps: float = 8.0

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        for key in ("betas", "noise_aug_range", "budgets"):
            if key in kw:
                kw[key] = tuple(kw[key])
        cfg = cls(**kw)
        if cfg.role not in ("sr", "base"):
            raise ConfigError("role must be 'sr' or 'base'")
        if cfg.order not in ORDERS:
            raise ConfigError(f"order must be one of {ORDERS}")
        if cfg.lr_schedule not in ("constant", "cosine"):
            raise ConfigError("lr_schedule must be 'constant' or 'cosine'")
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def total_steps(self):
        return sum(s.step_budget for s in self.schedule())

    def lr_at(self, step, total=None):
        """Learning rate for optimizer step ``step`` (0-based): linear warmup, then constant or cosine to 0."""
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "constant":
            return self.lr
        total = total or self.total_steps()
        span = max(1, total - self.warmup_steps)
        frac = min(1.0, (step - self.warmup_steps) / span)
        return self.lr * 0.5 * (1.0 + np.cos(np.pi * frac))

    def model_config(self):
        kw = dict(self.model)
        if self.role == "base":
            kw["use_lr"] = False
        return ModelConfig(**kw)

    def codec_config(self):
        return codec.CodecConfig(**self.codec)

    def schedule(self):
        if self.stages is not None:
            stages = [StageSpec(**s) for s in self.stages]
            if self.role == "base" and any(s.tasks != ["t2v"] for s in stages):
                raise ConfigError("the base model trains on t2v clips only")
            return stages
        if self.role == "base":
            return [StageSpec(0, self.short_frames, ["t2v"], [1.0], sum(self.budgets))]
        return ordered_stages(stage_schedule(self.short_frames, self.long_frames, self.budgets), self.order)


@dataclass
class TrainState:
    params: dict
    m: dict
    v: dict
    step: int
    rng: np.random.Generator
    stage_pos: int = 0
    stage_step: int = 0
    counters: dict = field(default_factory=lambda: {"text_drop": 0, "text_total": 0, "ref_drop": 0})


def init_state(cfg):
    mcfg = cfg.model_config()
    params = init_params(mcfg)
    zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
    return TrainState(params, zeros, {k: z.copy() for k, z in zeros.items()}, 0,
                      np.random.default_rng([cfg.seed, 1]))


def save_state(dirpath, state, cfg):
    extra = {"adam.m/" + k: a for k, a in state.m.items()}
    extra.update({"adam.v/" + k: a for k, a in state.v.items()})
    meta = {"step": state.step, "stage_pos": state.stage_pos, "stage_step": state.stage_step,
            "rng_state": state.rng.bit_generator.state, "counters": state.counters,
            "train_config": _jsonable(dataclasses.asdict(cfg))}
    save_params(dirpath, state.params, cfg.model_config(), meta=meta, extra=extra)


def load_state(dirpath):
    params, _, tensors, meta = load_params(dirpath)
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng_state"]
    m = {k: tensors["adam.m/" + k] for k in params}
    v = {k: tensors["adam.v/" + k] for k in params}
    return TrainState(params, m, v, meta["step"], rng, meta["stage_pos"], meta["stage_step"],
                      dict(meta.get("counters", {})))


def _jsonable(x):
    return json.loads(json.dumps(x, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


# batches

def crop_sample(sample, frames, start):
    """Temporal window ``[start, start+frames)`` of every time-indexed field."""
    if sample.hr.shape[0] < frames:
        raise ConfigError(f"clip has {sample.hr.shape[0]} frames, stage needs {frames}")
    sl = slice(start, start + frames)
    return dataclasses.replace(
        sample, hr=sample.hr[sl], lr=sample.lr[sl],
        ref_video=None if sample.ref_video is None else sample.ref_video[sl],
        edit_mask=None if sample.edit_mask is None else sample.edit_mask[sl])


def check_edit_alignment(sample):
    keep = ~sample.edit_mask[:, None, :, :]
    if not np.array_equal(np.where(keep, sample.hr, 0), np.where(keep, sample.ref_video, 0)):
        raise ContractError(f"edit sample {sample.index}: HR and reference differ outside the edit mask")


def prepare_batch(samples, state, cfg, ccfg=None):
    """Latents and condition bundles for one homogeneous batch; consumes ``state.rng``."""
    ccfg = ccfg or cfg.codec_config()
    rng = state.rng
    tasks = {s.task for s in samples}
    frames = {s.hr.shape[0] for s in samples}
    if len(tasks) != 1 or len(frames) != 1:
        raise ContractError(f"batch mixes tasks {sorted(tasks)} or frame counts {sorted(frames)}")
    task = tasks.pop()
    drop_refs = task != "t2v" and rng.uniform() < cfg.ref_dropout
    state.counters["ref_drop"] += int(drop_refs)
    z_hr, bundles = [], []
    for s in samples:
        if task == "edit":
            check_edit_alignment(s)
        drop_text = bool(rng.uniform() < cfg.text_dropout)
        state.counters["text_drop"] += int(drop_text)
        state.counters["text_total"] += 1
        if cfg.augment_refs and task != "t2v" and not drop_refs:
            s = reference_augment(s, rng)
        h, w = s.hr.shape[-2:]
        if cfg.role == "base":
            target = codec.area_downsample(s.hr, h // s.lr.shape[-2])
            z_hr.append(codec.encode(target, ccfg))
            bundles.append(ConditionBundle(encode_text(s.prompt, drop_text), fps=cfg.fps,
                                           aspect=w / h))
            continue
        z_hr.append(codec.encode(s.hr, ccfg))
        scale = h // s.lr.shape[-2]
        up = codec.upsample_latent(codec.encode(s.lr, ccfg), scale, ccfg)
        u = sample_noise_step(rng, *cfg.noise_aug_range)
        lr_aug = noise_augment(up, u, rng.standard_normal(up.shape).astype(up.dtype))
        ids, ref = [], None
        if not drop_refs:
            ids = [codec.encode(codec.bilinear_resize(img, h, w)[None], ccfg) for img in s.id_images]
            ref = None if s.ref_video is None else codec.encode(s.ref_video, ccfg)
        bundles.append(ConditionBundle(encode_text(s.prompt, drop_text), ids, ref, lr_aug, u,
                                       fps=cfg.fps, aspect=w / h))
    return np.stack(z_hr), bundles


def adamw_update(state, grads, cfg, lr=None):
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    t = state.step + 1
    norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    clip = 1.0 if cfg.grad_clip <= 0 or norm <= cfg.grad_clip else cfg.grad_clip / (norm + 1e-12)
    for k, p in state.params.items():
        g = grads[k] * clip if clip != 1.0 else grads[k]
        m = state.m[k] = b1 * state.m[k] + (1 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        data = p.data * (1 - lr * cfg.weight_decay)
        p.data = (data - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)).astype(p.data.dtype)
    return norm


def train_step(state, samples, cfg, mcfg=None, total_steps=None):
    """One optimizer step on a homogeneous batch; returns ``(state, loss)``."""
    mcfg = mcfg or cfg.model_config()
    lr = cfg.lr if cfg.lr_schedule == "constant" and not cfg.warmup_steps else cfg.lr_at(state.step, total_steps)
    z_hr, bundles = prepare_batch(samples, state, cfg)
    rng = state.rng
    b = z_hr.shape[0]
    t = np.full(b, cfg.fixed_t) if cfg.fixed_t is not None else rng.uniform(0.0, 1.0, size=b)
    if cfg.fixed_noise_seed is not None:
        eps = np.random.default_rng(cfg.fixed_noise_seed).standard_normal(z_hr.shape)
    else:
        eps = rng.standard_normal(z_hr.shape)
    pair = make_training_pair(z_hr, eps.astype(z_hr.dtype), t)
    for p in state.params.values():
        p.grad = None
    pred = forward(state.params, mcfg, pair.z_t, bundles, t)
    loss = mse_loss(pred, pair.v_target)
    loss.backward()
    grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in state.params.items()}
    adamw_update(state, grads, cfg, lr)
    state.step += 1
    return state, float(loss.data)


def draw_batch(corpus, stage, state, cfg):
    task = sample_task(stage, state.rng)
    pool = corpus[task]
    idx = state.rng.integers(len(pool), size=cfg.batch_size)
    clip_frames = min(pool[i].hr.shape[0] for i in idx)
    if clip_frames < stage.frames:
        raise ConfigError(f"{task} clips have {clip_frames} frames, stage {stage.stage_id} needs {stage.frames}")
    start = int(state.rng.integers(clip_frames - stage.frames + 1))
    return task, [crop_sample(pool[i], stage.frames, start) for i in idx]


def load_corpora(cfg, stages):
    needed = sorted({t for s in stages for t in s.tasks})
    corpus = {}
    for task in needed:
        src = cfg.corpora.get(task)
        if src is None:
            raise ConfigError(f"no corpus configured for task {task!r}")
        if isinstance(src, (list, tuple)):
            corpus[task] = list(src)
        else:
            corpus[task], _ = load_corpus(src)
    return corpus


def run_training(cfg, resume_from=None, stop_after=None, corpus=None, log_path=None):
    """Run every stage in order; returns ``(state, records)``.

    ``corpus`` maps task -> list of samples and overrides ``cfg.corpora``.
    ``stop_after`` ends the run once that many total steps are done (for
    checkpoint/resume). Loss records are dicts ``{step, stage, task, loss}``
    and are appended to ``log_path`` as JSON lines when given.
    """
    stages = cfg.schedule()
    if corpus is None:
        corpus = load_corpora(cfg, stages)
    mcfg = cfg.model_config()
    total = sum(s.step_budget for s in stages)
    state = load_state(resume_from) if resume_from else init_state(cfg)
    records = []
    fh = open(log_path, "a") if log_path else None
    try:
        while state.stage_pos < len(stages):
            stage = stages[state.stage_pos]
            while state.stage_step < stage.step_budget:
                if stop_after is not None and state.step >= stop_after:
                    return state, records
                task, batch = draw_batch(corpus, stage, state, cfg)
                state, loss = train_step(state, batch, cfg, mcfg, total)
                state.stage_step += 1
                rec = {"step": state.step, "stage": stage.stage_id, "task": task, "loss": loss}
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if cfg.checkpoint_dir and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                    save_state(os.path.join(cfg.checkpoint_dir, f"step_{state.step:06d}"), state, cfg)
            log.info("stage %s done at step %d", stage.stage_id, state.step)
            state.stage_pos += 1
            state.stage_step = 0
    finally:
        if fh:
            fh.close()
    if cfg.checkpoint_dir:
        save_state(os.path.join(cfg.checkpoint_dir, "final"), state, cfg)
    return state, records
