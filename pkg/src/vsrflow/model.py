"""Velocity-predicting diffusion transformer over a unified token sequence.

Each block runs four modulated, gated residual sublayers:

1. spatial self-attention inside every frame (noisy and reference frames alike),
2. cross-attention from every token to the text tokens,
3. 3D self-attention over the whole sequence with 3-axis RoPE,
4. a GELU feed-forward network.

Scale, shift and gate for each sublayer come from an embedding of the
diffusion time plus the micro conditions (noise-augmentation step, fps,
aspect). Reference tokens are cut off before the output projection.
"""
from __future__ import annotations

import dataclasses
import functools
import types
from dataclasses import dataclass

import numpy as np

from . import conditioning as cond
from .errors import ConfigError, ContractError, ShapeError
from .numerics import (
    Tensor,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    no_grad,
    reshape,
    rope,
    silu,
    softmax,
    transpose,
    umvt,
)

MODES = ("unified", "full_channel_concat", "full_token_concat")


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int = 48
    model_dim: int = 96
    heads: int = 4
    blocks: int = 4
    text_dim: int = cond.TEXT_DIM
    rope_base: float = 100.0
    injection_mode: str = "unified"
    use_lr: bool = True
    max_id_images: int = 2
    freq_dim: int = 64
    mlp_ratio: int = 4
    seed: int = 0
    # output preconditioning: v = c_skip(t) z_t + c_out(t) F, see precondition()
    precondition: bool = True
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.injection_mode not in MODES:
            raise ConfigError(f"injection_mode must be one of {MODES}")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.head_dim % 6:
            raise ConfigError(f"head_dim {self.head_dim} must be divisible by 6 for 3-axis RoPE")
        if not self.use_lr and self.injection_mode != "unified":
            raise ConfigError("text-only models support only the unified mode")

    @property
    def head_dim(self):
        return self.model_dim // self.heads

    @property
    def input_channels(self):
        c = self.latent_channels
        if not self.use_lr or self.injection_mode == "full_token_concat":
            return c
        if self.injection_mode == "full_channel_concat":
            return c * (3 + self.max_id_images)
        return 2 * c

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class ModulationInput:
    diffusion_t: float
    noise_aug_step: int = 0
    fps: float = 8.0
    aspect: float = 1.0

    def __post_init__(self):
        t = np.asarray(self.diffusion_t)
        if np.any(t < 0) or np.any(t > 1):
            raise ContractError("diffusion_t must lie in [0, 1]")
        u = np.asarray(self.noise_aug_step)
        if np.any(u < 0) or np.any(u > 1000):
            raise ContractError("noise_aug_step must lie in [0, 1000]")


# parameters

def _param_shapes(cfg):
    d, c, td, fd = cfg.model_dim, cfg.latent_channels, cfg.text_dim, cfg.freq_dim
    hidden = d * cfg.mlp_ratio
    shapes = {
        "in.w": (cfg.input_channels, d), "in.b": (d,),
        "ref.w": (c, d), "ref.b": (d,),
        "type.id": (d,), "type.ref_video": (d,), "type.lr": (d,),
        "text.w": (td, d), "text.b": (d,), "text.pos": (cond.TEXT_LEN, d),
        "t.w1": (fd, d), "t.b1": (d,), "t.w2": (d, d), "t.b2": (d,),
        "aug.w": (fd, d), "aug.b": (d,),
        "fps.w": (fd, d), "aspect.w": (fd, d),
        "final.ada.w": (d, 2 * d), "final.ada.b": (2 * d,),
        "final.w": (d, c), "final.b": (c,),
    }
    for i in range(cfg.blocks):
        p = f"blocks.{i}."
        shapes.update({
            p + "ada.w": (d, 12 * d), p + "ada.b": (12 * d,),
            p + "ssa.qkv.w": (d, 3 * d), p + "ssa.qkv.b": (3 * d,), p + "ssa.out.w": (d, d), p + "ssa.out.b": (d,),
            p + "sca.q.w": (d, d), p + "sca.q.b": (d,), p + "sca.kv.w": (d, 2 * d), p + "sca.kv.b": (2 * d,),
            p + "sca.out.w": (d, d), p + "sca.out.b": (d,),
            p + "tsa.qkv.w": (d, 3 * d), p + "tsa.qkv.b": (3 * d,), p + "tsa.out.w": (d, d), p + "tsa.out.b": (d,),
            p + "ffn.w1": (d, hidden), p + "ffn.b1": (hidden,), p + "ffn.w2": (hidden, d), p + "ffn.b2": (d,),
        })
    return shapes


def _zero_init(name):
    # modulation (scale/shift/gate) and the output projection start at zero
    return name.endswith("ada.w") or name.endswith("ada.b") or name in ("final.w", "final.b")


def init_params(cfg, dtype=np.float32, random_gates=False):
    """Seeded initialisation. ``random_gates`` also randomises the zero-initialised weights."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if len(shape) == 1:
            arr = np.zeros(shape)
            if random_gates or name.startswith("type."):
                arr = 0.02 * rng.standard_normal(shape)
        elif name == "text.pos":
            arr = 0.02 * rng.standard_normal(shape)
        elif _zero_init(name) and not random_gates:
            arr = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-lim, lim, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


def param_count(params):
    return int(sum(p.data.size for p in params.values()))


def save_params(dirpath, params, cfg, meta=None, extra=None):
    tensors = {name: p.data for name, p in params.items()}
    if extra:
        tensors.update(extra)
    umvt.save_bundle(dirpath, tensors, {"model_config": cfg.to_dict(), **(meta or {})})


def load_params(dirpath):
    """Return ``(params, cfg, tensors, meta)``; ``tensors`` holds every stored array."""
    tensors, meta = umvt.load_bundle(dirpath)
    cfg = ModelConfig(**meta["model_config"])
    names = _param_shapes(cfg)
    missing = [n for n in names if n not in tensors]
    if missing:
        raise ContractError(f"checkpoint lacks parameters {missing[:3]}...")
    params = {n: Tensor(tensors[n], requires_grad=True) for n in names}
    return params, cfg, tensors, meta


# embeddings

def sinusoid(x, dim, max_period=10000.0):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = x[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def condition_vector(params, cfg, mod):
    """Embed diffusion time and micro conditions into a ``(B, D)`` modulation vector."""
    dt = params["in.w"].dtype
    t = np.atleast_1d(np.asarray(mod.diffusion_t, dtype=np.float64))
    b = t.shape[0]

    def col(v):
        return np.broadcast_to(np.atleast_1d(np.asarray(v, dtype=np.float64)), (b,))

    te = Tensor(sinusoid(t * 1000.0, cfg.freq_dim).astype(dt))
    h = linear(silu(linear(te, params["t.w1"], params["t.b1"])), params["t.w2"], params["t.b2"])
    ue = Tensor(sinusoid(col(mod.noise_aug_step), cfg.freq_dim).astype(dt))
    fe = Tensor(sinusoid(col(mod.fps), cfg.freq_dim).astype(dt))
    ae = Tensor(sinusoid(col(mod.aspect) * 100.0, cfg.freq_dim).astype(dt))
    return (h + linear(ue, params["aug.w"], params["aug.b"]) + linear(fe, params["fps.w"])
            + linear(ae, params["aspect.w"]))


# rotary embedding

def rope_tables(positions, head_dim, base):
    """cos/sin tables ``(L, head_dim/2)`` for integer ``(frame, row, col)`` positions ``(L, 3)``."""
    if head_dim % 6:
        raise ConfigError(f"head_dim {head_dim} must be divisible by 6")
    positions = np.asarray(positions, dtype=np.float64)
    axis_dim = head_dim // 3
    half = axis_dim // 2
    freqs = base ** (-2.0 * np.arange(half) / axis_dim)
    ang = np.concatenate([positions[:, a:a + 1] * freqs[None, :] for a in range(3)], axis=1)
    return np.cos(ang), np.sin(ang)


@functools.lru_cache(maxsize=64)
def _cached_tables(frame_idx, h, w, head_dim, base, dtype):
    frames = np.asarray(frame_idx)
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pos = np.stack([np.repeat(frames, h * w),
                    np.tile(rows.reshape(-1), len(frames)),
                    np.tile(cols.reshape(-1), len(frames))], axis=1)
    c, s = rope_tables(pos, head_dim, base)
    return c.astype(dtype), s.astype(dtype)


def rope_apply(x, positions, base=100.0):
    """Rotate per-head vectors ``x (..., L, head_dim)`` by their 3-axis positions."""
    c, s = rope_tables(positions, np.shape(x)[-1], base)
    if isinstance(x, Tensor):
        return rope(x, c.astype(x.dtype), s.astype(x.dtype))
    x = np.asarray(x)
    return rope(Tensor(x), c.astype(x.dtype), s.astype(x.dtype)).data


# attention sublayers

def _attend(q, k, v):
    scale = 1.0 / np.sqrt(q.shape[-1])
    return matmul(softmax(mul(matmul(q, transpose(k, _swap_last(k.ndim))), scale)), v)


def _swap_last(n):
    axes = list(range(n))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return axes


def _split_heads(x, heads):
    b, l, d = x.shape
    return transpose(reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x):
    b, h, l, hd = x.shape
    return reshape(transpose(x, (0, 2, 1, 3)), (b, l, h * hd))


def _qkv(x, w, bias, heads):
    b, l, d = x.shape
    y = reshape(linear(x, w, bias), (b, l, 3, heads, d // heads))
    y = transpose(y, (2, 0, 3, 1, 4))
    return y[0], y[1], y[2]


def _modulate(x, shift, scale):
    return layer_norm(x) * (scale + 1.0) + shift


@dataclass
class _Geometry:
    frames_total: int
    tokens_per_frame: int
    cos: np.ndarray
    sin: np.ndarray


def _block(params, i, cfg, h, text, csilu, geo):
    p = f"blocks.{i}."
    b, l, d = h.shape
    heads = cfg.heads
    mod = reshape(linear(csilu, params[p + "ada.w"], params[p + "ada.b"]), (b, 12, d))
    m = [mod[:, j:j + 1, :] for j in range(12)]

    # spatial self-attention inside each frame
    x = _modulate(h, m[0], m[1])
    q, k, v = _qkv(x, params[p + "ssa.qkv.w"], params[p + "ssa.qkv.b"], heads)
    q, k = rope(q, geo.cos, geo.sin), rope(k, geo.cos, geo.sin)
    fshape = (b, heads, geo.frames_total, geo.tokens_per_frame, d // heads)
    o = _attend(reshape(q, fshape), reshape(k, fshape), reshape(v, fshape))
    o = _merge_heads(reshape(o, (b, heads, l, d // heads)))
    h = h + m[2] * linear(o, params[p + "ssa.out.w"], params[p + "ssa.out.b"])

    # cross-attention to text
    x = _modulate(h, m[3], m[4])
    q = _split_heads(linear(x, params[p + "sca.q.w"], params[p + "sca.q.b"]), heads)
    kv = linear(text, params[p + "sca.kv.w"], params[p + "sca.kv.b"])
    k = _split_heads(kv[:, :, :d], heads)
    v = _split_heads(kv[:, :, d:], heads)
    o = _merge_heads(_attend(q, k, v))
    h = h + m[5] * linear(o, params[p + "sca.out.w"], params[p + "sca.out.b"])

    # 3D self-attention over the unified sequence
    x = _modulate(h, m[6], m[7])
    q, k, v = _qkv(x, params[p + "tsa.qkv.w"], params[p + "tsa.qkv.b"], heads)
    q, k = rope(q, geo.cos, geo.sin), rope(k, geo.cos, geo.sin)
    o = _merge_heads(_attend(q, k, v))
    h = h + m[8] * linear(o, params[p + "tsa.out.w"], params[p + "tsa.out.b"])

    # feed-forward
    x = _modulate(h, m[9], m[10])
    y = linear(gelu(linear(x, params[p + "ffn.w1"], params[p + "ffn.b1"])), params[p + "ffn.w2"], params[p + "ffn.b2"])
    return h + m[11] * y


def block_forward(seq, text_tokens, mod, params, cfg, index=0, grid=None):
    """Run block ``index`` on a :class:`TokenSequence` of model-width tokens ``(B, L, D)``.

    ``grid`` is the per-frame token grid ``(h, w)``; by default it is taken
    as a single row of tokens.
    """
    tokens = seq.tokens if isinstance(seq.tokens, Tensor) else Tensor(seq.tokens)
    if tokens.ndim == 2:
        tokens = reshape(tokens, (1,) + tokens.shape)
    frame_idx = seq.plan.frame_indices()
    ft = len(frame_idx)
    if sum(s.stop - s.start for s in seq.segments) != tokens.shape[1] or tokens.shape[1] % ft:
        raise ShapeError("segments do not cover the token sequence")
    tpf = tokens.shape[1] // ft
    gh, gw = grid if grid is not None else (1, tpf)
    if gh * gw != tpf:
        raise ShapeError(f"grid {gh}x{gw} does not hold {tpf} tokens per frame")
    c, s = _cached_tables(tuple(int(f) for f in frame_idx), gh, gw, cfg.head_dim, cfg.rope_base,
                          np.dtype(tokens.dtype).str)
    geo = _Geometry(ft, tpf, c, s)
    text = _text(params, text_tokens, tokens.shape[0])
    csilu = silu(condition_vector(params, cfg, mod))
    out = _block(params, index, cfg, tokens, text, csilu, geo)
    return cond.TokenSequence(out, seq.plan, seq.segments)


def _text(params, text_tokens, b):
    t = np.asarray(text_tokens, dtype=params["text.w"].dtype)
    if t.ndim == 2:
        t = np.broadcast_to(t, (b,) + t.shape)
    # the toy encoder's rows carry no word order; a learned position row restores it
    return linear(Tensor(t), params["text.w"], params["text.b"]) + params["text.pos"]


# full forward

def _stack(bundles, getter):
    return np.stack([np.asarray(getter(bd)) for bd in bundles])


def _resample_frames(z, frames):
    if z.shape[0] == frames:
        return z
    idx = np.minimum((np.arange(frames) * z.shape[0]) // frames, z.shape[0] - 1)
    return z[idx]


def _channel_stack(cfg, noisy, bundles):
    b, f, c, h, w = noisy.shape
    parts = [noisy, _stack(bundles, lambda bd: bd.lr_latent)]
    ref = np.zeros_like(noisy)
    for j, bd in enumerate(bundles):
        if bd.ref_video is not None:
            ref[j] = _resample_frames(np.asarray(bd.ref_video), f)
    parts.append(ref)
    for slot in range(cfg.max_id_images):
        ids = np.zeros_like(noisy)
        for j, bd in enumerate(bundles):
            if slot < len(bd.id_images):
                ids[j] = np.broadcast_to(np.asarray(bd.id_images[slot]), (f, c, h, w))
        parts.append(ids)
    if any(len(bd.id_images) > cfg.max_id_images for bd in bundles):
        raise ContractError(f"channel-concat mode holds at most {cfg.max_id_images} ID images")
    return np.concatenate(parts, axis=2)


def sequence_layout(cfg, frames, bundle):
    """Return ``(plan, labels)`` of the attention sequence for one bundle under ``cfg``."""
    labels, lengths = [], []
    if cfg.injection_mode == "full_token_concat":
        labels.append("lr")
        lengths.append(frames)
    if cfg.injection_mode != "full_channel_concat":
        for label, z in cond.reference_latents(bundle):
            labels.append(label)
            lengths.append(np.asarray(z).shape[0])
    return cond.build_rope_plan(frames, lengths), labels


def forward(params, cfg, noisy, bundles, t, stats=None):
    """Predict velocity for noisy latents ``(B, F, C, h, w)`` under per-sample bundles.

    All bundles in a batch must share one structure (reference counts and
    shapes). ``stats``, when given, receives the attention sequence length.
    """
    noisy = np.asarray(noisy)
    single = noisy.ndim == 4
    if single:
        noisy = noisy[None]
    if isinstance(bundles, cond.ConditionBundle):
        bundles = [bundles]
    b, f, c, h, w = noisy.shape
    if len(bundles) != b:
        raise ContractError(f"{len(bundles)} bundles for batch of {b}")
    if c != cfg.latent_channels:
        raise ShapeError(f"noisy latent has {c} channels, model expects {cfg.latent_channels}")
    if len({bd.structure() for bd in bundles}) != 1:
        raise ContractError("bundles in one batch must share reference structure")
    dt = params["in.w"].dtype
    first = bundles[0]
    if cfg.use_lr:
        if first.lr_latent is None:
            raise ContractError("model needs an LR latent")
        for bd in bundles:
            if np.asarray(bd.lr_latent).shape != (f, c, h, w):
                raise ShapeError(f"LR latent {list(np.asarray(bd.lr_latent).shape)} does not match "
                                 f"noisy {[f, c, h, w]}; run upsample_latent first")

    mode = cfg.injection_mode
    if not cfg.use_lr:
        x_in = noisy
    elif mode == "unified":
        x_in = cond.channel_concat(noisy, _stack(bundles, lambda bd: bd.lr_latent))
    elif mode == "full_channel_concat":
        x_in = _channel_stack(cfg, noisy, bundles)
    else:
        x_in = noisy
    noisy_tokens = linear(Tensor(cond.tokenize(x_in).astype(dt)), params["in.w"], params["in.b"])

    plan, labels = sequence_layout(cfg, f, first)
    if labels:
        # LR (token-concat only) rides in front of the ID images; labels carry the true kinds
        ids = [_stack(bundles, lambda bd: bd.lr_latent)] if mode == "full_token_concat" else []
        ids += [_stack(bundles, lambda bd, j=j: bd.id_images[j]) for j in range(len(first.id_images))]
        ref = None if first.ref_video is None else _stack(bundles, lambda bd: bd.ref_video)
        stacked = types.SimpleNamespace(id_images=ids, ref_video=ref)
        label_iter = iter(labels)

        def embed(tok, _kind):
            e = linear(Tensor(tok.astype(dt)), params["ref.w"], params["ref.b"])
            return e + params["type." + next(label_iter)]

        seq = cond.assemble_sequence(noisy_tokens, stacked, plan, embed=embed, tokens_per_frame=h * w)
    else:
        seq = cond.TokenSequence(noisy_tokens, plan, [cond.Segment("noisy", 0, f * h * w, f)])

    frame_idx = tuple(int(i) for i in plan.frame_indices())
    cos_t, sin_t = _cached_tables(frame_idx, h, w, cfg.head_dim, cfg.rope_base, np.dtype(dt).str)
    geo = _Geometry(len(frame_idx), h * w, cos_t, sin_t)
    if stats is not None:
        stats["sequence_length"] = seq.length
        stats["attention_pairs"] = stats.get("attention_pairs", 0) + cfg.blocks * seq.length ** 2

    mod = ModulationInput(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)),
                          np.array([bd.noise_aug_step for bd in bundles]),
                          np.array([bd.fps for bd in bundles]), np.array([bd.aspect for bd in bundles]))
    csilu = silu(condition_vector(params, cfg, mod))
    text = _text(params, _stack(bundles, lambda bd: bd.text_tokens), b)
    hid = seq.tokens
    for i in range(cfg.blocks):
        hid = _block(params, i, cfg, hid, text, csilu, geo)
    hid = cond.truncate(cond.TokenSequence(hid, plan, seq.segments))
    fm = reshape(linear(csilu, params["final.ada.w"], params["final.ada.b"]), (b, 2, cfg.model_dim))
    hid = _modulate(hid, fm[:, 0:1, :], fm[:, 1:2, :])
    out = linear(hid, params["final.w"], params["final.b"])
    out = reshape(out, (b, f, h, w, c))
    out = transpose(out, (0, 1, 4, 2, 3))
    if cfg.precondition:
        c_skip, c_out = precondition(mod.diffusion_t, cfg.sigma_data)
        shape = (b, 1, 1, 1, 1)
        out = out * c_out.reshape(shape).astype(dt) + (c_skip.reshape(shape) * noisy).astype(dt)
    return out[0] if single else out


def precondition(t, sigma_data):
    """Skip and output scales for velocity prediction.

    ``c_skip * z_t`` is the least-squares linear estimate of ``v = z - eps``
    from ``z_t = (1 - t) z + t eps`` when ``z`` has std ``sigma_data``, and
    ``c_out`` is the std of what is left over, so the network always regresses
    a unit-variance residual. Without the skip the network has to copy the
    noise through its final layer norm, which loses each token's scale.
    """
    t = np.asarray(t, dtype=np.float64)
    s2 = sigma_data ** 2
    den = (1 - t) ** 2 * s2 + t ** 2
    return ((1 - t) * s2 - t) / den, sigma_data / np.sqrt(den)


class VelocityModel:
    """Inference wrapper: ``model(z, t, bundle) -> velocity`` as a numpy array."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.calls = 0

    @classmethod
    def load(cls, dirpath):
        params, cfg, _, _ = load_params(dirpath)
        return cls(params, cfg)

    def __call__(self, z, t, bundle):
        self.calls += 1
        with no_grad():
            v = forward(self.params, self.cfg, np.asarray(z)[None], [bundle], np.array([t]))
        return v.data[0].astype(np.asarray(z).dtype)
