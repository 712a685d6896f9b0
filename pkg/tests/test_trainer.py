import dataclasses
import json

import numpy as np
import pytest

from vsrflow.degrade import build_corpus, save_corpus
from vsrflow.errors import ConfigError, ContractError
from vsrflow.trainer import (
    StageSpec, TrainConfig, TrainState, init_state, load_state, ordered_stages, prepare_batch, run_training,
    sample_task, save_state, stage_schedule, train_step,
)

SMALL = dict(model_dim=48, heads=2, blocks=1, freq_dim=16)


@pytest.fixture(scope="module")
def tiny():
    kw = dict(frames=3, size=8)
    return {t: build_corpus(t, 3, 1, **kw) for t in ("t2v", "multi_id", "edit")}


def small_cfg(**kw):
    base = dict(model=SMALL, batch_size=2, lr=1e-3, short_frames=2, long_frames=3, budgets=(3, 3, 3, 3))
    base.update(kw)
    return TrainConfig(**base)


# schedule

def test_stage_schedule_structure():
    s = stage_schedule()
    assert [x.stage_id for x in s] == [1, 2, 3, 4]
    assert [x.tasks for x in s] == [["t2v"], ["t2v", "multi_id"], ["t2v", "multi_id", "edit"],
                                    ["t2v", "multi_id", "edit"]]
    assert s[0].probabilities == [1.0]
    assert s[1].probabilities == [0.6, 0.4]
    assert s[2].probabilities == [0.5, 0.3, 0.2] == s[3].probabilities
    assert s[0].frames == s[1].frames == s[2].frames == 7 and s[3].frames == 21
    assert s[3].frames > s[2].frames


def test_stage_spec_contract():
    with pytest.raises(ConfigError):
        StageSpec(1, 7, ["t2v", "edit"], [0.5], 10)
    with pytest.raises(ConfigError):
        StageSpec(1, 7, ["t2v", "edit"], [0.5, 0.4], 10)
    with pytest.raises(ConfigError):
        StageSpec(1, 7, ["dance"], [1.0], 10)


def test_orders():
    s = stage_schedule()
    assert [x.stage_id for x in ordered_stages(s, "easy_to_difficult")] == [4, 3, 2, 1]
    (full,) = ordered_stages(s, "full_training")
    assert full.tasks == ["t2v", "multi_id", "edit"] and full.step_budget == sum(x.step_budget for x in s)
    with pytest.raises(ConfigError):
        ordered_stages(s, "sideways")


def test_sample_task():
    s = stage_schedule()
    rng = np.random.default_rng(0)
    assert {sample_task(s[0], rng) for _ in range(100)} == {"t2v"}
    a = [sample_task(s[2], np.random.default_rng(4)) for _ in range(5)]
    b = [sample_task(s[2], np.random.default_rng(4)) for _ in range(5)]
    assert a == b


@pytest.mark.parametrize("stage", [1, 2])
def test_mixture_frequencies(stage):
    spec = stage_schedule()[stage]
    rng = np.random.default_rng(11)
    draws = [sample_task(spec, rng) for _ in range(10_000)]
    for task, p in zip(spec.tasks, spec.probabilities):
        assert abs(draws.count(task) / len(draws) - p) <= 0.02


# batches

def test_prepare_batch_shapes(tiny):
    cfg = small_cfg()
    st = init_state(cfg)
    z, bundles = prepare_batch(tiny["multi_id"][:2], st, cfg)
    assert z.shape == (2, 3, 48, 2, 2)
    for b in bundles:
        assert b.lr_latent.shape == (3, 48, 2, 2)
        assert 200 <= b.noise_aug_step <= 600
        assert all(i.shape == (1, 48, 2, 2) for i in b.id_images)


def test_mixed_batch_rejected(tiny):
    cfg = small_cfg()
    with pytest.raises(ContractError):
        train_step(init_state(cfg), [tiny["t2v"][0], tiny["edit"][0]], cfg)


def test_edit_alignment_checked(tiny):
    bad = dataclasses.replace(tiny["edit"][0], ref_video=tiny["edit"][0].ref_video + 0.01)
    cfg = small_cfg()
    with pytest.raises(ContractError):
        prepare_batch([bad], init_state(cfg), cfg)


def test_text_dropout_rate(tiny):
    cfg = small_cfg()
    st = init_state(cfg)
    s = dataclasses.replace(tiny["t2v"][0], hr=tiny["t2v"][0].hr[:1], lr=tiny["t2v"][0].lr[:1])
    for _ in range(10_000):
        prepare_batch([s], st, cfg)
    rate = st.counters["text_drop"] / st.counters["text_total"]
    assert st.counters["text_total"] == 10_000
    assert 0.08 <= rate <= 0.12


def test_reference_dropout_applies(tiny):
    cfg = small_cfg(ref_dropout=1.0)
    _, bundles = prepare_batch(tiny["edit"][:2], init_state(cfg), cfg)
    assert all(not b.has_refs for b in bundles)


# optimisation

def test_zero_lr_leaves_params(tiny):
    cfg = small_cfg(lr=0.0)
    st = init_state(cfg)
    before = {k: p.data.copy() for k, p in st.params.items()}
    st, loss = train_step(st, tiny["t2v"][:2], cfg)
    assert np.isfinite(loss) and st.step == 1
    assert all(st.params[k].data.tobytes() == before[k].tobytes() for k in before)


def test_overfit_fixed_t_and_eps(tiny):
    # cosine decay keeps Adam from oscillating once the loss is tiny
    cfg = small_cfg(lr=5e-4, lr_schedule="cosine", budgets=(50, 50, 50, 50), fixed_t=0.5, fixed_noise_seed=3,
                    text_dropout=0.0, noise_aug_range=(0, 0))
    st = init_state(cfg)
    sample = [tiny["t2v"][0]]
    losses = []
    for _ in range(200):
        st, loss = train_step(st, sample, cfg, total_steps=200)
        losses.append(loss)
    assert all(b < a for a, b in zip(losses, losses[1:])), np.diff(losses).max()
    assert losses[-1] < 0.05


def test_smoke_losses_finite(tiny):
    cfg = small_cfg(stages=[dict(stage_id=1, frames=3, tasks=["t2v", "multi_id", "edit"],
                                 probabilities=[0.5, 0.3, 0.2], step_budget=500)])
    _, rec = run_training(cfg, corpus=tiny)
    assert len(rec) == 500 and all(np.isfinite(r["loss"]) for r in rec)


def test_lr_schedule():
    cfg = TrainConfig(lr=1.0, lr_schedule="cosine", warmup_steps=10, budgets=(25, 25, 25, 25))
    assert cfg.lr_at(0) == pytest.approx(0.1) and cfg.lr_at(9) == pytest.approx(1.0)
    assert cfg.lr_at(10) == pytest.approx(1.0) and cfg.lr_at(99) < 0.01
    assert TrainConfig(lr=0.3).lr_at(50) == 0.3


# runs, checkpoints, resume

def test_stage_sequence_and_moments(tiny, tmp_path):
    cfg = small_cfg(checkpoint_dir=str(tmp_path / "ck"))
    st, rec = run_training(cfg, corpus=tiny, log_path=tmp_path / "log.jsonl")
    assert [r["step"] for r in rec] == list(range(1, 13))
    assert [r["stage"] for r in rec] == [1] * 3 + [2] * 3 + [3] * 3 + [4] * 3
    assert {r["task"] for r in rec[:3]} == {"t2v"}
    lines = [json.loads(x) for x in open(tmp_path / "log.jsonl")]
    assert lines == rec and set(lines[0]) == {"step", "stage", "task", "loss"}
    assert (tmp_path / "ck" / "final" / "manifest.json").exists()
    # moments survive the stage-3 -> stage-4 boundary: resume after step 9 sees non-zero moments
    mid, _ = run_training(cfg, corpus=tiny, stop_after=9)
    assert mid.stage_pos == 3 and mid.stage_step == 0
    assert any(np.abs(m).max() > 0 for m in mid.m.values())


def test_orders_run(tiny):
    for order, stages in (("easy_to_difficult", [4, 3, 2, 1]), ("full_training", [0])):
        _, rec = run_training(small_cfg(order=order), corpus=tiny)
        seen = []
        for r in rec:
            if not seen or seen[-1] != r["stage"]:
                seen.append(r["stage"])
        assert seen == stages


def test_resume_matches_uninterrupted(tiny, tmp_path):
    cfg = small_cfg()
    _, full = run_training(cfg, corpus=tiny)
    part, first = run_training(cfg, corpus=tiny, stop_after=5)
    save_state(tmp_path / "mid", part, cfg)
    _, rest = run_training(cfg, corpus=tiny, resume_from=tmp_path / "mid")
    assert first + rest == full


def test_checkpoint_roundtrip(tiny, tmp_path):
    cfg = small_cfg()
    st, _ = run_training(cfg, corpus=tiny, stop_after=4)
    save_state(tmp_path / "s", st, cfg)
    back = load_state(tmp_path / "s")
    assert back.step == st.step and back.stage_pos == st.stage_pos
    for k in st.params:
        assert back.params[k].data.tobytes() == st.params[k].data.tobytes()
        assert back.m[k].tobytes() == st.m[k].tobytes() and back.v[k].tobytes() == st.v[k].tobytes()
    assert back.rng.bit_generator.state == st.rng.bit_generator.state


def test_missing_corpus_is_startup_error(tmp_path):
    cfg = small_cfg(corpora={"t2v": str(tmp_path / "none")})
    with pytest.raises(ConfigError):
        run_training(cfg)
    with pytest.raises(ConfigError):
        run_training(small_cfg())


def test_corpus_paths_from_config(tiny, tmp_path):
    paths = {}
    for task, samples in tiny.items():
        save_corpus(samples, tmp_path / task)
        paths[task] = str(tmp_path / task)
    _, rec = run_training(small_cfg(corpora=paths), corpus=None)
    assert len(rec) == 12


def test_clip_too_short(tiny):
    cfg = small_cfg(stages=[dict(stage_id=1, frames=9, tasks=["t2v"], probabilities=[1.0], step_budget=1)])
    with pytest.raises(ConfigError):
        run_training(cfg, corpus=tiny)


def test_base_role_trains_text_only(tiny):
    cfg = small_cfg(role="base")
    st, rec = run_training(cfg, corpus={"t2v": tiny["t2v"]})
    assert not cfg.model_config().use_lr and len(rec) == 12
    assert st.params["in.w"].shape[0] == 48


def test_config_keys(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "order": "full_training", "betas": [0.9, 0.99]}))
    cfg = TrainConfig.load(p)
    assert cfg.seed == 3 and cfg.betas == (0.9, 0.99)
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"order": "random"})


def test_state_type():
    st = init_state(small_cfg())
    assert isinstance(st, TrainState) and st.step == 0
