import hashlib
import os

import numpy as np
import pytest

from vsrflow import codec
from vsrflow.degrade import (
    DegradeRecipe, SpectralPriorVelocity, augment_image, build_corpus, draw_k, identity_recipe,
    load_corpus, make_sample, preset, reference_augment, save_corpus, sdedit_degrade, synthetic_degrade,
)
from vsrflow.errors import ConfigError, ContractError
from vsrflow.harness import psnr


def hr_clip(seed=0, frames=3, size=16):
    return make_sample("t2v", seed, 11, frames=frames, size=size).hr


def test_recipe_contract():
    with pytest.raises(ConfigError):
        DegradeRecipe(k_min=10, k_max=5).validate()
    with pytest.raises(ConfigError):
        DegradeRecipe(k_max=31).validate()
    assert (preset("light").k_min, preset("light").k_max) == (5, 15)
    assert (preset("heavy").k_min, preset("heavy").k_max) == (15, 30)
    assert (DegradeRecipe().k_min, DegradeRecipe().k_max) == (5, 25)
    with pytest.raises(ConfigError):
        preset("medium")


def test_k_bounds_attained():
    r, rng = DegradeRecipe(), np.random.default_rng(0)
    ks = [draw_k(r, rng) for _ in range(1000)]
    assert min(ks) == r.k_min and max(ks) == r.k_max


def test_zero_step_sdedit_is_downsample():
    hr = hr_clip()
    out, k = sdedit_degrade(hr, SpectralPriorVelocity(), identity_recipe(), np.random.default_rng(0))
    assert k == 0
    assert np.abs(out - codec.area_downsample(hr, 2)).max() <= 1e-5


def test_zero_step_plus_identity_synthetic():
    hr = hr_clip(1)
    r = identity_recipe()
    mid, _ = sdedit_degrade(hr, SpectralPriorVelocity(), r, np.random.default_rng(0))
    out = synthetic_degrade(mid, r, np.random.default_rng(1))
    assert np.abs(out - codec.area_downsample(hr, 2)).max() <= 1e-5


def test_sdedit_deterministic_and_uses_model():
    hr = hr_clip(2)
    m = SpectralPriorVelocity()
    a, ka = sdedit_degrade(hr, m, DegradeRecipe(), np.random.default_rng(5))
    b, kb = sdedit_degrade(hr, SpectralPriorVelocity(), DegradeRecipe(), np.random.default_rng(5))
    assert ka == kb and a.tobytes() == b.tobytes()
    assert m.calls > 0


def test_sdedit_structure_monotone():
    # heavier noising keeps less of the input
    base = SpectralPriorVelocity()
    light, heavy = [], []
    for i in range(8):
        hr = hr_clip(i, frames=2)
        ref = codec.area_downsample(hr, 2)
        lo, _ = sdedit_degrade(hr, base, DegradeRecipe(), np.random.default_rng(i), k=15)
        hi, _ = sdedit_degrade(hr, base, DegradeRecipe(k_max=30), np.random.default_rng(i), k=30)
        light.append(psnr(lo, ref))
        heavy.append(psnr(hi, ref))
    assert np.mean(light) > np.mean(heavy)


def test_spectral_prior_velocity_is_exact_for_prior_mean():
    # at the prior mean image the posterior is the mean itself for every t
    m = SpectralPriorVelocity()
    x = np.full((1, 3, 8, 8), 0.5)
    z = codec.encode(x)
    for t in (0.1, 0.5, 0.9):
        v = m(((1 - t) * z).astype(np.float64), t)
        assert np.allclose(codec.decode(v, clamp=False), 0.5, atol=1e-9)


def test_synthetic_identity():
    x = np.random.default_rng(0).uniform(size=(2, 3, 8, 8)).astype(np.float32)
    assert np.array_equal(synthetic_degrade(x, identity_recipe(), np.random.default_rng(0)), x)


def test_synthetic_noise_level():
    r = identity_recipe(noise_sigma_range=(0.1, 0.1))
    out = synthetic_degrade(np.full((4, 3, 32, 32), 0.5), r, np.random.default_rng(0))
    assert 0.08 <= out.std() <= 0.12


def test_synthetic_deterministic():
    x = hr_clip(3)
    r = DegradeRecipe()
    assert synthetic_degrade(x, r, np.random.default_rng(9)).tobytes() == \
        synthetic_degrade(x, r, np.random.default_rng(9)).tobytes()


# corpora

@pytest.fixture(scope="module")
def corpora():
    return {t: build_corpus(t, 4, 3, frames=5, size=16) for t in ("t2v", "multi_id", "edit")}


def test_sample_contracts(corpora):
    for task, samples in corpora.items():
        for s in samples:
            assert s.task == task
            assert s.lr.shape == (5, 3, 8, 8) and s.hr.shape == (5, 3, 16, 16)
            assert 0.0 <= s.lr.min() and s.lr.max() <= 1.0
            assert 5 <= s.k <= 25


def test_edit_alignment_exact(corpora):
    for s in corpora["edit"]:
        keep = ~s.edit_mask[:, None]
        assert np.array_equal(np.where(keep, s.hr, 0), np.where(keep, s.ref_video, 0))
        assert s.edit_mask.any() and not np.array_equal(s.hr, s.ref_video)


def _locate(img, video):
    c, h, w = img.shape
    for f in range(video.shape[0]):
        for y in range(video.shape[2] - h + 1):
            for x in range(video.shape[3] - w + 1):
                if np.array_equal(video[f, :, y:y + h, x:x + w], img):
                    return f, y, x
    return None


def test_id_images_are_subrectangles(corpora):
    for s in corpora["multi_id"]:
        assert len(s.id_images) >= 1
        for img in s.id_images:
            assert _locate(img, s.hr) is not None


def test_corpus_byte_identical(tmp_path):
    def digest(d):
        h = hashlib.sha256()
        for name in sorted(os.listdir(d)):
            h.update(name.encode())
            h.update(open(os.path.join(d, name), "rb").read())
        return h.hexdigest()

    for run in ("a", "b"):
        save_corpus(build_corpus("edit", 2, 7, frames=3, size=16), tmp_path / run, {"seed": 7})
    assert digest(tmp_path / "a") == digest(tmp_path / "b")


def test_corpus_roundtrip(tmp_path, corpora):
    save_corpus(corpora["multi_id"] + corpora["edit"], tmp_path / "c")
    back, _ = load_corpus(tmp_path / "c")
    orig = corpora["multi_id"] + corpora["edit"]
    assert len(back) == len(orig)
    for a, b in zip(orig, back):
        assert a.prompt == b.prompt and np.array_equal(a.hr, b.hr) and np.array_equal(a.lr, b.lr)
        assert all(np.array_equal(x, y) for x, y in zip(a.id_images, b.id_images))
        if a.edit_mask is not None:
            assert np.array_equal(a.edit_mask, b.edit_mask)


def test_missing_corpus(tmp_path):
    with pytest.raises(ConfigError):
        load_corpus(tmp_path / "nothing")


# reference augmentation

def test_augment_identity_when_empty(corpora):
    s = corpora["multi_id"][0]
    out = reference_augment(s, np.random.default_rng(0), transforms=[])
    assert all(np.array_equal(a, b) for a, b in zip(out.id_images, s.id_images))
    e = corpora["edit"][0]
    assert np.array_equal(reference_augment(e, np.random.default_rng(0), shift=0).ref_video, e.ref_video)


def test_edit_shift(corpora):
    e = corpora["edit"][1]
    out = reference_augment(e, np.random.default_rng(0), shift=1)
    f = e.ref_video.shape[0]
    for i in range(f):
        assert np.array_equal(out.ref_video[i], e.ref_video[(i + 1) % f])


def test_edit_shift_range(corpora):
    e = corpora["edit"][2]
    f = e.ref_video.shape[0]
    seen = set()
    for seed in range(60):
        out = reference_augment(e, np.random.default_rng(seed)).ref_video
        found = [s for s in range(-2, 3) if np.array_equal(out, np.roll(e.ref_video, -s, axis=0))]
        assert found
        seen.update(found)
    assert seen == {-2, -1, 0, 1, 2} or f < 5


def test_flip_involution():
    img = np.random.default_rng(0).uniform(size=(3, 5, 7)).astype(np.float32)
    once = augment_image(img, np.random.default_rng(0), ["flip"])
    assert not np.array_equal(once, img)
    assert np.array_equal(augment_image(once, np.random.default_rng(0), ["flip"]), img)


def test_augment_ranges():
    img = np.full((3, 10, 10), 0.5, np.float32)
    for seed in range(50):
        out = augment_image(img, np.random.default_rng(seed), ["brightness"])
        assert abs(float(out.mean()) - 0.5) <= 0.1 + 1e-6


def test_augment_t2v_rejected(corpora):
    with pytest.raises(ContractError):
        reference_augment(corpora["t2v"][0], np.random.default_rng(0))
