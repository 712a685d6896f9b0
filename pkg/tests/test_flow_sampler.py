import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsrflow.conditioning import ConditionBundle, encode_text
from vsrflow.errors import ConfigError, ContractError, ShapeError
from vsrflow.flowmatch import (
    NOISE_AUG_RANGE, make_training_pair, mse_loss, noise_augment, sample_noise_step,
)
from vsrflow.numerics import Tensor
from vsrflow.sampler import (
    SamplerConfig, cfg_combine, guided_velocity, plms_integrate, pndm_sample, rgt_scale, shift_timesteps,
)


# training pairs

def test_pair_endpoints():
    z, e = np.full(4, 0.4), np.full(4, -0.2)
    assert np.array_equal(make_training_pair(z, e, 0.0).z_t, z)
    assert np.array_equal(make_training_pair(z, e, 1.0).z_t, e)
    p = make_training_pair(z, e, 0.25)
    assert np.allclose(p.z_t, 0.25) and np.allclose(p.v_target, 0.6)


def test_pair_errors():
    with pytest.raises(ContractError):
        make_training_pair(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ShapeError):
        make_training_pair(np.zeros(2), np.zeros(3), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 10**6))
def test_pair_affine_and_reconstructs(t, a, b, seed):
    rng = np.random.default_rng(seed)
    z1, e1, z2, e2 = rng.standard_normal((4, 5))
    p = make_training_pair(z1, e1, t)
    assert np.allclose(p.z_t, (1 - t) * z1 + t * p.eps, atol=1e-6)
    mix = make_training_pair(a * z1 + b * z2, a * e1 + b * e2, t)
    q = make_training_pair(z2, e2, t)
    assert np.allclose(mix.z_t, a * p.z_t + b * q.z_t, atol=1e-9)
    assert np.array_equal(make_training_pair(z1, e1, 0.9).v_target, p.v_target)


def test_batched_t():
    z, e = np.ones((2, 3)), np.zeros((2, 3))
    p = make_training_pair(z, e, np.array([0.0, 0.5]))
    assert p.z_t.tolist() == [[1, 1, 1], [0.5, 0.5, 0.5]]


def test_mse_loss():
    x = np.random.default_rng(0).standard_normal((2, 3))
    assert float(mse_loss(x, x).data) == 0.0
    assert np.isclose(float(mse_loss(Tensor(x + 1), x).data), 1.0)
    with pytest.raises(ShapeError):
        mse_loss(np.zeros(2), np.zeros(3))


def test_noise_augment():
    lr, eps = np.ones(4), np.zeros(4)
    assert np.array_equal(noise_augment(lr, 0, eps), lr)
    assert np.array_equal(noise_augment(lr, 1000, eps), eps)
    assert np.allclose(noise_augment(lr, 600, eps), 0.4)
    with pytest.raises(ContractError):
        noise_augment(lr, 1001, eps)


def test_noise_step_range():
    rng = np.random.default_rng(0)
    u = np.array([sample_noise_step(rng) for _ in range(5000)])
    assert u.min() == NOISE_AUG_RANGE[0] and u.max() == NOISE_AUG_RANGE[1]


# schedule and guidance

def test_shift_identity_and_example():
    for n in (1, 4, 50):
        assert np.array_equal(shift_timesteps(n, 1.0), 1.0 - np.arange(n + 1) / n)
    assert shift_timesteps(2, 3.0)[1] == 0.75


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.floats(0.05, 20))
def test_shift_monotone(n, s):
    t = shift_timesteps(n, s)
    assert len(t) == n + 1 and t[0] == 1.0 and t[-1] == 0.0
    assert np.all(np.diff(t) < 0)


def test_cfg_examples():
    assert cfg_combine(2.0, 1.0, 1.5, 3.0, 1.0) == 5.5
    full = np.array([0.3, -1.0])
    assert np.array_equal(cfg_combine(full, full * 9, full * 7, 0.0, 0.0), full)
    with pytest.raises(ShapeError):
        cfg_combine(np.zeros(2), np.zeros(3), None, 1.0, 0.0)


def test_rgt():
    assert rgt_scale(0, 15, 1.0) == 1.0
    assert rgt_scale(14, 15, 1.0) == 1.0
    assert rgt_scale(15, 15, 1.0) == 0.0
    assert rgt_scale(50, 15, 1.0) == 0.0
    assert all(rgt_scale(n, 0, 2.0) == 0.0 for n in range(10))
    vals = [rgt_scale(n, 7, 1.5) for n in range(20)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_sampler_config_contract():
    assert SamplerConfig().s_txt == 3.0 and SamplerConfig().s_ref == 1.0
    for bad in (dict(steps=0), dict(shift=0.0), dict(n_ref=60)):
        with pytest.raises(ConfigError):
            SamplerConfig(**bad)


# integration oracles

@pytest.mark.parametrize("n", [1, 4, 50])
def test_constant_field_exact(n):
    z0 = np.random.default_rng(0).standard_normal(6)
    v0 = np.linspace(-1, 1, 6)
    out = plms_integrate(lambda z, t, k: v0, z0, shift_timesteps(n))
    assert np.abs(out - (z0 + v0)).max() <= 1e-5


def test_linear_in_t_against_fine_euler():
    a, b = 0.7, -1.3
    m = 10**6
    t = 1.0 - np.arange(m) / m
    ref = 0.2 + np.sum((a + b * t) / m)
    out = plms_integrate(lambda z, tt, k: np.full_like(z, a + b * tt), np.array([0.2]), shift_timesteps(50))
    assert abs(out[0] - ref) < 1e-4
    assert abs(out[0] - (0.2 + a + b / 2)) < 1e-12


def test_state_dependent_field_order():
    # dz/dt = -0.5 z backwards from t=1: z(0) = z(1) * exp(0.5)
    out = plms_integrate(lambda z, t, k: 0.5 * z, np.array([1.0]), shift_timesteps(50))
    assert abs(out[0] - np.exp(0.5)) < 1e-6


class Counter:
    def __init__(self):
        self.calls = 0
        self.kinds = []

    def __call__(self, z, t, bundle):
        self.calls += 1
        self.kinds.append((bool(bundle.has_refs), bool(np.array_equal(bundle.text_tokens, encode_text("")))))
        return -0.1 * z + (0.0 if bundle.has_refs else 0.05)


def _bundle(refs=True):
    ref = np.zeros((2, 48, 1, 1), np.float32) if refs else None
    return ConditionBundle(encode_text("a cat"), ref_video=ref, lr_latent=np.zeros((2, 48, 1, 1), np.float32))


def test_no_ref_branch_skipped_without_reference_guidance():
    m = Counter()
    pndm_sample(m, _bundle(), SamplerConfig(steps=10, s_ref=0.0, n_ref=5))
    assert m.calls == 2 * 11
    m = Counter()
    pndm_sample(m, _bundle(), SamplerConfig(steps=10, n_ref=0))
    assert m.calls == 2 * 11
    m = Counter()
    pndm_sample(m, _bundle(refs=False), SamplerConfig(steps=10, n_ref=5))
    assert m.calls == 2 * 11


def test_rgt_branch_counts():
    m = Counter()
    pndm_sample(m, _bundle(), SamplerConfig(steps=50, n_ref=15))
    # 51 evaluations (Heun start adds one at n=0); the first 16 carry three branches
    assert m.calls == 16 * 3 + 35 * 2


def test_guided_velocity_combines_branches():
    b = _bundle()
    v = guided_velocity(Counter(), b, SamplerConfig(s_txt=3.0, s_ref=1.0, n_ref=5))
    z = np.ones((2, 48, 1, 1), np.float32)
    full = -0.1 * z
    assert np.allclose(v(z, 0.5, 0), full + 1.0 * (full - (full + 0.05)))
    assert np.allclose(v(z, 0.5, 5), full)


def test_pndm_deterministic():
    b = _bundle()
    a1 = pndm_sample(Counter(), b, SamplerConfig(steps=8, n_ref=4, seed=3))
    a2 = pndm_sample(Counter(), b, SamplerConfig(steps=8, n_ref=4, seed=3))
    a3 = pndm_sample(Counter(), b, SamplerConfig(steps=8, n_ref=4, seed=4))
    assert a1.tobytes() == a2.tobytes() and a1.tobytes() != a3.tobytes()
