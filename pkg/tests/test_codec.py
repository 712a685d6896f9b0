import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vsrflow import codec
from vsrflow.codec import CodecConfig, bilinear_resize, decode, encode, upsample_latent
from vsrflow.errors import ShapeError

torch = pytest.importorskip("torch")


def rand_video(seed, f=2, h=8, w=8):
    return np.random.default_rng(seed).uniform(size=(f, 3, h, w)).astype(np.float32)


def test_encode_shapes():
    assert encode(rand_video(0)).shape == (2, 48, 2, 2)
    assert decode(np.zeros((2, 48, 2, 2), np.float32)).shape == (2, 3, 8, 8)


def test_zero_video_and_black_latent():
    assert not encode(np.zeros((1, 3, 4, 4))).any()
    assert not decode(np.zeros((1, 48, 1, 1))).any()


def test_errors():
    with pytest.raises(ShapeError):
        encode(np.zeros((1, 3, 6, 8)))
    with pytest.raises(ShapeError):
        decode(np.zeros((1, 12, 2, 2)))


@pytest.mark.parametrize("seed,dims", [(s, d) for s in range(3) for d in ((1, 4, 4), (3, 8, 12), (2, 16, 8))])
def test_roundtrip(seed, dims):
    x = rand_video(seed, *dims)
    assert np.abs(decode(encode(x)) - x).max() <= 1e-5


@pytest.mark.parametrize("p,seed", [(2, 0), (4, 0), (4, 9)])
def test_mixing_orthonormal(p, seed):
    q = codec.mixing_matrix(3 * p * p, seed)
    assert np.abs(q.T @ q - np.eye(3 * p * p)).max() < 1e-6


def test_mixing_is_nontrivial():
    # a plain space-to-depth would put pixel (0,0,0) into channel 0 alone
    x = np.zeros((1, 3, 4, 4))
    x[0, 0, 0, 0] = 1.0
    assert np.count_nonzero(np.abs(encode(x)) > 1e-9) > 1


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_encode_linear(a, b, seed):
    x, y = rand_video(seed).astype(np.float64), rand_video(seed + 1).astype(np.float64)
    lhs = encode(a * x + b * y)
    rhs = a * encode(x) + b * encode(y)
    assert np.abs(lhs - rhs).max() <= 1e-5


def test_decode_clamps_only_on_request():
    z = encode(np.full((1, 3, 4, 4), 1.5))
    assert decode(z).max() == 1.0
    assert np.allclose(decode(z, clamp=False), 1.5)


# bilinear

def test_constant_stays_constant():
    x = np.full((2, 3, 5, 7), 0.7)
    for th, tw in ((1, 1), (10, 3), (13, 29)):
        assert np.allclose(bilinear_resize(x, th, tw), 0.7)


def test_row_example_half_pixel():
    # align-corners=False with edge clamping; torch gives the same row
    out = bilinear_resize(np.array([[0.0, 1.0]]), 1, 4)
    assert np.allclose(out, [[0.0, 0.25, 0.75, 1.0]])


@pytest.mark.parametrize("hw,target", [((4, 4), (8, 8)), ((5, 3), (2, 7)), ((16, 16), (8, 8)), ((3, 9), (11, 4))])
def test_bilinear_matches_torch(hw, target):
    x = np.random.default_rng(0).uniform(size=(2, 3) + hw)
    ref = torch.nn.functional.interpolate(torch.tensor(x), size=target, mode="bilinear",
                                          align_corners=False).numpy()
    assert np.abs(bilinear_resize(x, *target) - ref).max() < 1e-12


def test_resize_roundtrip_smooth():
    yy, xx = np.mgrid[0:16, 0:16] / 15.0
    img = np.stack([0.2 + 0.6 * xx, 0.8 - 0.5 * yy, 0.5 * (xx + yy) / 2 + 0.25])[None]
    back = bilinear_resize(bilinear_resize(img, 32, 32), 16, 16)
    assert np.abs(back - img).max() < 0.05


def test_resize_rejects_zero_target():
    with pytest.raises(ShapeError):
        bilinear_resize(np.zeros((1, 3, 4, 4)), 0, 4)


# upsampler

def test_upsample_scale_one_identity():
    z = encode(rand_video(3))
    assert np.abs(upsample_latent(z, 1) - z).max() <= 1e-5


def test_upsample_shape():
    z = encode(rand_video(4, 3, 8, 8))
    out = upsample_latent(z, 2)
    assert out.shape == (3, 48, 4, 4)
    assert decode(out).shape == (3, 3, 16, 16)


def test_upsample_constant_color():
    x = np.empty((2, 3, 8, 8), np.float32)
    x[:, 0], x[:, 1], x[:, 2] = 0.1, 0.5, 0.9
    out = decode(upsample_latent(encode(x), 2))
    assert out.shape == (2, 3, 16, 16)
    assert np.allclose(out[:, 0], 0.1, atol=1e-5) and np.allclose(out[:, 2], 0.9, atol=1e-5)


def test_latent_interpolation_is_not_pixel_interpolation():
    # the upsampler must go through pixel space: resizing latents directly gives a different video
    x = rand_video(5)
    direct = decode(encode(bilinear_resize(x, 16, 16)))
    naive = decode(bilinear_resize(encode(x), 4, 4), clamp=False)
    assert np.allclose(decode(upsample_latent(encode(x), 2)), direct, atol=1e-5)
    assert np.abs(naive - direct).max() > 0.05


def test_area_downsample():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    assert codec.area_downsample(x, 2)[0, 0].tolist() == [[2.5, 4.5], [10.5, 12.5]]
    with pytest.raises(ShapeError):
        codec.area_downsample(np.zeros((1, 3, 5, 4)), 2)


def test_video_file_and_sidecar(tmp_path):
    v = rand_video(6)
    path = tmp_path / "clip.umvt"
    codec.save_video(path, v, fps=12.0)
    back, meta = codec.load_video(path)
    assert np.array_equal(back, v)
    assert meta == {"colorspace": "rgb", "dims": [2, 3, 8, 8], "fps": 12.0, "frames": 2}
    assert json.loads((tmp_path / "clip.json").read_text())["frames"] == 2
