"""Flow-matching training pairs, the MSE objective and LR noise augmentation."""
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Tensor, mse

NOISE_AUG_RANGE = (200, 600)


@dataclass
class TrainingPair:
    z_t: np.ndarray
    v_target: np.ndarray
    t: float
    eps: np.ndarray


def make_training_pair(z_hr, eps, t):
    """``z_t = (1-t) z_hr + t eps`` with velocity target ``z_hr - eps``.

    ``t`` may be a scalar or one value per leading batch entry.
    """
    z_hr, eps = np.asarray(z_hr), np.asarray(eps)
    if z_hr.shape != eps.shape:
        raise ShapeError(f"z_hr {list(z_hr.shape)} and eps {list(eps.shape)} differ")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ContractError(f"t must lie in [0, 1], got {t}")
    tb = t_arr.reshape(t_arr.shape + (1,) * (z_hr.ndim - t_arr.ndim)).astype(z_hr.dtype)
    z_t = (1 - tb) * z_hr + tb * eps
    return TrainingPair(z_t.astype(z_hr.dtype), (z_hr - eps).astype(z_hr.dtype), t, eps)


def mse_loss(pred, target):
    """Mean of squared differences; returns a scalar Tensor (differentiable in ``pred``)."""
    if tuple(np.shape(pred)) != tuple(np.shape(target)):
        raise ShapeError(f"pred {list(np.shape(pred))} and target {list(np.shape(target))} differ")
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred))
    return mse(pred, Tensor(np.asarray(target, dtype=pred.dtype)))


def noise_augment(lr, u, eps):
    """Mix the LR latent toward noise by ``u/1000`` of the way; ``u`` is an integer in [0, 1000]."""
    lr, eps = np.asarray(lr), np.asarray(eps)
    if not 0 <= u <= 1000:
        raise ContractError(f"noise-augmentation step {u} outside [0, 1000]")
    if lr.shape != eps.shape:
        raise ShapeError("LR latent and noise shapes differ")
    a = u / 1000.0
    return ((1.0 - a) * lr + a * eps).astype(lr.dtype)


def sample_noise_step(rng, low=NOISE_AUG_RANGE[0], high=NOISE_AUG_RANGE[1]):
    return int(rng.integers(low, high + 1))
