"""Noise schedule and deterministic DDIM stepping.

All stepping functions are elementwise and work on either numpy arrays or
torch tensors of any layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

SENTINEL = -1  # "previous" timestep meaning alpha_bar = 1 (clean sample)


@dataclass(frozen=True)
class NoiseSchedule:
    t_train: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def alpha_bar(self, t: int) -> float:
        if t == SENTINEL:
            return 1.0
        if not 0 <= t < self.t_train:
            raise ConfigError(f"timestep {t} outside [0, {self.t_train})")
        return float(self.alpha_bars[t])


@dataclass(frozen=True)
class SamplingPlan:
    timesteps: np.ndarray
    seed: int = 0
    num_steps: int = field(init=False)

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.int64)
        if ts.ndim != 1 or len(ts) < 2:
            raise ConfigError("a sampling plan needs at least 2 timesteps")
        if np.any(np.diff(ts) >= 0) or ts[-1] < 0:
            raise ConfigError("timesteps must be strictly decreasing and non-negative")
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "num_steps", len(ts))

    @classmethod
    def uniform(cls, t_train: int, num_steps: int = 50, seed: int = 0) -> "SamplingPlan":
        return cls(subsample_timesteps(t_train, num_steps), seed=seed)

    def step_pair(self, u: int) -> tuple[int, int]:
        """(t, t_prev) for denoising step ``u``; the last step lands on the sentinel."""
        t = int(self.timesteps[u])
        t_prev = int(self.timesteps[u + 1]) if u + 1 < self.num_steps else SENTINEL
        return t, t_prev


def make_schedule(t_train: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if t_train < 2 or not (0 < beta_start <= beta_end < 1):
        raise ConfigError(
            f"invalid schedule range: t_train={t_train}, beta_start={beta_start}, beta_end={beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, t_train, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.empty_like(alphas)
    acc = 1.0
    for i, a in enumerate(alphas):
        acc = acc * a
        alpha_bars[i] = acc
    return NoiseSchedule(t_train, betas, alphas, alpha_bars, float(beta_start), float(beta_end))


def subsample_timesteps(t_train: int, num_steps: int) -> np.ndarray:
    """Evenly spaced timesteps, largest first: ``floor(i * t_train / S)`` reversed."""
    if not 2 <= num_steps <= t_train:
        raise ConfigError(f"need 2 <= num_steps <= {t_train}, got {num_steps}")
    idx = (np.arange(num_steps, dtype=np.int64) * t_train) // num_steps
    return idx[::-1].copy()


def _check_same_shape(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _affine(a: float, x, b: float, y):
    """``a * x + b * y`` evaluated in float64 and returned in ``x``'s dtype."""
    if torch.is_tensor(x):
        return (a * x.double() + b * torch.as_tensor(y).double()).to(x.dtype)
    x = np.asarray(x)
    out = a * x.astype(np.float64) + b * np.asarray(y, dtype=np.float64)
    return out.astype(x.dtype) if np.issubdtype(x.dtype, np.floating) else out


def add_noise(z0, t: int, eps, schedule: NoiseSchedule):
    _check_same_shape(z0, eps)
    ab = schedule.alpha_bar(t)
    return _affine(math.sqrt(ab), z0, math.sqrt(1.0 - ab), eps)


def _step_coefficients(t_from: int, t_to: int, schedule: NoiseSchedule) -> tuple[float, float]:
    """Coefficients of ``z_to = a z_from + b eps`` for a deterministic DDIM move."""
    ab_from = schedule.alpha_bar(t_from)
    ab_to = schedule.alpha_bar(t_to)
    if ab_from <= 0:
        raise NumericError(f"alpha_bar[{t_from}] = {ab_from} is not positive")
    a = math.sqrt(ab_to / ab_from)
    b = math.sqrt(1.0 - ab_to) - math.sqrt(ab_to) * math.sqrt(1.0 - ab_from) / math.sqrt(ab_from)
    return a, b


def predict_clean(z_t, eps_hat, t: int, schedule: NoiseSchedule):
    ab = schedule.alpha_bar(t)
    if ab <= 0:
        raise NumericError(f"alpha_bar[{t}] = {ab} is not positive")
    return _affine(1.0 / math.sqrt(ab), z_t, -math.sqrt(1.0 - ab) / math.sqrt(ab), eps_hat)


def ddim_denoise_step(z_t, eps_hat, t: int, t_prev: int, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``.

    Equivalent to predicting ``z0 = (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)``
    and re-noising it to ``t_prev`` with the same ``eps``; folded into one
    affine map so that inversion round trips lose only final rounding.
    """
    _check_same_shape(z_t, eps_hat)
    if t_prev == t:
        return z_t
    if t_prev > t:
        raise ConfigError(f"denoising must move to an earlier timestep ({t} -> {t_prev})")
    a, b = _step_coefficients(t, t_prev, schedule)
    return _affine(a, z_t, b, eps_hat)


def ddim_invert_step(z_prev, eps_hat, t_prev: int, t: int, schedule: NoiseSchedule):
    """Inverse of :func:`ddim_denoise_step` for a fixed ``eps_hat``."""
    _check_same_shape(z_prev, eps_hat)
    if t <= t_prev:
        raise ConfigError(f"inversion must move to a later timestep ({t_prev} -> {t})")
    a, b = _step_coefficients(t_prev, t, schedule)
    return _affine(a, z_prev, b, eps_hat)
