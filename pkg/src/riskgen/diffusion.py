"""Noise schedules, forward noising and the deterministic DDIM reverse step.

Everything here is a pure function of numpy arrays.  A state batch is a
``(n, D)`` float array together with the integer step ``t`` it sits at; step
0 is the clean point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion coefficients.

    ``alphas[t - 1]`` holds alpha_t for t in 1..T and ``alpha_bars[t]`` the
    cumulative product up to t, with ``alpha_bars[0] == 1``.
    """

    T: int
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.alphas.shape != (self.T,) or self.alpha_bars.shape != (self.T + 1,):
            raise ValueError("schedule arrays have inconsistent lengths")
        if self.alpha_bars[0] != 1.0:
            raise ValueError("alpha_bars[0] must be exactly 1")
        if np.any(self.alpha_bars <= 0) or np.any(np.diff(self.alpha_bars) > 0):
            raise ValueError("alpha_bars must be positive and non-increasing")

    def sqrt_ab(self, t: int) -> float:
        return float(np.sqrt(self.alpha_bars[t]))

    def sqrt_one_minus_ab(self, t: int) -> float:
        return float(np.sqrt(1.0 - self.alpha_bars[t]))


def build_schedule(kind: str = "linear", T: int = 50, beta_min: float = 1e-4,
                   beta_max: float = 0.2, betas=None) -> NoiseSchedule:
    """Build a schedule.

    ``kind="linear"`` spaces beta_t linearly over ``[beta_min, beta_max]``;
    an explicit ``betas`` sequence overrides the spacing.  ``kind="cosine"``
    uses the squared-cosine cumulative profile, clipped at beta 0.999.
    """
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if betas is not None:
        betas = np.asarray(betas, dtype=np.float64)
        if betas.shape != (T,):
            raise ValueError(f"expected {T} betas, got shape {betas.shape}")
    elif kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * np.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    # beta == 0 is allowed as the noiseless degenerate case
    if np.any(betas < 0) or np.any(betas >= 1) or not np.all(np.isfinite(betas)):
        raise ValueError("betas must lie in [0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(T=T, alphas=alphas, alpha_bars=alpha_bars)


def _check_step(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.T:
        raise ValueError(f"step {t} outside [1, {schedule.T}]")


def forward_diffuse(z0: np.ndarray, t: int, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Sample z_t from q(z_t | z_0) with the given noise."""
    _check_step(t, schedule)
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {z0.shape} vs {eps.shape}")
    return schedule.sqrt_ab(t) * z0 + schedule.sqrt_one_minus_ab(t) * eps


def predict_z0(z_t: np.ndarray, eps_hat: np.ndarray, t: int,
               schedule: NoiseSchedule) -> np.ndarray:
    """Clean-point estimate implied by a noise prediction."""
    _check_step(t, schedule)
    return (z_t - schedule.sqrt_one_minus_ab(t) * eps_hat) / schedule.sqrt_ab(t)


def ddim_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int,
              schedule: NoiseSchedule) -> np.ndarray:
    """One deterministic (eta = 0) DDIM update from step t to t - 1."""
    _check_step(t, schedule)
    if not (np.all(np.isfinite(z_t)) and np.all(np.isfinite(eps_hat))):
        raise FloatingPointError(f"non-finite state or noise at step {t}")
    z0_hat = predict_z0(z_t, eps_hat, t, schedule)
    ab_prev = schedule.alpha_bars[t - 1]
    return np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat


def sample_timesteps(rng: np.random.Generator, n: int, schedule: NoiseSchedule) -> np.ndarray:
    return rng.integers(1, schedule.T + 1, size=n)


def forward_diffuse_batch(z0: np.ndarray, ts: np.ndarray, eps: np.ndarray,
                          schedule: NoiseSchedule) -> np.ndarray:
    """Per-row version of :func:`forward_diffuse` used during training."""
    ab = schedule.alpha_bars[ts][:, None]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
