"""Linear-beta noise schedule, forward noising and deterministic DDIM steps.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0) == 1``.
All functions accept either a scalar ``t`` or a per-sample integer array
(one entry per leading-axis item).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray  # index t-1 holds beta_t
    alphas_bar: np.ndarray  # index t holds alpha_bar_t, alphas_bar[0] == 1

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ScheduleError(f"timestep out of range [0, {self.T}]: {t}")
        return self.alphas_bar[t]

    def params(self) -> dict[str, float]:
        return {"T": float(self.T), "beta_start": self.beta_start, "beta_end": self.beta_end}


def default_beta_end(T: int) -> float:
    return min(0.02 * (1000.0 / T), 0.05)


def make_schedule(T: int = 200, beta_start: float = 1e-3, beta_end: float | None = None) -> NoiseSchedule:
    if beta_end is None:
        beta_end = default_beta_end(T)
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64) if T > 1 else np.array([beta_start])
    alphas_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas_bar)


def _check_t(schedule: NoiseSchedule, t, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        if np.any(t != np.round(t)):
            raise ScheduleError(f"timesteps must be integers, got {t}")
        t = t.astype(np.int64)
    if np.any(t < lo) or np.any(t > schedule.T):
        raise ScheduleError(f"timestep {t} outside [{lo}, {schedule.T}]")
    return t


def _coef(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast per-sample coefficients against a batch of latents."""
    values = np.asarray(values, dtype=like.dtype)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, eps: np.ndarray, t) -> np.ndarray:
    """``sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps``."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps, dtype=z0.dtype)
    if z0.shape != eps.shape:
        raise ScheduleError(f"add_noise: latent {z0.shape} and noise {eps.shape} differ in shape")
    t = _check_t(schedule, t)
    ab = schedule.alphas_bar[t]
    return _coef(np.sqrt(ab), z0) * z0 + _coef(np.sqrt(1.0 - ab), z0) * eps


def predict_z0(schedule: NoiseSchedule, z_t: np.ndarray, eps_pred: np.ndarray, t) -> np.ndarray:
    z_t = np.asarray(z_t)
    t = _check_t(schedule, t)
    ab = schedule.alphas_bar[t]
    return (z_t - _coef(np.sqrt(1.0 - ab), z_t) * eps_pred) / _coef(np.sqrt(ab), z_t)


def ddim_step(schedule: NoiseSchedule, z_t: np.ndarray, eps_pred: np.ndarray, t: int, t_prev: int) -> np.ndarray:
    """One eta=0 DDIM update from ``t`` to ``t_prev`` (``t_prev == 0`` lands on z0)."""
    if not 0 <= t_prev < t:
        raise ScheduleError(f"ddim_step needs 0 <= t_prev < t, got t={t}, t_prev={t_prev}")
    z0 = predict_z0(schedule, z_t, eps_pred, t)
    if t_prev == 0:
        return z0
    ab_prev = schedule.alphas_bar[t_prev]
    return np.sqrt(ab_prev).astype(z0.dtype) * z0 + np.sqrt(1.0 - ab_prev).astype(z0.dtype) * np.asarray(
        eps_pred, dtype=z0.dtype
    )


def make_plan(T: int, S: int) -> list[int]:
    """Decreasing DDIM timesteps ``T, T-k, ..., T-(S-1)k`` with ``k = T // S``.

    The sampler always finishes with an implicit hop to 0.
    """
    if not 1 <= S <= T:
        raise ScheduleError(f"DDIM steps S={S} must satisfy 1 <= S <= T={T}")
    k = T // S
    return [T - i * k for i in range(S)]
