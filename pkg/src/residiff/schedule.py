"""Diffusion variance schedule and its derived coefficients.

Timestep indexing is 1-based: t runs over 1..T, and t = 0 denotes the
clean signal.  Internally the arrays are 0-indexed, so ``betas[t - 1]``
is the variance added at step t.  All quantities are stored as float64
so that cumulative products stay accurate over long schedules.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and everything derived from them.

    Immutable after construction; safe to share across threads.
    """

    T: int
    betas: np.ndarray                # beta_t,      t = 1..T
    alphas: np.ndarray               # 1 - beta_t
    alpha_bars: np.ndarray           # prod_{s<=t} alpha_s, with abar_0 = 1 implied
    posterior_variances: np.ndarray  # (1 - abar_{t-1}) / (1 - abar_t) * beta_t

    @property
    def beta_start(self) -> float:
        return float(self.betas[0])

    @property
    def beta_end(self) -> float:
        return float(self.betas[-1])

    def to_params(self) -> dict:
        """Compact serializable form; derived arrays are always recomputed."""
        return {
            "kind": "linear",
            "T": self.T,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
        }


def schedule_from_params(params: dict) -> NoiseSchedule:
    if params.get("kind") != "linear":
        raise ValueError(f"unsupported schedule kind: {params.get('kind')!r}")
    return linear_schedule(int(params["T"]), float(params["beta_start"]), float(params["beta_end"]))


def linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Equally spaced variances from beta_start to beta_end over T steps.

    For T = 1 the single entry is beta_start.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start < 1.0) or not (0.0 < beta_end < 1.0):
        raise ValueError(f"beta bounds must lie in (0, 1), got ({beta_start}, {beta_end})")
    if beta_start > beta_end:
        raise ValueError(f"beta_start must not exceed beta_end, got ({beta_start}, {beta_end})")

    betas = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    abar_prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_variances = (1.0 - abar_prev) / (1.0 - alpha_bars) * betas

    for arr in (betas, alphas, alpha_bars, posterior_variances):
        arr.setflags(write=False)
    return NoiseSchedule(int(T), betas, alphas, alpha_bars, posterior_variances)


def alpha_bar_at(schedule: NoiseSchedule, t: int) -> float:
    """Cumulative signal coefficient at step t; 1.0 for t = 0 (empty product)."""
    if not 0 <= t <= schedule.T:
        raise ValueError(f"t must lie in [0, {schedule.T}], got {t}")
    if t == 0:
        return 1.0
    return float(schedule.alpha_bars[t - 1])


def posterior_variance_at(schedule: NoiseSchedule, t: int) -> float:
    """Reverse-transition variance at step t; zero at t = 1 by the abar_0 = 1 convention."""
    if not 1 <= t <= schedule.T:
        raise ValueError(f"t must lie in [1, {schedule.T}], got {t}")
    return float(schedule.posterior_variances[t - 1])
