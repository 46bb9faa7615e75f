"""Closed-form diffusion maths: schedules, forward noising and deterministic DDIM.

Functions accept numpy arrays or torch tensors for images; schedule lookups
are plain Python floats so the arithmetic works on either.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """``betas[t]`` and ``alpha_bar[t]`` indexed by t = 0..T with ``alpha_bar[0] = 1``."""

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def ab(self, t: int) -> float:
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind", "linear") != "linear":
            raise ValueError(f"unsupported schedule kind {d['kind']!r}")
        return linear_beta_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_beta_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.zeros(T + 1, dtype=np.float64)
    betas[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(T, beta_start, beta_end, betas, alpha_bar)


def q_sample(x0, t: int, eps, s: NoiseSchedule):
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; t = 0 returns x0."""
    ab = s.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_pred, t: int, s: NoiseSchedule):
    ab = s.ab(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def _check_order(t: int, t_prev: int) -> None:
    if not t > t_prev >= 0:
        raise ValueError(f"need t > t_prev >= 0, got t={t}, t_prev={t_prev}")


def ddim_step(x_t, eps_pred, t: int, t_prev: int, s: NoiseSchedule):
    """One deterministic (eta = 0) denoising step from t down to t_prev."""
    _check_order(t, t_prev)
    x0 = predict_x0(x_t, eps_pred, t, s)
    ab_prev = s.ab(t_prev)
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_pred


def ddim_invert_step(x_tprev, eps_pred, t_prev: int, t: int, s: NoiseSchedule):
    """Inverse of :func:`ddim_step` for the same ``eps_pred``: moves t_prev up to t."""
    _check_order(t, t_prev)
    x0 = predict_x0(x_tprev, eps_pred, t_prev, s)
    ab = s.ab(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps_pred


def make_step_schedule(T: int, num_steps: int) -> list[int]:
    """Evenly spaced timesteps ``0 = t_0 < ... < t_num_steps = T``."""
    if not 1 <= num_steps <= T:
        raise ValueError(f"num_steps must be in [1, {T}], got {num_steps}")
    # floor(x + 0.5) rather than banker's rounding
    raw = [int(math.floor(i * T / num_steps + 0.5)) for i in range(num_steps + 1)]
    steps = sorted(set(raw))
    # spacing >= 1 means no duplicates arise, but keep the length contract regardless
    while len(steps) < num_steps + 1:
        gaps = [(steps[i + 1] - steps[i], i) for i in range(len(steps) - 1)]
        width, i = max(gaps)
        steps.insert(i + 1, steps[i] + width // 2)
    return steps
