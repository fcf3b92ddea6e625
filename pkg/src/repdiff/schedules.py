"""Noise schedules, timestep weight schedules and epoch curricula.

Timesteps are 1-based throughout: index ``t - 1`` of every array holds the
value for step ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    kind: str = "custom"

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    def alpha_bar_prev(self, t: int) -> float:
        """Cumulative product up to ``t - 1``, with the convention alpha_bar_0 = 1."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "beta": self.beta.tolist()}

    @classmethod
    def from_betas(cls, beta, kind: str = "custom") -> NoiseSchedule:
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 1:
            raise ValueError("noise schedule needs at least one step")
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ValueError("every beta_t must lie in (0, 1)")
        alpha_bar = np.cumprod(1.0 - beta)
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        # posterior variance beta_t (1 - abar_{t-1}) / (1 - abar_t); exactly 0 at t = 1
        var = beta * (1.0 - prev) / (1.0 - alpha_bar)
        return cls(beta=beta, alpha_bar=alpha_bar, sigma=np.sqrt(var), kind=kind)


def make_noise_schedule(
    kind: str = "linear", T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.02
) -> NoiseSchedule:
    """Build a linear or cosine variance schedule.

    The cosine schedule uses the squared-cosine cumulative profile with offset
    0.008 and clips the implied per-step variances into ``[beta_min, beta_max]``.
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        beta = np.linspace(beta_min, beta_max, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ValueError(f"unknown noise schedule kind {kind!r}")
    return NoiseSchedule.from_betas(beta, kind=kind)


@dataclass(frozen=True)
class WeightSchedule:
    alpha_w: np.ndarray
    A: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha_w)


def cumulative_weights(alpha_w) -> WeightSchedule:
    """Tail sums A_t = sum_{i >= t} alpha_i of a probability vector over timesteps."""
    w = np.asarray(alpha_w, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = math.fsum(w)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights must sum to one, got {total!r}")
    w = w / total
    A = np.array([math.fsum(w[i:]) for i in range(len(w))])
    A[0] = 1.0
    return WeightSchedule(alpha_w=w, A=A)


def rcg_weights(T: int) -> WeightSchedule:
    """All weight on step T, where generation starts, giving A_t = 1 everywhere.

    The latent is then drawn once from p(z | x_T) and conditions every reverse
    step, which is the decoupled two-stage sampler.
    """
    w = np.zeros(T)
    w[-1] = 1.0
    return cumulative_weights(w)


def uniform_weights(T: int) -> WeightSchedule:
    """Uniform weights; A_t = (T - t + 1) / T."""
    return cumulative_weights(np.full(T, 1.0 / T))


def make_weight_schedule(kind: str, T: int) -> WeightSchedule:
    if kind == "rcg":
        return rcg_weights(T)
    if kind == "uniform":
        return uniform_weights(T)
    raise ValueError(f"unknown weight schedule kind {kind!r}")


CURRICULUM_KINDS = ("constant", "linear-phase-in", "cosine-decay", "step-up", "step-down")


@dataclass(frozen=True)
class Curriculum:
    """Epoch-indexed loss weight.

    ``step-up`` is ``floor`` before ``warmup`` then ``peak``; ``step-down`` is the
    reverse.  Both exist for the sudden-switch two-stage ablation.
    """

    kind: str = "constant"
    warmup: int = 0
    peak: float = 1.0
    floor: float = 0.0
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in CURRICULUM_KINDS:
            raise ValueError(f"unknown curriculum kind {self.kind!r}")
        if self.floor > self.peak:
            raise ValueError("curriculum floor exceeds peak")


def curriculum_weight(c: Curriculum, n: int) -> float:
    if n < 0:
        raise ValueError("epoch must be >= 0")
    if c.kind == "constant":
        return c.peak
    if c.kind == "linear-phase-in":
        if c.warmup <= 0:
            return c.peak
        return c.peak * min(1.0, n / c.warmup)
    if c.kind == "cosine-decay":
        frac = min(1.0, n / c.horizon) if c.horizon > 0 else 1.0
        return c.floor + (c.peak - c.floor) * (1.0 + math.cos(math.pi * frac)) / 2.0
    if c.kind == "step-up":
        return c.peak if n >= c.warmup else c.floor
    return c.floor if n >= c.warmup else c.peak
