"""Toy datasets: a labelled Gaussian mixture on a ring and a 1D Gaussian."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm


@dataclass(frozen=True)
class RingMixture:
    n_components: int = 8
    radius: float = 1.0
    std: float = 0.15

    @property
    def means(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.n_components) / self.n_components
        return self.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)

    def sample(self, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, self.n_components, size=n)
        x = self.means[labels] + self.std * rng.standard_normal((n, 2))
        return x, labels

    def nearest_component(self, x: np.ndarray) -> np.ndarray:
        d = ((x[:, None, :] - self.means[None]) ** 2).sum(-1)
        return np.argmin(d, axis=1)


@dataclass(frozen=True)
class Gaussian1D:
    mean: float = 2.0
    std: float = 0.5

    def sample(self, n: int, seed: int) -> np.ndarray:
        return np.random.default_rng(seed).normal(self.mean, self.std, size=n)

    def cdf(self, x):
        return norm.cdf(x, loc=self.mean, scale=self.std)

    def diffused(self, t: float) -> Gaussian1D:
        """Law of the Ornstein-Uhlenbeck forward process dX = -X dt + sqrt(2) dW at time t."""
        decay = math.exp(-t)
        var = self.std**2 * decay**2 + 1.0 - decay**2
        return Gaussian1D(self.mean * decay, math.sqrt(var))

    def score(self, x, t: float):
        g = self.diffused(t)
        return -(x - g.mean) / g.std**2

    def kl_to_standard(self) -> float:
        s2 = self.std**2
        return 0.5 * (s2 + self.mean**2 - 1.0 - math.log(s2))
