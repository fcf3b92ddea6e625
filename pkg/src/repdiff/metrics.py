"""Sample-quality and alignment metrics for the toy experiments."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .diffusion import forward_sample, pool


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


def _w2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between two 1D empirical measures."""
    a, b = np.sort(a), np.sort(b)
    n, m = len(a), len(b)
    if n == m:
        return math.sqrt(float(np.mean((a - b) ** 2)))
    # integrate the squared quantile gap over the merged breakpoints of both step functions
    cuts = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    widths = np.diff(np.concatenate([[0.0], cuts]))
    mids = cuts - widths / 2
    qa = a[np.minimum((mids * n).astype(np.int64), n - 1)]
    qb = b[np.minimum((mids * m).astype(np.int64), m - 1)]
    return math.sqrt(float(np.sum(widths * (qa - qb) ** 2)))


def random_directions(dim: int, count: int, seed: int) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal((count, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def sliced_wasserstein(a, b, projections: int = 512, seed: int = 0) -> float:
    """Mean over random unit directions of the 1D W2 distance between projections."""
    a, b = _as_2d(a), _as_2d(b)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("sliced_wasserstein needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    dirs = random_directions(a.shape[1], projections, seed)
    pa, pb = a @ dirs.T, b @ dirs.T
    if len(a) == len(b):
        gap = np.sort(pa, axis=0) - np.sort(pb, axis=0)
        per = np.sqrt(np.mean(gap**2, axis=0))
    else:
        per = np.array([_w2_1d(pa[:, k], pb[:, k]) for k in range(projections)])
    return float(np.mean(per))


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for i in range(0, len(a), chunk):
        blk = a[i : i + chunk]
        d = np.sqrt(np.maximum(((blk[:, None, :] - b[None]) ** 2).sum(-1), 0.0))
        total += float(d.sum())
    return total / (len(a) * len(b))


def energy_distance(a, b) -> float:
    """V-statistic energy distance 2E|X-Y| - E|X-X'| - E|Y-Y'| (nonnegative)."""
    a, b = _as_2d(a), _as_2d(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    v = 2 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(v, 0.0)


def class_coverage(samples, means: np.ndarray, radius: float) -> np.ndarray:
    """Per-component share of samples landing within ``radius`` of that component,
    relative to an even split (1.0 everywhere for a perfectly balanced sampler)."""
    x = _as_2d(samples)
    d2 = ((x[:, None, :] - means[None]) ** 2).sum(-1)
    nearest = np.argmin(d2, axis=1)
    inside = d2[np.arange(len(x)), nearest] <= radius**2
    counts = np.bincount(nearest[inside], minlength=len(means))
    return counts / (len(x) / len(means))


def tv_histogram(samples, cdf, bins: int = 100, lo: float | None = None, hi: float | None = None) -> float:
    """Half the L1 gap between empirical and reference bin masses.

    ``bins`` equal-width bins cover [lo, hi]; two extra bins catch both tails,
    so masses on each side sum to one.
    """
    x = np.asarray(samples, dtype=np.float64).ravel()
    lo = float(np.min(x)) if lo is None else lo
    hi = float(np.max(x)) if hi is None else hi
    if not hi > lo:
        raise ValueError("histogram range is empty")
    edges = np.linspace(lo, hi, bins + 1)
    counts = np.histogram(x, bins=edges)[0].astype(np.float64)
    emp = np.concatenate([[np.sum(x < lo)], counts, [np.sum(x > hi)]]) / len(x)
    c = np.asarray(cdf(edges), dtype=np.float64)
    ref = np.concatenate([[c[0]], np.diff(c), [1.0 - c[-1]]])
    return 0.5 * float(np.sum(np.abs(emp - ref)))


def tv_noise_band(n: int, bins: int) -> float:
    """Scale of the histogram TV estimate for n exact samples: 0.5 * sqrt((bins + 2) / n)."""
    return 0.5 * math.sqrt((bins + 2) / n)


def alignment_cosine(d, head, layer: int, x0, z, ns, t: int, seed: int, latent=None) -> float:
    """Mean cosine between ``head`` applied to hidden layer ``layer`` at step ``t`` and the clean latent."""
    x0 = _as_2d(x0)
    noise = np.random.default_rng(seed).standard_normal(x0.shape)
    tt = np.full(len(x0), t)
    with ad.no_grad():
        xt = forward_sample(ns, x0, tt, noise)
        _, hidden = d.forward(xt, tt, latent)
        pred = head(pool(hidden[layer - 1])).data
    return float(np.mean(np.sum(pred * np.asarray(z), axis=1)))


@dataclass
class MetricReport:
    sliced_wasserstein: float = float("nan")
    energy_distance: float = float("nan")
    coverage: list = field(default_factory=list)
    alignment_cosine: float = float("nan")
    tv: float = float("nan")

    def __post_init__(self):
        for k in ("sliced_wasserstein", "energy_distance", "tv"):
            v = getattr(self, k)
            if v == v and v < 0:
                raise ValueError(f"{k} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)
