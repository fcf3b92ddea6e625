"""Frozen toy encoders, the synthetic second modality, and multi-level latent bundles.

Every encoder output lies on the unit sphere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ENCODER_KINDS = ("class-prototype", "random-feature")


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0.0):
        raise ValueError("encoder produced a zero vector; cannot normalize")
    return v / n


@dataclass(frozen=True)
class Encoder:
    """Fixed, seeded map into the unit sphere.

    ``class-prototype`` snaps an input to its nearest prototype and returns that
    prototype's embedding.  ``random-feature`` returns normalize(W tanh(V x)).
    """

    kind: str
    out_dim: int
    in_dim: int
    seed: int
    prototypes: np.ndarray | None = None
    hidden: int = 32
    input_scale: float = 1.5

    def __post_init__(self):
        if self.kind not in ENCODER_KINDS:
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.out_dim < 1 or self.in_dim < 1:
            raise ValueError("encoder dimensions must be positive")
        rng = np.random.default_rng(self.seed)
        if self.kind == "class-prototype":
            if self.prototypes is None:
                raise ValueError("class-prototype encoder needs prototypes")
            protos = np.asarray(self.prototypes, dtype=np.float64)
            if protos.ndim != 2 or protos.shape[1] != self.in_dim:
                raise ValueError("prototype array must be (K, in_dim)")
            object.__setattr__(self, "prototypes", protos)
            emb = rng.standard_normal((len(protos), self.out_dim))
            object.__setattr__(self, "_table", _normalize_rows(emb))
        else:
            V = rng.standard_normal((self.hidden, self.in_dim)) * self.input_scale
            W = rng.standard_normal((self.out_dim, self.hidden)) / np.sqrt(self.hidden)
            object.__setattr__(self, "_V", V)
            object.__setattr__(self, "_W", W)

    def __call__(self, x0) -> np.ndarray:
        return encode(self, x0)


def encode(e: Encoder, x0) -> np.ndarray:
    """Encode one vector or a batch of row vectors."""
    x = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != e.in_dim:
        raise ValueError(f"encoder expects inputs of dim {e.in_dim}, got {x.shape[1]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("encoder input must be finite")
    if e.kind == "class-prototype":
        d = ((x[:, None, :] - e.prototypes[None]) ** 2).sum(-1)
        out = e._table[np.argmin(d, axis=1)]
    else:
        out = _normalize_rows(np.tanh(x @ e._V.T) @ e._W.T)
    return out[0] if single else out


@dataclass(frozen=True)
class SyntheticModality:
    """y = tanh(M x + b) + noise_std * xi, encoded by a random-feature encoder on y-space.

    ``transform="identity"`` replaces the affine-tanh map with y = x.
    """

    in_dim: int
    y_dim: int
    noise_std: float
    encoder: Encoder
    seed: int
    transform: str = "affine-tanh"

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.transform not in ("affine-tanh", "identity"):
            raise ValueError(f"unknown modality transform {self.transform!r}")
        if self.transform == "identity" and self.y_dim != self.in_dim:
            raise ValueError("identity transform needs y_dim == in_dim")
        if self.encoder.in_dim != self.y_dim:
            raise ValueError("modality encoder must read y-space vectors")
        rng = np.random.default_rng(self.seed)
        object.__setattr__(self, "_M", rng.standard_normal((self.y_dim, self.in_dim)) * 1.5)
        object.__setattr__(self, "_b", rng.standard_normal(self.y_dim) * 0.5)

    def transform_clean(self, x: np.ndarray) -> np.ndarray:
        if self.transform == "identity":
            return x.copy()
        return np.tanh(x @ self._M.T + self._b)


def synth_modality(s: SyntheticModality, x0, seed: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x0, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    y = s.transform_clean(x)
    if s.noise_std > 0:
        y = y + s.noise_std * np.random.default_rng(seed).standard_normal(y.shape)
    zy = encode(s.encoder, y)
    return (y[0], zy[0]) if single else (y, zy)


@dataclass(frozen=True)
class LevelSpec:
    """One representation level: where its latent comes from and which layer aligns to it."""

    tag: str
    layer: int
    encoder: Encoder | None = None
    modality: SyntheticModality | None = None

    def __post_init__(self):
        if (self.encoder is None) == (self.modality is None):
            raise ValueError(f"level {self.tag!r} needs exactly one of encoder / modality")

    @property
    def out_dim(self) -> int:
        return (self.encoder or self.modality.encoder).out_dim


@dataclass(frozen=True)
class LatentBundle:
    """Ordered latents (one row per sample) and the denoiser layer each aligns to."""

    latents: tuple[tuple[str, np.ndarray], ...]
    align_layers: dict

    @property
    def L(self) -> int:
        return len(self.latents)

    def __getitem__(self, tag: str) -> np.ndarray:
        for k, v in self.latents:
            if k == tag:
                return v
        raise KeyError(tag)

    @property
    def tags(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.latents)


def check_levels(levels, depth: int) -> None:
    tags = [lv.tag for lv in levels]
    if len(set(tags)) != len(tags):
        raise ValueError(f"duplicate level tags: {tags}")
    layers = [lv.layer for lv in levels]
    if len(set(layers)) != len(layers):
        raise ValueError(f"duplicate alignment layer assignment: {layers}")
    for lv in levels:
        if not 1 <= lv.layer <= depth:
            raise ValueError(f"level {lv.tag!r}: layer {lv.layer} outside 1..{depth}")


def make_bundle(x0: np.ndarray, levels, depth: int, seed: int = 0) -> LatentBundle:
    """Encode a batch at every level.  ``seed`` drives the modality noise."""
    check_levels(levels, depth)
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    out = []
    for i, lv in enumerate(levels):
        if lv.encoder is not None:
            z = encode(lv.encoder, x0)
        else:
            _, z = synth_modality(lv.modality, x0, seed=seed * 7919 + i)
        out.append((lv.tag, z))
    return LatentBundle(tuple(out), {lv.tag: lv.layer for lv in levels})
