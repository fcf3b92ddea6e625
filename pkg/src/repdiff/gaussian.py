"""Closed forms for equal-variance Gaussian kernels, von Mises-Fisher latents
and the three terms of the TV sampling bound."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .schedules import NoiseSchedule


@dataclass(frozen=True)
class GaussianKernel:
    """Isotropic Gaussian ``N(mean, variance * I)``.

    A zero variance is accepted so the first reverse step (a point mass on the
    clean sample) is representable; ``logpdf`` refuses it.
    """

    mean: np.ndarray
    variance: float

    def __post_init__(self):
        m = np.asarray(self.mean, dtype=np.float64)
        if not np.all(np.isfinite(m)):
            raise ValueError("kernel mean must be finite")
        if not (self.variance >= 0.0 and math.isfinite(self.variance)):
            raise ValueError(f"kernel variance must be finite and >= 0, got {self.variance!r}")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", float(self.variance))

    @property
    def dim(self) -> int:
        return self.mean.size

    def logpdf(self, x) -> np.ndarray:
        if self.variance == 0.0:
            raise ValueError("logpdf undefined for a zero-variance kernel")
        x = np.asarray(x, dtype=np.float64)
        sq = np.sum((x - self.mean) ** 2, axis=-1)
        return -0.5 * sq / self.variance - 0.5 * self.dim * math.log(2 * math.pi * self.variance)


def forward_posterior(ns: NoiseSchedule, t: int, x0, xt) -> GaussianKernel:
    """q(x_{t-1} | x_t, x_0) for the variance-preserving forward chain."""
    if not 1 <= t <= ns.T:
        raise ValueError(f"t must lie in [1, {ns.T}], got {t}")
    beta = float(ns.beta[t - 1])
    abar = float(ns.alpha_bar[t - 1])
    abar_prev = ns.alpha_bar_prev(t)
    c0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = math.sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar)
    mean = c0 * np.asarray(x0, dtype=np.float64) + ct * np.asarray(xt, dtype=np.float64)
    return GaussianKernel(mean, beta * (1.0 - abar_prev) / (1.0 - abar))


def neg_log_Z_gaussian(A: float, sigma2: float, mu_c, mu_u) -> float:
    """-log of the normalizer of N(mu_c, s2)^A N(mu_u, s2)^(1-A)."""
    if not 0.0 <= A <= 1.0:
        raise ValueError(f"A must lie in [0, 1], got {A}")
    if sigma2 <= 0.0:
        raise ValueError("sigma2 must be positive")
    diff = np.asarray(mu_c, dtype=np.float64) - np.asarray(mu_u, dtype=np.float64)
    return A * (1.0 - A) * float(diff @ diff) / (2.0 * sigma2)


def hybrid_gaussian(A: float, k_c: GaussianKernel, k_u: GaussianKernel) -> GaussianKernel:
    if not 0.0 <= A <= 1.0:
        raise ValueError(f"A must lie in [0, 1], got {A}")
    if abs(k_c.variance - k_u.variance) > 1e-12:
        raise ValueError(
            f"geometric mixture needs equal variances, got {k_c.variance} and {k_u.variance}"
        )
    return GaussianKernel(A * k_c.mean + (1.0 - A) * k_u.mean, k_c.variance)


# ---------------------------------------------------------------------------
# Score interpolation on a jointly Gaussian toy model


def _condition(mean, cov, keep, given, value):
    """Mean and covariance of the ``keep`` block given the ``given`` block."""
    s_kg = cov[np.ix_(keep, given)]
    s_gg = cov[np.ix_(given, given)]
    gain = np.linalg.solve(s_gg, s_kg.T).T
    m = mean[keep] + gain @ (value - mean[given])
    c = cov[np.ix_(keep, keep)] - gain @ s_kg.T
    return m, 0.5 * (c + c.T)


def _gauss_logpdf(x, mean, cov):
    d = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    return -0.5 * (d @ np.linalg.solve(cov, d) + logdet + len(x) * math.log(2 * math.pi))


@dataclass
class LinearGaussianInstance:
    """x0 ~ N(m0, S0); x_{t-1} = sqrt(abar_prev) x0 + noise; x_t = sqrt(1-beta) x_{t-1} + noise;
    z = C x0 + c + noise.  Blocks of the joint are ordered (x0, x_{t-1}, x_t, z)."""

    m0: np.ndarray
    S0: np.ndarray
    abar_prev: float
    beta: float
    C: np.ndarray
    c: np.ndarray
    R: np.ndarray
    mean: np.ndarray = field(init=False)
    cov: np.ndarray = field(init=False)

    def __post_init__(self):
        d = len(self.m0)
        dz = len(self.c)
        I = np.eye(d)
        a1 = math.sqrt(self.abar_prev)
        a2 = math.sqrt(1.0 - self.beta)
        # every block is affine in (x0, e1, e2, e3) with independent Gaussian noises
        n = 3 * d + dz
        W = np.zeros((n, d))
        W[:d] = I
        W[d : 2 * d] = a1 * I
        W[2 * d : 3 * d] = a2 * a1 * I
        W[3 * d :] = self.C
        noise = np.zeros((n, n))
        v1 = (1.0 - self.abar_prev) * I
        noise[d : 2 * d, d : 2 * d] = v1
        noise[2 * d : 3 * d, 2 * d : 3 * d] = (a2**2) * v1 + self.beta * I
        noise[d : 2 * d, 2 * d : 3 * d] = a2 * v1
        noise[2 * d : 3 * d, d : 2 * d] = a2 * v1
        noise[3 * d :, 3 * d :] = self.R
        self.mean = W @ self.m0
        self.mean[3 * d :] += self.c
        self.cov = W @ self.S0 @ W.T + noise
        self.idx = {
            "x0": np.arange(0, d),
            "prev": np.arange(d, 2 * d),
            "xt": np.arange(2 * d, 3 * d),
            "z": np.arange(3 * d, 3 * d + dz),
        }

    @property
    def dim(self) -> int:
        return len(self.m0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.multivariate_normal(self.mean, self.cov, size=n, method="cholesky")

    def marginal_prev(self):
        i = self.idx["prev"]
        return self.mean[i], self.cov[np.ix_(i, i)]

    def prev_given_z(self, z):
        return _condition(self.mean, self.cov, self.idx["prev"], self.idx["z"], z)

    def reverse_uncond(self, xt):
        return _condition(self.mean, self.cov, self.idx["prev"], self.idx["xt"], xt)

    def reverse_cond(self, xt, z):
        given = np.concatenate([self.idx["xt"], self.idx["z"]])
        return _condition(self.mean, self.cov, self.idx["prev"], given, np.concatenate([xt, z]))

    def forward_logpdf(self, xt, prev):
        m = math.sqrt(1.0 - self.beta) * prev
        return _gauss_logpdf(xt, m, self.beta * np.eye(self.dim))


def random_linear_gaussian(rng: np.random.Generator, dim: int = 2, dz: int = 2) -> LinearGaussianInstance:
    L = rng.normal(size=(dim, dim))
    S0 = L @ L.T + 0.3 * np.eye(dim)
    Lr = rng.normal(size=(dz, dz)) * 0.5
    R = Lr @ Lr.T + 0.2 * np.eye(dz)
    return LinearGaussianInstance(
        m0=rng.normal(size=dim),
        S0=S0,
        abar_prev=float(rng.uniform(0.2, 0.95)),
        beta=float(rng.uniform(0.01, 0.3)),
        C=rng.normal(size=(dz, dim)),
        c=rng.normal(size=dz),
        R=R,
    )


def _fd_grad(f, x, step=1e-5):
    g = np.empty_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def verify_hybrid_score(
    inst: LinearGaussianInstance,
    A: float,
    n_points: int = 100,
    seed: int = 0,
    method: str = "closed",
) -> float:
    """Max |LHS - RHS| of the score interpolation identity over sampled points.

    The left side differentiates the geometric mixture of the exact reverse
    kernels p(x_{t-1}|x_t,z) and p(x_{t-1}|x_t), then removes the forward score.
    The right side mixes the marginal scores of p(x_{t-1}|z) and p(x_{t-1}).
    ``method="fd"`` differentiates log densities by central differences instead.
    """
    if not isinstance(inst, LinearGaussianInstance):
        raise TypeError("verify_hybrid_score needs a LinearGaussianInstance")
    if not 0.0 <= A <= 1.0:
        raise ValueError(f"A must lie in [0, 1], got {A}")
    if method not in ("closed", "fd"):
        raise ValueError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    pts = inst.sample(n_points, rng)
    mu_m, cov_m = inst.marginal_prev()
    a2 = math.sqrt(1.0 - inst.beta)
    worst = 0.0
    for row in pts:
        prev, xt, z = row[inst.idx["prev"]], row[inst.idx["xt"]], row[inst.idx["z"]]
        mc, Sc = inst.reverse_cond(xt, z)
        mu, Su = inst.reverse_uncond(xt)
        mz, Sz = inst.prev_given_z(z)
        if method == "closed":
            mixed = -(A * np.linalg.solve(Sc, prev - mc) + (1 - A) * np.linalg.solve(Su, prev - mu))
            fwd = a2 * (xt - a2 * prev) / inst.beta
            lhs = mixed - fwd
            rhs = -(A * np.linalg.solve(Sz, prev - mz) + (1 - A) * np.linalg.solve(cov_m, prev - mu_m))
        else:
            def log_kernel(x):
                return A * _gauss_logpdf(x, mc, Sc) + (1 - A) * _gauss_logpdf(x, mu, Su) - inst.forward_logpdf(xt, x)

            def log_mix(x):
                return A * _gauss_logpdf(x, mz, Sz) + (1 - A) * _gauss_logpdf(x, mu_m, cov_m)

            lhs = _fd_grad(log_kernel, prev)
            rhs = _fd_grad(log_mix, prev)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


# ---------------------------------------------------------------------------
# von Mises-Fisher


def bessel_ratio(p: int, kappa: float, tol: float = 1e-15, max_iter: int = 1_000_000) -> float:
    """A_p(kappa) = I_{p/2}(kappa) / I_{p/2-1}(kappa) without evaluating either Bessel function.

    Uses the continued fraction implied by the recurrence
    I_{v-1} - I_{v+1} = (2v / x) I_v, evaluated with the modified Lentz method.
    The iteration count grows roughly linearly in kappa.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    if p < 2:
        raise ValueError(f"dimension p must be >= 2, got {p}")
    if kappa == 0.0:
        return 0.0
    v = p / 2.0
    x2 = kappa * kappa
    f = 2.0 * v
    C, D = f, 0.0
    for k in range(1, max_iter):
        b = 2.0 * (v + k)
        D = 1.0 / (b + x2 * D)
        C = b + x2 / C
        delta = C * D
        f *= delta
        if abs(delta - 1.0) < tol:
            return kappa / f
    raise ArithmeticError(f"bessel ratio did not converge for p={p}, kappa={kappa}")


@dataclass(frozen=True)
class VmfPair:
    mu_z: np.ndarray
    mu_hat: np.ndarray
    kappa: float
    p: int = field(init=False)

    def __post_init__(self):
        a = np.asarray(self.mu_z, dtype=np.float64)
        b = np.asarray(self.mu_hat, dtype=np.float64)
        if a.shape != b.shape or a.ndim != 1:
            raise ValueError("mean directions must be vectors of equal length")
        if len(a) < 2:
            raise ValueError("vMF needs ambient dimension >= 2")
        for name, v in (("mu_z", a), ("mu_hat", b)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-10:
                raise ValueError(f"{name} must be a unit vector")
        if self.kappa < 0:
            raise ValueError(f"kappa must be >= 0, got {self.kappa}")
        object.__setattr__(self, "mu_z", a)
        object.__setattr__(self, "mu_hat", b)
        object.__setattr__(self, "p", len(a))


def vmf_kl(pair: VmfPair) -> float:
    """KL(vMF(mu_z, kappa) || vMF(mu_hat, kappa))."""
    if pair.kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {pair.kappa}")
    cos = min(1.0, float(pair.mu_z @ pair.mu_hat))
    return pair.kappa * bessel_ratio(pair.p, pair.kappa) * (1.0 - cos)


# ---------------------------------------------------------------------------
# TV sampling bound


@dataclass(frozen=True)
class TvBoundInputs:
    kl_to_gauss: float
    L: float
    d: int
    m: float
    h: float
    T_time: float
    eps: tuple = ()

    def __post_init__(self):
        eps = tuple(float(e) for e in self.eps)
        object.__setattr__(self, "eps", eps)
        for name in ("kl_to_gauss", "L", "d", "m", "h", "T_time"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if any(e < 0 for e in eps):
            raise ValueError("score errors must be nonnegative")
        if self.h <= 0 or self.L <= 0:
            raise ValueError("h and L must be positive")
        if self.h > 1.0 / self.L * (1 + 1e-12):
            raise ValueError(f"step size assumption h <= 1/L violated: h={self.h}, 1/L={1.0 / self.L}")
        if eps:
            n = self.T_time / self.h
            if abs(n - round(n)) > 1e-9 * max(1.0, n) or len(eps) != round(n):
                raise ValueError(f"expected T/h = {n:g} score errors, got {len(eps)}")

    @property
    def n_steps(self) -> int:
        return int(round(self.T_time / self.h))


def tv_bound_terms(b: TvBoundInputs) -> tuple[float, float, float]:
    """(forward convergence, discretization, score error) terms; constants are not included."""
    conv = math.sqrt(b.kl_to_gauss) * math.exp(-b.T_time)
    disc = (b.L * math.sqrt(b.d * b.h) + b.L * b.m * b.h) * math.sqrt(b.T_time)
    score = math.fsum(b.eps) * math.sqrt(b.h)
    return conv, disc, score
