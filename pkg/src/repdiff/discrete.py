"""Exact finite-state oracles for the representation-augmented diffusion chain.

The data side is a chain ``x_0 -> x_1 -> ... -> x_T`` with ``z ~ q(z | x_0)``;
the model side runs ``x_T -> ... -> x_0 -> z``.  Everything here is computed by
brute-force tabulation, so identities can be checked to 64-bit rounding.

Joint tables use axes ``(x_0, ..., x_T, z)``.  Multiple latents are flattened
into the single last axis in C order; ``nz`` keeps the per-latent sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce

import numpy as np
from scipy.special import logsumexp

from .schedules import WeightSchedule

PROB_FLOOR = 1e-12
MAX_TABLE_ENTRIES = 10_000_000
_ROW_TOL = 1e-12


def _check_stochastic(m: np.ndarray, what: str) -> None:
    if np.any(m < 0) or not np.all(np.isfinite(m)):
        raise ValueError(f"{what}: entries must be finite and nonnegative")
    if np.max(np.abs(m.sum(axis=-1) - 1.0)) > _ROW_TOL:
        raise ValueError(f"{what}: rows must sum to 1")


def floor_and_normalize(m: np.ndarray, floor: float = PROB_FLOOR) -> np.ndarray:
    m = np.maximum(np.asarray(m, dtype=np.float64), floor)
    return m / m.sum(axis=-1, keepdims=True)


def _outer_rows(mats) -> np.ndarray:
    """Row-wise outer product of stochastic matrices, flattened over the column axes."""
    out = reduce(lambda a, b: (a[:, :, None] * b[:, None, :]).reshape(a.shape[0], -1), mats)
    return np.asarray(out)


@dataclass(frozen=True)
class DiscreteChainSpec:
    """Data distribution: initial law, forward kernels and latent encoders.

    ``forward_kernels[t-1][a, b] = q(x_t = b | x_{t-1} = a)`` and
    ``encoders[l][a, k] = q(z_l = k | x_0 = a)``.
    """

    q0: np.ndarray
    forward_kernels: tuple
    encoders: tuple

    def __post_init__(self):
        if abs(self.q0.sum() - 1.0) > _ROW_TOL or np.any(self.q0 < 0):
            raise ValueError("q0 must be a distribution")
        for i, k in enumerate(self.forward_kernels):
            _check_stochastic(k, f"forward kernel {i + 1}")
        for i, e in enumerate(self.encoders):
            _check_stochastic(e, f"encoder {i + 1}")
        if not self.encoders:
            raise ValueError("need at least one encoder")

    @property
    def T(self) -> int:
        return len(self.forward_kernels)

    @property
    def nx(self) -> int:
        return len(self.q0)

    @property
    def nz(self) -> tuple[int, ...]:
        return tuple(e.shape[1] for e in self.encoders)

    def encoder_joint(self) -> np.ndarray:
        """q(z^L | x_0) with latents flattened, shape (nx, prod(nz))."""
        return _outer_rows(self.encoders)

    def marginal_given_x0(self, t: int) -> np.ndarray:
        """q(x_t | x_0) as an (nx, nx) matrix; identity at t = 0."""
        m = np.eye(self.nx)
        for k in self.forward_kernels[:t]:
            m = m @ k
        return m

    def posterior(self, t: int) -> np.ndarray:
        """q(x_{t-1} | x_t, x_0) indexed ``[x_0, x_t, x_{t-1}]``, for t >= 2.

        Entries whose conditioning event has zero probability are set to 0.
        """
        if not 2 <= t <= self.T:
            raise ValueError(f"posterior defined for 2 <= t <= T, got {t}")
        prev = self.marginal_given_x0(t - 1)
        num = prev[:, None, :] * self.forward_kernels[t - 1].T[None, :, :]
        den = num.sum(axis=2, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(den > 0, num / den, 0.0)


@dataclass(frozen=True)
class DiscreteModel:
    """Reverse-chain model with strictly positive kernels.

    ``reverse_kernels[t-1][a, b] = p(x_{t-1} = b | x_t = a)``;
    ``latent_kernel[a, k] = p(z = k | x_0 = a)`` over the flattened latent.
    """

    prior: np.ndarray
    reverse_kernels: tuple
    latent_kernel: np.ndarray
    nz: tuple

    def __post_init__(self):
        mats = [self.prior[None, :], self.latent_kernel, *self.reverse_kernels]
        for i, m in enumerate(mats):
            _check_stochastic(m, f"model factor {i}")
            if np.any(m <= 0):
                raise ValueError("model factors must be strictly positive")
        if self.latent_kernel.shape[1] != int(np.prod(self.nz)):
            raise ValueError("latent kernel width does not match nz")

    @classmethod
    def create(cls, prior, reverse_kernels, latent_kernel, nz=None) -> DiscreteModel:
        """Apply the probability floor and renormalize every factor."""
        latent_kernel = floor_and_normalize(latent_kernel)
        nz = tuple(nz) if nz is not None else (latent_kernel.shape[1],)
        return cls(
            prior=floor_and_normalize(prior),
            reverse_kernels=tuple(floor_and_normalize(k) for k in reverse_kernels),
            latent_kernel=latent_kernel,
            nz=nz,
        )

    @property
    def T(self) -> int:
        return len(self.reverse_kernels)

    @property
    def nx(self) -> int:
        return len(self.prior)

    def x0_marginal(self) -> np.ndarray:
        p = self.prior
        for k in reversed(self.reverse_kernels):
            p = p @ k
        return p


@dataclass
class DiscreteJoint:
    table: np.ndarray
    nz: tuple

    @property
    def T(self) -> int:
        return self.table.ndim - 2

    def marginal(self, axes) -> np.ndarray:
        """Marginal over the listed axes (kept in ascending order)."""
        keep = sorted(a % self.table.ndim for a in axes)
        drop = tuple(a for a in range(self.table.ndim) if a not in keep)
        return self.table.sum(axis=drop)


def _expand(arr: np.ndarray, axes, ndim: int) -> np.ndarray:
    axes = list(axes)
    order = np.argsort(axes)
    arr = np.transpose(arr, order)
    shape = [1] * ndim
    for ax, n in zip(sorted(axes), arr.shape):
        shape[ax] = n
    return arr.reshape(shape)


def _check_size(T: int, nx: int, nz_total: int) -> None:
    entries = nx ** (T + 1) * nz_total
    if entries > MAX_TABLE_ENTRIES:
        raise ValueError(f"joint table would have {entries} entries (cap {MAX_TABLE_ENTRIES})")


def build_joint(obj) -> DiscreteJoint:
    """Tabulate the Markov factorization of a spec (data side) or model."""
    T, nx = obj.T, obj.nx
    ndim, zax = T + 2, T + 1
    if isinstance(obj, DiscreteChainSpec):
        enc = obj.encoder_joint()
        _check_size(T, nx, enc.shape[1])
        factors = [_expand(obj.q0, [0], ndim), _expand(enc, [0, zax], ndim)]
        factors += [_expand(k, [t - 1, t], ndim) for t, k in enumerate(obj.forward_kernels, 1)]
    elif isinstance(obj, DiscreteModel):
        _check_size(T, nx, obj.latent_kernel.shape[1])
        factors = [_expand(obj.prior, [T], ndim), _expand(obj.latent_kernel, [0, zax], ndim)]
        factors += [_expand(k, [t, t - 1], ndim) for t, k in enumerate(obj.reverse_kernels, 1)]
    else:
        raise TypeError(f"cannot build a joint from {type(obj).__name__}")
    return DiscreteJoint(reduce(np.multiply, factors), tuple(obj.nz))


@dataclass
class Conditionals:
    """Model conditionals derived from the joint by exact Bayes.

    ``z_given_x[t][x_t, z] = p(z | x_t)`` for t = 0..T and
    ``cond_reverse[t][x_t, z, x_{t-1}] = p(x_{t-1} | x_t, z)`` for t = 1..T
    (index 0 unused).
    """

    z_given_x: list
    cond_reverse: list = field(default_factory=list)

    def copy(self) -> Conditionals:
        return Conditionals(
            [a.copy() for a in self.z_given_x],
            [None if a is None else a.copy() for a in self.cond_reverse],
        )


def derive_conditionals(model: DiscreteModel, joint: DiscreteJoint | None = None) -> Conditionals:
    joint = joint or build_joint(model)
    T = model.T
    zax = T + 1
    z_given_x, cond = [], [None]
    for t in range(T + 1):
        m = joint.marginal([t, zax])
        z_given_x.append(m / m.sum(axis=1, keepdims=True))
    for t in range(1, T + 1):
        m = joint.marginal([t - 1, t, zax])  # [x_{t-1}, x_t, z]
        m = np.transpose(m, (1, 2, 0))
        cond.append(m / m.sum(axis=2, keepdims=True))
    return Conditionals(z_given_x, cond)


def decomposition_table(model: DiscreteModel, cond: Conditionals, t: int) -> np.ndarray:
    """p^t(x_{0:T}, z): z drawn given x_t, z-conditional kernels below t."""
    T = model.T
    ndim, zax = T + 2, T + 1
    factors = [_expand(model.prior, [T], ndim), _expand(cond.z_given_x[t], [t, zax], ndim)]
    for i in range(1, t + 1):
        factors.append(_expand(cond.cond_reverse[i], [i, zax, i - 1], ndim))
    for i in range(t + 1, T + 1):
        factors.append(_expand(model.reverse_kernels[i - 1], [i, i - 1], ndim))
    return reduce(np.multiply, factors)


def verify_decompositions(model: DiscreteModel, cond: Conditionals | None = None) -> float:
    """Max over t and state tuples of |p^t - p^0|."""
    cond = cond or derive_conditionals(model)
    base = decomposition_table(model, cond, 0)
    return max(
        float(np.max(np.abs(decomposition_table(model, cond, t) - base)))
        for t in range(1, model.T + 1)
    ) if model.T > 0 else 0.0


def resampled_x0_marginal(
    model: DiscreteModel, cond: Conditionals, resample_at, cond_steps=None
) -> np.ndarray:
    """x_0 marginal when z is (re)drawn from p(z | x_t) at each step in ``resample_at``.

    Walking down from x_T, kernels are unconditional until the first draw of z
    and conditional on the current z afterwards.  A redraw discards the old z.
    """
    resample_at = set(resample_at)
    p = model.prior.copy()  # over x_t, or (x_t, z) once z exists
    has_z = False
    for t in range(model.T, 0, -1):
        if t in resample_at:
            if has_z:
                p = p.sum(axis=1)
            p = p[:, None] * cond.z_given_x[t]
            has_z = True
        if has_z:
            p = np.einsum("az,azb->bz", p, cond.cond_reverse[t])
        else:
            p = p @ model.reverse_kernels[t - 1]
    return p.sum(axis=1) if has_z else p


def verify_marginal_invariance(model: DiscreteModel, cond: Conditionals | None = None) -> float:
    """Max discrepancy of every x_t marginal across decompositions and z-resampling schemes."""
    cond = cond or derive_conditionals(model)
    T = model.T
    tables = [decomposition_table(model, cond, s) for s in range(T + 1)]
    worst = 0.0
    for t in range(T + 1):
        drop = tuple(a for a in range(T + 2) if a != t)
        ref = tables[0].sum(axis=drop)
        for tab in tables[1:]:
            worst = max(worst, float(np.max(np.abs(tab.sum(axis=drop) - ref))))
    ref0 = model.x0_marginal()
    schemes = [[t] for t in range(1, T + 1)] + [list(range(1, T + 1))]
    for scheme in schemes:
        got = resampled_x0_marginal(model, cond, scheme)
        worst = max(worst, float(np.max(np.abs(got - ref0))))
    return worst


# -- variational bound ------------------------------------------------------------
def _wlog_sum(w: np.ndarray, logv: np.ndarray) -> float:
    """sum(w * logv) over entries with w > 0; raises if logv is -inf there."""
    mask = w > 0
    vals = np.broadcast_to(logv, w.shape)[mask]
    if not np.all(np.isfinite(vals)):
        raise FloatingPointError("zero probability on the support of q")
    return float(np.sum(w[mask] * vals))


def _log(a: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.log(a)


def _check_pair(spec: DiscreteChainSpec, model: DiscreteModel) -> None:
    if spec.T != model.T or spec.nx != model.nx or tuple(spec.nz) != tuple(model.nz):
        raise ValueError("spec and model dimensions differ")


def vb_direct(spec: DiscreteChainSpec, model: DiscreteModel) -> float:
    """The latent-augmented variational bound by summation over the full joint."""
    _check_pair(spec, model)
    T, ndim, zax = spec.T, spec.T + 2, spec.T + 1
    Q = build_joint(spec).table
    P = build_joint(model).table
    if np.any(P[Q > 0] == 0):
        raise FloatingPointError("model assigns zero probability on the support of q")
    factors = [
        _expand(spec.encoder_joint(), [0, zax], ndim),
        _expand(spec.marginal_given_x0(T), [0, T], ndim),
    ]
    for t in range(2, T + 1):
        factors.append(_expand(spec.posterior(t), [0, t, t - 1], ndim))
    num = reduce(np.multiply, factors, np.ones([1] * ndim))
    return _wlog_sum(Q, _log(num) - _log(P))


def model_nll(spec: DiscreteChainSpec, model: DiscreteModel) -> float:
    """-E_q log p(x_0)."""
    return -_wlog_sum(spec.q0, _log(model.x0_marginal()))


def bayes_inverse_model(spec: DiscreteChainSpec, latent_kernel=None) -> DiscreteModel:
    """Model whose x-chain is the exact time reversal of the data-side forward chain."""
    marg = [spec.q0]
    for k in spec.forward_kernels:
        marg.append(marg[-1] @ k)
    rev = []
    for t, k in enumerate(spec.forward_kernels, 1):
        joint = marg[t - 1][:, None] * k  # [x_{t-1}, x_t]
        col = joint.sum(axis=0)
        with np.errstate(invalid="ignore", divide="ignore"):
            r = np.where(col[:, None] > 0, joint.T / col[:, None], 1.0 / spec.nx)
        rev.append(r)
    lk = spec.encoder_joint() if latent_kernel is None else latent_kernel
    return DiscreteModel.create(marg[-1], rev, lk, spec.nz)


@dataclass
class BoundTerms:
    denoising: float
    lognorm: float
    representation: float
    prior: float
    per_step: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        return self.denoising + self.lognorm + self.representation + self.prior


def _step_tables(spec, model, cond, t, A_t):
    """Shared per-step quantities for the weighted decomposition at step t."""
    enc = spec.encoder_joint()
    qm = spec.marginal_given_x0(t - 1)
    K = spec.forward_kernels[t - 1]
    # Q4[x0, x_{t-1}, x_t, z]
    Q4 = (spec.q0[:, None, None, None] * qm[:, :, None, None]
          * K[None, :, :, None] * enc[:, None, None, :])
    log_pc = np.log(cond.cond_reverse[t])  # [x_t, z, x_{t-1}]
    log_pu = np.log(model.reverse_kernels[t - 1])[:, None, :]  # [x_t, 1, x_{t-1}]
    if A_t in (0.0, 1.0):
        # geometric mixture degenerates to a normalized kernel: Z = 1 exactly
        log_mix = log_pc if A_t == 1.0 else np.broadcast_to(log_pu, log_pc.shape)
        log_Z = np.zeros(log_pc.shape[:2])
    else:
        log_mix = A_t * log_pc + (1.0 - A_t) * log_pu
        log_Z = logsumexp(log_mix, axis=2)
    log_hybrid = log_mix - log_Z[:, :, None]
    return Q4, log_pc, log_pu, log_Z, log_hybrid


def vb_decomposed(spec: DiscreteChainSpec, model: DiscreteModel, w: WeightSchedule,
             cond: Conditionals | None = None) -> BoundTerms:
    """Hybrid-kernel decomposition of the bound: denoising, log-normalization,
    weighted representation KL and the prior mismatch term."""
    _check_pair(spec, model)
    if w.T != spec.T:
        raise ValueError("weight schedule length differs from T")
    cond = cond or derive_conditionals(model)
    enc = spec.encoder_joint()
    den = lnz = rep = 0.0
    per_step = {"denoising": [], "lognorm": [], "representation": []}
    for t in range(1, spec.T + 1):
        A_t = float(w.A[t - 1])
        Q4, _, _, log_Z, log_hyb = _step_tables(spec, model, cond, t, A_t)
        log_post = (np.zeros((1, 1, 1, 1)) if t == 1
                    else np.transpose(_log(spec.posterior(t)), (0, 2, 1))[:, :, :, None])
        # log_hyb is [x_t, z, x_{t-1}] -> [1, x_{t-1}, x_t, z]
        d_t = _wlog_sum(Q4, log_post - np.transpose(log_hyb, (2, 0, 1))[None])
        Qtz = Q4.sum(axis=(0, 1))
        l_t = -float(np.sum(Qtz * log_Z))
        Q0tz = Q4.sum(axis=1)  # [x0, x_t, z]
        kl = _wlog_sum(Q0tz, _log(enc)[:, None, :] - np.log(cond.z_given_x[t])[None])
        r_t = float(w.alpha_w[t - 1]) * kl
        per_step["denoising"].append(d_t)
        per_step["lognorm"].append(l_t)
        per_step["representation"].append(r_t)
        den += d_t
        lnz += l_t
        rep += r_t
    qT = spec.marginal_given_x0(spec.T)
    prior = _wlog_sum(spec.q0[:, None] * qT, _log(qT) - np.log(model.prior)[None, :])
    return BoundTerms(den, lnz, rep, prior, per_step)


@dataclass
class LognormBounds:
    lognorm: float
    upper_uc: float  # sum E A_t KL(p_u || p_c)
    upper_cu: float  # sum E (1 - A_t) KL(p_c || p_u)
    per_step_lognorm: list
    tol: float = 1e-13

    @property
    def upper(self) -> float:
        return min(self.upper_uc, self.upper_cu)

    @property
    def slack_low(self) -> float:
        return self.lognorm

    @property
    def slack_high(self) -> float:
        return self.upper - self.lognorm

    @property
    def holds(self) -> bool:
        termwise = all(v >= -self.tol for v in self.per_step_lognorm)
        return termwise and self.slack_low >= -self.tol and self.slack_high >= -self.tol


def verify_lognorm_bounds(spec: DiscreteChainSpec, model: DiscreteModel, w: WeightSchedule,
                          cond: Conditionals | None = None) -> LognormBounds:
    """Exact values of the log-normalization term and both KL upper bounds."""
    _check_pair(spec, model)
    cond = cond or derive_conditionals(model)
    lnz = uc = cu = 0.0
    per = []
    for t in range(1, spec.T + 1):
        A_t = float(w.A[t - 1])
        Q4, log_pc, log_pu, log_Z, _ = _step_tables(spec, model, cond, t, A_t)
        Qtz = Q4.sum(axis=(0, 1))
        pu = np.exp(log_pu)
        pc = np.exp(log_pc)
        kl_uc = np.sum(pu * (log_pu - log_pc), axis=2)
        kl_cu = np.sum(pc * (log_pc - log_pu), axis=2)
        l_t = -float(np.sum(Qtz * log_Z))
        per.append(l_t)
        lnz += l_t
        uc += A_t * float(np.sum(Qtz * kl_uc))
        cu += (1.0 - A_t) * float(np.sum(Qtz * kl_cu))
    return LognormBounds(lnz, uc, cu, per)


def verify_multilatent_kl(spec: DiscreteChainSpec, model: DiscreteModel,
                          cond: Conditionals | None = None) -> float:
    """Max over t and (x_0, x_t) of |KL of the joint latent - sum of sequential KLs|."""
    _check_pair(spec, model)
    cond = cond or derive_conditionals(model)
    nz, L, nx = tuple(spec.nz), len(spec.nz), spec.nx
    qz = spec.encoder_joint().reshape((nx, *nz))
    worst = 0.0
    for t in range(spec.T + 1):
        pz = cond.z_given_x[t].reshape((nx, *nz))
        lhs = _pairwise_kl(qz, pz)
        rhs = np.zeros((nx, nx))
        prev = np.ones((nx,))  # p(z_{<l} | x_t) with no latents
        for l in range(L):
            upto = pz.sum(axis=tuple(range(l + 2, L + 1)))  # p(z_{<=l} | x_t)
            cond_l = upto / prev[..., None]
            q_prev = _outer_prefix(spec.encoders[:l], nx)  # [x0, z_{<l}...]
            q_l = spec.encoders[l]
            # sum over z_{<l}, z_l of q_prev q_l (log q_l - log cond_l)
            qa = q_prev[..., None] * q_l.reshape((nx,) + (1,) * l + (nz[l],))
            qa = qa[:, None]  # [x0, 1, z<l..., z_l]
            log_ql = _log(q_l).reshape((nx, 1) + (1,) * l + (nz[l],))
            log_c = np.log(cond_l)[None]
            with np.errstate(invalid="ignore"):
                terms = np.where(qa > 0, qa * (log_ql - log_c), 0.0)
            rhs += terms.sum(axis=tuple(range(2, terms.ndim)))
            prev = upto
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def _outer_prefix(encoders, nx: int) -> np.ndarray:
    out = np.ones((nx,))
    for e in encoders:
        out = out[..., None] * e.reshape((nx,) + (1,) * (out.ndim - 1) + (e.shape[1],))
    return out


def _pairwise_kl(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """KL(q[a] || p[b]) for every pair of rows; trailing axes are the event."""
    qa = q.reshape(q.shape[0], 1, -1)
    pb = p.reshape(1, p.shape[0], -1)
    with np.errstate(invalid="ignore", divide="ignore"):
        terms = np.where(qa > 0, qa * (np.log(qa) - np.log(pb)), 0.0)
    return terms.sum(axis=2)


# -- random instances -------------------------------------------------------------
def _dirichlet_rows(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    return rng.dirichlet(np.ones(cols), size=rows)


def random_spec(rng: np.random.Generator, T: int, nx: int, nz=(2,)) -> DiscreteChainSpec:
    nz = (nz,) if isinstance(nz, int) else tuple(nz)
    return DiscreteChainSpec(
        q0=_dirichlet_rows(rng, 1, nx)[0],
        forward_kernels=tuple(_dirichlet_rows(rng, nx, nx) for _ in range(T)),
        encoders=tuple(_dirichlet_rows(rng, nx, k) for k in nz),
    )


def random_model(rng: np.random.Generator, T: int, nx: int, nz=(2,)) -> DiscreteModel:
    nz = (nz,) if isinstance(nz, int) else tuple(nz)
    total = int(np.prod(nz))
    return DiscreteModel.create(
        _dirichlet_rows(rng, 1, nx)[0],
        [_dirichlet_rows(rng, nx, nx) for _ in range(T)],
        _dirichlet_rows(rng, nx, total),
        nz,
    )


def random_weights(rng: np.random.Generator, T: int) -> np.ndarray:
    return rng.dirichlet(np.ones(T))


def perturb_latent_posterior(cond: Conditionals, t: int, amount: float = 0.1) -> Conditionals:
    """Negative control: bump p(z=0 | x_t) by ``amount`` and renormalize."""
    out = cond.copy()
    m = out.z_given_x[t]
    m[:, 0] += amount
    m /= m.sum(axis=1, keepdims=True)
    return out
