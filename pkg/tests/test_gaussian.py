import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, special

from repdiff.gaussian import (
    GaussianKernel,
    TvBoundInputs,
    VmfPair,
    bessel_ratio,
    forward_posterior,
    hybrid_gaussian,
    neg_log_Z_gaussian,
    random_linear_gaussian,
    tv_bound_terms,
    verify_hybrid_score,
    vmf_kl,
)
from repdiff.schedules import NoiseSchedule, make_noise_schedule

# -- forward posterior --------------------------------------------------------


def conjugate_posterior(abar_prev, beta, x0, xt):
    """Prior x_{t-1} | x0 times likelihood x_t | x_{t-1}, combined in precision form."""
    v_prior = 1.0 - abar_prev
    prec = 1.0 / v_prior + (1.0 - beta) / beta
    var = 1.0 / prec
    mean = var * (math.sqrt(abar_prev) * x0 / v_prior + math.sqrt(1.0 - beta) * xt / beta)
    return mean, var


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("t", [2, 3])
def test_posterior_matches_conjugate_update(seed, t):
    ns = make_noise_schedule("linear", 3, 0.05, 0.3)
    rng = np.random.default_rng(seed)
    x0, xt = rng.normal(size=3), rng.normal(size=3)
    k = forward_posterior(ns, t, x0, xt)
    mean, var = conjugate_posterior(ns.alpha_bar[t - 2], ns.beta[t - 1], x0, xt)
    assert np.max(np.abs(k.mean - mean)) < 1e-12
    assert abs(k.variance - var) < 1e-12


def test_first_step_is_point_mass_on_clean_sample():
    ns = make_noise_schedule("linear", 10)
    x0 = np.array([0.3, -1.2])
    k = forward_posterior(ns, 1, x0, np.array([5.0, 5.0]))
    assert k.variance == 0.0
    assert np.allclose(k.mean, x0, atol=1e-15)
    with pytest.raises(ValueError):
        k.logpdf(x0)


def test_vanishing_noise_posterior():
    ns = NoiseSchedule.from_betas([1e-3, 1e-10])
    xt = np.array([0.7])
    k = forward_posterior(ns, 2, np.array([-3.0]), xt)
    assert abs(k.mean[0] - xt[0]) < 1e-6
    assert k.variance < 1e-9


@pytest.mark.parametrize("t", [0, 4])
def test_posterior_step_out_of_range(t):
    with pytest.raises(ValueError):
        forward_posterior(make_noise_schedule("linear", 3), t, [0.0], [0.0])


def test_kernel_rejects_negative_variance():
    with pytest.raises(ValueError):
        GaussianKernel(np.zeros(2), -1.0)


# -- log-normalizer -----------------------------------------------------------


def quad_neg_log_Z(A, s2, mc, mu):
    f = lambda x: (math.exp(-((x - mc) ** 2) / (2 * s2)) ** A * math.exp(-((x - mu) ** 2) / (2 * s2)) ** (1 - A)
                   / math.sqrt(2 * math.pi * s2))
    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)
    return -math.log(val)


@pytest.mark.parametrize("A", [0.0, 1.0])
def test_degenerate_weight_gives_zero(A):
    assert neg_log_Z_gaussian(A, 0.7, [1.0, 2.0], [-3.0, 0.5]) == 0.0


def test_half_weight_unit_gap():
    v = neg_log_Z_gaussian(0.5, 1.0, [1.0], [0.0])
    assert v == 0.125
    assert abs(quad_neg_log_Z(0.5, 1.0, 1.0, 0.0) - 0.125) < 1e-8


@pytest.mark.parametrize("seed", range(200))
def test_lognorm_matches_quadrature(seed):
    rng = np.random.default_rng(seed)
    A, s2 = rng.uniform(), rng.uniform(0.05, 3.0)
    mc, mu = rng.normal(scale=2.0, size=2)
    closed = neg_log_Z_gaussian(A, s2, [mc], [mu])
    assert abs(closed - quad_neg_log_Z(A, s2, mc, mu)) < 1e-7
    bound = min(A, 1 - A) * (mc - mu) ** 2 / (2 * s2)
    assert 0.0 <= closed <= bound + 1e-15


def test_lognorm_argument_checks():
    with pytest.raises(ValueError):
        neg_log_Z_gaussian(1.5, 1.0, [0.0], [0.0])
    with pytest.raises(ValueError):
        neg_log_Z_gaussian(0.5, 0.0, [0.0], [0.0])


# -- hybrid kernel ------------------------------------------------------------


def test_hybrid_full_weight_is_conditional():
    kc, ku = GaussianKernel([1.0, 2.0], 0.3), GaussianKernel([0.0, 0.0], 0.3)
    h = hybrid_gaussian(1.0, kc, ku)
    assert np.array_equal(h.mean, kc.mean) and h.variance == kc.variance


def test_hybrid_midpoint():
    h = hybrid_gaussian(0.5, GaussianKernel([2.0, 0.0], 1.0), GaussianKernel([0.0, 0.0], 1.0))
    assert np.array_equal(h.mean, [1.0, 0.0])


def test_hybrid_unequal_variance():
    with pytest.raises(ValueError, match="equal variances"):
        hybrid_gaussian(0.5, GaussianKernel([0.0], 1.0), GaussianKernel([0.0], 1.1))


@pytest.mark.parametrize("seed", range(10))
def test_hybrid_density_on_grid(seed):
    rng = np.random.default_rng(seed)
    A, s2 = rng.uniform(), rng.uniform(0.2, 2.0)
    kc, ku = GaussianKernel(rng.normal(size=2), s2), GaussianKernel(rng.normal(size=2), s2)
    h = hybrid_gaussian(A, kc, ku)
    g = np.linspace(-4, 4, 41)
    pts = np.stack(np.meshgrid(g, g), axis=-1).reshape(-1, 2)
    log_unnorm = A * kc.logpdf(pts) + (1 - A) * ku.logpdf(pts)
    recon = np.exp(log_unnorm + neg_log_Z_gaussian(A, s2, kc.mean, ku.mean))
    assert np.max(np.abs(recon - np.exp(h.logpdf(pts)))) < 1e-10


# -- score interpolation ------------------------------------------------------


@pytest.mark.parametrize("A", [0.0, 1.0])
def test_score_identity_endpoints(A):
    inst = random_linear_gaussian(np.random.default_rng(0))
    assert verify_hybrid_score(inst, A, method="closed") < 1e-10


@pytest.mark.parametrize("seed", range(20))
def test_score_identity_interior(seed):
    inst = random_linear_gaussian(np.random.default_rng(seed))
    assert verify_hybrid_score(inst, 0.3, seed=seed, method="closed") < 1e-8
    assert verify_hybrid_score(inst, 0.3, seed=seed, method="fd") < 1e-5


def test_score_identity_needs_gaussian_instance():
    with pytest.raises(TypeError):
        verify_hybrid_score({"mean": 0}, 0.5)


def test_score_identity_bad_method():
    inst = random_linear_gaussian(np.random.default_rng(1))
    with pytest.raises(ValueError):
        verify_hybrid_score(inst, 0.5, method="spline")


def test_instance_samples_match_joint_moments():
    inst = random_linear_gaussian(np.random.default_rng(2))
    pts = inst.sample(200_000, np.random.default_rng(3))
    assert np.max(np.abs(pts.mean(axis=0) - inst.mean)) < 0.05
    assert np.max(np.abs(np.cov(pts.T) - inst.cov)) < 0.1 * max(1.0, np.abs(inst.cov).max())


# -- von Mises-Fisher ---------------------------------------------------------


def bessel_ratio_oracle(p, kappa):
    return special.ive(p / 2, kappa) / special.ive(p / 2 - 1, kappa)


@pytest.mark.parametrize("p", [2, 3, 5, 8, 64])
@pytest.mark.parametrize("kappa", [1e-6, 1e-3, 0.1, 1.0, 10.0, 100.0, 500.0])
def test_bessel_ratio_against_scipy(p, kappa):
    assert abs(bessel_ratio(p, kappa) / bessel_ratio_oracle(p, kappa) - 1.0) < 1e-12


@pytest.mark.parametrize("kappa", [0.01, 0.5, 2.0, 30.0, 300.0])
def test_three_dim_ratio_is_langevin(kappa):
    assert abs(bessel_ratio(3, kappa) - (1 / math.tanh(kappa) - 1 / kappa)) < 1e-12


def test_bessel_ratio_domain():
    assert bessel_ratio(4, 0.0) == 0.0
    with pytest.raises(ValueError):
        bessel_ratio(3, -0.1)
    with pytest.raises(ValueError):
        bessel_ratio(1, 1.0)


def mean_cosine_by_quadrature(p, kappa):
    """E[mu . x] under vMF on S^{p-1}, from the marginal density of the cosine."""
    w = lambda t: math.exp(kappa * (t - 1.0)) * (1.0 - t * t) ** ((p - 3) / 2)
    num, _ = integrate.quad(lambda t: t * w(t), -1, 1, epsabs=0, epsrel=1e-12, limit=200)
    den, _ = integrate.quad(w, -1, 1, epsabs=0, epsrel=1e-12, limit=200)
    return num / den


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_vmf_example_orthogonal_p3():
    pair = VmfPair(np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0]), 2.0)
    kl = vmf_kl(pair)
    assert abs(kl - 2 * (1 / math.tanh(2) - 0.5)) < 1e-12
    assert abs(kl - 1.07463) < 1e-5
    assert abs(kl - 2 * mean_cosine_by_quadrature(3, 2.0)) < 1e-6


@pytest.mark.parametrize("p", [2, 3, 8])
@pytest.mark.parametrize("kappa", [0.1, 1.0, 10.0])
def test_vmf_kl_against_quadrature(p, kappa):
    rng = np.random.default_rng(p * 100 + int(kappa * 10))
    a, b = unit(rng.normal(size=p)), unit(rng.normal(size=p))
    expected = kappa * mean_cosine_by_quadrature(p, kappa) * (1 - a @ b)
    assert abs(vmf_kl(VmfPair(a, b, kappa)) - expected) < 1e-6


def test_vmf_trivial_cases():
    a = unit([1.0, 2.0, 3.0])
    assert vmf_kl(VmfPair(a, a, 7.0)) == 0.0
    assert vmf_kl(VmfPair(a, unit([3.0, 0, 1]), 0.0)) == 0.0


def test_vmf_validation():
    with pytest.raises(ValueError):
        VmfPair(np.array([1.0, 1.0]), np.array([1.0, 0.0]), 1.0)
    with pytest.raises(ValueError):
        VmfPair(np.array([1.0, 0.0]), np.array([1.0, 0.0]), -1.0)
    with pytest.raises(ValueError):
        VmfPair(np.array([1.0]), np.array([1.0]), 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.01, 200), st.floats(-1, 1), st.floats(-1, 1))
def test_vmf_kl_decreasing_in_alignment(kappa, c1, c2):
    lo, hi = sorted((c1, c2))
    if hi - lo < 1e-6:
        return
    ref = np.array([1.0, 0.0, 0.0, 0.0])
    mk = lambda c: np.array([c, math.sqrt(1 - c * c), 0.0, 0.0])
    kl_lo = vmf_kl(VmfPair(ref, mk(lo), kappa))
    kl_hi = vmf_kl(VmfPair(ref, mk(hi), kappa))
    assert kl_hi < kl_lo
    assert kl_hi >= 0.0


# -- TV bound terms -----------------------------------------------------------


def test_bound_terms_example():
    b = TvBoundInputs(kl_to_gauss=1, L=1, d=1, m=1, h=0.1, T_time=10, eps=(0.0,) * 100)
    conv, disc, score = tv_bound_terms(b)
    assert abs(conv - math.exp(-10)) < 1e-18
    assert abs(disc - (math.sqrt(0.1) + 0.1) * math.sqrt(10)) < 1e-12
    assert abs(disc - 1.31623) < 1e-5
    assert score == 0.0


def test_constant_score_error_sum():
    c, T, h = 0.3, 4.0, 0.25
    b = TvBoundInputs(1, 1, 2, 1, h, T, (c,) * 16)
    assert abs(tv_bound_terms(b)[2] - c * T / math.sqrt(h)) < 1e-12


def test_halving_step_shrinks_discretization():
    for h in (0.5, 0.1, 0.01):
        d1 = tv_bound_terms(TvBoundInputs(1, 1, 3, 2, h, 10))[1]
        d2 = tv_bound_terms(TvBoundInputs(1, 1, 3, 2, h / 2, 10))[1]
        assert math.sqrt(2) <= d1 / d2 <= 2


def test_step_size_assumption():
    with pytest.raises(ValueError, match="h <= 1/L"):
        TvBoundInputs(1, 4.0, 1, 1, 0.5, 10)


def test_eps_count_must_match_steps():
    with pytest.raises(ValueError, match="T/h"):
        TvBoundInputs(1, 1, 1, 1, 0.5, 10, (0.1,) * 3)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 10), st.floats(0.1, 5), st.floats(0.01, 1), st.floats(0.5, 20), st.floats(0, 1))
def test_bound_terms_monotone(kl, L, frac, T, e):
    h = frac / L
    base = TvBoundInputs(kl, L, 2, 1.0, h, T)
    c0, d0, _ = tv_bound_terms(base)
    assert tv_bound_terms(TvBoundInputs(kl, L, 2, 1.0, h, T + 1))[0] <= c0
    assert tv_bound_terms(TvBoundInputs(kl, L, 2, 1.0, h / 2, T))[1] < d0
    steps = TvBoundInputs(kl, 1.0, 2, 1.0, 0.5, 2.0, (e,) * 4)
    bumped = TvBoundInputs(kl, 1.0, 2, 1.0, 0.5, 2.0, (e, e + 0.1, e, e))
    assert tv_bound_terms(bumped)[2] > tv_bound_terms(steps)[2]
