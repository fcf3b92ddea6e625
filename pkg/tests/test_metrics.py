import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from repdiff.autodiff import Tensor
from repdiff.diffusion import AlignmentHead, Denoiser
from repdiff.metrics import (
    MetricReport,
    _w2_1d,
    alignment_cosine,
    class_coverage,
    energy_distance,
    random_directions,
    sliced_wasserstein,
    tv_histogram,
    tv_noise_band,
)
from repdiff.representation import make_bundle
from repdiff.schedules import Curriculum, make_noise_schedule
from repdiff.train import train

from conftest import tiny_setup


def test_sw_identical_sets_is_zero():
    a = np.random.default_rng(0).standard_normal((500, 2))
    assert sliced_wasserstein(a, a.copy()) == 0.0


def test_sw_permutation_invariant():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((300, 3))
    assert sliced_wasserstein(a, a[rng.permutation(300)]) == 0.0


@pytest.mark.parametrize("c", [-2.5, 0.3, 7.0])
def test_sw_translation_1d(c):
    a = np.random.default_rng(2).standard_normal(400)
    assert abs(sliced_wasserstein(a, a + c, projections=16) - abs(c)) < 1e-12


def test_sw_gaussian_mean_shift_matches_projection_formula():
    # per direction the 1D W2 between N(0,1) and N(<theta,dmu>,1) is |<theta,dmu>|
    rng = np.random.default_rng(3)
    n = 20000
    a = rng.standard_normal((n, 2))
    b = rng.standard_normal((n, 2)) + np.array([1.0, 0.0])
    dirs = random_directions(2, 512, seed=4)
    expected = float(np.mean(np.abs(dirs[:, 0])))
    got = sliced_wasserstein(a, b, 512, seed=4)
    assert abs(got - expected) < 0.02
    # over all directions on the circle E|cos| = 2/pi; the 512-direction average has sd ~ 0.0136
    assert abs(expected - 2 / math.pi) < 3 * math.sqrt((0.5 - 4 / math.pi**2) / 512)


def test_sw_symmetric_and_seeded():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((200, 2)), rng.standard_normal((200, 2)) * 1.3
    assert sliced_wasserstein(a, b, seed=9) == sliced_wasserstein(b, a, seed=9)
    assert sliced_wasserstein(a, b, seed=9) == sliced_wasserstein(a, b, seed=9)


def test_sw_errors():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 10_000))
def test_w2_unequal_sizes_matches_quantile_integral(n, m, seed):
    rng = np.random.default_rng(seed)
    a, b = np.sort(rng.standard_normal(n)), np.sort(rng.standard_normal(m))
    # midpoint rule on a grid fine enough to hit every step of both quantile functions
    grid = (np.arange(n * m * 4) + 0.5) / (n * m * 4)
    qa, qb = a[(grid * n).astype(int)], b[(grid * m).astype(int)]
    assert abs(_w2_1d(a, b) - math.sqrt(np.mean((qa - qb) ** 2))) < 1e-12


def test_w2_unequal_sizes_uses_quantiles():
    # {0} vs {0, 1}: the quantile gap is 0 on half of [0,1] and 1 on the other half
    assert abs(_w2_1d(np.array([0.0]), np.array([0.0, 1.0])) - math.sqrt(0.5)) < 1e-15


def _abs_normal_mean(mu, sd):
    return sd * math.sqrt(2 / math.pi) * math.exp(-mu**2 / (2 * sd**2)) + mu * (1 - 2 * stats.norm.cdf(-mu / sd))


def test_energy_distance_gaussian_shift():
    c = 1.0
    exact = 2 * _abs_normal_mean(c, math.sqrt(2)) - 2 * _abs_normal_mean(0.0, math.sqrt(2))
    # quadrature cross-check of E|N(c, 2)|
    q = integrate.quad(lambda u: abs(u) * stats.norm.pdf(u, c, math.sqrt(2)), -np.inf, np.inf)[0]
    assert abs(q - _abs_normal_mean(c, math.sqrt(2))) < 1e-8
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal(3000), rng.standard_normal(3000) + c
    assert abs(energy_distance(a, b) - exact) < 0.03


def test_energy_distance_zero_for_same_set():
    a = np.random.default_rng(7).standard_normal((100, 2))
    assert energy_distance(a, a) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        energy_distance(a, np.zeros((4, 3)))


def test_class_coverage_balanced_and_missing():
    means = np.array([[0.0, 0.0], [10.0, 0.0]])
    x = np.repeat(means, 50, axis=0)
    assert np.allclose(class_coverage(x, means, 0.5), [1.0, 1.0])
    cov = class_coverage(np.vstack([x[:50], x[:50]]), means, 0.5)
    assert np.allclose(cov, [2.0, 0.0])
    far = np.array([[5.0, 5.0]] * 10)
    assert np.allclose(class_coverage(far, means, 0.5), 0.0)


def test_tv_disjoint_support():
    x = np.random.default_rng(8).uniform(20, 21, 5000)
    assert tv_histogram(x, stats.norm.cdf, bins=50, lo=20, hi=21) == pytest.approx(1.0, abs=1e-12)


def test_tv_shifted_gaussian():
    exact = 2 * stats.norm.cdf(1.5) - 1
    assert abs(exact - 0.8664) < 1e-4
    x = np.random.default_rng(9).standard_normal(100_000)
    ref = stats.norm(3, 1).cdf
    assert abs(tv_histogram(x, ref, bins=100, lo=-5, hi=8) - exact) < 0.02


@pytest.mark.parametrize("n", [2000, 20000, 200000])
def test_tv_exact_samples_inside_noise_band(n):
    x = np.random.default_rng(n).standard_normal(n)
    assert tv_histogram(x, stats.norm.cdf, bins=60, lo=-4, hi=4) < tv_noise_band(n, 60)


def test_tv_tail_bins_capture_outside_mass():
    # all samples below lo: lower tail bin holds them, reference lower tail is cdf(lo)
    x = np.full(100, -10.0)
    tv = tv_histogram(x, stats.norm.cdf, bins=10, lo=-1, hi=1)
    assert tv == pytest.approx(1 - stats.norm.cdf(-1), abs=1e-12)
    with pytest.raises(ValueError):
        tv_histogram(np.ones(5), stats.norm.cdf, bins=4)


def _ring_eval(n, seed=0):
    s = tiny_setup()
    x0, _ = s.ring.sample(n, seed)
    z = make_bundle(x0, s.levels[:1], s.depth, seed=seed)["x"]
    return s, x0, z


def test_alignment_cosine_untrained_is_near_zero():
    s, x0, z = _ring_eval(1000)
    vals = []
    for seed in range(5):
        d = Denoiser(depth=4, width=16, x_dim=2, temb_dim=8, seed=seed)
        head = AlignmentHead(16, z.shape[1], 8, seed=100 + seed)
        vals.append(alignment_cosine(d, head, 1, x0, z, s.ns, t=10, seed=seed))
    assert z.shape[1] >= 4
    assert all(abs(v) < 0.2 for v in vals)


def test_alignment_cosine_perfect_head_is_one():
    s, x0, z = _ring_eval(300)
    d = Denoiser(depth=4, width=16, x_dim=2, temb_dim=8, seed=0)
    assert alignment_cosine(d, lambda h: Tensor(z), 1, x0, z, s.ns, t=5, seed=0) == pytest.approx(1.0, abs=1e-12)


def test_alignment_cosine_better_at_small_t_after_training():
    s = tiny_setup(epochs=30, n_train=512, width=32)
    s = replace(s, ns=make_noise_schedule("linear", 20, 1e-3, 0.2),
                alpha_c=Curriculum("constant"), beta_c=Curriculum("constant"))
    m = train("repa", s, 0, evaluate_final=False).model
    _, x0, z = _ring_eval(1000, seed=3)
    cos = [alignment_cosine(m.denoiser, m.heads["x"], 1, x0, z, s.ns, t=t, seed=1) for t in (1, 19)]
    assert cos[0] > cos[1]


def test_metric_report_rejects_negative():
    with pytest.raises(ValueError):
        MetricReport(sliced_wasserstein=-1.0)
    r = MetricReport(sliced_wasserstein=0.1, coverage=[1.0, 0.9])
    assert r.to_dict()["coverage"] == [1.0, 0.9]
