import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from provprofile.core import DegenerateScaleError, ProfilingError
from provprofile.nullfit import (MleFitConfig, _window_mass, biweight_initial, mle_fit,
                                 simplex_minimize, truncated_mixture_loglik)

# Phi(1.64) - Phi(-1.64), evaluated with mpmath at 40 digits
Q_164 = 0.89899483305179255


def contaminated(seed, n=3000, mean=0.1, sd=1.5, frac=0.05, at=8.0):
    rng = np.random.default_rng(seed)
    k = int(round(frac * n))
    z = mean + sd * rng.standard_normal(n - k)
    return np.r_[z, np.where(np.arange(k) % 2 == 0, at, -at)]


def test_biweight_constant_sample_is_degenerate():
    est = biweight_initial(np.full(4, 0.5))
    assert est.degenerate and est.location == 0.5 and est.scale == 0.0


def test_biweight_symmetric():
    assert biweight_initial(np.array([-2.0, -1, 0, 1, 2])).location == pytest.approx(0, abs=1e-12)


def test_biweight_normal():
    est = biweight_initial(np.random.default_rng(0).standard_normal(10_000))
    assert abs(est.location) < 0.05 and abs(est.scale - 1) < 0.05


def test_biweight_needs_three():
    with pytest.raises(ProfilingError):
        biweight_initial(np.array([1.0, 2.0]))


def test_window_mass():
    assert _window_mass(0.0, 1.0, -1.64, 1.64) == pytest.approx(Q_164, abs=1e-15)


def test_loglik_theta_one_branch():
    z = np.array([-0.5, 0.1, 0.7])
    ll = truncated_mixture_loglik(z, 0.0, 1.0, 1.0, (-1.64, 1.64))
    logphi = -0.5 * z ** 2 - 0.5 * math.log(2 * math.pi)
    # theta = Q, so the N0 log(theta) and -N0 log Q terms cancel
    assert ll == pytest.approx(logphi.sum(), abs=1e-12)


def test_loglik_impossible_configurations():
    z = np.array([-0.5, 0.1, 5.0])
    # theta = 1 with a score outside the window
    assert truncated_mixture_loglik(z, 0.0, 1e-3, 1.0, (-1, 1)) == -math.inf
    # p -> 0 with scores inside the window
    assert truncated_mixture_loglik(z, 0.0, 1.0, 1e-300, (-1.64, 1.64)) < -600
    with pytest.raises(ProfilingError):
        truncated_mixture_loglik(z, 0.0, 1.0, 0.0, (-1.64, 1.64))


def test_simplex_rosenbrock():
    (x, y), fx, _ = simplex_minimize(lambda a, b: (1 - a) ** 2 + 100 * (b - a * a) ** 2,
                                     (-1.2, 1.0), (0.1, 0.1), 1e-10, 1e-12, 5000)
    assert abs(x - 1) < 1e-4 and abs(y - 1) < 1e-4


def test_standard_normal_recovery():
    fit = mle_fit(np.random.default_rng(1).standard_normal(10_000))
    assert abs(fit.mean) < 0.05 and abs(fit.sd - 1) < 0.05 and fit.null_prop >= 0.95


def test_contaminated_recovery():
    fit = mle_fit(contaminated(2))
    assert abs(fit.mean - 0.1) < 0.07 and abs(fit.sd - 1.5) < 0.10


def test_degenerate_scale():
    with pytest.raises(DegenerateScaleError, match="degenerate scale"):
        mle_fit(np.ones(50))


def test_too_few_scores():
    with pytest.raises(ProfilingError, match="at least 20"):
        mle_fit(np.arange(19.0))


def test_result_invariants():
    z = contaminated(3, n=400)
    fit = mle_fit(z)
    a, b = fit.interval
    assert a < b
    assert fit.n_inside + fit.n_outside == z.size
    assert fit.n_inside == np.count_nonzero((z >= a) & (z <= b))
    assert fit.sd > 0
    init_ll = truncated_mixture_loglik(z, fit.init.location, fit.init.scale, fit.null_prop,
                                       fit.interval)
    assert fit.loglik >= init_ll
    assert fit.loglik == pytest.approx(
        truncated_mixture_loglik(z, fit.mean, fit.sd, fit.null_prop, fit.interval), abs=1e-9)


@pytest.mark.parametrize("seed", range(6))
def test_profile_matches_exhaustive_grid(seed):
    rng = np.random.default_rng(seed)
    z = np.r_[rng.normal(0.2, 1.3, 90), rng.normal(4, 1, 10)]
    fast = mle_fit(z)
    slow = mle_fit(z, MleFitConfig(method="exhaustive"))
    assert fast.null_prop == slow.null_prop
    assert fast.loglik == pytest.approx(slow.loglik, abs=1e-7)
    assert fast.mean == pytest.approx(slow.mean, abs=1e-5)
    assert fast.sd == pytest.approx(slow.sd, abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1),
       st.floats(0.2, 5).flatmap(lambda a: st.sampled_from([a, -a])),
       st.floats(-10, 10))
def test_affine_equivariance(seed, a, b):
    z = contaminated(seed, n=200)
    f0 = mle_fit(z)
    f1 = mle_fit(a * z + b)
    scale = abs(a) * f0.sd
    assert f1.mean == pytest.approx(a * f0.mean + b, abs=1e-4 * scale)
    assert f1.sd == pytest.approx(abs(a) * f0.sd, rel=1e-4)
    assert abs(f1.null_prop - f0.null_prop) <= 0.0011


def test_outside_scores_enter_only_through_binomial_factor():
    # with p interior to the grid, extra scores outside a fixed window leave
    # the (mu, sigma) maximiser unchanged up to the p grid spacing
    z = contaminated(4, n=1000)
    f0 = mle_fit(z)
    assert f0.null_prop < 0.99
    a, b = f0.interval
    f1 = mle_fit(np.r_[z, np.full(10, b + 2.0), np.full(10, a - 2.0)], interval=f0.interval)
    assert f1.null_prop < f0.null_prop
    assert f1.mean == pytest.approx(f0.mean, abs=1e-3)
    assert f1.sd == pytest.approx(f0.sd, abs=1e-3)


def test_outlier_insensitivity():
    d_mean, d_sd = [], []
    for seed in range(20):
        z = np.random.default_rng(seed).normal(0, 1.2, 3000)
        f0 = mle_fit(z)
        a, b = f0.interval
        f1 = mle_fit(np.r_[z, np.full(75, b + 3.0), np.full(75, a - 3.0)])
        d_mean.append(abs(f1.mean - f0.mean))
        d_sd.append(abs(f1.sd - f0.sd) / f0.sd)
    assert np.mean(d_mean) < 0.02
    assert np.mean(d_sd) < 0.02
