"""Holding providers accountable for part of the between-provider variance.

A fraction ``lam`` of the between-provider variance is attributed to
incomplete risk adjustment and kept in the reference distribution; the
remaining ``1 - lam`` is the provider's responsibility and is removed:

    var_lam = [1 - r (1 - lam)] * var

with ``r`` the inter-unit reliability.  ``lam = 1`` is the full empirical
null and ``lam = 0`` the sharp-null (FE) reference.  Uncertainty about
``lam`` is handled by mixing over a prior by Monte Carlo.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Union

import numpy as np
from scipy.stats import norm

from .core import NullParams, ProfilingError
from .smoothing import flag_reports

R_MAX = 1 - 1e-6
MIN_DRAWS = 1000


def iur_linear(sigma_alpha, sigma_w, n):
    """``r = s_a^2 / (s_a^2 + s_w^2 / n)``."""
    if not sigma_w > 0:
        raise ProfilingError("sigma_w must be > 0")
    s2a = np.asarray(sigma_alpha, dtype=float) ** 2
    return s2a / (s2a + sigma_w ** 2 / np.asarray(n, dtype=float))


def iur_from_null_variance(sigma2):
    """Reliability implied by a Wald-type null variance ``1 / (1 - r)``."""
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 < 1):
        raise ProfilingError("null variance must be >= 1 (floor it first)")
    return np.clip(1.0 - 1.0 / sigma2, 0.0, R_MAX)


def _relax_factor(r, lam):
    lam = np.asarray(lam, dtype=float)
    r = np.asarray(r, dtype=float)
    if np.any((lam < 0) | (lam > 1)):
        raise ProfilingError("lambda must lie in [0, 1]")
    if np.any((r < 0) | (r >= 1)):
        raise ProfilingError("r must lie in [0, 1)")
    return 1.0 - r * (1.0 - lam)


def relaxed_variance(sigma2, r, lam):
    """Reference variance after removing the accountable share."""
    return _relax_factor(r, lam) * np.asarray(sigma2, dtype=float)


def relaxed_sd(sd, r, lam):
    """``sqrt(relaxed_variance(sd**2, r, lam))``, exact at ``lam = 1``."""
    return np.asarray(sd, dtype=float) * np.sqrt(_relax_factor(r, lam))


@dataclass(frozen=True)
class PointMass:
    value: float

    @property
    def mean(self) -> float:
        return self.value

    def sample(self, rng, size):
        return np.full(size, self.value)


@dataclass(frozen=True)
class BetaPrior:
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ProfilingError("Beta prior parameters must be > 0")

    @property
    def mean(self) -> float:
        return self.a / (self.a + self.b)

    def sample(self, rng, size):
        return rng.beta(self.a, self.b, size)


@dataclass(frozen=True, eq=False)
class TabulatedPrior:
    """Density tabulated on a grid over [0, 1], sampled by inverse CDF."""

    grid: np.ndarray
    density: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        d = np.asarray(self.density, dtype=float)
        if g.ndim != 1 or g.shape != d.shape or g.size < 2:
            raise ProfilingError("grid and density must be 1-d of equal length >= 2")
        if g[0] < 0 or g[-1] > 1 or np.any(np.diff(g) <= 0) or np.any(d < 0):
            raise ProfilingError("grid must increase within [0, 1]; density >= 0")
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "density", d)

    def _cdf(self):
        seg = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.grid)
        cdf = np.r_[0.0, np.cumsum(seg)]
        if cdf[-1] <= 0:
            raise ProfilingError("density integrates to zero")
        return cdf / cdf[-1]

    @property
    def mean(self) -> float:
        u = np.linspace(0, 1, 20001)
        return float(np.mean(np.interp((u[1:] + u[:-1]) / 2, self._cdf(), self.grid)))

    def sample(self, rng, size):
        # piecewise-linear CDF inverse (exact for piecewise-constant density)
        return np.interp(rng.random(size), self._cdf(), self.grid)


Prior = Union[PointMass, BetaPrior, TabulatedPrior]


def parse_prior(text: str) -> Prior:
    """``"beta:a,b"`` or ``"point:x"``."""
    kind, _, args = text.partition(":")
    vals = [float(v) for v in args.split(",") if v.strip()]
    if kind == "beta" and len(vals) == 2:
        return BetaPrior(*vals)
    if kind == "point" and len(vals) == 1:
        return PointMass(vals[0])
    raise ProfilingError(f"cannot parse prior {text!r}; expected beta:a,b or point:x")


@dataclass(frozen=True)
class LambdaConfig:
    lam: Optional[float] = 1.0
    prior: Optional[Prior] = None
    draws: int = 100_000
    seed: int = 0
    chunk: int = 50_000

    def __post_init__(self):
        if (self.lam is None) == (self.prior is None):
            raise ProfilingError("give exactly one of a fixed lambda or a prior")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ProfilingError("lambda must lie in [0, 1]")
        if self.draws < MIN_DRAWS:
            raise ProfilingError(f"need at least {MIN_DRAWS} Monte Carlo draws")

    @property
    def lam_used(self) -> float:
        return self.lam if self.prior is None else self.prior.mean


def _standard_draws(prior: Prior, draws, seed, chunk):
    """``(lambda, eps)`` pairs from independent per-chunk streams."""
    lams, eps = [], []
    for k, start in enumerate(range(0, draws, chunk)):
        rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
        m = min(chunk, draws - start)
        lams.append(prior.sample(rng, m))
        eps.append(rng.standard_normal(m))
    return np.concatenate(lams), np.concatenate(eps)


def sample_marginal_null(null: NullParams, r, prior: Prior, draws=100_000, seed=0,
                         chunk=50_000) -> np.ndarray:
    """Draws from the prior-mixed null: ``lam ~ prior``, ``z ~ N(mean, var_lam)``."""
    lam, eps = _standard_draws(prior, draws, seed, chunk)
    return null.mean + np.sqrt(relaxed_variance(null.sd ** 2, r, lam)) * eps


def marginal_null_quantile(null: NullParams, r, prior: Prior, rho=0.05, draws=100_000,
                           seed=0) -> float:
    """Monte Carlo upper-``rho`` quantile of the prior-mixed null."""
    z = sample_marginal_null(null, r, prior, draws, seed)
    return float(np.quantile(z, 1 - rho))


def lambda_thresholds(null_mean, null_sd, r, config: LambdaConfig, rho=0.05):
    """Per-provider upper/lower critical values and effective null sd.

    Fixed ``lam``: ``mean -/+ z_rho * sqrt(var_lam)``.  Prior: Monte Carlo
    quantiles of the mixed null; the same ``(lambda, eps)`` draws are reused
    for every provider.
    """
    sd = np.atleast_1d(np.asarray(null_sd, dtype=float))
    null_mean = np.broadcast_to(np.asarray(null_mean, dtype=float), sd.shape)
    var = sd ** 2
    r = np.broadcast_to(np.asarray(r, dtype=float), var.shape)
    if config.prior is None:
        sd_eff = relaxed_sd(sd, r, config.lam)
        zr = norm.isf(rho)
        return null_mean + zr * sd_eff, null_mean - zr * sd_eff, sd_eff
    lam, eps = _standard_draws(config.prior, config.draws, config.seed, config.chunk)
    upper = np.empty_like(var)
    lower = np.empty_like(var)
    for i in range(var.size):
        scaled = np.sqrt(relaxed_variance(var[i], r[i], lam)) * eps
        lo, hi = np.quantile(scaled, [rho, 1 - rho])
        upper[i], lower[i] = null_mean[i] + hi, null_mean[i] + lo
    sd_eff = relaxed_sd(sd, r, config.prior.mean)
    return upper, lower, sd_eff


def flag_with_lambda(provider_ids, z, null_mean, null_sd, config: LambdaConfig,
                     rho=0.05, two_sided=False, r=None) -> list:
    """Flag against the relaxed (or prior-mixed) reference distribution.

    ``r`` defaults to :func:`iur_from_null_variance` of the null variance.
    """
    z = np.asarray(z, dtype=float)
    null_sd = np.asarray(null_sd, dtype=float)
    if r is None:
        r = iur_from_null_variance(np.maximum(null_sd ** 2, 1.0))
    upper, lower, sd_eff = lambda_thresholds(null_mean, null_sd, r, config, rho)
    reports = flag_reports(provider_ids, z, null_mean, sd_eff, rho, two_sided,
                           lam=config.lam_used)
    if config.prior is None:
        return reports
    # prior thresholds come from Monte Carlo quantiles, not mean +/- z sd
    out = []
    for rep, zi, up, lo in zip(reports, z, upper, lower):
        dec = "worse" if zi > up else ("better" if two_sided and zi < lo else "none")
        out.append(replace(rep, threshold_upper=float(up), threshold_lower=float(lo),
                           decision=dec))
    return out


def lambda_decisions(z, null_mean, null_sd, lam, rho=0.05, r=None) -> np.ndarray:
    """Boolean worse-than-expected flags at a fixed ``lam`` (vectorised)."""
    null_sd = np.asarray(null_sd, dtype=float)
    if r is None:
        r = iur_from_null_variance(np.maximum(null_sd ** 2, 1.0))
    upper = np.asarray(null_mean) + norm.isf(rho) * relaxed_sd(null_sd, r, lam)
    return np.asarray(z) > upper
