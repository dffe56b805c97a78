"""Profiling under the linear provider-effects model.

``Y*_ij = mu + alpha_i + beta' X_ij + eps_ij``.  Covariate effects are
estimated with provider fixed effects (within-provider centring), outcomes
are risk adjusted with that estimate, and the one-way variance components
of the adjusted outcomes give the FE, RE and FERE Z-scores.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LinearDataset, LinearVarianceComponents, ProfilingError


def _provider_means(dataset: LinearDataset, values):
    n = dataset.sizes
    if values.ndim == 1:
        return np.bincount(dataset.provider, weights=values, minlength=len(n)) / n
    return np.stack([np.bincount(dataset.provider, weights=col, minlength=len(n))
                     for col in values.T], axis=1) / n[:, None]


def fit_fixed_effects_beta(dataset: LinearDataset, rtol: float = 1e-10):
    """Within-provider least squares estimate of the covariate effects.

    Returns
    -------
    beta : ndarray, shape (p,)
    sigma_w : float
        Residual standard deviation, denominator ``sum(n_i) - N - rank``.

    Raises
    ------
    ProfilingError
        On collinear covariates or a perfect fit.
    """
    N, p = dataset.n_providers, dataset.n_covariates
    n_tot = dataset.n_records
    yc = dataset.y - _provider_means(dataset, dataset.y)[dataset.provider]
    beta = np.zeros(p)
    rank = 0
    if p:
        Xc = dataset.X - _provider_means(dataset, dataset.X)[dataset.provider]
        # columns constant within every provider carry no information; their
        # coefficients are reported as 0
        active = np.flatnonzero(np.abs(Xc).max(axis=0) > 0)
        if active.size:
            Xa = Xc[:, active]
            rank = np.linalg.matrix_rank(Xa)
            if rank < active.size:
                raise ProfilingError("singular centered design matrix")
            beta[active] = np.linalg.lstsq(Xa, yc, rcond=None)[0]
        resid = yc - Xc @ beta
    else:
        resid = yc
    df = n_tot - N - rank
    if df <= 0:
        raise ProfilingError("need more records than providers + covariates")
    rss = float(resid @ resid)
    if rss <= rtol * max(float(yc @ yc), np.finfo(float).tiny):
        raise ProfilingError("zero residual variance")
    return beta, float(np.sqrt(rss / df))


def adjust_outcomes(dataset: LinearDataset, beta) -> LinearDataset:
    """Risk-adjusted outcomes ``Y_ij = Y*_ij - beta' X_ij``."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (dataset.n_covariates,):
        raise ProfilingError("beta length does not match covariate dimension")
    if not beta.size:
        return dataset
    return dataset.with_outcomes(dataset.y - dataset.X @ beta)


def components_from_summary(ybar, n, ssw, beta=None) -> LinearVarianceComponents:
    """Moment estimates from provider means, sizes and the within sum of squares."""
    ybar = np.asarray(ybar, dtype=float)
    n = np.asarray(n, dtype=float)
    N = n.size
    if N < 2:
        raise ProfilingError("need at least 2 providers")
    n_tot = n.sum()
    if n_tot - N <= 0:
        raise ProfilingError("sigma_w not estimable: every provider has one record")
    mu = float(n @ ybar / n_tot)
    msw = float(ssw) / (n_tot - N)
    if msw <= 0:
        raise ProfilingError("zero residual variance")
    msb = float(n @ (ybar - mu) ** 2) / (N - 1)
    n0 = (n_tot - float(n @ n) / n_tot) / (N - 1)
    s2a = max(0.0, (msb - msw) / n0)
    beta = np.zeros(0) if beta is None else np.asarray(beta, dtype=float)
    return LinearVarianceComponents(mu, float(np.sqrt(s2a)), float(np.sqrt(msw)), beta)


def estimate_variance_components(dataset: LinearDataset,
                                 beta=None) -> LinearVarianceComponents:
    """One-way ANOVA moment estimates of ``(mu, sigma_alpha, sigma_w)``.

    ``mu`` is the size-weighted grand mean, ``sigma_w**2`` the within mean
    square and ``sigma_alpha**2 = max(0, (MSB - MSW) / n0)`` with the
    unbalanced effective size ``n0 = (sum n - sum n**2 / sum n) / (N - 1)``.
    """
    if dataset.n_providers < 2:
        raise ProfilingError("need at least 2 providers")
    ybar = _provider_means(dataset, dataset.y)
    resid = dataset.y - ybar[dataset.provider]
    if beta is None:
        beta = np.zeros(dataset.n_covariates)
    return components_from_summary(ybar, dataset.sizes, float(resid @ resid), beta)


def provider_summary(dataset: LinearDataset):
    """``(ybar, n, ssw)``: provider means, sizes and within sum of squares."""
    ybar = _provider_means(dataset, dataset.y)
    resid = dataset.y - ybar[dataset.provider]
    return ybar, dataset.sizes, float(resid @ resid)


@dataclass(frozen=True)
class LinearScoreSet:
    """Per-provider linear-model scores, indexed like ``provider_ids``."""

    provider_ids: tuple
    n: np.ndarray
    ybar: np.ndarray
    z_fe: np.ndarray
    z_re: np.ndarray
    z_fere: np.ndarray
    shrinkage: np.ndarray


def z_scores_from_means(ybar, n, components: LinearVarianceComponents):
    """FE, RE and FERE Z-scores and shrinkage factors from provider means."""
    n = np.asarray(n, dtype=float)
    dev = np.asarray(ybar, dtype=float) - components.mu
    s2a, s2w = components.sigma_alpha ** 2, components.sigma_w ** 2
    z_fe = np.sqrt(n) * dev / components.sigma_w
    R = s2a / (s2a + s2w / n)
    return z_fe, np.sqrt(R) * z_fe, dev / np.sqrt(s2a + s2w / n), R


def compute_z_scores(dataset: LinearDataset,
                     components: LinearVarianceComponents) -> LinearScoreSet:
    """FE, RE and FERE Z-scores for risk-adjusted outcomes.

    ``z_fe = sqrt(n)(ybar - mu)/sigma_w``, ``z_re = sqrt(R) z_fe`` with
    ``R = s_a^2 / (s_a^2 + s_w^2/n)`` and
    ``z_fere = (ybar - mu)/sqrt(s_a^2 + s_w^2/n)``.
    """
    n = dataset.sizes
    ybar = _provider_means(dataset, dataset.y)
    z_fe, z_re, z_fere, R = z_scores_from_means(ybar, n, components)
    return LinearScoreSet(dataset.provider_ids, n, ybar, z_fe, z_re, z_fere, R)


def profile_linear(dataset: LinearDataset):
    """Fit beta, adjust, estimate components and score in one call.

    Returns
    -------
    scores : LinearScoreSet
    components : LinearVarianceComponents
    """
    beta, _ = fit_fixed_effects_beta(dataset) if dataset.n_covariates else (
        np.zeros(0), None)
    adjusted = adjust_outcomes(dataset, beta)
    comps = estimate_variance_components(adjusted, beta)
    return compute_z_scores(adjusted, comps), comps


def conditional_mse_curves(components: LinearVarianceComponents, n, alpha):
    """Conditional MSE of the FE and RE effect estimates given the true effect.

    Returns
    -------
    dict
        ``{"FE": sigma_w**2/n (constant), "RE": R**2 sigma_w**2/n + (1-R)**2 alpha**2}``
    """
    alpha = np.asarray(alpha, dtype=float)
    s2w_n = components.sigma_w ** 2 / n
    R = components.sigma_alpha ** 2 / (components.sigma_alpha ** 2 + s2w_n)
    return {"FE": np.full_like(alpha, s2w_n),
            "RE": R ** 2 * s2w_n + (1 - R) ** 2 * alpha ** 2}


def mse_crossing_point(components: LinearVarianceComponents, n) -> float:
    """|alpha| above which the RE estimate has larger conditional MSE than FE."""
    s2w_n = components.sigma_w ** 2 / n
    R = components.sigma_alpha ** 2 / (components.sigma_alpha ** 2 + s2w_n)
    return float(np.sqrt(s2w_n * (1 + R) / (1 - R)))
