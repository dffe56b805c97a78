"""Standardised mortality ratios from a two-stage Cox model.

Stage one estimates covariate effects from a Cox model stratified by
provider.  Stage two computes the population Breslow baseline hazard with
the stage-one linear predictor as an offset, and each patient's expected
event count is the compensator accumulated over their follow-up.
Observed/expected counts give the SMR and a mid-p based Z-score.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri
from scipy.stats import poisson

from .core import ConvergenceError, ProfilingError, SurvivalDataset

P_CLAMP = 1e-12


@dataclass(frozen=True)
class CoxFit:
    beta: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    gradient: np.ndarray


@dataclass(frozen=True)
class BaselineHazard:
    times: np.ndarray
    increments: np.ndarray

    @property
    def cumulative(self) -> np.ndarray:
        return np.cumsum(self.increments)

    def __call__(self, t):
        """Cumulative hazard at ``t`` (right-continuous step function)."""
        cum = np.concatenate([[0.0], self.cumulative])
        return cum[np.searchsorted(self.times, t, side="right")]


@dataclass(frozen=True)
class SmrScore:
    provider_id: str
    observed: int
    expected: float
    smr: float
    mid_p: float
    z_fe: float


class _RiskSets:
    """Sorted layout for stratified risk-set sums with Breslow ties.

    Rows are ordered by stratum, then by decreasing time, so a cumulative
    sum restarted at each stratum gives the sum over ``{time >= t}``; tied
    times read the sum at the last row of their tie block.
    """

    def __init__(self, time, status, strata):
        order = np.lexsort((-time, strata))
        self.order = order
        s, t = strata[order], time[order]
        self.status = status[order].astype(bool)
        starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
        self.stratum_start = np.repeat(starts, np.diff(np.r_[starts, len(s)]))
        # last index of each (stratum, time) block
        new_block = np.r_[True, (s[1:] != s[:-1]) | (t[1:] != t[:-1])]
        block_id = np.cumsum(new_block) - 1
        block_end = np.r_[np.flatnonzero(new_block)[1:], len(s)] - 1
        self.tie_end = block_end[block_id]

    def cumsum(self, values):
        """Per-row risk-set sums of ``values`` (already in sorted order)."""
        c = np.cumsum(values, axis=0)
        base = np.where((self.stratum_start > 0)[:, None] if values.ndim > 1
                        else self.stratum_start > 0,
                        c[self.stratum_start - 1], 0.0)
        return (c - base)[self.tie_end]


def _cox_terms(rs: _RiskSets, X, beta):
    eta = X @ beta
    w = np.exp(eta - eta.max()) if eta.size else eta
    S0 = rs.cumsum(w)
    S1 = rs.cumsum(w[:, None] * X)
    ev = rs.status
    xbar = S1[ev] / S0[ev, None]
    loglik = float(np.sum(eta[ev] - eta.max() - np.log(S0[ev])))
    grad = (X[ev] - xbar).sum(axis=0)
    p = X.shape[1]
    outer = (X[:, :, None] * X[:, None, :]).reshape(len(X), p * p)
    S2 = rs.cumsum(w[:, None] * outer)[ev].reshape(-1, p, p) / S0[ev, None, None]
    hess = (S2 - xbar[:, :, None] * xbar[:, None, :]).sum(axis=0)
    return loglik, grad, hess


def fit_stratified_cox(dataset: SurvivalDataset, tol: float = 1e-9, grad_tol: float = 1e-6,
                       max_iter: int = 50, max_beta: float = 50.0) -> CoxFit:
    """Maximum partial likelihood for a Cox model stratified by provider.

    Newton-Raphson with step halving and Breslow handling of tied times.
    Iteration stops once the predicted log-likelihood gain of a Newton step
    is below ``tol`` and the largest gradient component below ``grad_tol``.
    """
    if not dataset.status.any():
        raise ProfilingError("no events")
    strata_with_events = np.unique(dataset.provider[dataset.status == 1])
    if strata_with_events.size < 2:
        raise ProfilingError("need events in at least 2 strata")
    rs = _RiskSets(dataset.time, dataset.status, dataset.provider)
    X = dataset.X[rs.order]
    p = X.shape[1]
    if p == 0:
        ll, _, _ = _cox_terms(rs, np.zeros((len(X), 1)), np.zeros(1))
        return CoxFit(np.zeros(0), ll, 0, True, np.zeros(0))
    beta = np.zeros(p)
    ll, grad, hess = _cox_terms(rs, X, beta)
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            raise ProfilingError("singular information matrix; "
                                 "covariates constant within strata?") from None
        if float(grad @ step) / 2 < tol and np.max(np.abs(grad)) < grad_tol:
            return CoxFit(beta, ll, it - 1, True, grad)
        for _ in range(30):
            cand = beta + step
            ll_new, g_new, h_new = _cox_terms(rs, X, cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            step = step / 2
        beta, ll, grad, hess = cand, ll_new, g_new, h_new
        if np.linalg.norm(beta) > max_beta:
            raise ProfilingError("monotone likelihood: coefficients diverge")
    raise ConvergenceError(f"Cox fit did not converge in {max_iter} iterations")


def breslow_baseline_with_offset(dataset: SurvivalDataset, beta) -> BaselineHazard:
    """Population Breslow hazard increments with ``X beta`` as a fixed offset.

    ``dLambda(t_k) = d_k / sum_{time_j >= t_k} exp(beta' X_j)`` at every
    distinct event time.
    """
    beta = np.asarray(beta, dtype=float)
    if not np.all(np.isfinite(beta)):
        raise ProfilingError("beta must be finite")
    risk = np.exp(dataset.X @ beta) if beta.size else np.ones(dataset.n_records)
    times, inv = np.unique(dataset.time, return_inverse=True)
    d = np.bincount(inv, weights=dataset.status, minlength=times.size)
    at_time = np.bincount(inv, weights=risk, minlength=times.size)
    at_risk = np.cumsum(at_time[::-1])[::-1]
    ev = d > 0
    inc = d[ev] / at_risk[ev]
    return BaselineHazard(times[ev], inc)


def expected_events(dataset: SurvivalDataset, beta, baseline: BaselineHazard):
    """Expected events per patient and per provider.

    ``E_ij = exp(beta' X_ij) * Lambda0(min(T_ij, tau))`` with ``tau`` the
    largest follow-up time.

    Returns
    -------
    per_provider : ndarray, shape (N,)
    per_patient : ndarray, shape (n_records,)
    """
    beta = np.asarray(beta, dtype=float)
    risk = np.exp(dataset.X @ beta) if beta.size else np.ones(dataset.n_records)
    tau = dataset.time.max()
    e_ij = risk * baseline(np.minimum(dataset.time, tau))
    e_i = np.bincount(dataset.provider, weights=e_ij, minlength=dataset.n_providers)
    return e_i, e_ij


def midp_z(observed, expected):
    """One-sided Poisson mid p-value and its Z-score.

    ``p = P(X = O)/2 + P(X > O)`` with ``X ~ Poisson(E)``; ``z = Phi^{-1}(1 - p)``
    so large ``z`` means more events than expected.  Both tails are formed
    in log space and ``p`` is clamped to ``[1e-12, 1 - 1e-12]``.
    Vectorised over its arguments.
    """
    O = np.asarray(observed, dtype=float)
    E = np.asarray(expected, dtype=float)
    if np.any(E <= 0):
        raise ProfilingError("expected count must be > 0")
    log_half_pmf = poisson.logpmf(O, E) - math.log(2.0)
    log_p = np.logaddexp(poisson.logsf(O, E), log_half_pmf)       # upper
    log_q = np.logaddexp(poisson.logcdf(O - 1, E), log_half_pmf)  # lower, = 1 - p
    p = np.clip(np.exp(log_p), P_CLAMP, 1 - P_CLAMP)
    q = np.clip(np.exp(log_q), P_CLAMP, 1 - P_CLAMP)
    z = np.where(p < 0.5, -ndtri(p), ndtri(q))
    if z.ndim == 0:
        return float(p), float(z)
    return p, z


@dataclass(frozen=True)
class SmrResult:
    scores: list
    patient_years: np.ndarray
    patients: np.ndarray
    excluded: tuple
    cox: CoxFit
    baseline: BaselineHazard

    @property
    def provider_ids(self):
        return [s.provider_id for s in self.scores]

    @property
    def z(self) -> np.ndarray:
        return np.array([s.z_fe for s in self.scores])


def smr_pipeline(dataset: SurvivalDataset, min_expected: float = 3.0) -> SmrResult:
    """Both modelling stages plus SMR and mid-p Z-scores per provider.

    Providers with ``E_i < min_expected`` are dropped (listed in
    ``excluded``).  Both total follow-up time and patient counts are kept
    as candidate size measures.
    """
    cox = fit_stratified_cox(dataset)
    base = breslow_baseline_with_offset(dataset, cox.beta)
    e_i, _ = expected_events(dataset, cox.beta, base)
    o_i = dataset.observed
    keep = e_i >= min_expected
    py = dataset.patient_time
    mid_p, z = midp_z(o_i[keep], e_i[keep])
    ids = [pid for pid, k in zip(dataset.provider_ids, keep) if k]
    scores = [SmrScore(pid, int(o), float(e), float(o / e), float(mp), float(zz))
              for pid, o, e, mp, zz in zip(ids, o_i[keep], e_i[keep],
                                           np.atleast_1d(mid_p), np.atleast_1d(z))]
    excluded = tuple(pid for pid, k in zip(dataset.provider_ids, keep) if not k)
    return SmrResult(scores, py[keep], dataset.sizes[keep], excluded, cox, base)
