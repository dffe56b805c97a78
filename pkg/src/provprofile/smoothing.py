"""Size-adaptive empirical nulls.

Providers are grouped by quantiles of size, a robust null is fitted within
each group, and the group variances and means are smoothed as functions of
the median group size.  Every provider then gets its own reference
N(mean(size), var(size)).  Stratified nulls (piecewise constant in size)
are the unsmoothed special case.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.interpolate import BSpline, make_smoothing_spline
from scipy.stats import norm

from .core import ConvergenceError, FlagReport, ProfilingError
from .nullfit import MleFitConfig, MleFitResult, mle_fit

MIN_GROUP = 20
VARIANCE_FLOOR = 1.0
MIN_SPLINE_POINTS = 5  # make_smoothing_spline requirement


@dataclass(frozen=True)
class SizeGroup:
    index: int
    members: np.ndarray
    median_size: float
    mean: Optional[float] = None
    var: Optional[float] = None
    fit: Optional[MleFitResult] = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.members)


def default_group_count(n_providers: int) -> int:
    """About 100 providers per group, kept within 50-300 where possible."""
    g = round(n_providers / 100)
    g = min(max(g, -(-n_providers // 300)), n_providers // 50)
    return max(g, 3) if n_providers // 3 >= MIN_GROUP else max(g, 1)


def _size_order(size, provider_ids):
    if provider_ids is None:
        return np.argsort(size, kind="stable")
    return np.array(sorted(range(len(size)), key=lambda i: (size[i], provider_ids[i])),
                    dtype=np.intp)


def group_by_size(size, n_groups: int, provider_ids: Sequence[str] = None,
                  min_group: int = MIN_GROUP) -> list:
    """Split providers into ``n_groups`` contiguous blocks of the size order.

    Providers are sorted by ``(size, provider_id)`` (index order when no ids
    are given) and cut into blocks whose counts differ by at most one.
    """
    size = np.asarray(size, dtype=float)
    N = size.size
    if n_groups < 1:
        raise ProfilingError("need at least one group")
    if N // n_groups < min_group:
        raise ProfilingError(
            f"{n_groups} groups too many for {N} providers (min {min_group} per group)")
    order = _size_order(size, provider_ids)
    return [SizeGroup(g, idx, float(np.median(size[idx])))
            for g, idx in enumerate(np.array_split(order, n_groups))]


def fit_group_nulls(groups, z, config: MleFitConfig = MleFitConfig()) -> list:
    """Robust null (mean, variance) of the scores in every group."""
    z = np.asarray(z, dtype=float)
    out = []
    for grp in groups:
        try:
            fit = mle_fit(z[grp.members], config)
        except ProfilingError as exc:
            raise type(exc)(f"group {grp.index}: {exc}") from exc
        out.append(replace(grp, mean=fit.mean, var=fit.sd ** 2, fit=fit))
    return out


@dataclass(frozen=True)
class VarianceLine:
    """``var(size) = max(gamma0 + gamma1 * size, floor)``."""

    gamma0: float
    gamma1: float
    iterations: int = 0
    floor: float = VARIANCE_FLOOR

    def raw(self, size):
        return self.gamma0 + self.gamma1 * np.asarray(size, dtype=float)

    def __call__(self, size):
        return np.maximum(self.raw(size), self.floor)


def _wls_line(x, y, w):
    sw = np.sqrt(w)
    A = np.column_stack([sw, sw * x])
    return np.linalg.lstsq(A, sw * y, rcond=None)[0]


def fit_variance_line(groups, tol: float = 1e-6, max_iter: int = 100) -> VarianceLine:
    """Iteratively reweighted regression of group variances on median size.

    Starts from ordinary least squares, then repeats weighted least squares
    with weights ``N_g / (gamma0 + gamma1 * m_g)**2`` until the coefficient
    vector changes by less than ``tol`` (relative).
    """
    if len(groups) < 3:
        raise ProfilingError("variance line needs at least 3 groups")
    m = np.array([g.median_size for g in groups])
    v = np.array([g.var for g in groups], dtype=float)
    cnt = np.array([g.count for g in groups], dtype=float)
    coef = _wls_line(m, v, np.ones_like(m))
    for it in range(1, max_iter + 1):
        fitted = coef[0] + coef[1] * m
        if np.any(fitted <= 0):
            raise ProfilingError("fitted variance <= 0 at a group median")
        new = _wls_line(m, v, cnt / fitted ** 2)
        delta = np.linalg.norm(new - coef)
        coef = new
        if delta <= tol * max(np.linalg.norm(coef), np.finfo(float).tiny):
            return VarianceLine(float(coef[0]), float(coef[1]), it)
    raise ConvergenceError(f"variance line did not converge in {max_iter} iterations")


@dataclass(frozen=True)
class MeanCurve:
    """Smoothed group means as a function of size; flat outside the data."""

    kind: str  # "spline", "linear" or "constant"
    lo: float
    hi: float
    coef: tuple = ()  # linear: (intercept, slope)
    spline: Optional[BSpline] = field(default=None, repr=False)

    def __call__(self, size):
        s = np.clip(np.asarray(size, dtype=float), self.lo, self.hi)
        if self.kind == "spline":
            return self.spline(s)
        if self.kind == "linear":
            return self.coef[0] + self.coef[1] * s
        return np.full_like(s, self.coef[0])

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "lo": self.lo, "hi": self.hi, "coef": list(self.coef)}
        if self.spline is not None:
            out.update(knots=self.spline.t.tolist(), coefficients=self.spline.c.tolist(),
                       degree=int(self.spline.k))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MeanCurve":
        spl = None
        if d["kind"] == "spline":
            spl = BSpline(np.array(d["knots"]), np.array(d["coefficients"]), d["degree"])
        return cls(d["kind"], d["lo"], d["hi"], tuple(d["coef"]), spl)


def fit_mean_curve(groups, variance_line: VarianceLine, lam=None) -> MeanCurve:
    """Weighted cubic smoothing spline through ``(median size, group mean)``.

    Weights are ``1 / var(m_g)`` from the fitted variance line; the penalty
    is chosen by generalised cross-validation unless ``lam`` is given.
    Groups sharing a median size are pooled first.  With fewer than five
    distinct medians a weighted straight line is fitted instead.
    """
    m = np.array([g.median_size for g in groups])
    zm = np.array([g.mean for g in groups], dtype=float)
    w = 1.0 / variance_line(m)
    xs, inv = np.unique(m, return_inverse=True)
    ws = np.bincount(inv, weights=w)
    ys = np.bincount(inv, weights=w * zm) / ws
    lo, hi = float(xs[0]), float(xs[-1])
    if xs.size >= MIN_SPLINE_POINTS:
        spl = make_smoothing_spline(xs, ys, w=ws, lam=lam)
        return MeanCurve("spline", lo, hi, spline=spl)
    if xs.size >= 2:
        warnings.warn(f"only {xs.size} distinct group sizes; using a weighted line "
                      "for the mean curve", stacklevel=2)
        b0, b1 = _wls_line(xs, ys, ws)
        return MeanCurve("linear", lo, hi, (float(b0), float(b1)))
    return MeanCurve("constant", lo, hi, (float(ys[0]),))


@dataclass(frozen=True)
class SmoothedNullModel:
    variance_line: VarianceLine
    mean_curve: MeanCurve
    groups: tuple = field(repr=False)

    @property
    def size_range(self):
        return self.mean_curve.lo, self.mean_curve.hi

    def mean(self, size):
        return self.mean_curve(size)

    def var(self, size):
        return self.variance_line(size)

    def sd(self, size):
        return np.sqrt(self.var(size))

    def threshold(self, size, rho=0.05):
        return self.mean(size) + norm.isf(rho) * self.sd(size)

    def to_dict(self) -> dict:
        return {
            "variance_line": {"gamma0": self.variance_line.gamma0,
                              "gamma1": self.variance_line.gamma1,
                              "iterations": self.variance_line.iterations,
                              "floor": self.variance_line.floor},
            "mean_curve": self.mean_curve.to_dict(),
            "groups": [{"index": g.index, "count": g.count, "median_size": g.median_size,
                        "mean": g.mean, "var": g.var,
                        "null_prop": g.fit.null_prop if g.fit else None}
                       for g in self.groups],
        }


def fit_smoothed_null(size, z, n_groups: int = None, config: MleFitConfig = MleFitConfig(),
                      provider_ids=None, lam=None) -> SmoothedNullModel:
    """Group, fit group nulls, then smooth variance and mean over size."""
    size = np.asarray(size, dtype=float)
    if n_groups is None:
        n_groups = default_group_count(size.size)
    groups = fit_group_nulls(group_by_size(size, n_groups, provider_ids), z, config)
    vline = fit_variance_line(groups)
    return SmoothedNullModel(vline, fit_mean_curve(groups, vline, lam), tuple(groups))


def provider_nulls(model: SmoothedNullModel, size):
    """Per-provider null ``(mean, sd)`` arrays at the given sizes."""
    return model.mean(size), model.sd(size)


def stratified_nulls(size, z, n_strata: int, config: MleFitConfig = MleFitConfig(),
                     provider_ids=None):
    """Piecewise-constant nulls: one robust fit per size stratum.

    Returns
    -------
    mean, sd : ndarray
        Each provider's stratum null.
    groups : list of SizeGroup
    """
    size = np.asarray(size, dtype=float)
    groups = fit_group_nulls(group_by_size(size, n_strata, provider_ids), z, config)
    mean = np.empty(size.size)
    sd = np.empty(size.size)
    for g in groups:
        mean[g.members] = g.mean
        sd[g.members] = np.sqrt(g.var)
    return mean, sd, groups


def thresholds(null_mean, null_sd, rho=0.05):
    """Upper and lower critical values ``mean -/+ z_rho * sd``."""
    if not 0 < rho < 0.5:
        raise ProfilingError("rho must lie in (0, 0.5)")
    zr = norm.isf(rho)
    null_mean = np.asarray(null_mean, dtype=float)
    null_sd = np.asarray(null_sd, dtype=float)
    return null_mean + zr * null_sd, null_mean - zr * null_sd


def flag(z, null_mean, null_sd, rho=0.05, two_sided=False) -> np.ndarray:
    """Decisions ``"worse"``/``"better"``/``"none"`` with strict inequalities."""
    z = np.asarray(z, dtype=float)
    upper, lower = thresholds(null_mean, null_sd, rho)
    out = np.full(z.shape, "none", dtype=object)
    out[z > upper] = "worse"
    if two_sided:
        out[z < lower] = "better"
    return out


def flag_reports(provider_ids, z, null_mean, null_sd, rho=0.05, two_sided=False,
                 lam=1.0) -> list:
    """:func:`flag` packaged as one :class:`FlagReport` per provider."""
    z = np.asarray(z, dtype=float)
    null_mean = np.broadcast_to(np.asarray(null_mean, dtype=float), z.shape)
    null_sd = np.broadcast_to(np.asarray(null_sd, dtype=float), z.shape)
    upper, lower = thresholds(null_mean, null_sd, rho)
    dec = flag(z, null_mean, null_sd, rho, two_sided)
    return [FlagReport(pid, float(z[i]), float(null_mean[i]), float(null_sd[i]),
                       float(upper[i]), float(lower[i]), dec[i], rho, float(lam))
            for i, pid in enumerate(provider_ids)]
