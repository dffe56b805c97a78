"""Robust fitting of a single normal empirical null to a set of Z-scores.

The null N(mu, sigma**2) is estimated from the scores that fall in a central
window [A, B] only, via a truncated two-component mixture likelihood in which
a proportion ``p`` of all scores are null.  Scores outside the window enter
only through their count, so the fit is free of any assumption about the
distribution of outlying providers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import _kernels
from .core import DegenerateScaleError, NullParams, ProfilingError

BIWEIGHT_C = 4.685
MAD_CONSISTENCY = 0.6744897501960817  # Phi^{-1}(0.75)
MIN_SCORES = 20
MIN_INSIDE = 10

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


class BiweightEstimate(NamedTuple):
    location: float
    scale: float
    iterations: int
    degenerate: bool


def biweight_initial(z, c=BIWEIGHT_C, tol=1e-8, max_iter=50) -> BiweightEstimate:
    """Tukey biweight M-estimate of location with an iterated MAD scale.

    Starting from the median and ``MAD / 0.6745``, the location is updated by
    one reweighting step with weights ``(1 - u**2)**2`` (``|u| < 1``,
    ``u = (z - loc) / (c * scale)``) and the scale is recomputed as the median
    absolute residual about the new location divided by 0.6745.  The two
    updates alternate until both change by less than ``tol`` (relative).

    Parameters
    ----------
    z : array_like
        At least three scores.
    c : float
        Biweight tuning constant.

    Returns
    -------
    BiweightEstimate
        ``(location, scale, iterations, degenerate)``.  A zero MAD gives
        ``(median, 0.0, 0, True)``.
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.size < 3:
        raise ProfilingError("biweight estimation needs at least 3 scores")
    loc, scale, it, degenerate = _kernels.biweight(z, float(c), MAD_CONSISTENCY, float(tol),
                                                   int(max_iter))
    return BiweightEstimate(float(loc), float(scale), int(it), bool(degenerate))


@dataclass(frozen=True)
class MleFitConfig:
    zeta0: float = 1.64
    p_lo: float = 0.5
    p_hi: float = 1.0
    p_step: float = 0.001
    tol: float = 1e-8
    max_iter: int = 500
    # "profile" and "exhaustive" find the same grid maximiser; the latter
    # runs one inner optimisation per grid point and is kept as a reference.
    method: str = "profile"

    def __post_init__(self):
        if not self.zeta0 > 0:
            raise ProfilingError("zeta0 must be > 0")
        if not (0 < self.p_lo <= self.p_hi <= 1) or not self.p_step > 0:
            raise ProfilingError("invalid p grid")
        if self.method not in ("profile", "exhaustive"):
            raise ProfilingError(f"unknown method {self.method!r}")

    @property
    def p_grid(self) -> np.ndarray:
        k = int(round((self.p_hi - self.p_lo) / self.p_step))
        return np.round(self.p_lo + self.p_step * np.arange(k + 1), 12)


@dataclass(frozen=True)
class MleFitResult:
    null: NullParams
    interval: tuple
    n_inside: int
    n_outside: int
    loglik: float
    init: BiweightEstimate

    @property
    def mean(self) -> float:
        return self.null.mean

    @property
    def sd(self) -> float:
        return self.null.sd

    @property
    def null_prop(self) -> float:
        return self.null.null_prop


def _norm_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


def _window_mass(mu, sigma, a, b):
    """Q(mu, sigma) = Phi((b - mu)/sigma) - Phi((a - mu)/sigma)."""
    lo, hi = (a - mu) / sigma, (b - mu) / sigma
    if lo > 0:  # both in the upper tail: difference of survival functions
        return _norm_cdf(-lo) - _norm_cdf(-hi)
    return _norm_cdf(hi) - _norm_cdf(lo)


def _xlogy(n, x):
    if n == 0:
        return 0.0
    if x <= 0.0:
        return -math.inf
    return n * math.log(x)


def truncated_mixture_loglik(z, mu, sigma, p, interval) -> float:
    """Log of the truncated mixture likelihood of a set of scores.

    ``N0 log(theta) + N1 log(1 - theta) + sum_{z_i in [A, B]} log(phi(z_i) / Q)``
    with ``theta = p * Q(mu, sigma)``, ``Q`` the normal mass of ``[A, B]``
    and ``N0``/``N1`` the counts inside/outside the window.  Impossible
    configurations (e.g. ``theta = 1`` with scores outside) give ``-inf``.
    """
    if not sigma > 0:
        raise ProfilingError("sigma must be > 0")
    if not 0 < p <= 1:
        raise ProfilingError("p must lie in (0, 1]")
    z = np.asarray(z, dtype=float)
    a, b = interval
    inside = (z >= a) & (z <= b)
    z0 = z[inside]
    n0 = int(z0.size)
    n1 = int(z.size - n0)
    q = _window_mass(mu, sigma, a, b)
    theta = p * q
    sum_logphi = float(np.sum(-0.5 * ((z0 - mu) / sigma) ** 2)) - n0 * (
        _LOG_SQRT_2PI + math.log(sigma))
    out = _xlogy(n0, theta) + _xlogy(n1, 1.0 - theta)
    if n0:
        out += sum_logphi - _xlogy(n0, q)
    return out


class _WindowStats:
    """Sufficient statistics of the in-window scores."""

    def __init__(self, z, a, b):
        z0 = z[(z >= a) & (z <= b)]
        self.a, self.b = a, b
        self.n0 = int(z0.size)
        self.n1 = int(z.size - z0.size)
        self.n = int(z.size)
        # centre for numerical stability of the quadratic form
        self.c = float(z0.mean()) if self.n0 else 0.0
        d = z0 - self.c
        self.s1 = float(d.sum())
        self.s2 = float((d * d).sum())

    def base(self, mu, sigma):
        """sum log phi over the window (the p-free part, Q terms excluded)."""
        m = mu - self.c
        ss = self.s2 - 2.0 * m * self.s1 + self.n0 * m * m
        return -0.5 * ss / (sigma * sigma) - self.n0 * (_LOG_SQRT_2PI + math.log(sigma))

    def loglik(self, mu, sigma, p):
        q = _window_mass(mu, sigma, self.a, self.b)
        return (self.base(mu, sigma) + _xlogy(self.n0, p)
                + _xlogy(self.n1, 1.0 - p * q))


def _best_grid_p(stats, q, grid):
    """Index of the grid ``p`` maximising ``N0 log p + N1 log(1 - p q)``.

    The objective is concave in ``p`` so only the two grid neighbours of the
    continuous maximiser ``N0 / (N q)`` need checking.  Ties within 1e-10 go
    to the larger ``p``.
    """
    last = len(grid) - 1
    if stats.n1 == 0 or q <= 0.0:
        return last
    p_star = stats.n0 / (stats.n * q)
    if p_star >= grid[last]:
        return last
    if p_star <= grid[0]:
        return 0
    k = min(int((p_star - grid[0]) / (grid[1] - grid[0])), last - 1)
    hi = stats.n0 * math.log(grid[k + 1]) + _xlogy(stats.n1, 1.0 - grid[k + 1] * q)
    lo = stats.n0 * math.log(grid[k]) + _xlogy(stats.n1, 1.0 - grid[k] * q)
    return k + 1 if hi >= lo - 1e-10 else k


def simplex_minimize(fun, x0, step, xatol=1e-8, fatol=1e-8, max_iter=500):
    """Nelder-Mead minimisation of a function of two scalars.

    Standard coefficients (reflection 1, expansion 2, contraction 1/2,
    shrink 1/2) and the same stopping rule as ``scipy.optimize`` (all
    vertices within ``xatol`` of the best in every coordinate and within
    ``fatol`` in value).  Written for scalar arithmetic because the inner
    fits run many thousands of times per simulation.

    Returns
    -------
    x : tuple
    fx : float
    n_iter : int
    """
    x0, y0 = float(x0[0]), float(x0[1])
    pts = [(x0, y0), (x0 + step[0], y0), (x0, y0 + step[1])]
    vals = [fun(*p) for p in pts]
    it = 0
    for it in range(1, max_iter + 1):
        order = sorted(range(3), key=vals.__getitem__)
        pts = [pts[i] for i in order]
        vals = [vals[i] for i in order]
        (bx, by), f_best = pts[0], vals[0]
        if (max(abs(pts[1][0] - bx), abs(pts[2][0] - bx),
                abs(pts[1][1] - by), abs(pts[2][1] - by)) <= xatol
                and max(abs(vals[1] - f_best), abs(vals[2] - f_best)) <= fatol):
            break
        cx = 0.5 * (pts[0][0] + pts[1][0])
        cy = 0.5 * (pts[0][1] + pts[1][1])
        wx, wy = pts[2]
        rx, ry = 2.0 * cx - wx, 2.0 * cy - wy
        fr = fun(rx, ry)
        if fr < vals[0]:
            ex, ey = 3.0 * cx - 2.0 * wx, 3.0 * cy - 2.0 * wy
            fe = fun(ex, ey)
            pts[2], vals[2] = ((ex, ey), fe) if fe < fr else ((rx, ry), fr)
            continue
        if fr < vals[1]:
            pts[2], vals[2] = (rx, ry), fr
            continue
        if fr < vals[2]:
            kx, ky = 1.5 * cx - 0.5 * wx, 1.5 * cy - 0.5 * wy  # outside
            fk = fun(kx, ky)
            accept = fk <= fr
        else:
            kx, ky = 0.5 * (cx + wx), 0.5 * (cy + wy)  # inside
            fk = fun(kx, ky)
            accept = fk < vals[2]
        if accept:
            pts[2], vals[2] = (kx, ky), fk
            continue
        for j in (1, 2):
            pts[j] = (bx + 0.5 * (pts[j][0] - bx), by + 0.5 * (pts[j][1] - by))
            vals[j] = fun(*pts[j])
    best = min(range(3), key=vals.__getitem__)
    return pts[best], vals[best], it


def _neg(f):
    def g(m, log_s):
        v = f(m, math.exp(log_s))
        return math.inf if v == -math.inf else -v
    return g


def _nelder_mead(fun, x0, config, scale):
    x, fx, _ = simplex_minimize(fun, x0, (0.05 * scale, 0.05), config.tol,
                                config.tol, config.max_iter)
    return x, -fx


def mle_fit(z, config: MleFitConfig = MleFitConfig(), interval=None) -> MleFitResult:
    """Fit ``(mu_M, sigma_M, p_M)`` by profile likelihood over a grid of ``p``.

    The window is ``[A, B] = mu0 -/+ zeta0 * sigma0`` around the biweight
    initial estimates.  For every grid value of ``p`` the likelihood is
    maximised over ``(mu, log sigma)`` by Nelder-Mead, and the grid point with
    the largest profile likelihood is returned (ties -> larger ``p``).

    With ``config.method == "profile"`` (default) the grid is not swept.
    For fixed ``(mu, sigma)`` the best grid ``p`` is available in closed form
    because the likelihood is concave in ``p``; the envelope over ``p`` is
    maximised once, and fixed-``p`` fits then climb along the grid from the
    envelope's ``p`` until the profile likelihood stops increasing.  This
    runs compiled and reaches the same grid maximiser as the full sweep.

    Parameters
    ----------
    z : array_like
        At least 20 finite scores.
    config : MleFitConfig
    interval : (float, float), optional
        Use this window instead of the biweight-based one.

    Returns
    -------
    MleFitResult

    Raises
    ------
    DegenerateScaleError
        If the biweight scale is zero (e.g. all scores identical).
    ProfilingError
        Too few scores overall or inside the window.
    """
    z = np.asarray(z, dtype=float).ravel()
    if z.size < MIN_SCORES:
        raise ProfilingError(f"need at least {MIN_SCORES} scores, got {z.size}")
    if not np.all(np.isfinite(z)):
        raise ProfilingError("scores must be finite")
    init = biweight_initial(z)
    if init.degenerate:
        raise DegenerateScaleError("degenerate scale: biweight scale is zero")
    if interval is None:
        a = init.location - config.zeta0 * init.scale
        b = init.location + config.zeta0 * init.scale
    else:
        a, b = map(float, interval)
        if not a < b:
            raise ProfilingError("interval must satisfy A < B")
    stats = _WindowStats(z, a, b)
    if stats.n0 < MIN_INSIDE:
        raise ProfilingError(f"only {stats.n0} scores inside [A, B]; need {MIN_INSIDE}")

    grid = config.p_grid.tolist()
    x0 = np.array([init.location, math.log(init.scale)])

    if config.method == "exhaustive":
        best = (-math.inf, None, None)
        for k, p in enumerate(grid):
            x, val = _nelder_mead(_neg(lambda m, s, p=p: stats.loglik(m, s, p)),
                                  x0, config, init.scale)
            if val >= best[0] - 1e-10:
                best = (val, k, x)
        loglik, k_best, x = best
    else:
        # Simplex on the envelope max_p loglik(mu, sigma, p), then fixed-p
        # fits at neighbouring grid points: the envelope is kinked where the
        # best p switches and the simplex can stall next to the maximiser.
        st = np.array([a, b, stats.n0, stats.n1, stats.n, stats.c, stats.s1, stats.s2])
        loglik, k_best, m, log_s = _kernels.profile_fit(
            st, np.asarray(grid), float(x0[0]), float(x0[1]), init.scale, config.tol,
            config.max_iter)
        x = (m, log_s)

    sigma = math.exp(x[1])
    return MleFitResult(
        null=NullParams(float(x[0]), sigma, float(grid[k_best])),
        interval=(a, b), n_inside=stats.n0, n_outside=stats.n1,
        loglik=float(loglik), init=init)
