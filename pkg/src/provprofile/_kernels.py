"""Compiled inner loop of the profile-likelihood null fit.

Mirrors ``_WindowStats``, ``_best_grid_p`` and ``simplex_minimize`` in
:mod:`provprofile.nullfit` operation for operation.  The pure-Python
versions drive the exhaustive grid method, which serves as the reference
that the tests compare against.
"""
import math

import numpy as np
from numba import njit

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)
_INF = math.inf


@njit(cache=True)
def _norm_cdf(x):
    return 0.5 * math.erfc(-x / _SQRT2)


@njit(cache=True)
def window_mass(mu, sigma, a, b):
    lo = (a - mu) / sigma
    hi = (b - mu) / sigma
    if lo > 0:
        return _norm_cdf(-lo) - _norm_cdf(-hi)
    return _norm_cdf(hi) - _norm_cdf(lo)


@njit(cache=True)
def _xlogy(n, x):
    if n == 0:
        return 0.0
    if x <= 0.0:
        return -_INF
    return n * math.log(x)


@njit(cache=True)
def _base(st, mu, sigma):
    # st = (a, b, n0, n1, n, c, s1, s2)
    n0 = st[2]
    m = mu - st[5]
    ss = st[7] - 2.0 * m * st[6] + n0 * m * m
    return -0.5 * ss / (sigma * sigma) - n0 * (_LOG_SQRT_2PI + math.log(sigma))


@njit(cache=True)
def best_grid_p(st, q, grid):
    n0, n1, n = st[2], st[3], st[4]
    last = grid.size - 1
    if n1 == 0 or q <= 0.0:
        return last
    p_star = n0 / (n * q)
    if p_star >= grid[last]:
        return last
    if p_star <= grid[0]:
        return 0
    k = min(int((p_star - grid[0]) / (grid[1] - grid[0])), last - 1)
    hi = n0 * math.log(grid[k + 1]) + _xlogy(n1, 1.0 - grid[k + 1] * q)
    lo = n0 * math.log(grid[k]) + _xlogy(n1, 1.0 - grid[k] * q)
    return k + 1 if hi >= lo - 1e-10 else k


@njit(cache=True)
def _neg_obj(st, grid, k, m, log_s):
    """Negative log-likelihood; ``k < 0`` selects the envelope over the grid."""
    s = math.exp(log_s)
    q = window_mass(m, s, st[0], st[1])
    if k < 0:
        p = grid[best_grid_p(st, q, grid)]
    else:
        p = grid[k]
    v = _base(st, m, s) + _xlogy(st[2], p) + _xlogy(st[3], 1.0 - p * q)
    if v == -_INF:
        return _INF
    return -v


@njit(cache=True)
def simplex(st, grid, k, x0, y0, step0, step1, xatol, fatol, max_iter):
    px = np.array([x0, x0 + step0, x0])
    py = np.array([y0, y0, y0 + step1])
    fv = np.empty(3)
    for j in range(3):
        fv[j] = _neg_obj(st, grid, k, px[j], py[j])
    it = 0
    for it in range(1, max_iter + 1):
        # stable sort of three vertices by value
        order = [0, 1, 2]
        for i in range(1, 3):
            j = i
            while j > 0 and fv[order[j]] < fv[order[j - 1]]:
                order[j], order[j - 1] = order[j - 1], order[j]
                j -= 1
        px = np.array([px[order[0]], px[order[1]], px[order[2]]])
        py = np.array([py[order[0]], py[order[1]], py[order[2]]])
        fv = np.array([fv[order[0]], fv[order[1]], fv[order[2]]])
        bx, by, fb = px[0], py[0], fv[0]
        if (max(abs(px[1] - bx), abs(px[2] - bx), abs(py[1] - by), abs(py[2] - by)) <= xatol
                and max(abs(fv[1] - fb), abs(fv[2] - fb)) <= fatol):
            break
        cx = 0.5 * (px[0] + px[1])
        cy = 0.5 * (py[0] + py[1])
        wx, wy = px[2], py[2]
        rx, ry = 2.0 * cx - wx, 2.0 * cy - wy
        fr = _neg_obj(st, grid, k, rx, ry)
        if fr < fv[0]:
            ex, ey = 3.0 * cx - 2.0 * wx, 3.0 * cy - 2.0 * wy
            fe = _neg_obj(st, grid, k, ex, ey)
            if fe < fr:
                px[2], py[2], fv[2] = ex, ey, fe
            else:
                px[2], py[2], fv[2] = rx, ry, fr
            continue
        if fr < fv[1]:
            px[2], py[2], fv[2] = rx, ry, fr
            continue
        if fr < fv[2]:
            kx, ky = 1.5 * cx - 0.5 * wx, 1.5 * cy - 0.5 * wy
            fk = _neg_obj(st, grid, k, kx, ky)
            accept = fk <= fr
        else:
            kx, ky = 0.5 * (cx + wx), 0.5 * (cy + wy)
            fk = _neg_obj(st, grid, k, kx, ky)
            accept = fk < fv[2]
        if accept:
            px[2], py[2], fv[2] = kx, ky, fk
            continue
        for j in range(1, 3):
            px[j] = bx + 0.5 * (px[j] - bx)
            py[j] = by + 0.5 * (py[j] - by)
            fv[j] = _neg_obj(st, grid, k, px[j], py[j])
    b = 0
    for j in range(1, 3):
        if fv[j] < fv[b]:
            b = j
    return px[b], py[b], fv[b], it


@njit(cache=True)
def profile_fit(st, grid, x0, y0, scale, tol, max_iter):
    """Envelope simplex, then a hill-climb over neighbouring grid ``p``.

    Returns ``(loglik, k, mu, log_sigma)``.
    """
    ex, ey, _, _ = simplex(st, grid, -1, x0, y0, 0.05 * scale, 0.05, tol, tol, max_iter)
    k = best_grid_p(st, window_mass(ex, math.exp(ey), st[0], st[1]), grid)
    K = grid.size
    ll = np.full(K, -_INF)
    mx = np.zeros(K)
    my = np.zeros(K)
    done = np.zeros(K, dtype=np.bool_)

    fx, fy, fv, _ = simplex(st, grid, k, ex, ey, 0.01 * scale, 0.01, tol, tol, max_iter)
    ll[k], mx[k], my[k], done[k] = -fv, fx, fy, True
    for step in (1, -1):
        j = k
        while 0 <= j + step < K:
            i = j + step
            if not done[i]:
                fx, fy, fv, _ = simplex(st, grid, i, ex, ey, 0.01 * scale, 0.01, tol, tol,
                                        max_iter)
                ll[i], mx[i], my[i], done[i] = -fv, fx, fy, True
            if ll[i] < ll[j] - 1e-10:
                break
            j = i
    top = -_INF
    for i in range(K):
        if done[i] and ll[i] > top:
            top = ll[i]
    best = -1
    for i in range(K):
        if done[i] and ll[i] >= top - 1e-10:
            best = i
    return ll[best], best, mx[best], my[best]


@njit(cache=True)
def biweight(z, c, mad_const, tol, max_iter):
    """Returns ``(location, scale, iterations, degenerate)``."""
    loc = np.median(z)
    scale = np.median(np.abs(z - loc)) / mad_const
    if scale <= 0.0:
        return loc, 0.0, 0, True
    it = 0
    for it in range(1, max_iter + 1):
        sw = 0.0
        swz = 0.0
        for v in z:
            u = (v - loc) / (c * scale)
            if abs(u) < 1.0:
                w = (1.0 - u * u) ** 2
                sw += w
                swz += w * v
        new_loc = swz / sw
        new_scale = np.median(np.abs(z - new_loc)) / mad_const
        if new_scale <= 0.0:
            return new_loc, 0.0, it, True
        d_loc = abs(new_loc - loc) / max(scale, abs(loc))
        d_scale = abs(new_scale - scale) / scale
        loc, scale = new_loc, new_scale
        if d_loc < tol and d_scale < tol:
            break
    return loc, scale, it, False
