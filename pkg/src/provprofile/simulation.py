"""Seeded scenario generators and a replication engine.

Three designs are supported:

* ``linear_equal_n`` -- N providers of a common size, provider 1's effect
  fixed on a grid, the rest drawn from N(0, sigma_alpha**2);
* ``linear_outliers`` -- as above with sizes uniform on an integer range and
  a fraction of outlying providers at +/- k * sigma_alpha;
* ``survival_smr`` -- exponential survival with provider frailty and
  uniform censoring, scored through the SMR pipeline.

Replication ``r`` of design cell ``c`` draws from
``SeedSequence([seed, r, c])`` so replications can run in any order.
Within a replication the provider-1 effect grid shares one draw of all
other randomness (common random numbers): the effect enters additively, so
``gen(..., alpha1=a)`` equals ``gen(..., alpha1=0)`` with provider 1's
outcomes shifted by ``a``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import numpy as np
from scipy.stats import norm

from .core import LinearDataset, ProfilingError, SurvivalDataset
from .io import write_csv
from .lambda_policy import lambda_decisions
from .linear import (adjust_outcomes, components_from_summary, fit_fixed_effects_beta,
                     provider_summary, z_scores_from_means)
from .nullfit import MleFitConfig
from .smoothing import fit_smoothed_null, stratified_nulls
from .survival import smr_pipeline

KINDS = ("linear_equal_n", "linear_outliers", "survival_smr")
LINEAR_METHODS = ("FE", "RE", "FERE", "EN_stratified", "EN_smoothed", "EN_oracle")
SURVIVAL_METHODS = ("FE", "EN_stratified", "EN_lambda")


def _default_grid():
    return tuple(float(a) for a in np.round(np.arange(0, 3.5 + 1e-9, 0.25), 10))


@dataclass(frozen=True)
class Scenario:
    kind: str
    n_providers: int
    # equal-n: the common sizes; outliers: provider-1 sizes (one cell each)
    cells: tuple = ()
    size_range: tuple = (10, 150)
    alpha1_grid: tuple = field(default_factory=_default_grid)
    mu: float = 0.0
    beta: tuple = ()
    sigma_alpha: float = 1.0
    sigma_w: float = 4.0
    outlier_frac: float = 0.0
    outlier_effect: float = 4.0  # in units of sigma_alpha
    hazard: float = 0.1
    censor: tuple = (10.0, 30.0)
    replications: int = 1000
    seed: int = 1
    rho: float = 0.05
    zeta0: float = 1.64
    n_groups: Optional[int] = None
    n_strata: int = 1
    report_strata: int = 3
    lambdas: tuple = (0.0, 0.5, 0.75, 1.0)
    min_expected: float = 3.0
    methods: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProfilingError(f"unknown scenario kind {self.kind!r}")
        if self.n_providers < 2 or self.replications < 1:
            raise ProfilingError("need >= 2 providers and >= 1 replication")
        if not 0 <= self.outlier_frac < 0.5:
            raise ProfilingError("outlier fraction must lie in [0, 0.5)")
        allowed = SURVIVAL_METHODS if self.kind == "survival_smr" else LINEAR_METHODS
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ProfilingError(f"methods {bad} not available for {self.kind}")

    @property
    def mle_config(self) -> MleFitConfig:
        return MleFitConfig(zeta0=self.zeta0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ProfilingError(f"unknown scenario keys {sorted(unknown)}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**d)


PRESETS = {
    "fig3": Scenario("linear_equal_n", 200, cells=(10, 25, 50, 100),
                     methods=("FE", "RE", "FERE", "EN_stratified")),
    "fig4": Scenario("linear_outliers", 3000, cells=(25, 50, 100, 125),
                     outlier_frac=0.05,
                     methods=("FE", "RE", "FERE", "EN_smoothed", "EN_oracle")),
    "fig5": Scenario("survival_smr", 2000, size_range=(10, 200), sigma_alpha=0.2,
                     beta=(1.0, -1.0), replications=500, n_groups=20,
                     methods=("FE", "EN_stratified", "EN_lambda"), n_strata=3),
}
PRESETS["fig5c"] = PRESETS["fig5"]


def preset(name: str, **overrides) -> Scenario:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ProfilingError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return Scenario.from_dict({**base.to_dict(), **overrides})


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _provider_labels(N):
    width = max(4, len(str(N)))
    return [f"p{i + 1:0{width}d}" for i in range(N)]


def _linear_dataset(sizes, effects, scenario: Scenario, rng) -> LinearDataset:
    sizes = np.asarray(sizes, dtype=int)
    prov = np.repeat(np.arange(sizes.size), sizes)
    p = len(scenario.beta)
    X = rng.standard_normal((prov.size, p)) if p else None
    y = scenario.mu + effects[prov] + scenario.sigma_w * rng.standard_normal(prov.size)
    if p:
        y = y + X @ np.asarray(scenario.beta)
    labels = np.array(_provider_labels(sizes.size), dtype=object)
    return LinearDataset.from_arrays(labels[prov], y, X)


def gen_linear_equal_n(scenario: Scenario, n: int, alpha1: float = 0.0, seed=None):
    """Equal-size providers; provider 1 (``p0001``) has effect ``alpha1``.

    Returns
    -------
    dataset : LinearDataset
    effects : ndarray
        True provider effects.
    """
    rng = _rng(seed)
    N = scenario.n_providers
    effects = np.r_[0.0, scenario.sigma_alpha * rng.standard_normal(N - 1)]
    ds = _linear_dataset(np.full(N, int(n)), effects, scenario, rng)
    effects[0] = alpha1
    if alpha1:
        ds = ds.with_outcomes(ds.y + alpha1 * (ds.provider == 0))
    return ds, effects


def gen_linear_outliers(scenario: Scenario, n1: int, alpha1: float = 0.0, seed=None):
    """Random sizes plus outliers at ``+/- outlier_effect * sigma_alpha``.

    ``round(outlier_frac * N)`` providers other than provider 1 become
    outliers, the first half positive and the rest negative.
    """
    rng = _rng(seed)
    N = scenario.n_providers
    lo, hi = scenario.size_range
    sizes = np.r_[int(n1), rng.integers(lo, hi + 1, N - 1)]
    effects = np.r_[0.0, scenario.sigma_alpha * rng.standard_normal(N - 1)]
    k = int(round(scenario.outlier_frac * N))
    if k:
        out = 1 + rng.choice(N - 1, size=k, replace=False)
        mag = scenario.outlier_effect * scenario.sigma_alpha
        effects[out[: (k + 1) // 2]] = mag
        effects[out[(k + 1) // 2:]] = -mag
    ds = _linear_dataset(sizes, effects, scenario, rng)
    effects[0] = alpha1
    if alpha1:
        ds = ds.with_outcomes(ds.y + alpha1 * (ds.provider == 0))
    return ds, effects


def survival_sizes(scenario: Scenario) -> np.ndarray:
    """Provider sizes, drawn once from the base seed alone."""
    rng = np.random.default_rng(np.random.SeedSequence([scenario.seed]))
    lo, hi = scenario.size_range
    return rng.integers(lo, hi + 1, scenario.n_providers)


def gen_survival(scenario: Scenario, seed=None, sizes=None):
    """Exponential survival with provider frailty and uniform censoring.

    Hazard ``hazard * exp(alpha_i + X_ij' beta)`` with ``alpha_i ~ N(0,
    sigma_alpha**2)`` and independent standard normal covariates; censoring
    ``C ~ Uniform(censor)``.

    Returns
    -------
    dataset : SurvivalDataset
    effects : ndarray
    """
    rng = _rng(seed)
    sizes = survival_sizes(scenario) if sizes is None else np.asarray(sizes, dtype=int)
    N = sizes.size
    prov = np.repeat(np.arange(N), sizes)
    effects = scenario.sigma_alpha * rng.standard_normal(N)
    p = len(scenario.beta)
    X = rng.standard_normal((prov.size, p))
    rate = scenario.hazard * np.exp(effects[prov] + X @ np.asarray(scenario.beta, dtype=float))
    T = rng.exponential(1.0 / rate)
    C = rng.uniform(*scenario.censor, size=prov.size)
    labels = np.array(_provider_labels(N), dtype=object)
    ds = SurvivalDataset.from_arrays(labels[prov], np.minimum(T, C),
                                     (T <= C).astype(np.int8), X)
    return ds, effects


@dataclass(frozen=True)
class SignalCurve:
    method: str
    cell: int
    alpha1: np.ndarray
    prob: np.ndarray
    se: np.ndarray
    replications: np.ndarray


@dataclass(frozen=True)
class StratumRate:
    method: str
    lam: Optional[float]
    stratum: int
    rate: float
    se: float
    replications: int


@dataclass
class SimulationResult:
    scenario: Scenario
    curves: list = field(default_factory=list)
    strata_rates: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)

    def curve(self, method, cell) -> SignalCurve:
        for c in self.curves:
            if c.method == method and c.cell == cell:
                return c
        raise KeyError((method, cell))

    def rate(self, method, stratum, lam=None) -> StratumRate:
        for s in self.strata_rates:
            if s.method == method and s.stratum == stratum and s.lam == lam:
                return s
        raise KeyError((method, stratum, lam))

    def write_curves(self, path):
        write_csv(path, ["method", "alpha1", "prob", "se", "n"],
                  ([c.method, float(a), float(p), float(e), c.cell]
                   for c in self.curves for a, p, e in zip(c.alpha1, c.prob, c.se)))

    def write_strata_rates(self, path):
        write_csv(path, ["method", "lambda", "stratum", "rate", "se"],
                  ([s.method, s.lam, s.stratum, s.rate, s.se] for s in self.strata_rates))


def _binomial_se(p, n):
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.sqrt(p * (1 - p) / n)


def _scores_at(ybar, n, ssw, alpha1):
    yb = ybar.copy()
    yb[0] += alpha1
    comps = components_from_summary(yb, n, ssw)
    z_fe, z_re, z_fere, _ = z_scores_from_means(yb, n, comps)
    return yb, z_fe, z_re, z_fere


def _linear_replication(scenario: Scenario, cell, rep, cell_index, methods):
    """Provider-1 signal indicators, shape (len(methods), len(grid)); NaN = failed."""
    ss = np.random.SeedSequence([scenario.seed, rep, cell_index])
    gen = gen_linear_equal_n if scenario.kind == "linear_equal_n" else gen_linear_outliers
    ds, _ = gen(scenario, cell, 0.0, np.random.default_rng(ss))
    if ds.n_covariates:
        beta, _ = fit_fixed_effects_beta(ds)
        ds = adjust_outcomes(ds, beta)
    ybar, n, ssw = provider_summary(ds)
    n = n.astype(float)
    zr = norm.isf(scenario.rho)
    out = np.full((len(methods), len(scenario.alpha1_grid)), np.nan)
    for a_i, a1 in enumerate(scenario.alpha1_grid):
        yb, z_fe, z_re, z_fere = _scores_at(ybar, n, ssw, a1)
        for m_i, m in enumerate(methods):
            try:
                if m == "FE":
                    hit = z_fe[0] > zr
                elif m == "RE":
                    hit = z_re[0] > zr
                elif m == "FERE":
                    hit = z_fere[0] > zr
                elif m == "EN_oracle":
                    s2a, s2w = scenario.sigma_alpha ** 2, scenario.sigma_w ** 2
                    z_true = math.sqrt(n[0]) * (yb[0] - scenario.mu) / scenario.sigma_w
                    hit = z_true > zr * math.sqrt(1 + n[0] * s2a / s2w)
                elif m == "EN_stratified":
                    mean, sd, _ = stratified_nulls(n, z_fe, scenario.n_strata,
                                                   scenario.mle_config)
                    hit = z_fe[0] > mean[0] + zr * sd[0]
                else:  # EN_smoothed
                    model = fit_smoothed_null(n, z_fe, scenario.n_groups, scenario.mle_config)
                    hit = z_fe[0] > model.threshold(n[0], scenario.rho)
            except ProfilingError:
                continue
            out[m_i, a_i] = float(hit)
    return out


def _tertile_labels(size, k):
    order = np.argsort(size, kind="stable")
    labels = np.empty(size.size, dtype=int)
    for g, idx in enumerate(np.array_split(order, k)):
        labels[idx] = g
    return labels


def survival_replication(scenario: Scenario, rep: int, sizes=None):
    """One survival replication: scores, sizes and the fitted smoothed null.

    Size is the fixed number of patients.  Follow-up time depends on the
    provider effect, so grouping on it would sort providers by effect.
    """
    ss = np.random.SeedSequence([scenario.seed, rep, 0])
    ds, _ = gen_survival(scenario, np.random.default_rng(ss), sizes)
    res = smr_pipeline(ds, scenario.min_expected)
    z, size = res.z, res.patients.astype(float)
    model = fit_smoothed_null(size, z, scenario.n_groups, scenario.mle_config)
    return res, z, size, model


def _survival_rows(scenario: Scenario, methods):
    rows = [("FE", None)] if "FE" in methods else []
    if "EN_stratified" in methods:
        rows.append(("EN_stratified", None))
    if "EN_lambda" in methods:
        rows += [("EN_lambda", float(l)) for l in scenario.lambdas]
    return rows


def _survival_rates(scenario: Scenario, rep, sizes, rows):
    """Per-stratum flag rates, shape (len(rows), report_strata)."""
    _, z, size, model = survival_replication(scenario, rep, sizes)
    labels = _tertile_labels(size, scenario.report_strata)
    zr = norm.isf(scenario.rho)
    mean, sd = model.mean(size), model.sd(size)
    out = np.empty((len(rows), scenario.report_strata))
    for r_i, (m, lam) in enumerate(rows):
        if m == "FE":
            flags = z > zr
        elif m == "EN_stratified":
            s_mean, s_sd, _ = stratified_nulls(size, z, scenario.n_strata, scenario.mle_config)
            flags = z > s_mean + zr * s_sd
        else:
            flags = lambda_decisions(z, mean, sd, lam, scenario.rho)
        out[r_i] = np.bincount(labels, weights=flags, minlength=scenario.report_strata) \
            / np.bincount(labels, minlength=scenario.report_strata)
    return out


def _survival_task(args):
    scenario, rep, sizes, rows = args
    try:
        return _survival_rates(scenario, rep, sizes, rows)
    except ProfilingError:
        return None


def _linear_task(args):
    try:
        return _linear_replication(*args)
    except ProfilingError:
        return None


def _map(fn, tasks, jobs):
    """Ordered map, in worker processes when ``jobs > 1``."""
    if jobs <= 1:
        yield from map(fn, tasks)
        return
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield from pool.map(fn, tasks, chunksize=8)


def run_replications(scenario: Scenario, methods=None, progress=None,
                     jobs: int = 1) -> SimulationResult:
    """Run every replication of ``scenario`` and aggregate.

    Linear designs give one :class:`SignalCurve` per (method, cell): the
    proportion of replications in which provider 1 is flagged as worse,
    with binomial standard errors.  The survival design gives per-stratum
    flag rates averaged over replications (SE = sd / sqrt(R)).  Failed
    replications are counted in ``failures`` and left out of the averages.
    Results do not depend on ``jobs``.
    """
    methods = tuple(methods or scenario.methods)
    if not methods:
        raise ProfilingError("no methods requested")
    scenario = replace(scenario, methods=methods)
    result = SimulationResult(scenario)
    R = scenario.replications
    if scenario.kind == "survival_smr":
        sizes = survival_sizes(scenario)
        rows = _survival_rows(scenario, methods)
        rates = np.full((R, len(rows), scenario.report_strata), np.nan)
        tasks = ((scenario, rep, sizes, rows) for rep in range(R))
        for rep, out in enumerate(_map(_survival_task, tasks, jobs)):
            if out is None:
                result.failures["replication"] = result.failures.get("replication", 0) + 1
            else:
                rates[rep] = out
            if progress:
                progress(rep)
        good = rates[~np.isnan(rates[:, 0, 0])]
        for r_i, (m, lam) in enumerate(rows):
            for s in range(scenario.report_strata):
                col = good[:, r_i, s]
                mean = float(col.mean()) if col.size else math.nan
                se = float(col.std(ddof=1) / math.sqrt(col.size)) if col.size > 1 else math.nan
                result.strata_rates.append(StratumRate(m, lam, s, mean, se, int(col.size)))
        return result

    grid = np.array(scenario.alpha1_grid)
    for c_i, cell in enumerate(scenario.cells):
        hits = np.zeros((len(methods), grid.size))
        trials = np.zeros((len(methods), grid.size))
        tasks = ((scenario, cell, rep, c_i, methods) for rep in range(R))
        for rep, ind in enumerate(_map(_linear_task, tasks, jobs)):
            if ind is None:
                result.failures[cell] = result.failures.get(cell, 0) + len(methods) * grid.size
                continue
            ok = ~np.isnan(ind)
            hits += np.where(ok, ind, 0.0)
            trials += ok
            fails = int((~ok).sum())
            if fails:
                result.failures[cell] = result.failures.get(cell, 0) + fails
            if progress:
                progress(rep)
        prob = hits / np.maximum(trials, 1)
        se = _binomial_se(prob, np.maximum(trials, 1))
        for m_i, m in enumerate(methods):
            result.curves.append(SignalCurve(m, int(cell), grid.copy(), prob[m_i], se[m_i],
                                             trials[m_i].astype(int)))
    return result


def load_scenario(path) -> Scenario:
    """Scenario from a JSON document or ``key=value`` lines (JSON values)."""
    text = open(path, encoding="utf-8").read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError:
        d = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ProfilingError(f"bad config line {line!r}")
            val = val.strip()
            try:
                d[key.strip()] = json.loads(val)
            except json.JSONDecodeError:
                d[key.strip()] = val
    if "preset" in d:
        name = d.pop("preset")
        return preset(name, **{k: tuple(v) if isinstance(v, list) else v
                               for k, v in d.items()})
    return Scenario.from_dict(d)
