"""Shared data model: patient records, validated datasets, scores and nulls.

Records are light dataclasses; validated datasets hold dense numpy arrays
(read-only) so the numerical modules never touch per-record Python objects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np


class ProfilingError(ValueError):
    """Base class for errors raised by the profiling toolkit."""


class DatasetError(ProfilingError):
    """Input records violate the dataset contract."""


class DegenerateScaleError(ProfilingError):
    """A robust scale estimate collapsed to zero."""


class ConvergenceError(ProfilingError):
    """An iterative fit did not converge."""


@dataclass(frozen=True)
class PatientRecord:
    provider_id: str
    outcome: float
    covariates: tuple = ()


@dataclass(frozen=True)
class SurvivalRecord:
    provider_id: str
    time: float
    status: int  # 1 = event, 0 = censored
    covariates: tuple = ()


@dataclass(frozen=True)
class ProviderScore:
    provider_id: str
    size: float
    z_fe: float
    observed: Optional[float] = None
    expected: Optional[float] = None

    def __post_init__(self):
        if not self.size > 0:
            raise DatasetError(f"provider {self.provider_id!r}: size must be > 0")
        if not np.isfinite(self.z_fe):
            raise DatasetError(f"provider {self.provider_id!r}: z_fe must be finite")


@dataclass(frozen=True)
class NullParams:
    """Normal reference distribution N(mean, sd**2) with null proportion."""

    mean: float
    sd: float
    null_prop: float = 1.0

    def __post_init__(self):
        if not self.sd > 0:
            raise ProfilingError("null sd must be > 0")
        if not 0.0 <= self.null_prop <= 1.0:
            raise ProfilingError("null_prop must lie in [0, 1]")


@dataclass(frozen=True)
class LinearVarianceComponents:
    mu: float
    sigma_alpha: float
    sigma_w: float
    beta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if not self.sigma_w > 0:
            raise ProfilingError("sigma_w must be > 0")
        if self.sigma_alpha < 0:
            raise ProfilingError("sigma_alpha must be >= 0")


@dataclass(frozen=True)
class FlagReport:
    provider_id: str
    z_fe: float
    null_mean: float
    null_sd_effective: float
    threshold_upper: float
    threshold_lower: float
    decision: str  # "worse", "better" or "none"
    rho: float
    lam: float


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def _index_providers(provider_col):
    """Dense indices by first appearance."""
    col = np.asarray(provider_col, dtype=object)
    if col.size == 0:
        return (), np.empty(0, dtype=np.intp)
    uniq, first, inv = np.unique(col.astype(str), return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    ids = tuple(col[first[order]].tolist())
    return ids, rank[inv.ravel()].astype(np.intp)


def _covariate_matrix(covs, n):
    if covs is None:
        return np.zeros((n, 0))
    X = np.asarray(covs, dtype=float)
    if X.ndim == 1:
        X = X.reshape(n, -1) if n else X.reshape(0, 0)
    if X.shape[0] != n:
        raise DatasetError("covariate rows do not match the number of records")
    if not np.all(np.isfinite(X)):
        raise DatasetError("covariates must be finite (missing values are not imputed)")
    return X


class _Dataset:
    provider_ids: tuple
    provider: np.ndarray
    X: np.ndarray

    @property
    def n_providers(self) -> int:
        return len(self.provider_ids)

    @property
    def n_records(self) -> int:
        return len(self.provider)

    @property
    def n_covariates(self) -> int:
        return self.X.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.provider, minlength=self.n_providers)

    @property
    def index_map(self) -> dict:
        return {pid: i for i, pid in enumerate(self.provider_ids)}


@dataclass(frozen=True, eq=False)
class LinearDataset(_Dataset):
    """Continuous outcomes ``y`` with covariates ``X`` grouped by provider."""

    provider_ids: tuple
    provider: np.ndarray
    y: np.ndarray
    X: np.ndarray

    @classmethod
    def from_arrays(cls, provider_col, y, X=None) -> "LinearDataset":
        provider_col = list(provider_col)
        n = len(provider_col)
        if n == 0:
            raise DatasetError("empty dataset")
        y = np.asarray(y, dtype=float)
        if y.shape != (n,):
            raise DatasetError("outcome length does not match provider column")
        if not np.all(np.isfinite(y)):
            raise DatasetError("outcomes must be finite")
        X = _covariate_matrix(X, n)
        ids, idx = _index_providers(provider_col)
        return cls(ids, _frozen(idx, np.intp), _frozen(y), _frozen(X))

    def with_outcomes(self, y) -> "LinearDataset":
        return LinearDataset(self.provider_ids, self.provider, _frozen(y), self.X)


@dataclass(frozen=True, eq=False)
class SurvivalDataset(_Dataset):
    """Right-censored follow-up times grouped by provider."""

    provider_ids: tuple
    provider: np.ndarray
    time: np.ndarray
    status: np.ndarray
    X: np.ndarray

    @classmethod
    def from_arrays(cls, provider_col, time, status, X=None) -> "SurvivalDataset":
        provider_col = list(provider_col)
        n = len(provider_col)
        if n == 0:
            raise DatasetError("empty dataset")
        time = np.asarray(time, dtype=float)
        status = np.asarray(status)
        if time.shape != (n,) or status.shape != (n,):
            raise DatasetError("time/status length does not match provider column")
        if not np.all(np.isfinite(time)) or np.any(time <= 0):
            raise DatasetError("follow-up times must be finite and > 0")
        if not np.all(np.isin(status, (0, 1))):
            raise DatasetError("status must be 0 (censored) or 1 (event)")
        X = _covariate_matrix(X, n)
        ids, idx = _index_providers(provider_col)
        return cls(ids, _frozen(idx, np.intp), _frozen(time),
                   _frozen(status, np.int8), _frozen(X))

    @property
    def patient_time(self) -> np.ndarray:
        """Total follow-up per provider."""
        return np.bincount(self.provider, weights=self.time, minlength=self.n_providers)

    @property
    def observed(self) -> np.ndarray:
        return np.bincount(self.provider, weights=self.status, minlength=self.n_providers)


Records = Sequence[Union[PatientRecord, SurvivalRecord]]


def validate_dataset(records: Records):
    """Validate a list of records and pack them into a dataset.

    Parameters
    ----------
    records : sequence of PatientRecord or SurvivalRecord
        All records must share one type and one covariate dimension.

    Returns
    -------
    LinearDataset or SurvivalDataset
        Providers are indexed ``0..N-1`` in order of first appearance;
        ``dataset.sizes`` holds the per-provider record counts.
    """
    records = list(records)
    if not records:
        raise DatasetError("empty dataset")
    kind = type(records[0])
    if kind not in (PatientRecord, SurvivalRecord):
        raise DatasetError(f"unsupported record type {kind.__name__}")
    p = len(records[0].covariates)
    for k, rec in enumerate(records):
        if type(rec) is not kind:
            raise DatasetError(f"record {k}: mixed record types")
        if len(rec.covariates) != p:
            raise DatasetError(
                f"record {k}: covariate dimension {len(rec.covariates)} != {p}")
    ids = [r.provider_id for r in records]
    X = np.array([r.covariates for r in records], dtype=float).reshape(len(records), p)
    if kind is PatientRecord:
        return LinearDataset.from_arrays(ids, [r.outcome for r in records], X)
    for k, rec in enumerate(records):
        if rec.status not in (0, 1):
            raise DatasetError(f"record {k}: unknown status code {rec.status!r}")
    return SurvivalDataset.from_arrays(
        ids, [r.time for r in records], [r.status for r in records], X)


def to_records(dataset) -> list:
    """Inverse of :func:`validate_dataset`."""
    ids = [dataset.provider_ids[i] for i in dataset.provider]
    covs = [tuple(float(v) for v in row) for row in dataset.X]
    if isinstance(dataset, LinearDataset):
        return [PatientRecord(pid, float(y), c) for pid, y, c in zip(ids, dataset.y, covs)]
    return [SurvivalRecord(pid, float(t), int(s), c)
            for pid, t, s, c in zip(ids, dataset.time, dataset.status, covs)]


def score_arrays(scores: Sequence[ProviderScore]):
    """Split a list of scores into ``(ids, size, z)`` arrays; ids must be unique."""
    ids = [s.provider_id for s in scores]
    seen = set()
    for pid in ids:
        if pid in seen:
            raise DatasetError(f"duplicate provider_id {pid!r}")
        seen.add(pid)
    size = np.array([s.size for s in scores], dtype=float)
    z = np.array([s.z_fe for s in scores], dtype=float)
    return ids, size, z
