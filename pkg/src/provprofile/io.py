"""CSV/JSON ingestion and report writers.

Inputs need a header row, UTF-8 text and ``.`` as decimal separator.
Floats are written with ``repr`` so that parsing an emitted file gives back
the same doubles.  Every writer goes through a temporary file in the target
directory followed by an atomic rename.
"""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import DatasetError, LinearDataset, ProviderScore, SurvivalDataset, score_arrays


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def atomic_write_text(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, header, rows):
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    atomic_write_text(path, buf.getvalue())


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
                      + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _read_rows(path, required):
    """Header and data rows; errors carry 1-based file line numbers."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if header[:len(required)] != list(required):
            raise DatasetError(f"{path}: header must start with {','.join(required)}")
        rows = []
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetError(f"{path}: row {reader.line_num}: expected "
                                   f"{len(header)} fields, got {len(row)}")
            rows.append((reader.line_num, row))
    if not rows:
        raise DatasetError("empty dataset")
    return header, rows


def _float(value, path, line, col):
    try:
        v = float(value)
    except ValueError:
        raise DatasetError(f"{path}: row {line}: column {col!r} is not a number: "
                           f"{value!r}") from None
    if not math.isfinite(v):
        raise DatasetError(f"{path}: row {line}: column {col!r} must be finite")
    return v


def _covariates(header, rows, start, path):
    names = header[start:]
    X = np.array([[_float(v, path, line, names[j]) for j, v in enumerate(row[start:])]
                  for line, row in rows], dtype=float).reshape(len(rows), len(names))
    return X


def read_linear_csv(path) -> LinearDataset:
    """``provider_id,y,x1,...,xp``."""
    header, rows = _read_rows(path, ("provider_id", "y"))
    y = [_float(row[1], path, line, "y") for line, row in rows]
    return LinearDataset.from_arrays([row[0] for _, row in rows], y,
                                     _covariates(header, rows, 2, path))


def read_survival_csv(path) -> SurvivalDataset:
    """``provider_id,time,status,x1,...,xp`` with status 1 = event, 0 = censored."""
    header, rows = _read_rows(path, ("provider_id", "time", "status"))
    time, status = [], []
    for line, row in rows:
        t = _float(row[1], path, line, "time")
        if t <= 0:
            raise DatasetError(f"{path}: row {line}: time must be > 0")
        if row[2].strip() not in ("0", "1"):
            raise DatasetError(f"{path}: row {line}: status must be 0 or 1, got {row[2]!r}")
        time.append(t)
        status.append(int(row[2]))
    return SurvivalDataset.from_arrays([row[0] for _, row in rows], time, status,
                                       _covariates(header, rows, 3, path))


def read_scores_csv(path) -> list:
    """``provider_id,size,z`` as a list of :class:`ProviderScore`."""
    _, rows = _read_rows(path, ("provider_id", "size", "z"))
    out = []
    for line, row in rows:
        try:
            out.append(ProviderScore(row[0], _float(row[1], path, line, "size"),
                                     _float(row[2], path, line, "z")))
        except DatasetError:
            raise
        except ValueError as exc:
            raise DatasetError(f"{path}: row {line}: {exc}") from None
    score_arrays(out)  # rejects duplicate ids
    return out


def write_linear_csv(path, dataset: LinearDataset):
    names = [f"x{j + 1}" for j in range(dataset.n_covariates)]
    ids = dataset.provider_ids
    write_csv(path, ["provider_id", "y", *names],
              ([ids[i], y, *x] for i, y, x in zip(dataset.provider, dataset.y, dataset.X)))


def write_survival_csv(path, dataset: SurvivalDataset):
    names = [f"x{j + 1}" for j in range(dataset.n_covariates)]
    ids = dataset.provider_ids
    write_csv(path, ["provider_id", "time", "status", *names],
              ([ids[i], t, int(s), *x] for i, t, s, x in
               zip(dataset.provider, dataset.time, dataset.status, dataset.X)))


def write_scores_input_csv(path, ids, size, z):
    write_csv(path, ["provider_id", "size", "z"],
              ([pid, float(s), float(v)] for pid, s, v in zip(ids, size, z)))


def write_linear_scores(path, scores):
    write_csv(path, ["provider_id", "n", "ybar", "z_fe", "z_re", "z_fere", "R"],
              ([pid, int(n), yb, a, b, c, r] for pid, n, yb, a, b, c, r in
               zip(scores.provider_ids, scores.n, scores.ybar, scores.z_fe, scores.z_re,
                   scores.z_fere, scores.shrinkage)))


def write_nulls(path, reports, sizes):
    write_csv(path, ["provider_id", "size", "z_fe", "null_mean", "null_sd", "flag"],
              ([r.provider_id, float(s), r.z_fe, r.null_mean, r.null_sd_effective,
                r.decision] for r, s in zip(reports, sizes)))


def write_funnel(path, reports, sizes):
    write_csv(path, ["size", "z", "upper", "lower"],
              ([float(s), r.z_fe, r.threshold_upper, r.threshold_lower]
               for r, s in zip(reports, sizes)))


def write_flags(path, reports):
    write_csv(path, ["provider_id", "z_fe", "null_mean", "null_sd_effective",
                     "threshold_upper", "threshold_lower", "decision", "rho", "lambda"],
              ([r.provider_id, r.z_fe, r.null_mean, r.null_sd_effective, r.threshold_upper,
                r.threshold_lower, r.decision, r.rho, r.lam] for r in reports))


def write_smr(path, result):
    write_csv(path, ["provider_id", "patient_years", "observed", "expected", "smr",
                     "mid_p", "z_fe"],
              ([s.provider_id, float(py), s.observed, s.expected, s.smr, s.mid_p, s.z_fe]
               for s, py in zip(result.scores, result.patient_years)))
