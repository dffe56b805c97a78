import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from provprofile.core import (DatasetError, LinearDataset, PatientRecord, ProviderScore,
                              SurvivalDataset, SurvivalRecord, score_arrays, to_records,
                              validate_dataset)


def test_counts_by_provider():
    recs = [PatientRecord("A", 1.0), PatientRecord("A", 2.0), PatientRecord("B", 0.5),
            PatientRecord("A", 3.0), PatientRecord("B", 1.5)]
    ds = validate_dataset(recs)
    assert ds.n_providers == 2
    assert ds.sizes.tolist() == [3, 2]
    assert ds.index_map == {"A": 0, "B": 1}


def test_empty_dataset():
    with pytest.raises(DatasetError, match="empty dataset"):
        validate_dataset([])


def test_covariate_dimension_mismatch():
    recs = [PatientRecord("A", 1.0, (1.0, 2.0, 3.0)), PatientRecord("B", 1.0, (1.0, 2.0))]
    with pytest.raises(DatasetError, match="dimension"):
        validate_dataset(recs)


def test_survival_rejects_bad_status_and_time():
    with pytest.raises(DatasetError, match="status"):
        validate_dataset([SurvivalRecord("A", 1.0, 2)])
    with pytest.raises(DatasetError, match="> 0"):
        validate_dataset([SurvivalRecord("A", 0.0, 1)])


def test_missing_covariates_rejected():
    with pytest.raises(DatasetError, match="finite"):
        LinearDataset.from_arrays(["a", "b"], [1.0, 2.0], [[1.0], [np.nan]])


def test_arrays_are_read_only():
    ds = LinearDataset.from_arrays(["a", "b"], [1.0, 2.0])
    with pytest.raises(ValueError):
        ds.y[0] = 5.0


def test_provider_score_validation():
    with pytest.raises(ValueError):
        ProviderScore("a", 0.0, 1.0)
    with pytest.raises(ValueError):
        ProviderScore("a", 1.0, float("inf"))


def test_duplicate_scores_rejected():
    with pytest.raises(DatasetError, match="duplicate"):
        score_arrays([ProviderScore("a", 1.0, 0.0), ProviderScore("a", 2.0, 1.0)])


ids = st.sampled_from(["h1", "h2", "h3", "x", "y"])
finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(ids, finite, finite, finite), min_size=1, max_size=30))
def test_linear_round_trip(rows):
    recs = [PatientRecord(p, y, (a, b)) for p, y, a, b in rows]
    ds = validate_dataset(recs)
    assert to_records(ds) == recs
    # index map is a bijection onto 0..N-1
    assert sorted(ds.index_map.values()) == list(range(ds.n_providers))
    assert set(ds.index_map) == {r[0] for r in rows}


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(ids, st.floats(1e-3, 1e3), st.integers(0, 1)),
                min_size=1, max_size=30))
def test_survival_round_trip(rows):
    recs = [SurvivalRecord(p, t, s) for p, t, s in rows]
    ds = validate_dataset(recs)
    assert isinstance(ds, SurvivalDataset)
    assert to_records(ds) == recs
