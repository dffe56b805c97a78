import csv
import json

import numpy as np
import pytest

from provprofile.core import ProfilingError
from provprofile.simulation import (PRESETS, Scenario, gen_linear_equal_n, gen_linear_outliers,
                                    gen_survival, load_scenario, preset, run_replications,
                                    survival_replication, survival_sizes)


def test_presets_exist():
    assert {"fig3", "fig4", "fig5", "fig5c"} <= set(PRESETS)
    with pytest.raises(ProfilingError, match="unknown preset"):
        preset("fig9")


def test_scenario_validation():
    with pytest.raises(ProfilingError):
        Scenario("nonsense", 10)
    with pytest.raises(ProfilingError):
        Scenario("linear_equal_n", 10, outlier_frac=0.6)
    with pytest.raises(ProfilingError, match="not available"):
        Scenario("survival_smr", 10, methods=("RE",))
    with pytest.raises(ProfilingError, match="unknown scenario keys"):
        Scenario.from_dict({"kind": "linear_equal_n", "n_providers": 5, "bogus": 1})


def test_scenario_dict_round_trip():
    sc = preset("fig4")
    assert Scenario.from_dict(json.loads(json.dumps(sc.to_dict()))) == sc


def test_equal_n_determinism():
    sc = preset("fig3")
    a, ea = gen_linear_equal_n(sc, 25, 0.0, seed=5)
    b, eb = gen_linear_equal_n(sc, 25, 0.0, seed=5)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(ea, eb)
    assert ea[0] == 0.0
    assert a.n_providers == 200 and np.all(a.sizes == 25)


def test_alpha1_shifts_only_provider_one():
    sc = preset("fig3")
    a, _ = gen_linear_equal_n(sc, 10, 0.0, seed=6)
    b, eb = gen_linear_equal_n(sc, 10, 1.5, seed=6)
    diff = b.y - a.y
    np.testing.assert_allclose(diff[a.provider == 0], 1.5)
    assert np.all(diff[a.provider != 0] == 0)
    assert eb[0] == 1.5


def test_effect_sd():
    sc = preset("fig3")
    sds = [np.std(gen_linear_equal_n(sc, 1, seed=k)[1][1:], ddof=1) for k in range(1000)]
    assert abs(np.mean(sds) - 1) < 0.07


def test_outlier_layout():
    sc = preset("fig4")
    _, eff = gen_linear_outliers(sc, 125, seed=8)
    assert np.sum(eff == 4.0) == 75 and np.sum(eff == -4.0) == 75
    assert eff[0] == 0.0


def test_no_outliers_reduces_to_random_sizes():
    sc = preset("fig4", outlier_frac=0.0)
    ds, eff = gen_linear_outliers(sc, 50, seed=9)
    assert not np.any(np.abs(eff) == 4.0)
    sizes = ds.sizes
    assert sizes[0] == 50 and sizes[1:].min() >= 10 and sizes[1:].max() <= 150


def test_survival_censoring_and_sizes():
    sc = preset("fig5")
    sizes = survival_sizes(sc)
    fracs = []
    for k in range(5):
        ds, _ = gen_survival(sc, np.random.default_rng([4, k]), sizes)
        np.testing.assert_array_equal(ds.sizes, sizes)
        fracs.append(1 - ds.status.mean())
    assert abs(np.mean(fracs) - 0.27) < 0.02
    np.testing.assert_array_equal(sizes, survival_sizes(sc))


def test_survival_baseline_mean_time():
    sc = Scenario("survival_smr", 1000, size_range=(200, 200), sigma_alpha=0.0,
                  censor=(1e9, 2e9))
    ds, _ = gen_survival(sc, 3)
    assert ds.status.all()
    assert ds.time.mean() == pytest.approx(10.0, abs=0.1)


def small_fig3(**kw):
    return preset("fig3", replications=40, cells=(10, 100), **kw)


def test_linear_run_shapes_and_reproducibility(tmp_path):
    sc = small_fig3()
    a = run_replications(sc)
    b = run_replications(sc)
    assert len(a.curves) == 2 * len(sc.methods)
    for ca, cb in zip(a.curves, b.curves):
        np.testing.assert_array_equal(ca.prob, cb.prob)
        assert np.all((ca.prob >= 0) & (ca.prob <= 1))
        np.testing.assert_array_equal(ca.alpha1, sc.alpha1_grid)
    a.write_curves(tmp_path / "a.csv")
    b.write_curves(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert list(rows[0]) == ["method", "alpha1", "prob", "se", "n"]


def test_signal_probability_increases_with_effect():
    res = run_replications(small_fig3(), methods=("FE",))
    c = res.curve("FE", 100)
    assert c.prob[-1] > c.prob[0]
    assert c.prob[0] < 0.2


def test_jobs_do_not_change_results():
    sc = preset("fig3", replications=12, cells=(25,))
    a = run_replications(sc, jobs=1)
    b = run_replications(sc, jobs=2)
    for ca, cb in zip(a.curves, b.curves):
        np.testing.assert_array_equal(ca.prob, cb.prob)


def test_outlier_run_has_oracle_curve():
    sc = preset("fig4", replications=3, cells=(125,), n_providers=600)
    res = run_replications(sc)
    oracle = res.curve("EN_oracle", 125)
    assert oracle.replications.min() == 3
    assert oracle.prob[0] <= oracle.prob[-1]


def test_preset_rejects_unknown_override():
    with pytest.raises(ProfilingError, match="unknown scenario keys"):
        preset("fig3", colour="red")


def test_survival_run(tmp_path):
    sc = preset("fig5", n_providers=400, replications=2)
    res = run_replications(sc)
    lams = sorted({s.lam for s in res.strata_rates if s.method == "EN_lambda"})
    assert lams == [0.0, 0.5, 0.75, 1.0]
    assert {s.stratum for s in res.strata_rates} == {0, 1, 2}
    res.write_strata_rates(tmp_path / "s.csv")
    header = open(tmp_path / "s.csv").readline().strip()
    assert header == "method,lambda,stratum,rate,se"
    _, z, py, model = survival_replication(sc, 0, survival_sizes(sc))
    assert z.shape == py.shape and np.all(model.sd(py) >= 1.0)


def test_load_scenario_formats(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"preset": "fig3", "replications": 7}))
    sc = load_scenario(p)
    assert sc.replications == 7 and sc.n_providers == 200
    q = tmp_path / "s.cfg"
    q.write_text("# comment\npreset = fig4\ncells = [125]\nseed=3\n")
    sc = load_scenario(q)
    assert sc.cells == (125,) and sc.seed == 3 and sc.kind == "linear_outliers"
    r = tmp_path / "bad.cfg"
    r.write_text("kind linear\n")
    with pytest.raises(ProfilingError):
        load_scenario(r)


@pytest.fixture(scope="module")
def fig3_run():
    return run_replications(preset("fig3", replications=300, seed=21))


def test_fe_calibration_at_zero(fig3_run):
    for n in fig3_run.scenario.cells:
        c = fig3_run.curve("FE", n)
        se = np.sqrt(0.05 * 0.95 / c.replications[0])
        assert abs(c.prob[0] - 0.05) <= 3 * se


def test_method_ordering(fig3_run):
    sc = fig3_run.scenario
    for n in sc.cells:
        fe, re, fere, en = (fig3_run.curve(m, n) for m in ("FE", "RE", "FERE", "EN_stratified"))
        # z_re = sqrt(R) z_fe and z_fere = sqrt(1 - R) z_fe, so RE is the
        # stricter of the two whenever R < 1/2, i.e. n < sigma_w^2 / sigma_alpha^2
        if n >= (sc.sigma_w / sc.sigma_alpha) ** 2:
            pairs = ((fe, re), (re, fere), (re, en))
        else:
            pairs = ((fe, re), (fe, fere), (fere, re), (en, re))
        for hi, lo in pairs:
            assert np.all(hi.prob >= lo.prob - 2 * np.hypot(hi.se, lo.se))
