import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

import oracles
from conftest import oracle_dict
from hmmfdp import GaussianDensity, InvalidParameterError, ModelParams, SelectionPolicy, TransitionMatrix
from hmmfdp.experiments import (RECORD_FIELDS, CnSpec, ExperimentGrid, _fmt, cell, cn_statistics,
                                generate_cn_profiles, model_with_determinant, paper_model, power, power_fields,
                                run_grid, tv_posterior_bruteforce, wilcoxon_scaled, write_diff_histograms,
                                write_records_csv, write_summary_json)


# ---------------------------------------------------------------- power

def _rec(size, n_null, u_prop):
    u, inc, val = power_fields(u_prop, size, n_null, size - n_null)
    return {"side": "upper", "power_included": inc, "power_value": val, "u_count": u}


def test_power_perfect_bound():
    recs = [_rec(10, 3, 0.3), _rec(8, 2, 0.25), _rec(5, 0, 0.0)]
    assert power(recs) == 1.0


def test_power_trivial_bound():
    recs = [_rec(10, 3, 1.0), _rec(8, 2, 1.0)]
    assert power(recs) == 0.0


def test_power_hand_built_runs():
    recs = [
        _rec(10, 2, 0.3),   # U=3 >= 2 nulls: (10-3)/8
        _rec(4, 3, 0.5),    # U=2 < 3 nulls: excluded
        _rec(6, 1, 1 / 6),  # U=1 >= 1: (6-1)/5
    ]
    assert [r["power_included"] for r in recs] == [True, False, True]
    assert power(recs) == pytest.approx(((10 - 3) / 8 + (6 - 1) / 5) / 2, abs=1e-15)


def test_power_excludes_no_alternative_runs():
    assert math.isnan(power([_rec(3, 3, 1.0)]))


def test_power_count_rounds_half_up():
    assert power_fields(0.5, 5, 0, 5)[0] == 3
    assert power_fields(0.25, 10, 0, 10)[0] == 3


# ---------------------------------------------------------------- Wilcoxon

def test_wilcoxon_maximal():
    n1, n2 = 7, 5
    g1 = np.arange(100, 100 + n1, dtype=float)
    g2 = np.arange(n2, dtype=float)
    assert wilcoxon_scaled(g1, g2) == pytest.approx(math.sqrt(3 * n1 * n2 / (n1 + n2 + 1)), rel=1e-12)


@given(st.lists(st.integers(-3, 3), min_size=1, max_size=15), st.lists(st.integers(-3, 3), min_size=1, max_size=15))
def test_wilcoxon_antisymmetric_and_matches_scipy_u(a, b):
    g1, g2 = np.array(a, float), np.array(b, float)
    assert wilcoxon_scaled(g1, g2) == pytest.approx(-wilcoxon_scaled(g2, g1), abs=1e-12)
    u = stats.mannwhitneyu(g1, g2, method="asymptotic").statistic
    n1, n2 = len(a), len(b)
    expected = (u - n1 * n2 / 2) / math.sqrt(n1 * n2 * (n1 + n2 + 1) / 12)
    assert wilcoxon_scaled(g1, g2) == pytest.approx(expected, abs=1e-12)


def test_wilcoxon_null_calibration():
    rng = np.random.default_rng(0)
    g1 = rng.normal(size=(40, 10_000))
    g2 = rng.normal(size=(40, 10_000))
    t = wilcoxon_scaled(g1, g2)
    assert t.shape == (10_000,)
    assert abs(t.mean()) < 0.05
    assert abs(t.std() - 1.0) < 0.05


# ---------------------------------------------------------------- CN profiles

def test_cn_no_differential_regions():
    theta, _, _, _ = generate_cn_profiles(CnSpec(m=200, K=5, n_diff=0, n1=3, n2=3), 1)
    assert not theta.any()


def test_cn_single_block():
    theta, bps, _, _ = generate_cn_profiles(CnSpec(m=300, K=2, n_diff=1, n1=3, n2=3), 2)
    assert len(bps) == 1
    changes = np.flatnonzero(np.diff(theta))
    assert len(changes) == 1 and changes[0] + 1 == bps[0]


def test_cn_deterministic_and_valid():
    spec = CnSpec(m=500, K=8, n1=5, n2=6)
    a = generate_cn_profiles(spec, 9)
    b = generate_cn_profiles(spec, 9)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
    assert np.all(np.diff(a[1]) > 0)
    assert a[2].shape == (5, 500) and a[3].shape == (6, 500)
    theta, x = cn_statistics(spec, 9)
    assert x.shape == (500,)
    with pytest.raises(InvalidParameterError):
        CnSpec(K=0)


def test_cn_shift_moves_statistics():
    theta, x = cn_statistics(CnSpec(m=2000, K=10, n1=30, n2=30, shift=1.5), 4)
    assert x[theta == 1].mean() > 3 and abs(x[theta == 0].mean()) < 0.3


# ---------------------------------------------------------------- TV diagnostic

def test_tv_identical_is_zero(paper_params):
    assert tv_posterior_bruteforce(paper_params, paper_params, np.array([0.1, 2.0, 3.0])) == pytest.approx(0, abs=1e-15)


def test_tv_disjoint_is_one():
    a = ModelParams(TransitionMatrix(0.9, 0.1, 0.2, 0.8), GaussianDensity(0, 1), GaussianDensity(60, 1))
    b = ModelParams(TransitionMatrix(0.9, 0.1, 0.2, 0.8), GaussianDensity(60, 1), GaussianDensity(0, 1))
    assert tv_posterior_bruteforce(a, b, np.array([0.0, 0.5])) == pytest.approx(1.0, abs=1e-12)


def test_tv_three_sites_by_hand(paper_params):
    other = ModelParams(TransitionMatrix(0.7, 0.3, 0.4, 0.6), GaussianDensity(0, 1), GaussianDensity(2, 1))
    x = np.array([0.5, 2.5, 1.0])
    pa = oracles.posterior_paths(oracle_dict(paper_params), x)
    pb = oracles.posterior_paths(oracle_dict(other), x)
    expected = 0.5 * sum(abs(pa[k] - pb[k]) for k in itertools.product((0, 1), repeat=3))
    assert tv_posterior_bruteforce(paper_params, other, x) == pytest.approx(expected, abs=1e-12)


def test_tv_size_limit(paper_params):
    with pytest.raises(InvalidParameterError):
        tv_posterior_bruteforce(paper_params, paper_params, np.zeros(15))


# ---------------------------------------------------------------- grid

def rows(records):
    """Serialised form (NaN-safe comparison)."""
    return [tuple(_fmt(r[k]) for k in RECORD_FIELDS) for r in records]


def small_grid(**kw):
    base = dict(model=paper_model(), m=300, n_runs=3, B=10, seed=5)
    base.update(kw)
    return ExperimentGrid(**base)


def test_single_run_deterministic():
    g = small_grid(n_runs=1)
    a, b = run_grid(g), run_grid(g)
    assert rows(a.records) == rows(b.records)
    assert a.failures == []


def test_records_consistent():
    res = run_grid(small_grid())
    assert res.records
    for rec in res.records:
        assert rec["violation"] == (rec["diff"] < 0)
        expected = rec["bound"] - rec["fdp"] if rec["side"] == "upper" else rec["fdp"] - rec["bound"]
        assert rec["diff"] == expected
        assert 0.0 <= rec["bound"] <= 1.0
        assert rec["n_true_null"] + rec["n_true_alt"] == rec["size"]
    summ = res.summary()
    for row in summ["cells"]:
        assert 0.0 <= row["violation_rate"] <= 1.0
    assert cell(summ, "oracle", "p<0.05")["n"] == 3
    assert cell(summ, "boot1", "SC(0.05)", delta=0.5)["n"] == 3
    with pytest.raises(KeyError):
        cell(summ, "simes", "p<0.05", side="lower")


def test_runs_are_independent_of_subset():
    g = small_grid()
    full = run_grid(g).records
    only_two = run_grid(g, runs=[2]).records
    assert rows([r for r in full if r["run"] == 2]) == rows(only_two)


def test_parallel_matches_serial():
    g = small_grid()
    assert rows(run_grid(g).records) == rows(run_grid(g, n_jobs=2).records)


def test_leak_policy_grid():
    g = small_grid(policies=(SelectionPolicy("oracle_leak", rule="pvalue_nulls"),), methods=("oracle", "boot3"))
    res = run_grid(g)
    assert not res.failures
    assert {r["policy"] for r in res.records} == {"leak:pvalue_nulls"}


def test_grid_validation():
    with pytest.raises(InvalidParameterError):
        ExperimentGrid()
    with pytest.raises(InvalidParameterError):
        small_grid(n_runs=0)
    with pytest.raises(InvalidParameterError):
        small_grid(methods=("bogus",))
    with pytest.raises(InvalidParameterError):
        small_grid(policies=(SelectionPolicy("fixed", indices=(1, 2)),))
    with pytest.raises(InvalidParameterError):
        ExperimentGrid(cn=CnSpec(m=100, K=2, n1=3, n2=3), methods=("oracle",))
    g = small_grid(deltas=(0.1, 0.9))
    assert ExperimentGrid.from_dict(g.to_dict()).to_dict() == g.to_dict()


@pytest.mark.parametrize("det", [0.5, 0.2, 0.05])
def test_small_determinant_grid(det):
    model = model_with_determinant(det)
    assert model.A.det == pytest.approx(det, abs=1e-12)
    assert model.pi[1] == pytest.approx(0.2, abs=1e-12)
    res = run_grid(small_grid(model=model, n_runs=2))
    assert res.failures == []
    assert all(np.isfinite(r["bound"]) for r in res.records)


def test_independent_model_rejected():
    with pytest.raises(InvalidParameterError):
        model_with_determinant(0.0)


def test_unknown_null_and_cn_grids_run():
    res = run_grid(small_grid(null_known=False, methods=("plugin", "boot2", "boot3"), n_runs=2))
    assert res.failures == [] and res.records
    cn = ExperimentGrid(cn=CnSpec(m=300, K=6, n1=10, n2=10, shift=1.5), n_runs=2, B=10,
                        methods=("plugin", "simes", "boot3"))
    res = run_grid(cn)
    assert res.records


def test_output_writers(tmp_path):
    res = run_grid(small_grid(n_runs=2))
    write_records_csv(res.records, tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0].startswith("run,policy,method")
    assert len(lines) == len(res.records) + 1
    write_summary_json(res.summary(), tmp_path / "s.json")
    assert '"schema_version": 1' in (tmp_path / "s.json").read_text()
    paths = write_diff_histograms(res.records, tmp_path)
    assert paths and all(sum(int(l.split()[1]) for l in open(p)) == 2 for p in paths)
