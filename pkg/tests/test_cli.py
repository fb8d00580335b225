import json
import os
import shutil
import subprocess
import time

import numpy as np
import pytest

from hmmfdp import Selection, posterior_chain, upper_bound, lower_bound
from hmmfdp.cli import main, read_model
from hmmfdp.experiments import paper_model
from hmmfdp.hmm_core import ModelParams, sample_hmm

GOLDEN = os.path.join(os.path.dirname(__file__), "golden")


def skeleton(obj):
    """Key structure and value types of a JSON document."""
    if isinstance(obj, dict):
        return {k: skeleton(v) for k, v in sorted(obj.items())}
    if isinstance(obj, list):
        return [skeleton(obj[0])] if obj else []
    if isinstance(obj, bool):
        return "bool"
    if isinstance(obj, (int, float)):
        return "number"
    if obj is None:
        return "null"
    return "string"


def check_golden(name, doc):
    with open(os.path.join(GOLDEN, name)) as fh:
        assert skeleton(doc) == json.load(fh)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh)
    return str(path)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["simulate", "--output-dir", str(d), "--m", "400", "--seed", "3"]) == 0
    return d


@pytest.fixture(scope="module")
def model_path(data_dir):
    out = data_dir / "model.json"
    assert main(["estimate", "--input", str(data_dir / "x.csv"), "--output", str(out), "--seed", "1"]) == 0
    return out


# ---------------------------------------------------------------- simulate

def test_simulate_outputs(data_dir):
    x = np.loadtxt(data_dir / "x.csv", skiprows=1)
    theta = np.loadtxt(data_dir / "theta.csv", skiprows=1)
    t_ref, x_ref = sample_hmm(paper_model(), 400, 3)
    np.testing.assert_array_equal(x, x_ref)
    np.testing.assert_array_equal(theta, t_ref)
    check_golden("simulate_spec.json", json.load(open(data_dir / "spec.json")))


def test_simulate_reproducible(tmp_path):
    for d in ("a", "b"):
        assert main(["simulate", "-o", str(tmp_path / d), "--m", "100", "--seed", "9"]) == 0
    for f in ("x.csv", "theta.csv", "spec.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_simulate_stationary_frequency(tmp_path):
    assert main(["simulate", "-o", str(tmp_path), "--m", "100000", "--seed", "2"]) == 0
    theta = np.loadtxt(tmp_path / "theta.csv", skiprows=1)
    assert abs(np.mean(theta == 0) - 0.8) < 0.01


def test_simulate_cn(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"cn": {"K": 4, "n1": 5, "n2": 5}})
    assert main(["simulate", "-o", str(tmp_path / "cn"), "--m", "200", "--config", cfg]) == 0
    assert len((tmp_path / "cn" / "x.csv").read_text().splitlines()) == 201


def test_simulate_zero_m_is_error(tmp_path):
    assert main(["simulate", "-o", str(tmp_path), "--m", "0"]) == 1


# ---------------------------------------------------------------- estimate

def test_estimate_document(model_path):
    doc = json.load(open(model_path))
    check_golden("estimate.json", doc)
    assert doc["trace"]["converged"]


def test_model_round_trip_is_bit_identical(model_path, tmp_path):
    params = read_model(model_path)
    again = ModelParams.from_dict(json.loads(json.dumps(params.to_dict())))
    assert json.dumps(again.to_dict(), sort_keys=True) == json.dumps(params.to_dict(), sort_keys=True)
    doc = json.load(open(model_path))
    assert json.dumps(params.to_dict(), sort_keys=True) == json.dumps(doc["model"], sort_keys=True)


def test_estimate_empty_input(tmp_path):
    p = tmp_path / "x.csv"
    p.write_text("x\n")
    assert main(["estimate", "-i", str(p)]) == 2


def test_estimate_malformed_input_reports_line(tmp_path, capsys):
    p = tmp_path / "x.csv"
    p.write_text("x\n1.0\n2.0\nabc\n")
    assert main(["estimate", "-i", str(p)]) == 2
    assert "x.csv:4" in capsys.readouterr().err
    p.write_text("y\n1.0\n")
    assert main(["estimate", "-i", str(p)]) == 2


def test_estimate_unknown_null(data_dir, tmp_path):
    cfg = write_json(tmp_path / "c.json", {"null_known": False, "em": {"max_iters": 50}})
    out = tmp_path / "m.json"
    assert main(["estimate", "-i", str(data_dir / "x.csv"), "-o", str(out), "--config", cfg]) == 0
    assert json.load(open(out))["model"]["null_known"] is False


# ---------------------------------------------------------------- bound

def run_bound(tmp_path, data_dir, model_path, cfg, *extra):
    c = write_json(tmp_path / "bound.json", cfg)
    out = tmp_path / "out.json"
    code = main(["bound", "-i", str(data_dir / "x.csv"), "--model", str(model_path), "--config", c,
                 "-o", str(out), "--threads", "1", *extra])
    return code, (json.load(open(out)) if code == 0 else None)


def test_bound_all_methods(tmp_path, data_dir, model_path):
    truth = write_json(tmp_path / "truth.json", paper_model().to_dict())
    cfg = {"policy": {"type": "suncai", "alpha": 0.05}, "B": 10, "true_model": truth,
           "methods": ["oracle", "plugin", "simes", "naive", "boot1", "boot2", "boot3"]}
    code, doc = run_bound(tmp_path, data_dir, model_path, cfg, "--seed", "4")
    assert code == 0
    check_golden("bound.json", doc)
    for meth, entry in doc["methods"].items():
        assert 0 <= entry["upper"] <= 1
        if entry["interval"] is not None:
            assert entry["interval"][0] <= entry["interval"][1] or meth in ("naive", "boot1", "boot2", "boot3")
    assert doc["methods"]["boot1"]["delta"] == 0.5 and doc["methods"]["boot1"]["B"] == 10


def test_bound_oracle_matches_library(tmp_path, data_dir, model_path):
    truth = write_json(tmp_path / "truth.json", {"schema_version": 1, "model": paper_model().to_dict()})
    cfg = {"selection": [1, 2, 3, 50, 51, 200], "methods": ["oracle"], "beta": 0.2, "gamma": 0.25}
    code, doc = run_bound(tmp_path, data_dir, model_path, cfg, "--true-model", truth)
    assert code == 0
    x = np.loadtxt(data_dir / "x.csv", skiprows=1)
    chain = posterior_chain(paper_model(), x)
    R = Selection.from_one_based(cfg["selection"])
    entry = doc["methods"]["oracle"]
    assert entry["upper"] == upper_bound(chain, None, R, 0.2)
    assert entry["lower"] == lower_bound(chain, None, R, 0.2)
    assert entry["interval"] == [lower_bound(chain, None, R, 0.05), upper_bound(chain, None, R, 0.15)]
    assert doc["selection"] == cfg["selection"]


def test_bound_fixed_set_boot2(tmp_path, data_dir, model_path):
    code, doc = run_bound(tmp_path, data_dir, model_path, {"selection": [5, 6, 7], "methods": ["boot2"], "B": 5})
    assert code == 0 and doc["size"] == 3


def test_bound_fixed_set_from_file(tmp_path, data_dir, model_path):
    idx = tmp_path / "sel.csv"
    idx.write_text("index\n5\n6\n7\n")
    code, doc = run_bound(tmp_path, data_dir, model_path, {"selection": str(idx), "methods": ["plugin"]})
    assert code == 0 and doc["selection"] == [5, 6, 7]


def test_bound_fixed_set_boot1_is_error(tmp_path, data_dir, model_path, capsys):
    code, _ = run_bound(tmp_path, data_dir, model_path, {"selection": [5, 6, 7], "methods": ["boot1"], "B": 5})
    assert code == 1
    assert "full selection policy required" in capsys.readouterr().err


def test_bound_out_of_range_selection(tmp_path, data_dir, model_path):
    code, _ = run_bound(tmp_path, data_dir, model_path, {"selection": [401], "methods": ["plugin"]})
    assert code == 2


def test_bound_leak_policy_refused(tmp_path, data_dir, model_path):
    cfg = {"policy": {"type": "oracle_leak", "rule": "nulls"}}
    assert run_bound(tmp_path, data_dir, model_path, cfg)[0] == 1
    assert run_bound(tmp_path, data_dir, model_path, cfg, "--unsafe-experiments")[0] == 1


def test_bound_deterministic(tmp_path, data_dir, model_path):
    cfg = {"policy": {"type": "pvalue_threshold", "t": 0.05}, "methods": ["boot3"], "B": 8}
    _, a = run_bound(tmp_path, data_dir, model_path, cfg, "--seed", "2")
    _, b = run_bound(tmp_path, data_dir, model_path, cfg, "--seed", "2", "--threads", "2")
    assert a == b


def test_bound_fit_inline(tmp_path, data_dir):
    out = tmp_path / "o.json"
    assert main(["bound", "-i", str(data_dir / "x.csv"), "--fit", "-o", str(out)]) == 0
    assert "plugin" in json.load(open(out))["methods"]


# ---------------------------------------------------------------- usage errors

def test_usage_errors(tmp_path, data_dir, model_path):
    assert main(["bound", "-i", str(data_dir / "x.csv")]) == 1
    bad = write_json(tmp_path / "bad.json", {"methods": ["nope"]})
    assert main(["bound", "-i", str(data_dir / "x.csv"), "--model", str(model_path), "--config", bad]) == 1
    (tmp_path / "broken.json").write_text("{")
    assert main(["estimate", "-i", str(data_dir / "x.csv"), "--config", str(tmp_path / "broken.json")]) == 1
    assert main(["estimate", "-i", str(data_dir / "x.csv"), "--config", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_bad_model_file_is_data_error(tmp_path, data_dir):
    m = write_json(tmp_path / "m.json", {"A": [[0.5, 0.5], [0.5, 0.5]], "f0": {"type": "gaussian", "mean": 0, "sd": 1},
                                          "f1": {"type": "gaussian", "mean": 3, "sd": 1}})
    assert main(["bound", "-i", str(data_dir / "x.csv"), "--model", m]) == 2


def test_threads_env(monkeypatch):
    from hmmfdp.cli import default_threads
    monkeypatch.setenv("HMMFDP_THREADS", "3")
    assert default_threads() == 3
    monkeypatch.setenv("HMMFDP_THREADS", "zero")
    assert default_threads() >= 1


# ---------------------------------------------------------------- benchmark

def test_benchmark_smoke(tmp_path):
    cfg = write_json(tmp_path / "b.json", {"m": 1000, "n_runs": 10, "B": 50, "seed": 1, "histograms": True})
    t0 = time.perf_counter()
    assert main(["benchmark", "-o", str(tmp_path / "o1"), "--config", cfg, "--threads", "1"]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 60, elapsed
    summary = json.load(open(tmp_path / "o1" / "summary.json"))
    check_golden("summary.json", summary)
    for row in summary["cells"]:
        assert 0.0 <= row["violation_rate"] <= 1.0
    assert any(p.startswith("hist_") for p in os.listdir(tmp_path / "o1"))


def test_benchmark_deterministic(tmp_path):
    cfg = write_json(tmp_path / "b.json", {"m": 300, "n_runs": 3, "B": 8, "seed": 4,
                                            "methods": ["oracle", "plugin", "boot1", "boot3"]})
    for d in ("a", "b"):
        assert main(["benchmark", "-o", str(tmp_path / d), "--config", cfg]) == 0
    assert (tmp_path / "a" / "records.csv").read_bytes() == (tmp_path / "b" / "records.csv").read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()


def test_benchmark_leak_needs_flag(tmp_path):
    cfg = write_json(tmp_path / "b.json", {"m": 200, "n_runs": 1, "B": 4, "methods": ["oracle"],
                                            "policies": [{"type": "oracle_leak", "rule": "pvalue_nulls"}]})
    assert main(["benchmark", "-o", str(tmp_path / "o"), "--config", cfg]) == 1
    assert main(["benchmark", "-o", str(tmp_path / "o"), "--config", cfg, "--unsafe-experiments"]) == 0


@pytest.mark.skipif(shutil.which("hmmfdp") is None, reason="console script not installed")
def test_console_script():
    out = subprocess.run(["hmmfdp", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and "hmmfdp" in out.stdout
