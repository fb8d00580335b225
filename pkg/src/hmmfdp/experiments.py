"""Monte Carlo harness for coverage and power of the FDP bounds.

Each run draws ``(theta, x)``, fits the model, applies every selection
policy and every bound method, and emits one record per (policy, method,
delta, side).  Runs are seeded independently from the master seed, so the
output does not depend on how runs are scheduled.
"""
from collections import defaultdict
from dataclasses import asdict, dataclass, field
import csv
import itertools
import json
import logging
import math
import os

import numpy as np
from joblib import Parallel, delayed
from scipy import special, stats

from . import bootstrap as bs
from .bounds import fdp, lower_bound_chain, upper_bound_chain
from .density import GaussianDensity
from .errors import (BootstrapError, DegenerateLikelihoodError, EstimationError, InvalidParameterError)
from .estimation import EmConfig, em_fit_known_f0, em_fit_unknown_f0
from .hmm_core import ModelParams, TransitionMatrix, log_emissions, make_rng, posterior_chain, sample_hmm
from .selection import SelectionPolicy, model_pvalues, simes_bound

log = logging.getLogger(__name__)

METHODS = ("oracle", "plugin", "simes", "naive", "boot1", "boot2", "boot3")
DELTA_METHODS = ("boot1", "boot2")
RECORD_FIELDS = (
    "run", "policy", "method", "delta", "side", "size", "n_true_null", "n_true_alt",
    "fdp", "bound", "diff", "violation", "u_count", "power_included", "power_value",
)


def paper_model():
    """The simulation model of the coverage study: sticky alternatives,
    N(0, 1) nulls and N(3, 1) alternatives."""
    return ModelParams(TransitionMatrix(0.95, 0.05, 0.2, 0.8), GaussianDensity(0.0, 1.0), GaussianDensity(3.0, 1.0))


def model_with_determinant(det, pi1=0.2, f0=None, f1=None):
    """Transition matrix with ``a00 - a10 = det`` and stationary mass ``pi1`` on state 1."""
    a00 = 1.0 - pi1 * (1.0 - det)
    a10 = (1.0 - det) * (1.0 - pi1)
    A = TransitionMatrix(a00, 1.0 - a00, a10, 1.0 - a10)
    return ModelParams(A, f0 or GaussianDensity(0.0, 1.0), f1 or GaussianDensity(3.0, 1.0))


# ---------------------------------------------------------------- CN profiles

@dataclass(frozen=True)
class CnSpec:
    """Synthetic copy-number design: ``K`` regions with shared breakpoints,
    ``n_diff`` of which are shifted in group 2."""

    m: int = 1000
    K: int = 10
    n1: int = 50
    n2: int = 50
    shift: float = 1.0
    noise_sd: float = 1.0
    n_diff: int = 2
    snr: float = 1.0

    def __post_init__(self):
        if self.K < 1 or self.K > self.m:
            raise InvalidParameterError("need 1 <= K <= m")
        if not 0 <= self.n_diff <= self.K:
            raise InvalidParameterError("n_diff must lie in [0, K]")
        if self.n1 < 1 or self.n2 < 1:
            raise InvalidParameterError("group sizes must be positive")
        if not self.noise_sd > 0:
            raise InvalidParameterError("noise_sd must be positive")

    def to_dict(self):
        return asdict(self)


def generate_cn_profiles(spec, seed):
    """Return ``(theta, breakpoints, group1, group2)``.

    Breakpoints are the 0-based starts of regions 2..K.  Every region has a
    baseline level shared by both groups; in the differential regions group
    2 is shifted by ``shift * snr``.  ``theta`` marks the differential loci.
    """
    rng = make_rng(seed)
    bps = np.sort(rng.choice(np.arange(1, spec.m), size=spec.K - 1, replace=False)) if spec.K > 1 else np.empty(0, int)
    region = np.zeros(spec.m, dtype=np.int64)
    region[bps] = 1
    region = np.cumsum(region)
    levels = rng.normal(0.0, 1.0, spec.K)
    diff = rng.choice(spec.K, size=spec.n_diff, replace=False)
    theta = np.isin(region, diff).astype(np.int8)
    base = levels[region]
    g1 = base + spec.noise_sd * rng.standard_normal((spec.n1, spec.m))
    g2 = base + spec.shift * spec.snr * theta + spec.noise_sd * rng.standard_normal((spec.n2, spec.m))
    return theta, bps, g1, g2


def wilcoxon_scaled(g1, g2):
    """Standardised Mann-Whitney statistic of group 1 against group 2.

    ``U = (rank sum of group 1) - n1 (n1 + 1) / 2`` with midranks for ties,
    centred at ``n1 n2 / 2`` and scaled by ``sqrt(n1 n2 (n1 + n2 + 1) / 12)``.
    With 2-d inputs (samples x loci) the statistic is computed per column.
    """
    g1 = np.asarray(g1, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    n1, n2 = g1.shape[0], g2.shape[0]
    if n1 < 1 or n2 < 1:
        raise InvalidParameterError("both groups need at least one value")
    ranks = stats.rankdata(np.concatenate([g1, g2], axis=0), axis=0)
    u = ranks[:n1].sum(axis=0) - n1 * (n1 + 1) / 2.0
    return (u - n1 * n2 / 2.0) / math.sqrt(n1 * n2 * (n1 + n2 + 1) / 12.0)


def cn_statistics(spec, seed):
    """``(theta, x)`` with ``x`` the per-locus scaled statistic (group 2 vs 1,
    so gains in group 2 give positive values)."""
    theta, _, g1, g2 = generate_cn_profiles(spec, seed)
    return theta, np.asarray(wilcoxon_scaled(g2, g1), dtype=float)


# ---------------------------------------------------------------- oracle diagnostic

def tv_posterior_bruteforce(params_a, params_b, x):
    """Total variation between the two posteriors of theta given ``x`` by
    enumerating all ``2^m`` state paths (``m <= 14``)."""
    x = np.asarray(x, dtype=float).ravel()
    m = x.size
    if m > 14:
        raise InvalidParameterError("brute-force enumeration is limited to m <= 14")
    paths = np.array(list(itertools.product((0, 1), repeat=m)), dtype=np.int64)

    def log_post(params):
        le, _ = log_emissions(params, x)
        with np.errstate(divide="ignore"):
            lA = np.log(params.A.as_array())
            lp = np.log(params.pi)
        s = lp[paths[:, 0]] + le[np.arange(m), paths].sum(axis=1)
        if m > 1:
            s = s + lA[paths[:, :-1], paths[:, 1:]].sum(axis=1)
        return s - special.logsumexp(s)

    pa = np.exp(log_post(params_a))
    pb = np.exp(log_post(params_b))
    return min(1.0, 0.5 * float(np.abs(pa - pb).sum()))


# ---------------------------------------------------------------- grid

def _default_policies():
    return (SelectionPolicy("pvalue_threshold", t=0.05), SelectionPolicy("suncai", alpha=0.05), SelectionPolicy("viterbi"))


@dataclass(frozen=True)
class ExperimentGrid:
    model: ModelParams = None
    cn: CnSpec = None
    m: int = 1000
    n_runs: int = 300
    beta: float = 0.1
    deltas: tuple = (0.5,)
    methods: tuple = METHODS
    policies: tuple = field(default_factory=_default_policies)
    B: int = 100
    seed: int = 0
    null_known: bool = True
    sides: tuple = ("upper", "lower")
    em: EmConfig = field(default_factory=EmConfig)
    clamp: bool = True

    def __post_init__(self):
        if (self.model is None) == (self.cn is None):
            raise InvalidParameterError("give exactly one of a model or a CN spec")
        if self.n_runs < 1:
            raise InvalidParameterError("n_runs must be at least 1")
        if self.m < 2:
            raise InvalidParameterError("m must be at least 2")
        if not 0.0 < self.beta < 1.0:
            raise InvalidParameterError("beta must lie in (0, 1)")
        for d in self.deltas:
            if not 0.0 < d < 1.0:
                raise InvalidParameterError("deltas must lie in (0, 1)")
        for meth in self.methods:
            if meth not in METHODS:
                raise InvalidParameterError(f"unknown method {meth!r}")
        if self.cn is not None and "oracle" in self.methods:
            raise InvalidParameterError("the oracle method needs a generating HMM")
        for side in self.sides:
            if side not in ("upper", "lower"):
                raise InvalidParameterError(f"unknown side {side!r}")
        for p in self.policies:
            if p.is_fixed and ("boot1" in self.methods or "boot3" in self.methods or "naive" in self.methods):
                raise InvalidParameterError("full selection policy required for boot1, boot3 and naive")
        if self.cn is not None:
            object.__setattr__(self, "m", self.cn.m)

    @property
    def f0(self):
        return self.model.f0 if self.model is not None else GaussianDensity(0.0, 1.0)

    def to_dict(self):
        return {
            "model": self.model.to_dict() if self.model is not None else None,
            "cn": self.cn.to_dict() if self.cn is not None else None,
            "m": self.m, "n_runs": self.n_runs, "beta": self.beta, "deltas": list(self.deltas),
            "methods": list(self.methods), "policies": [p.to_dict() for p in self.policies],
            "B": self.B, "seed": self.seed, "null_known": self.null_known, "sides": list(self.sides),
            "em": self.em.to_dict(), "clamp": self.clamp,
        }

    @classmethod
    def from_dict(cls, d, allow_unsafe=False):
        kw = {}
        if d.get("model") is not None:
            kw["model"] = ModelParams.from_dict(d["model"])
        if d.get("cn") is not None:
            kw["cn"] = CnSpec(**d["cn"])
        if not kw:
            kw["model"] = paper_model()
        for k in ("m", "n_runs", "B", "seed"):
            if k in d:
                kw[k] = int(d[k])
        for k in ("beta",):
            if k in d:
                kw[k] = float(d[k])
        for k in ("null_known", "clamp"):
            if k in d:
                kw[k] = bool(d[k])
        for k in ("deltas", "methods", "sides"):
            if k in d:
                kw[k] = tuple(d[k])
        if "policies" in d:
            kw["policies"] = tuple(SelectionPolicy.from_dict(p, allow_unsafe) for p in d["policies"])
        if "em" in d:
            kw["em"] = EmConfig.from_dict(d["em"])
        return cls(**kw)


def run_seeds(seed, r):
    """(data seed, EM seed, bootstrap seed key) of run ``r``."""
    data = np.random.SeedSequence(seed, spawn_key=(r, 0))
    em_seed = int(np.random.SeedSequence(seed, spawn_key=(r, 1)).generate_state(1)[0])
    return data, em_seed, (seed, r, 2)


def simulate_run(grid, r):
    """``(theta, x)`` of run ``r``."""
    data, _, _ = run_seeds(grid.seed, r)
    if grid.model is not None:
        return sample_hmm(grid.model, grid.m, np.random.default_rng(data))
    return cn_statistics(grid.cn, data)


def fit_run(grid, r, x):
    """Model fitted on run ``r``'s data (null known or re-estimated)."""
    _, em_seed, _ = run_seeds(grid.seed, r)
    cfg = EmConfig(grid.em.max_iters, grid.em.tol, grid.em.storey_lambda, grid.em.null_label_rule, em_seed)
    if grid.null_known:
        return em_fit_known_f0(x, grid.f0, cfg)
    return em_fit_unknown_f0(x, cfg, f0_init=grid.f0)


def power_fields(bound, size, n_null, n_alt):
    """``(u_count, included, value)`` for one upper-bound record."""
    u_count = int(math.floor(bound * size + 0.5))
    included = n_alt != 0 and n_null <= u_count
    value = (size - u_count) / n_alt if included else float("nan")
    return u_count, included, value


def _record(r, policy, method, delta, side, theta, R, bound):
    size = R.size
    n_null = int(np.count_nonzero(theta[R.indices] == 0))
    n_alt = size - n_null
    f = fdp(theta, R)
    bound = float(bound)
    diff = bound - f if side == "upper" else f - bound
    rec = {
        "run": r, "policy": policy.name, "method": method, "delta": delta, "side": side,
        "size": size, "n_true_null": n_null, "n_true_alt": n_alt, "fdp": f, "bound": bound,
        "diff": diff, "violation": diff < 0,
        "u_count": None, "power_included": None, "power_value": None,
    }
    if side == "upper":
        rec["u_count"], rec["power_included"], rec["power_value"] = power_fields(bound, size, n_null, n_alt)
    return rec


def run_one(grid, r):
    """All records of run ``r``; ``(records, failure message or None)``."""
    theta, x = simulate_run(grid, r)
    try:
        fitted, _ = fit_run(grid, r, x)
        chain_hat = posterior_chain(fitted, x)
        chain_true = posterior_chain(grid.model, x) if grid.model is not None else None
        needs_reps = any(meth in grid.methods for meth in ("naive", "boot1", "boot2", "boot3"))
        reps = None
        _, _, bkey = run_seeds(grid.seed, r)
        base = bs.BootstrapConfig(B=grid.B, beta=grid.beta, delta=grid.deltas[0] if grid.deltas else 0.5,
                                  variant="boot3", seed=bkey, em=grid.em, clamp=grid.clamp)
        if needs_reps:
            reps = bs.ReplicateSet(x, fitted, base)
        pvals = model_pvalues(fitted, x, chain_hat) if "simes" in grid.methods else None
    except (EstimationError, DegenerateLikelihoodError, BootstrapError, InvalidParameterError) as exc:
        log.info("run %d failed: %s", r, exc)
        return [], f"run {r}: {type(exc).__name__}: {exc}"

    recs = []
    for policy in grid.policies:
        R = policy(x, fitted, chain_hat, theta)
        for side in grid.sides:
            bound_of = upper_bound_chain if side == "upper" else lower_bound_chain
            for meth in grid.methods:
                if meth == "oracle":
                    recs.append(_record(r, policy, meth, None, side, theta, R, bound_of(chain_true, R, grid.beta)))
                elif meth == "plugin":
                    recs.append(_record(r, policy, meth, None, side, theta, R, bound_of(chain_hat, R, grid.beta)))
                elif meth == "simes":
                    if side == "upper":
                        recs.append(_record(r, policy, meth, None, side, theta, R, simes_bound(pvals, R, grid.beta)))
                elif meth == "naive":
                    cfg = bs.BootstrapConfig(grid.B, grid.beta, base.delta, "naive", bkey, em=grid.em)
                    res = bs.bootstrap_bound(x, policy, fitted, cfg, side, reps)
                    recs.append(_record(r, policy, meth, None, side, theta, R, res.value))
                elif meth in DELTA_METHODS:
                    for delta in grid.deltas:
                        cfg = bs.BootstrapConfig(grid.B, grid.beta, delta, meth, bkey, em=grid.em, clamp=grid.clamp)
                        target = R if meth == "boot2" else policy
                        res = bs.bootstrap_bound(x, target, fitted, cfg, side, reps, selection=R, chain=chain_hat)
                        recs.append(_record(r, policy, meth, delta, side, theta, R, res.value))
                else:
                    cfg = bs.BootstrapConfig(grid.B, grid.beta, base.delta, meth, bkey, em=grid.em, clamp=grid.clamp)
                    res = bs.bootstrap_bound(x, policy, fitted, cfg, side, reps, selection=R, chain=chain_hat)
                    recs.append(_record(r, policy, meth, None, side, theta, R, res.value))
    return recs, None


@dataclass
class GridResult:
    records: list
    failures: list
    n_runs: int

    def summary(self):
        return summarize(self.records, self.n_runs, self.failures)


def run_grid(grid, n_jobs=1, runs=None):
    """Run the grid (optionally a subset of run ids) and collect records
    ordered by run id."""
    ids = list(range(grid.n_runs)) if runs is None else list(runs)
    if n_jobs == 1 or len(ids) == 1:
        outs = [run_one(grid, r) for r in ids]
    else:
        outs = Parallel(n_jobs=n_jobs)(delayed(run_one)(grid, r) for r in ids)
    records, failures = [], []
    for recs, fail in outs:
        records.extend(recs)
        if fail:
            failures.append(fail)
    return GridResult(records, failures, len(ids))


def power(records):
    """Conditional mean of ``(|S| - U_count) / |S cap H1|`` over included
    upper-bound records (NaN when none qualifies)."""
    vals = [rec["power_value"] for rec in records if rec.get("side", "upper") == "upper" and rec.get("power_included")]
    return float(np.mean(vals)) if vals else float("nan")


def _cell_key(rec):
    return rec["method"], rec["policy"], rec["delta"], rec["side"]


def summarize(records, n_runs=None, failures=()):
    """One row per (method, policy, delta, side): violation rate, mean
    difference, mean bound and power."""
    cells = defaultdict(list)
    for rec in records:
        cells[_cell_key(rec)].append(rec)
    rows = []
    for key in sorted(cells, key=lambda k: (k[0], k[1], -1.0 if k[2] is None else k[2], k[3])):
        recs = cells[key]
        row = {
            "method": key[0], "policy": key[1], "delta": key[2], "side": key[3], "n": len(recs),
            "violation_rate": float(np.mean([rec["violation"] for rec in recs])),
            "mean_diff": float(np.mean([rec["diff"] for rec in recs])),
            "mean_bound": float(np.mean([rec["bound"] for rec in recs])),
            "mean_fdp": float(np.mean([rec["fdp"] for rec in recs])),
        }
        if key[3] == "upper":
            p = power(recs)
            row["power"] = None if math.isnan(p) else p
            row["n_power"] = int(sum(bool(rec["power_included"]) for rec in recs))
        rows.append(row)
    return {"n_runs": n_runs, "n_failed": len(failures), "failures": list(failures), "cells": rows}


def cell(summary, method, policy, side="upper", delta=None):
    for row in summary["cells"]:
        if row["method"] == method and row["policy"] == policy and row["side"] == side and row["delta"] == delta:
            return row
    raise KeyError((method, policy, side, delta))


# ---------------------------------------------------------------- output

def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(float(v))
    return str(v)


def write_records_csv(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for rec in records:
            w.writerow([_fmt(rec[k]) for k in RECORD_FIELDS])


def write_summary_json(summary, path, extra=None):
    out = {"schema_version": 1}
    if extra:
        out.update(extra)
    out.update(summary)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_diff_histograms(records, directory, bins=40):
    """One whitespace-separated ``bin_center count`` file per summary cell,
    ready for gnuplot; returns the written paths."""
    cells = defaultdict(list)
    for rec in records:
        cells[_cell_key(rec)].append(rec["diff"])
    paths = []
    for (meth, pol, delta, side), diffs in sorted(cells.items(), key=lambda kv: str(kv[0])):
        counts, edges = np.histogram(diffs, bins=bins, range=(-1.0, 1.0))
        safe = "".join(ch if ch.isalnum() else "_" for ch in pol)
        name = f"hist_{meth}_{safe}_{'' if delta is None else delta}_{side}.dat"
        p = os.path.join(directory, name)
        with open(p, "w") as fh:
            for c, lo, hi in zip(counts, edges[:-1], edges[1:]):
                fh.write(f"{0.5 * (lo + hi):.6f} {int(c)}\n")
        paths.append(p)
    return paths
