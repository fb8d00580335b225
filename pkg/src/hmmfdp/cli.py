"""Command-line interface: ``estimate``, ``bound``, ``simulate`` and ``benchmark``.

Observations are read from a one-column CSV with header ``x``; every JSON
output carries ``schema_version``.  Hypothesis indices are 1-based in all
external formats.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
import argparse
import csv
import json
import logging
import os
import sys

import jsonschema
import numpy as np

from . import __version__
from . import bootstrap as bs
from .bounds import Selection, lower_bound_chain, upper_bound_chain
from .density import GaussianDensity, density_from_dict
from .errors import (BootstrapError, DegenerateLikelihoodError, EmptySelectionError, EstimationError,
                     HMMFDPError, InvalidParameterError, UnsupportedVariantError)
from .estimation import EmConfig, em_fit_known_f0, em_fit_unknown_f0
from .experiments import (CnSpec, ExperimentGrid, cn_statistics, paper_model, run_grid, write_diff_histograms,
                          write_records_csv, write_summary_json)
from .hmm_core import ModelParams, posterior_chain, sample_hmm
from .selection import SelectionPolicy, model_pvalues, simes_bound

log = logging.getLogger("hmmfdp")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "HMMFDP_THREADS"
BOUND_METHODS = ("oracle", "plugin", "simes", "naive", "boot1", "boot2", "boot3")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- schemas

_DENSITY = {
    "type": "object",
    "required": ["type"],
    "properties": {"type": {"enum": ["gaussian", "kernel_mixture"]}},
}
_EM = {
    "type": "object",
    "properties": {
        "max_iters": {"type": "integer", "minimum": 0},
        "tol": {"type": "number", "exclusiveMinimum": 0},
        "storey_lambda": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "null_label_rule": {"enum": ["predominant", "mean_closest_to_zero"]},
        "seed": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}
_POLICY = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": list(SelectionPolicy.KINDS)},
        "t": {"type": "number", "minimum": 0, "maximum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "k": {"type": "integer", "minimum": 0},
        "indices": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "rule": {"type": "string"},
    },
    "additionalProperties": False,
}
_MODEL = {
    "type": "object",
    "required": ["A", "f0", "f1"],
    "properties": {
        "A": {"type": "array", "minItems": 2, "maxItems": 2,
              "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}}},
        "f0": _DENSITY, "f1": _DENSITY, "null_known": {"type": "boolean"},
    },
}
_LEVEL = {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}

SCHEMAS = {
    "estimate": {
        "type": "object",
        "properties": {"em": _EM, "f0": _DENSITY, "null_known": {"type": "boolean"}},
        "additionalProperties": False,
    },
    "bound": {
        "type": "object",
        "properties": {
            "policy": _POLICY,
            "selection": {"oneOf": [
                {"type": "array", "items": {"type": "integer", "minimum": 1}},
                {"type": "string"},
            ]},
            "methods": {"type": "array", "items": {"enum": list(BOUND_METHODS)}, "minItems": 1},
            "beta": _LEVEL, "delta": _LEVEL, "gamma": _LEVEL,
            "B": {"type": "integer", "minimum": 1},
            "clamp": {"type": "boolean"},
            "em": _EM,
            "true_model": {"type": "string"},
        },
        "additionalProperties": False,
    },
    "simulate": {
        "type": "object",
        "properties": {
            "m": {"type": "integer"},
            "model": _MODEL,
            "cn": {"type": "object"},
        },
        "additionalProperties": False,
    },
    "benchmark": {
        "type": "object",
        "properties": {
            "model": _MODEL,
            "cn": {"type": "object"},
            "m": {"type": "integer", "minimum": 2},
            "n_runs": {"type": "integer", "minimum": 1},
            "beta": _LEVEL,
            "deltas": {"type": "array", "items": _LEVEL},
            "methods": {"type": "array", "items": {"enum": list(BOUND_METHODS)}},
            "policies": {"type": "array", "items": _POLICY, "minItems": 1},
            "B": {"type": "integer", "minimum": 1},
            "seed": {"type": "integer", "minimum": 0},
            "null_known": {"type": "boolean"},
            "sides": {"type": "array", "items": {"enum": ["upper", "lower"]}},
            "em": _EM,
            "clamp": {"type": "boolean"},
            "histograms": {"type": "boolean"},
        },
        "additionalProperties": False,
    },
}


def load_config(path, command):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}")
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config {path}: {where}: {exc.message}")
    return cfg


# ---------------------------------------------------------------- data I/O

def read_observations(path):
    """Observations from a CSV with a single column headed ``x``."""
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}")
    with fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or [h.strip() for h in header] != ["x"]:
            raise DataError(f"{path}:1: expected a single header column 'x'")
        vals = []
        for row in rows:
            line = rows.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 1:
                raise DataError(f"{path}:{line}: expected one column, found {len(row)}")
            try:
                v = float(row[0])
            except ValueError:
                raise DataError(f"{path}:{line}: cannot parse {row[0]!r} as a number")
            if not np.isfinite(v):
                raise DataError(f"{path}:{line}: value is not finite")
            vals.append(v)
    if not vals:
        raise DataError(f"{path}: no observations")
    return np.array(vals)


def write_column(path, name, values, fmt=lambda v: repr(float(v))):
    with open(path, "w", newline="") as fh:
        fh.write(name + "\n")
        for v in values:
            fh.write(fmt(v) + "\n")


def write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def read_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read model {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise DataError(f"model {path} is not valid JSON: {exc}")
    d = d.get("model", d)
    try:
        jsonschema.validate(d, _MODEL)
        return ModelParams.from_dict(d)
    except (jsonschema.ValidationError, InvalidParameterError, UnsupportedVariantError, KeyError) as exc:
        raise DataError(f"model {path} is invalid: {getattr(exc, 'message', exc)}")


def model_document(params, trace=None, em=None):
    doc = {"schema_version": SCHEMA_VERSION, "model": params.to_dict()}
    if trace is not None:
        doc["trace"] = trace.summary()
    if em is not None:
        doc["em"] = em.to_dict()
    return doc


# ---------------------------------------------------------------- commands

def _em_config(cfg, seed):
    em = EmConfig.from_dict(cfg.get("em", {}))
    if seed is not None:
        em = EmConfig(em.max_iters, em.tol, em.storey_lambda, em.null_label_rule, seed)
    return em


def fit(x, null_known, f0, em):
    if null_known:
        return em_fit_known_f0(x, f0, em)
    return em_fit_unknown_f0(x, em, f0_init=f0)


def cmd_estimate(args):
    cfg = load_config(args.config, "estimate")
    x = read_observations(args.input)
    em = _em_config(cfg, args.seed)
    f0 = density_from_dict(cfg["f0"]) if "f0" in cfg else GaussianDensity(0.0, 1.0)
    params, trace = fit(x, cfg.get("null_known", True), f0, em)
    write_json(args.output, model_document(params, trace, em))
    return EXIT_OK


def read_indices(path):
    """1-based indices, one per line; an optional non-numeric header is skipped."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}")
    out = []
    for n, line in enumerate(lines, start=1):
        tok = line.strip()
        if not tok:
            continue
        try:
            v = int(tok)
        except ValueError:
            if n == 1:
                continue
            raise DataError(f"{path}:{n}: cannot parse {tok!r} as an index")
        if v < 1:
            raise DataError(f"{path}:{n}: indices are 1-based")
        out.append(v)
    return out


def _policy(cfg, allow_unsafe):
    if "policy" in cfg and "selection" in cfg:
        raise UsageError("give either a policy or a fixed selection, not both")
    if "selection" in cfg:
        idx = cfg["selection"]
        if isinstance(idx, str):
            idx = read_indices(idx)
        return SelectionPolicy.from_dict({"type": "fixed", "indices": idx})
    if "policy" in cfg:
        try:
            return SelectionPolicy.from_dict(cfg["policy"], allow_unsafe=allow_unsafe)
        except InvalidParameterError as exc:
            raise UsageError(str(exc))
    return SelectionPolicy("pvalue_threshold", t=0.05)


def bound_results(x, fitted, policy, methods, beta=0.1, delta=0.5, gamma=0.5, B=100, seed=0,
                  clamp=True, em=EmConfig(), true_model=None, n_jobs=1):
    """Per-method upper, lower and two-sided bounds for ``policy`` on ``x``.

    The interval spends ``beta * gamma`` on the lower and ``beta * (1 - gamma)``
    on the upper side.
    """
    if policy.unsafe:
        raise UsageError("oracle-leak policies need hidden states and are only available in benchmark")
    if policy.is_fixed and ({"boot1", "boot3", "naive"} & set(methods)):
        raise UsageError("full selection policy required for boot1, boot3 and naive; "
                         "a fixed selection supports oracle, plugin, simes and boot2")
    chain = posterior_chain(fitted, x)
    R = policy(x, fitted, chain)
    levels = {"upper": beta, "lower": beta, "interval_lower": beta * gamma, "interval_upper": beta * (1.0 - gamma)}
    reps = None
    if {"boot1", "boot2", "boot3", "naive"} & set(methods):
        reps = bs.ReplicateSet(x, fitted, bs.BootstrapConfig(B=B, seed=seed, em=em, n_jobs=n_jobs))
    out = {}
    for meth in methods:
        vals = {}
        for key, lev in levels.items():
            side = "lower" if key.endswith("lower") else "upper"
            if meth in ("oracle", "plugin"):
                if meth == "oracle" and true_model is None:
                    raise UsageError("the oracle method needs true_model")
                ch = posterior_chain(true_model, x) if meth == "oracle" else chain
                fn = upper_bound_chain if side == "upper" else lower_bound_chain
                vals[key] = fn(ch, R, lev)
            elif meth == "simes":
                vals[key] = simes_bound(model_pvalues(fitted, x, chain), R, lev) if side == "upper" else None
            else:
                cfg = bs.BootstrapConfig(B=B, beta=lev, delta=delta, variant=meth, seed=seed, clamp=clamp, em=em)
                target = R if meth == "boot2" else policy
                vals[key] = bs.bootstrap_bound(x, target, fitted, cfg, side, reps, selection=R, chain=chain).value
        entry = {
            "upper": vals["upper"],
            "lower": vals["lower"],
            "interval": None if vals["interval_lower"] is None else [vals["interval_lower"], vals["interval_upper"]],
            "beta": beta,
            "delta": delta if meth in ("boot1", "boot2") else None,
            "B": B if meth in ("boot1", "boot2", "boot3", "naive") else None,
            "seed": seed if meth in ("boot1", "boot2", "boot3", "naive") else None,
        }
        out[meth] = entry
    return R, out


def cmd_bound(args):
    cfg = load_config(args.config, "bound")
    x = read_observations(args.input)
    policy = _policy(cfg, args.unsafe_experiments)
    em = _em_config(cfg, args.seed)
    if args.model:
        fitted = read_model(args.model)
    elif args.fit:
        fitted, _ = fit(x, True, GaussianDensity(0.0, 1.0), em)
    else:
        raise UsageError("give --model or --fit")
    true_model = read_model(cfg["true_model"]) if "true_model" in cfg else None
    if args.true_model:
        true_model = read_model(args.true_model)
    if policy.is_fixed:
        Selection.from_indices(policy.indices).check_bounds(x.size)
    methods = tuple(cfg.get("methods", ["plugin"]))
    seed = args.seed if args.seed is not None else 0
    R, results = bound_results(
        x, fitted, policy, methods,
        beta=cfg.get("beta", 0.1), delta=cfg.get("delta", 0.5), gamma=cfg.get("gamma", 0.5),
        B=cfg.get("B", 100), seed=seed, clamp=cfg.get("clamp", True), em=em,
        true_model=true_model, n_jobs=args.threads,
    )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "policy": policy.to_dict(),
        "selection": R.one_based(),
        "size": R.size,
        "methods": results,
    }
    write_json(args.output, doc)
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config, "simulate")
    m = args.m if args.m is not None else cfg.get("m", 1000)
    if m < 1:
        raise UsageError("m must be at least 1")
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.output_dir, exist_ok=True)
    if "cn" in cfg:
        spec = CnSpec(**{**cfg["cn"], "m": m})
        theta, x = cn_statistics(spec, seed)
        spec_doc = {"schema_version": SCHEMA_VERSION, "cn": spec.to_dict(), "seed": seed}
    else:
        model = ModelParams.from_dict(cfg["model"]) if "model" in cfg else paper_model()
        theta, x = sample_hmm(model, m, seed)
        spec_doc = {"schema_version": SCHEMA_VERSION, "model": model.to_dict(), "m": m, "seed": seed}
    write_column(os.path.join(args.output_dir, "x.csv"), "x", x)
    write_column(os.path.join(args.output_dir, "theta.csv"), "theta", theta, fmt=lambda v: str(int(v)))
    write_json(os.path.join(args.output_dir, "spec.json"), spec_doc)
    return EXIT_OK


def cmd_benchmark(args):
    cfg = load_config(args.config, "benchmark")
    histograms = cfg.pop("histograms", False)
    if args.seed is not None:
        cfg["seed"] = args.seed
    try:
        grid = ExperimentGrid.from_dict(cfg, allow_unsafe=args.unsafe_experiments)
    except (InvalidParameterError, TypeError) as exc:
        raise UsageError(str(exc))
    os.makedirs(args.output_dir, exist_ok=True)
    res = run_grid(grid, n_jobs=args.threads)
    write_records_csv(res.records, os.path.join(args.output_dir, "records.csv"))
    write_summary_json(res.summary(), os.path.join(args.output_dir, "summary.json"), {"grid": grid.to_dict()})
    if histograms:
        write_diff_histograms(res.records, args.output_dir)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def default_threads():
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
            if n >= 1:
                return n
        except ValueError:
            pass
        log.warning("ignoring invalid %s=%r", THREADS_ENV, env)
    return os.cpu_count() or 1


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--threads", type=int, default=None,
                        help=f"worker count (default: ${THREADS_ENV} or the number of CPUs)")
    common.add_argument("--unsafe-experiments", action="store_true",
                        help="allow selection policies that look at the hidden states")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = _Parser(prog="hmmfdp", description="FDP confidence bounds under a two-state hidden Markov model.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    e = sub.add_parser("estimate", parents=[common], help="fit the HMM to observations")
    e.add_argument("--input", "-i", required=True, help="CSV with header 'x'")
    e.add_argument("--output", "-o", default="-", help="model JSON (default: stdout)")
    e.set_defaults(func=cmd_estimate)

    b = sub.add_parser("bound", parents=[common], help="FDP bounds for a selection")
    b.add_argument("--input", "-i", required=True, help="CSV with header 'x'")
    b.add_argument("--model", help="fitted model JSON")
    b.add_argument("--fit", action="store_true", help="fit the model (known N(0,1) null) instead of --model")
    b.add_argument("--true-model", help="generating model JSON for the oracle method")
    b.add_argument("--output", "-o", default="-", help="bounds JSON (default: stdout)")
    b.set_defaults(func=cmd_bound)

    s = sub.add_parser("simulate", parents=[common], help="simulate a dataset")
    s.add_argument("--output-dir", "-o", required=True)
    s.add_argument("--m", type=int, help="number of hypotheses")
    s.set_defaults(func=cmd_simulate)

    k = sub.add_parser("benchmark", parents=[common], help="run a coverage/power grid")
    k.add_argument("--output-dir", "-o", required=True)
    k.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    elif args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"hmmfdp {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EmptySelectionError) as exc:
        print(f"hmmfdp {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EstimationError, DegenerateLikelihoodError, BootstrapError) as exc:
        print(f"hmmfdp {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidParameterError, UnsupportedVariantError) as exc:
        print(f"hmmfdp {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA
    except HMMFDPError as exc:
        print(f"hmmfdp {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
