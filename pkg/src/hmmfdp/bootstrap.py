"""Bootstrap corrections of the plug-in FDP bounds.

All variants share one replicate engine: draw ``(theta*, X*)`` from the
fitted model, refit on ``X*`` (warm-started at the fitted parameters) and
keep the posterior chains the corrections need.  A correction is an
empirical quantile of per-replicate differences, added to the plug-in bound
at the inner level.
"""
from dataclasses import asdict, dataclass, field
from functools import cached_property
import csv
import logging
import math

import numpy as np
from joblib import Parallel, delayed

from .bounds import Selection, fdp, lower_bound_chain, upper_bound_chain
from .errors import (BootstrapError, DegenerateLikelihoodError, EstimationError, InvalidParameterError)
from .estimation import EmConfig, refit
from .hmm_core import posterior_chain, sample_hmm

log = logging.getLogger(__name__)

VARIANTS = ("boot1", "boot2", "boot3", "naive")
# Largest tolerated share of failed replicate refits.
MAX_FAIL_FRACTION = 0.10
# A corrected bound this close to a multiple of 1/|R| is snapped onto it, so
# that floating noise in plug-in + correction cannot break ties with the FDP.
_SNAP = 1e-9
# Slack for the order-statistic index, so that e.g. 0.95 * 100 selects the 95th value.
_IDX_EPS = 1e-9


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 100
    beta: float = 0.1
    delta: float = 0.5
    variant: str = "boot3"
    seed: int = 0
    n_jobs: int = 1
    clamp: bool = True
    em: EmConfig = field(default_factory=EmConfig)

    def __post_init__(self):
        if int(self.B) < 1:
            raise InvalidParameterError("B must be at least 1")
        if not 0.0 < self.beta < 1.0:
            raise InvalidParameterError(f"beta must lie in (0, 1), got {self.beta}")
        if not 0.0 < self.delta < 1.0:
            raise InvalidParameterError(f"delta must lie in (0, 1), got {self.delta}")
        if self.variant not in VARIANTS:
            raise InvalidParameterError(f"unknown bootstrap variant {self.variant!r}")

    def to_dict(self):
        d = asdict(self)
        d["em"] = self.em.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        kw = {k: d[k] for k in ("B", "beta", "delta", "variant", "seed", "n_jobs", "clamp") if k in d}
        if "em" in d:
            kw["em"] = EmConfig.from_dict(d["em"])
        return cls(**kw)


# ---------------------------------------------------------------- quantiles

def _sorted_finite(d):
    d = np.sort(np.asarray(getattr(d, "d", d), dtype=float).ravel())
    if d.size == 0:
        raise InvalidParameterError("no replicate differences")
    if not np.all(np.isfinite(d)):
        raise InvalidParameterError("replicate differences must be finite")
    return d


def upper_quantile_correction(d, gamma):
    """Empirical (1 - gamma)-quantile: the ``ceil((1 - gamma) B)``-th smallest value."""
    if not 0.0 < gamma < 1.0:
        raise InvalidParameterError(f"gamma must lie in (0, 1), got {gamma}")
    d = _sorted_finite(d)
    j = math.ceil((1.0 - gamma) * d.size - _IDX_EPS)
    return float(d[min(max(j, 1), d.size) - 1])


def lower_quantile_correction(e, gamma):
    """The ``(floor(gamma B) + 1)``-th smallest value."""
    if not 0.0 < gamma < 1.0:
        raise InvalidParameterError(f"gamma must lie in (0, 1), got {gamma}")
    e = _sorted_finite(e)
    j = math.floor(gamma * e.size + _IDX_EPS) + 1
    return float(e[min(j, e.size) - 1])


# ---------------------------------------------------------------- replicates

@dataclass(eq=False)
class Replicate:
    """One bootstrap draw and the quantities derived from it."""

    b: int
    theta: np.ndarray
    x: np.ndarray
    x_orig: np.ndarray
    fitted: object
    refit_params: object
    n_iter: int
    converged: bool
    _selections: dict = field(default_factory=dict, repr=False)

    @property
    def ok(self):
        return self.refit_params is not None

    @cached_property
    def chain_star(self):
        """Posterior of theta* given X* under the refitted model."""
        return posterior_chain(self.refit_params, self.x)

    @cached_property
    def chain_star_hat(self):
        """Posterior of theta* given X* under the original fit."""
        return posterior_chain(self.fitted, self.x)

    @cached_property
    def chain_orig_star(self):
        """Posterior of theta given the original X under the refitted model."""
        return posterior_chain(self.refit_params, self.x_orig)

    def select(self, policy, use_refit=True):
        """``S(X*)`` with the policy run under the refit (or the original fit);
        cached per hashable policy."""
        try:
            key = (policy, use_refit)
            hit = self._selections.get(key)
        except TypeError:
            key, hit = None, None
        if hit is not None:
            return hit
        if use_refit:
            S = policy(self.x, self.refit_params, self.chain_star, self.theta)
        else:
            S = policy(self.x, self.fitted, self.chain_star_hat, self.theta)
        if key is not None:
            self._selections[key] = S
        return S


def replicate_seed(seed, b):
    """Independent stream for replicate ``b``; ``seed`` is an int or a tuple
    ``(master, key, ...)`` so that nested experiments get disjoint streams."""
    if isinstance(seed, tuple):
        return np.random.SeedSequence(seed[0], spawn_key=tuple(seed[1:]) + (b,))
    return np.random.SeedSequence(seed, spawn_key=(b,))


def _one_replicate(x, fitted, b, seed, em, do_refit):
    rng = np.random.default_rng(replicate_seed(seed, b))
    theta, xs = sample_hmm(fitted, x.size, rng)
    if not do_refit:
        return Replicate(b, theta, xs, x, fitted, fitted, 0, True)
    try:
        params, trace = refit(xs, fitted, em)
    except (EstimationError, DegenerateLikelihoodError, InvalidParameterError) as exc:
        log.debug("replicate %d refit failed: %s", b, exc)
        return Replicate(b, theta, xs, x, fitted, None, 0, False)
    return Replicate(b, theta, xs, x, fitted, params, trace.n_iter, trace.converged)


class ReplicateSet:
    """The ``B`` replicates of one bootstrap run, shareable across variants."""

    def __init__(self, x, fitted, config, refit_models=True):
        self.x = np.ascontiguousarray(x, dtype=float).ravel()
        self.fitted = fitted
        self.config = config
        B = int(config.B)
        args = [(self.x, fitted, b, config.seed, config.em, refit_models) for b in range(B)]
        if config.n_jobs == 1:
            reps = [_one_replicate(*a) for a in args]
        else:
            reps = Parallel(n_jobs=config.n_jobs)(delayed(_one_replicate)(*a) for a in args)
        self.replicates = sorted(reps, key=lambda r: r.b)
        self.n_failed = sum(not r.ok for r in self.replicates)
        if self.n_failed > MAX_FAIL_FRACTION * B:
            raise BootstrapError(f"{self.n_failed} of {B} replicate refits failed")

    @property
    def ok(self):
        return [r for r in self.replicates if r.ok]

    def __len__(self):
        return len(self.replicates)


@dataclass(frozen=True, eq=False)
class ReplicateDiffs:
    """Per-replicate differences of one variant, with refit diagnostics."""

    d: np.ndarray
    variant: str
    b: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.d)):
            raise InvalidParameterError("replicate differences must be finite")

    def __len__(self):
        return self.d.size

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["b", "D", "refit_iters", "refit_converged"])
            for row in zip(self.b, self.d, self.n_iter, self.converged):
                w.writerow([int(row[0]) + 1, repr(float(row[1])), int(row[2]), str(bool(row[3])).lower()])


def _collect(reps, fn, variant):
    d = np.array([fn(r) for r in reps], dtype=float)
    return ReplicateDiffs(
        d, variant,
        np.array([r.b for r in reps]),
        np.array([r.n_iter for r in reps]),
        np.array([r.converged for r in reps]),
    )


def _bound_fn(side):
    return upper_bound_chain if side == "upper" else lower_bound_chain


def diffs_boot1(reps, policy, level, side="upper"):
    """``D_1 = U(X*, S(X*); fit) - U(X*, S(X*); refit)`` (``L`` for the lower side)."""
    bound = _bound_fn(side)

    def one(r):
        S = r.select(policy)
        return bound(r.chain_star_hat, S, level) - bound(r.chain_star, S, level)
    return _collect(reps, one, "boot1")


def diffs_boot2(reps, R, level, side="upper"):
    """``D_2 = U(X, R; fit) - U(X, R; refit)`` on the original data."""
    bound = _bound_fn(side)
    R = R if isinstance(R, Selection) else Selection.from_indices(R)
    base = None

    def one(r):
        nonlocal base
        if base is None:
            base = bound(posterior_chain(r.fitted, r.x_orig), R, level)
        return base - bound(r.chain_orig_star, R, level)
    return _collect(reps, one, "boot2")


def diffs_boot3(reps, policy, level, side="upper"):
    """``D_3 = FDP(theta*, S(X*)) - U(X*, S(X*); refit)``."""
    bound = _bound_fn(side)

    def one(r):
        S = r.select(policy)
        return fdp(r.theta, S) - bound(r.chain_star, S, level)
    return _collect(reps, one, "boot3")


def naive_fdps(reps, policy):
    """``FDP(theta*, S(X*))`` with the policy run under the original fit."""
    return _collect(reps, lambda r: fdp(r.theta, r.select(policy, use_refit=False)), "naive")


# ---------------------------------------------------------------- bounds

@dataclass(frozen=True)
class BoundResult:
    value: float
    method: str
    side: str
    beta: float
    delta: float = None
    B: int = None
    seed: object = None
    plugin: float = None
    correction: float = None
    raw_correction: float = None
    n_failed: int = 0

    def __float__(self):
        return float(self.value)

    def to_dict(self):
        return asdict(self)


def finalize(v, size=None):
    """Truncate to [0, 1]; with the selection size, snap onto the count grid."""
    v = min(max(float(v), 0.0), 1.0)
    if size:
        k = round(v * size)
        if abs(v * size - k) < _SNAP:
            v = k / size
    return v


def _require_policy(policy, variant):
    if isinstance(policy, Selection) or getattr(policy, "is_fixed", False) or not callable(policy):
        raise InvalidParameterError(
            f"full selection policy required for {variant}; a fixed selection only supports boot2")


def _replicates(x, fitted, config, replicates, refit_models=True):
    if replicates is not None:
        return replicates
    return ReplicateSet(x, fitted, config, refit_models)


def _corrected(side, plugin, diffs, gamma, clamp):
    if side == "upper":
        raw = upper_quantile_correction(diffs, gamma)
        corr = max(raw, 0.0) if clamp else raw
    else:
        raw = lower_quantile_correction(diffs, gamma)
        corr = min(raw, 0.0) if clamp else raw
    return plugin + corr, corr, raw


def _observed(x, policy, fitted, chain, selection):
    """``S(X)`` and the posterior chain of the original data."""
    if chain is None:
        chain = posterior_chain(fitted, x)
    if selection is None:
        selection = policy(np.asarray(x, float), fitted, chain)
    return selection, chain


def _boot12(x, sel_or_policy, fitted, config, side, variant, replicates, selection=None, chain=None):
    beta, delta = config.beta, config.delta
    level, gamma = beta * (1.0 - delta), beta * delta
    if variant == "boot1":
        _require_policy(sel_or_policy, "boot1")
        R, chain = _observed(x, sel_or_policy, fitted, chain, selection)
    else:
        R = sel_or_policy if isinstance(sel_or_policy, Selection) else Selection.from_indices(sel_or_policy)
        if R.size == 0:
            return BoundResult(0.0, variant, side, beta, delta, config.B, config.seed, 0.0, 0.0, 0.0, 0)
        chain = posterior_chain(fitted, x) if chain is None else chain
    rs = _replicates(x, fitted, config, replicates)
    plugin = _bound_fn(side)(chain, R, level)
    if variant == "boot1":
        diffs = diffs_boot1(rs.ok, sel_or_policy, level, side)
    else:
        diffs = diffs_boot2(rs.ok, R, level, side)
    v, corr, raw = _corrected(side, plugin, diffs, gamma, config.clamp)
    return BoundResult(finalize(v, R.size), variant, side, beta, delta, config.B, config.seed, plugin, corr, raw, rs.n_failed)


def boot1_upper(x, policy, fitted, config=BootstrapConfig(), replicates=None, selection=None, chain=None):
    """Plug-in at ``beta (1 - delta)`` plus the ``beta delta`` correction from
    resampled data, refitted model and re-run policy.

    ``selection`` and ``chain`` may carry ``S(x)`` and the posterior chain of
    ``x`` when the caller already has them (a policy that looks at the true
    states can only be evaluated by the caller).
    """
    return _boot12(x, policy, fitted, config, "upper", "boot1", replicates, selection, chain)


def boot1_lower(x, policy, fitted, config=BootstrapConfig(), replicates=None, selection=None, chain=None):
    return _boot12(x, policy, fitted, config, "lower", "boot1", replicates, selection, chain)


def boot2_upper(x, R, fitted, config=BootstrapConfig(), replicates=None, chain=None):
    """Like boot1 but the differences are taken on the fixed ``(x, R)``, so
    only the selected set is needed."""
    return _boot12(x, R, fitted, config, "upper", "boot2", replicates, chain=chain)


def boot2_lower(x, R, fitted, config=BootstrapConfig(), replicates=None, chain=None):
    return _boot12(x, R, fitted, config, "lower", "boot2", replicates, chain=chain)


def _boot3(x, policy, fitted, config, side, replicates, selection, chain):
    _require_policy(policy, "boot3")
    beta = config.beta
    R, chain = _observed(x, policy, fitted, chain, selection)
    rs = _replicates(x, fitted, config, replicates)
    plugin = _bound_fn(side)(chain, R, beta)
    diffs = diffs_boot3(rs.ok, policy, beta, side)
    v, corr, raw = _corrected(side, plugin, diffs, beta, config.clamp)
    return BoundResult(finalize(v, R.size), "boot3", side, beta, None, config.B, config.seed, plugin, corr, raw, rs.n_failed)


def boot3_upper(x, policy, fitted, config=BootstrapConfig(), replicates=None, selection=None, chain=None):
    """Plug-in at ``beta`` plus the (1 - beta)-quantile of FDP minus the
    refitted plug-in on replicates."""
    return _boot3(x, policy, fitted, config, "upper", replicates, selection, chain)


def boot3_lower(x, policy, fitted, config=BootstrapConfig(), replicates=None, selection=None, chain=None):
    return _boot3(x, policy, fitted, config, "lower", replicates, selection, chain)


def _naive(policy, fitted, config, side, replicates, x):
    if replicates is None:
        if x is None:
            raise InvalidParameterError("naive bound needs the sample size (pass x)")
        replicates = ReplicateSet(x, fitted, config, refit_models=False)
    fd = naive_fdps(replicates.replicates, policy)
    if side == "upper":
        v = upper_quantile_correction(fd, config.beta)
    else:
        v = lower_quantile_correction(fd, config.beta)
    return BoundResult(finalize(v), "naive", side, config.beta, None, config.B, config.seed)


def naive_upper(policy, fitted, config=BootstrapConfig(), replicates=None, x=None):
    """Unconditional (1 - beta)-quantile of the FDP under the fitted model.

    ``x`` only supplies the sample size when no replicates are passed.
    """
    return _naive(policy, fitted, config, "upper", replicates, x)


def naive_lower(policy, fitted, config=BootstrapConfig(), replicates=None, x=None):
    return _naive(policy, fitted, config, "lower", replicates, x)


def bootstrap_bound(x, policy_or_set, fitted, config, side="upper", replicates=None, selection=None, chain=None):
    """Dispatch on ``config.variant`` and ``side``.

    boot2 accepts either a selection or a policy (which is then applied to
    ``x`` once); the other variants need a full policy.
    """
    if side not in ("upper", "lower"):
        raise InvalidParameterError(f"side must be 'upper' or 'lower', got {side!r}")
    if config.variant == "naive":
        return _naive(policy_or_set, fitted, config, side, replicates, x)
    if config.variant == "boot2":
        R = policy_or_set
        if not isinstance(R, Selection) and callable(R):
            R, chain = _observed(x, R, fitted, chain, selection)
        fn = boot2_upper if side == "upper" else boot2_lower
        return fn(x, R, fitted, config, replicates, chain=chain)
    fn = {("boot1", "upper"): boot1_upper, ("boot1", "lower"): boot1_lower,
          ("boot3", "upper"): boot3_upper, ("boot3", "lower"): boot3_lower}[(config.variant, side)]
    return fn(x, policy_or_set, fitted, config, replicates, selection=selection, chain=chain)
