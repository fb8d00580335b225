"""EM-type estimation of the HMM with kernel density emissions.

The transition matrix gets the usual Baum-Welch update; the alternative
density (and the null density when it is unknown) is re-estimated as a
posterior-weighted Gaussian KDE with a Silverman bandwidth recomputed at
every iteration.  Because that M-step is not an exact maximisation, the
iterate with the best observed-data likelihood is returned.
"""
from dataclasses import asdict, dataclass, field
import logging

import numpy as np

from . import _kernels
from .density import GaussianDensity, KernelMixture, PValues, bandwidth_silverman, weighted_kde
from .errors import EstimationError, InvalidParameterError
from .hmm_core import (ModelParams, TransitionMatrix, floor_log_emissions, forward_backward_log,
                       make_rng, stationary_distribution)

log = logging.getLogger(__name__)

# EM-estimated transition entries are kept inside [_A_EPS, 1 - _A_EPS].
_A_EPS = 1e-10
# Allowed decrease of the log-likelihood between iterates before logging it.
_LL_SLACK = 1e-8


@dataclass(frozen=True)
class EmConfig:
    max_iters: int = 200
    tol: float = 1e-4
    storey_lambda: float = 0.8
    null_label_rule: str = "predominant"
    seed: int = 0

    def __post_init__(self):
        if not self.tol > 0:
            raise InvalidParameterError("tol must be positive")
        if not 0.0 < self.storey_lambda < 1.0:
            raise InvalidParameterError("storey_lambda must lie in (0, 1)")
        if self.max_iters < 0:
            raise InvalidParameterError("max_iters must be nonnegative")
        if self.null_label_rule not in ("predominant", "mean_closest_to_zero"):
            raise InvalidParameterError(f"unknown null_label_rule {self.null_label_rule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in ("max_iters", "tol", "storey_lambda", "null_label_rule", "seed") if k in d})


@dataclass
class EmTrace:
    A: list = field(default_factory=list)
    change: list = field(default_factory=list)
    loglik: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False
    best_iter: int = 0
    flags: list = field(default_factory=list)
    n_floor: int = 0

    def summary(self):
        return {
            "n_iter": self.n_iter,
            "converged": self.converged,
            "best_iter": self.best_iter,
            "final_change": self.change[-1] if self.change else None,
            "loglik": self.loglik[self.best_iter] if self.loglik else None,
            "flags": list(self.flags),
        }


def storey_pi0(p, lam=0.8):
    """``min(1, #{p_i > lam} / (m (1 - lam)))``."""
    if not 0.0 < lam < 1.0:
        raise InvalidParameterError("lambda must lie in (0, 1)")
    p = p.p if isinstance(p, PValues) else np.asarray(p, dtype=float)
    return min(1.0, np.count_nonzero(p > lam) / (p.size * (1.0 - lam)))


def transition_from_pi0(pi0, a11):
    """Transition matrix with ``a11`` given and stationary law ``(pi0, 1 - pi0)``."""
    pi1 = 1.0 - pi0
    a10 = 1.0 - a11
    a01 = pi1 * a10 / pi0
    return TransitionMatrix(1.0 - a01, a01, a10, a11)


def _a11_range(pi0):
    # a01 = pi1 (1 - a11) / pi0 < 1  <=>  a11 > 1 - pi0 / pi1; then intersect with [0.6, 1)
    pi1 = 1.0 - pi0
    return max(0.6, 1.0 - pi0 / pi1), 1.0


def initialize(x, config=EmConfig(), f0=None):
    """Starting point for EM.

    The null proportion comes from Storey's estimator on p-values under
    ``f0``; ``a11`` is drawn uniformly over its admissible range intersected
    with [0.6, 1).  The initial alternative density is the clipped
    difference ``(f_hat - pi0 f0) / (1 - pi0)``, represented as a KDE whose
    weights are that difference relative to ``f_hat`` at each observation.

    Returns ``(params, flags)``.
    """
    x = np.ascontiguousarray(x, dtype=float).ravel()
    if x.size < 2:
        raise EstimationError("need at least two observations")
    if f0 is None:
        f0 = GaussianDensity(float(np.median(x)), float(np.std(x, ddof=1)))
    pi0 = storey_pi0(f0.sf(x), config.storey_lambda)
    if pi0 <= 0.0 or pi0 >= 1.0:
        raise EstimationError(f"Storey estimate pi0={pi0:g} leaves a degenerate class")
    rng = make_rng(config.seed)
    lo, hi = _a11_range(pi0)
    A = None
    for _ in range(100):
        a11 = min(rng.uniform(lo, hi), 1.0 - 1e-6)
        try:
            A = transition_from_pi0(pi0, a11)
            break
        except InvalidParameterError:
            continue
    if A is None:
        raise EstimationError("could not draw an admissible initial transition matrix")

    flags = []
    f_hat = weighted_kde(x, np.ones_like(x))
    fx = f_hat.pdf(x)
    excess = np.maximum(fx - pi0 * f0.pdf(x), 0.0)
    w = np.divide(excess, fx, out=np.zeros_like(fx), where=fx > 0)
    if not np.any(w > 0):
        flags.append("flat_initial_alternative")
        w = np.ones_like(x)
    f1 = KernelMixture(x, w / w.sum(), f_hat.bandwidth)
    return ModelParams(A, f0, f1, null_known=True), flags


def _log_emis(f0, f1, x, f0_vals=None):
    le = np.empty((x.size, 2))
    le[:, 0] = f0.logpdf(x) if f0_vals is None else f0_vals
    le[:, 1] = f1.logpdf(x)
    return le


def _estimate_A(fb):
    num = fb.pairwise().sum(axis=0)
    num = num / num.sum(axis=1, keepdims=True)
    num = np.clip(num, _A_EPS, 1.0 - _A_EPS)
    num = num / num.sum(axis=1, keepdims=True)
    try:
        return TransitionMatrix.from_array(num)
    except InvalidParameterError as exc:
        raise EstimationError(f"EM produced an invalid transition matrix: {exc}") from exc


def _em(x, params, config, update_f0):
    x = np.ascontiguousarray(x, dtype=float).ravel()
    if x.size < 2:
        raise EstimationError("need at least two observations")
    trace = EmTrace()
    f0_fixed = None if update_f0 else params.f0.logpdf(x)
    le = _log_emis(params.f0, params.f1, x, f0_fixed)
    best = (-np.inf, params, -1)
    converged = False
    t = 0
    for t in range(1, config.max_iters + 1):
        le_f, n_floor = floor_log_emissions(le)
        trace.n_floor += n_floor
        fb = forward_backward_log(params.pi, params.A.as_array(), le_f, n_floor)
        ll = fb.loglik
        if trace.loglik and ll < trace.loglik[-1] - _LL_SLACK:
            log.debug("EM log-likelihood decreased at iteration %d: %.6f -> %.6f", t, trace.loglik[-1], ll)
        trace.loglik.append(ll)
        if ll > best[0]:
            best = (ll, params, t - 1)

        post = fb.marginals()
        A_new = _estimate_A(fb)
        f1_new = weighted_kde(x, post[:, 1], bandwidth_silverman(x, post[:, 1]))
        f0_new = weighted_kde(x, post[:, 0], bandwidth_silverman(x, post[:, 0])) if update_f0 else params.f0
        le_new = _log_emis(f0_new, f1_new, x, f0_fixed)

        change = float(np.max(np.abs(A_new.as_array() - params.A.as_array())))
        cols = (0, 1) if update_f0 else (1,)
        for q in cols:
            change = max(change, float(np.max(np.abs(np.exp(le_new[:, q]) - np.exp(le[:, q])))))
        trace.change.append(change)
        trace.A.append(A_new.as_array().tolist())

        try:
            params = ModelParams(A_new, f0_new, f1_new, null_known=not update_f0)
        except InvalidParameterError as exc:
            raise EstimationError(f"EM iteration {t}: {exc}") from exc
        le = le_new
        if change < config.tol:
            converged = True
            break

    trace.n_iter = t if config.max_iters > 0 else 0
    trace.converged = converged
    if trace.n_iter > 0:
        le_f, _ = floor_log_emissions(le)
        ll = float(_kernels.forward_loglik(params.pi, params.A.as_array(), le_f))
        trace.loglik.append(ll)
        if ll >= best[0]:
            best = (ll, params, trace.n_iter)
        trace.best_iter = best[2]
        return best[1], trace
    return params, trace


def em_fit_known_f0(x, f0, config=EmConfig(), init=None):
    """Estimate ``(A, f1)`` with the null density ``f0`` held fixed.

    ``init`` overrides the default initialisation (used for warm starts).
    """
    flags = []
    if init is None:
        init, flags = initialize(x, config, f0)
    else:
        init = init.replace(f0=f0, null_known=True)
    try:
        params, trace = _em(x, init, config, update_f0=False)
    except EstimationError:
        raise
    trace.flags.extend(flags)
    return params, trace


def _relabel(params, rule):
    """Swap the states when the rule designates state 1 as the null."""
    pi0, pi1 = stationary_distribution(params.A)
    if rule == "predominant":
        swap = pi1 > pi0
    else:
        swap = abs(_density_mean(params.f1)) < abs(_density_mean(params.f0))
    if not swap:
        return params, False
    a = params.A.as_array()[::-1, ::-1]
    return ModelParams(TransitionMatrix.from_array(a), params.f1, params.f0, null_known=False), True


def _density_mean(f):
    return float(f.mean)


def em_fit_unknown_f0(x, config=EmConfig(), f0_init=None, init=None):
    """Estimate ``(A, f0, f1)``, starting the null density at ``f0_init``.

    After convergence the null state is chosen by ``config.null_label_rule``.
    """
    flags = []
    if init is None:
        if f0_init is None:
            raise EstimationError("an initial null density is required")
        init, flags = initialize(x, config, f0_init)
    init = init.replace(null_known=False)
    params, trace = _em(x, init, config, update_f0=True)
    params, swapped = _relabel(params, config.null_label_rule)
    if swapped:
        flags.append("states_relabelled")
    trace.flags.extend(flags)
    return params, trace


def refit(x, fitted, config=EmConfig()):
    """Re-estimate on new data, warm-started at ``fitted``."""
    if fitted.null_known:
        return em_fit_known_f0(x, fitted.f0, config, init=fitted)
    return em_fit_unknown_f0(x, config, init=fitted)
