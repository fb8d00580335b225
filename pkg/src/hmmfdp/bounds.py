"""Posterior bounds on the false discovery proportion of a fixed selection.

Conditionally on X the selected states form a heterogeneous Markov chain;
the number of nulls among them is tracked by a dynamic program over
(prefix length, zero count, last state).  Upper and lower bounds are
quantiles of that posterior count, divided by the selection size.
"""
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import EmptySelectionError, InvalidParameterError
from .hmm_core import PosteriorChain, posterior_chain


@dataclass(frozen=True, eq=False)
class Selection:
    """Strictly increasing 0-based indices into the observation vector.

    External formats (CSV, JSON, CLI) use 1-based indices; convert with
    :meth:`from_one_based` / :meth:`one_based`.
    """

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).ravel()
        if idx.size and (np.any(np.diff(idx) <= 0) or idx[0] < 0):
            raise InvalidParameterError("selection indices must be strictly increasing and nonnegative")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @classmethod
    def from_indices(cls, idx):
        return cls(np.unique(np.asarray(idx, dtype=np.int64)))

    @classmethod
    def from_mask(cls, mask):
        return cls(np.flatnonzero(np.asarray(mask, dtype=bool)))

    @classmethod
    def from_one_based(cls, idx):
        return cls.from_indices(np.asarray(idx, dtype=np.int64) - 1)

    def one_based(self):
        return (self.indices + 1).tolist()

    @property
    def size(self):
        return int(self.indices.size)

    def __len__(self):
        return self.size

    def check_bounds(self, m):
        if self.size and self.indices[-1] >= m:
            raise InvalidParameterError(f"selection index {int(self.indices[-1]) + 1} exceeds m={m}")
        return self


def as_selection(R):
    return R if isinstance(R, Selection) else Selection.from_indices(R)


def fdp(theta, R):
    """False discovery proportion: nulls among ``R`` over ``max(|R|, 1)``."""
    R = as_selection(R)
    if R.size == 0:
        return 0.0
    theta = np.asarray(theta)
    return float(np.count_nonzero(theta[R.indices] == 0)) / R.size


@dataclass(frozen=True, eq=False)
class RestrictedChain:
    init_prob: tuple
    transitions: np.ndarray

    @property
    def size(self):
        return self.transitions.shape[0] + 1


def restrict_chain(chain, R):
    """Posterior chain seen only at the selected sites."""
    R = as_selection(R).check_bounds(chain.m)
    if R.size == 0:
        raise EmptySelectionError("cannot restrict the posterior chain to an empty selection")
    j1 = int(R.indices[0])
    init = (float(chain.locfdr[j1]), 1.0 - float(chain.locfdr[j1]))
    trans = _kernels.restricted_products(np.ascontiguousarray(chain.transitions), np.ascontiguousarray(R.indices))
    return RestrictedChain(init, trans)


@dataclass(frozen=True, eq=False)
class CountDistributionTables:
    """``B0[k, l]`` / ``B1[k, l]``: posterior probability of at most ``l``
    nulls among the first ``k + 1`` selected sites with the last one in
    state 0 / 1.  Only the first ``B0.shape[1]`` columns are materialised."""

    B0: np.ndarray
    B1: np.ndarray

    @property
    def cdf(self):
        return self.B0[-1] + self.B1[-1]


def _stop_rule(beta, lower):
    if beta is None:
        return 2.0, False
    if not 0.0 < beta < 1.0:
        raise InvalidParameterError(f"level must lie in (0, 1), got {beta}")
    return (beta, True) if lower else (1.0 - beta, False)


def count_tables(rc, beta=None, lower=False):
    """Zero-count tables of a restricted chain.

    With ``beta`` the columns stop at the first ``l`` where the total reaches
    ``1 - beta`` (or exceeds ``beta`` when ``lower``); otherwise all
    ``s + 1`` columns are built.
    """
    level, strict = _stop_rule(beta, lower)
    init0, init1 = rc.init_prob
    trans = np.ascontiguousarray(rc.transitions)
    ncols = _kernels.count_cdf(init0, init1, trans, level, strict).size
    B0, B1, n = _kernels.count_columns(init0, init1, trans, level, strict, ncols)
    return CountDistributionTables(B0[:, :n], B1[:, :n])


def count_cdf(rc, beta=None, lower=False):
    """Posterior CDF of the null count at l = 0, 1, ... (early-stopped)."""
    level, strict = _stop_rule(beta, lower)
    return _kernels.count_cdf(rc.init_prob[0], rc.init_prob[1], np.ascontiguousarray(rc.transitions), level, strict)


def _chain(params_or_chain, x):
    if isinstance(params_or_chain, PosteriorChain):
        return params_or_chain
    return posterior_chain(params_or_chain, x)


def upper_count(chain, R, beta):
    """Smallest n with P(#nulls in R <= n | X) >= 1 - beta."""
    R = as_selection(R)
    if R.size == 0:
        _stop_rule(beta, False)
        return 0
    cdf = count_cdf(restrict_chain(chain, R), beta)
    hit = np.flatnonzero(cdf >= 1.0 - beta)
    return int(hit[0]) if hit.size else R.size


def lower_count(chain, R, beta):
    """Largest n with P(#nulls in R <= n - 1 | X) <= beta."""
    R = as_selection(R)
    if R.size == 0:
        _stop_rule(beta, True)
        return 0
    cdf = count_cdf(restrict_chain(chain, R), beta, lower=True)
    hit = np.flatnonzero(cdf > beta)
    return int(hit[0]) if hit.size else R.size


def upper_bound_chain(chain, R, beta):
    R = as_selection(R)
    return upper_count(chain, R, beta) / R.size if R.size else 0.0


def lower_bound_chain(chain, R, beta):
    R = as_selection(R)
    return lower_count(chain, R, beta) / R.size if R.size else 0.0


def upper_bound(params, x, R, beta):
    """Posterior upper bound U_beta on FDP(theta, R) under ``params``.

    ``params`` may also be a precomputed :class:`PosteriorChain` (``x`` is
    then ignored).
    """
    return upper_bound_chain(_chain(params, x), R, beta)


def lower_bound(params, x, R, beta):
    return lower_bound_chain(_chain(params, x), R, beta)


@dataclass(frozen=True)
class FdpInterval:
    lower: float
    upper: float
    beta_total: float
    gamma_split: float

    def __post_init__(self):
        if self.lower > self.upper:
            raise InvalidParameterError(f"interval lower {self.lower} exceeds upper {self.upper}")


def posterior_interval(params, x, R, alpha, gamma=0.5):
    """``[L_{alpha*gamma}, U_{alpha*(1-gamma)}]``, jointly covering with posterior probability >= 1 - alpha."""
    if not 0.0 < alpha < 1.0 or not 0.0 < gamma < 1.0:
        raise InvalidParameterError("alpha and gamma must lie in (0, 1)")
    chain = _chain(params, x)
    lo = lower_bound_chain(chain, R, alpha * gamma)
    hi = upper_bound_chain(chain, R, alpha * (1.0 - gamma))
    return FdpInterval(lo, hi, alpha, gamma)


# Plug-in versions: the same functionals at estimated parameters.

def plugin_upper(x, R, beta, fitted):
    return upper_bound(fitted, x, R, beta)


def plugin_lower(x, R, beta, fitted):
    return lower_bound(fitted, x, R, beta)


def plugin_interval(x, R, alpha, gamma, fitted):
    return posterior_interval(fitted, x, R, alpha, gamma)
