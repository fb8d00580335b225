"""Selection policies and the Simes post hoc bound.

A policy maps an observation vector (together with the model fitted on that
same vector and its posterior chain) to a :class:`Selection`.  Policies that
peek at the hidden states are tagged unsafe and must be unlocked explicitly.
"""
from dataclasses import dataclass
import math

import numpy as np

from .bounds import Selection, as_selection
from .density import EmpiricalNullCDF, PValues, empirical_pvalues, exact_pvalues
from .errors import InvalidParameterError
from .hmm_core import viterbi_log, log_emissions


def select_pvalue_threshold(p, t):
    """Indices with ``p_i < t``."""
    if not 0.0 <= t <= 1.0:
        raise InvalidParameterError(f"threshold must lie in [0, 1], got {t}")
    p = p.p if isinstance(p, PValues) else np.asarray(p, dtype=float)
    return Selection.from_mask(p < t)


def suncai_fdr_estimate(chain, R):
    """Posterior mean FDP of ``R``: the average local fdr over ``R``."""
    R = as_selection(R)
    if R.size == 0:
        return 0.0
    return math.fsum(chain.locfdr[R.indices]) / R.size


def suncai_select(chain, alpha):
    """Largest set of smallest local fdr values whose mean stays <= ``alpha``."""
    if not 0.0 < alpha < 1.0:
        raise InvalidParameterError(f"alpha must lie in (0, 1), got {alpha}")
    lfdr = np.asarray(chain.locfdr, dtype=float)
    order = np.argsort(lfdr, kind="stable")
    sorted_l = lfdr[order]
    running = np.cumsum(sorted_l) / np.arange(1, lfdr.size + 1)
    k = int(np.searchsorted(running > alpha, True))  # first prefix exceeding alpha

    # settle the boundary with the exactly rounded estimate used for reporting
    def ok(n):
        return n == 0 or math.fsum(sorted_l[:n]) / n <= alpha

    while k > 0 and not ok(k):
        k -= 1
    while k < lfdr.size and ok(k + 1):
        k += 1
    return Selection(np.sort(order[:k]))


def viterbi_select(fitted, x):
    le, _ = log_emissions(fitted, x)
    path = viterbi_log(fitted.pi, fitted.A.as_array(), le)
    return Selection.from_mask(path == 1)


def topk_select(p, k):
    """The ``k`` smallest p-values, ties broken by index."""
    p = p.p if isinstance(p, PValues) else np.asarray(p, dtype=float)
    if not 0 <= k <= p.size:
        raise InvalidParameterError(f"k must lie in [0, {p.size}], got {k}")
    order = np.argsort(p, kind="stable")
    return Selection(np.sort(order[:k]))


def simes_count(p, R, beta):
    """``min_k #{i in R : p_i > beta k / m} + k - 1`` over ``k = 1..m``."""
    p = p.p if isinstance(p, PValues) else np.asarray(p, dtype=float)
    R = as_selection(R)
    if R.size == 0:
        return 0
    if not 0.0 < beta < 1.0:
        raise InvalidParameterError(f"beta must lie in (0, 1), got {beta}")
    m = p.size
    ps = np.sort(p[R.indices])
    ks = np.arange(1, m + 1)
    below = np.searchsorted(ps, beta * ks / m, side="right")
    return int(np.min(R.size - below + ks - 1))


def simes_bound(p, R, beta):
    R = as_selection(R)
    return simes_count(p, R, beta) / R.size if R.size else 0.0


def oracle_leak_select(theta, x, rule, p=None, t=0.05):
    """Selections that use the hidden states; experiments only.

    Rules: ``alternatives`` (all theta=1), ``nulls`` (all theta=0),
    ``pvalue_alternatives`` / ``pvalue_nulls`` (``p < t`` intersected with
    theta=1 / theta=0).
    """
    theta = np.asarray(theta)
    if rule == "alternatives":
        mask = theta == 1
    elif rule == "nulls":
        mask = theta == 0
    elif rule in ("pvalue_alternatives", "pvalue_nulls"):
        if p is None:
            raise InvalidParameterError(f"rule {rule!r} needs p-values")
        pv = p.p if isinstance(p, PValues) else np.asarray(p, dtype=float)
        mask = (pv < t) & (theta == (1 if rule == "pvalue_alternatives" else 0))
    else:
        raise InvalidParameterError(f"unknown leak rule {rule!r}")
    return Selection.from_mask(mask)


LEAK_RULES = ("alternatives", "nulls", "pvalue_alternatives", "pvalue_nulls")


def model_pvalues(fitted, x, chain):
    """Exact one-sided p-values under a known null, otherwise empirical
    two-sided p-values from the posterior-weighted null CDF."""
    if fitted.null_known:
        return exact_pvalues(x, fitted.f0)
    return empirical_pvalues(x, EmpiricalNullCDF(x, chain.locfdr))


@dataclass(frozen=True)
class SelectionPolicy:
    """A named, deterministic selection rule.

    ``kind`` is one of ``pvalue_threshold`` (param ``t``), ``suncai``
    (``alpha``), ``viterbi``, ``topk`` (``k``), ``fixed`` (``indices``,
    0-based) and ``oracle_leak`` (``rule``, ``t``).
    """

    kind: str
    t: float = 0.05
    alpha: float = 0.05
    k: int = 0
    indices: tuple = ()
    rule: str = ""

    KINDS = ("pvalue_threshold", "suncai", "viterbi", "topk", "fixed", "oracle_leak")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise InvalidParameterError(f"unknown policy type {self.kind!r}")
        if self.kind == "oracle_leak" and self.rule not in LEAK_RULES:
            raise InvalidParameterError(f"unknown leak rule {self.rule!r}")

    @property
    def unsafe(self):
        return self.kind == "oracle_leak"

    @property
    def is_fixed(self):
        return self.kind == "fixed"

    @property
    def name(self):
        if self.kind == "pvalue_threshold":
            return f"p<{self.t:g}"
        if self.kind == "suncai":
            return f"SC({self.alpha:g})"
        if self.kind == "viterbi":
            return "Viterbi"
        if self.kind == "topk":
            return f"top{self.k}"
        if self.kind == "fixed":
            return "fixed"
        return f"leak:{self.rule}"

    def __call__(self, x, fitted, chain, theta=None):
        if self.kind == "pvalue_threshold":
            return select_pvalue_threshold(model_pvalues(fitted, x, chain), self.t)
        if self.kind == "suncai":
            return suncai_select(chain, self.alpha)
        if self.kind == "viterbi":
            return viterbi_select(fitted, x)
        if self.kind == "topk":
            return topk_select(model_pvalues(fitted, x, chain), self.k)
        if self.kind == "fixed":
            return Selection.from_indices(self.indices).check_bounds(len(x))
        if theta is None:
            raise InvalidParameterError("oracle-leak policies need the hidden states")
        p = model_pvalues(fitted, x, chain) if self.rule.startswith("pvalue") else None
        return oracle_leak_select(theta, x, self.rule, p=p, t=self.t)

    def to_dict(self):
        d = {"type": self.kind}
        if self.kind in ("pvalue_threshold", "oracle_leak"):
            d["t"] = self.t
        if self.kind == "suncai":
            d["alpha"] = self.alpha
        if self.kind == "topk":
            d["k"] = self.k
        if self.kind == "fixed":
            d["indices"] = [i + 1 for i in self.indices]
        if self.kind == "oracle_leak":
            d["rule"] = self.rule
        return d

    @classmethod
    def from_dict(cls, d, allow_unsafe=False):
        """Parse ``{"type": "pvalue_threshold", "t": 0.05}`` and friends;
        ``fixed`` indices are 1-based."""
        kind = d.get("type")
        if kind == "oracle_leak" and not allow_unsafe:
            raise InvalidParameterError("oracle-leak policies require the unsafe-experiments flag")
        if kind == "pvalue_threshold":
            return cls(kind, t=float(d.get("t", 0.05)))
        if kind == "suncai":
            return cls(kind, alpha=float(d.get("alpha", 0.05)))
        if kind == "viterbi":
            return cls(kind)
        if kind == "topk":
            return cls(kind, k=int(d["k"]))
        if kind == "fixed":
            idx = Selection.from_one_based(d.get("indices", [])).indices
            return cls(kind, indices=tuple(int(i) for i in idx))
        if kind == "oracle_leak":
            return cls(kind, rule=str(d["rule"]), t=float(d.get("t", 0.05)))
        raise InvalidParameterError(f"unknown policy type {kind!r}")
