"""Two-state HMM: parameters, forward-backward, posterior chain, sampling and
Viterbi decoding.

The hidden chain is stationary: theta_1 is drawn from the stationary law of
the transition matrix.  Forward-backward runs in scaled form, so only the
log normalisers carry the likelihood scale.
"""
from dataclasses import dataclass
import logging
import math

import numpy as np

from . import _kernels
from .density import EmissionDensity, GaussianDensity, KernelMixture, density_from_dict
from .errors import DegenerateLikelihoodError, InvalidParameterError

log = logging.getLogger(__name__)

# Densities that evaluate to exactly zero are floored here before logs.
DENSITY_FLOOR = 1e-300
_LOG_FLOOR = math.log(DENSITY_FLOOR)


def make_rng(seed):
    """Generator from an int, a SeedSequence, or pass an existing Generator through."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


@dataclass(frozen=True)
class TransitionMatrix:
    a00: float
    a01: float
    a10: float
    a11: float

    def __post_init__(self):
        vals = (self.a00, self.a01, self.a10, self.a11)
        if not all(math.isfinite(v) and 0.0 < v < 1.0 for v in vals):
            raise InvalidParameterError(f"transition entries must lie strictly in (0, 1): {vals}")
        if abs(self.a00 + self.a01 - 1.0) > 1e-12 or abs(self.a10 + self.a11 - 1.0) > 1e-12:
            raise InvalidParameterError(f"transition rows must sum to 1: {vals}")
        if abs(self.a00 - self.a10) <= 1e-12:
            raise InvalidParameterError("transition matrix is rank deficient (a00 == a10)")

    @classmethod
    def from_array(cls, a):
        a = np.asarray(a, dtype=float)
        if a.shape != (2, 2):
            raise InvalidParameterError(f"transition matrix must be 2x2, got shape {a.shape}")
        return cls(float(a[0, 0]), float(a[0, 1]), float(a[1, 0]), float(a[1, 1]))

    def as_array(self):
        return np.array([[self.a00, self.a01], [self.a10, self.a11]])

    @property
    def det(self):
        return self.a00 * self.a11 - self.a01 * self.a10


def stationary_distribution(A):
    """Stationary law ``(a10, a01) / (a01 + a10)`` of a 2-state chain."""
    if not isinstance(A, TransitionMatrix):
        A = TransitionMatrix.from_array(A)
    tot = A.a01 + A.a10
    return A.a10 / tot, A.a01 / tot


@dataclass(frozen=True)
class ModelParams:
    A: TransitionMatrix
    f0: EmissionDensity
    f1: EmissionDensity
    null_known: bool = True

    def __post_init__(self):
        if not isinstance(self.A, TransitionMatrix):
            object.__setattr__(self, "A", TransitionMatrix.from_array(self.A))
        if self.f0 is self.f1:
            raise InvalidParameterError("f0 and f1 are the same density")
        if isinstance(self.f0, GaussianDensity) and isinstance(self.f1, GaussianDensity) and self.f0 == self.f1:
            raise InvalidParameterError("f0 and f1 are identical Gaussians; the model is singular")
        if isinstance(self.f0, KernelMixture) and self.f0.same_as(self.f1):
            raise InvalidParameterError("f0 and f1 are identical kernel mixtures; the model is singular")

    @property
    def pi(self):
        return np.array(stationary_distribution(self.A))

    def replace(self, **kw):
        d = {"A": self.A, "f0": self.f0, "f1": self.f1, "null_known": self.null_known}
        d.update(kw)
        return ModelParams(**d)

    def to_dict(self):
        return {
            "A": self.A.as_array().tolist(),
            "f0": self.f0.to_dict(),
            "f1": self.f1.to_dict(),
            "null_known": self.null_known,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            TransitionMatrix.from_array(d["A"]),
            density_from_dict(d["f0"]),
            density_from_dict(d["f1"]),
            bool(d.get("null_known", True)),
        )


def _check_obs(x):
    x = np.ascontiguousarray(x, dtype=float).ravel()
    if x.size < 1:
        raise InvalidParameterError("need at least one observation")
    if not np.all(np.isfinite(x)):
        bad = int(np.flatnonzero(~np.isfinite(x))[0])
        raise InvalidParameterError(f"observation {bad + 1} is not finite")
    return x


def log_emissions(params, x):
    """(m, 2) matrix of log f_q(x_i) and the number of floored entries.

    Raises DegenerateLikelihoodError when both densities vanish at a point.
    """
    x = _check_obs(x)
    le = np.empty((x.size, 2))
    le[:, 0] = params.f0.logpdf(x)
    le[:, 1] = params.f1.logpdf(x)
    return floor_log_emissions(le)


def floor_log_emissions(le):
    le = np.array(le, dtype=float)
    if np.any(np.isnan(le)):
        raise InvalidParameterError("log density is NaN")
    zero = np.isneginf(le)
    both = zero[:, 0] & zero[:, 1]
    if np.any(both):
        raise DegenerateLikelihoodError(int(np.flatnonzero(both)[0]))
    n_floor = int(zero.sum())
    if n_floor:
        le[zero] = _LOG_FLOOR
    return le, n_floor


@dataclass(frozen=True, eq=False)
class ForwardBackward:
    """Scaled forward/backward variables.

    ``alpha_hat[i] = alpha_i / prod_{k<=i} C_k`` and
    ``beta_hat[i] = beta_i / prod_{k>i} C_k`` with ``log_norm[k] = log C_k``.
    """

    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    emis: np.ndarray
    log_norm: np.ndarray
    A: np.ndarray
    n_floor: int = 0

    @property
    def loglik(self):
        return float(np.sum(self.log_norm))

    @property
    def log_alpha(self):
        with np.errstate(divide="ignore"):
            return np.log(self.alpha_hat) + np.cumsum(self.log_norm)[:, None]

    @property
    def log_beta(self):
        after = np.concatenate([np.cumsum(self.log_norm[::-1])[::-1][1:], [0.0]])
        with np.errstate(divide="ignore"):
            return np.log(self.beta_hat) + after[:, None]

    def marginals(self):
        g = self.alpha_hat * self.beta_hat
        return g / g.sum(axis=1, keepdims=True)

    def pairwise(self):
        """(m-1, 2, 2) array: entry [i-1, q, r] = P(theta_{i-1}=q, theta_i=r | X) (0-based i)."""
        num = self.alpha_hat[:-1, :, None] * self.A[None, :, :] * (self.emis[1:] * self.beta_hat[1:])[:, None, :]
        return num / num.sum(axis=(1, 2), keepdims=True)

    def transitions(self):
        num = self.A[None, :, :] * (self.emis[1:] * self.beta_hat[1:])[:, None, :]
        return num / num.sum(axis=2, keepdims=True)


def forward_backward_log(pi, A, log_emis, n_floor=0):
    """Forward-backward on a precomputed (m, 2) log-emission matrix."""
    A = np.ascontiguousarray(A, dtype=float)
    le = np.ascontiguousarray(log_emis, dtype=float)
    alpha, beta, emis, log_c = _kernels.forward_backward_scaled(np.asarray(pi, float), A, le)
    return ForwardBackward(alpha, beta, emis, log_c, A, n_floor)


def forward_backward(params, x):
    le, n_floor = log_emissions(params, x)
    if n_floor:
        log.debug("floored %d zero emission densities", n_floor)
    return forward_backward_log(params.pi, params.A.as_array(), le, n_floor)


@dataclass(frozen=True, eq=False)
class PosteriorChain:
    """Law of theta given X: a heterogeneous Markov chain.

    ``transitions[i-1]`` (0-based) is the matrix for the step into site i.
    """

    init_prob_state1: float
    transitions: np.ndarray
    locfdr: np.ndarray

    @property
    def m(self):
        return self.locfdr.size

    @property
    def marginals(self):
        return np.column_stack([self.locfdr, 1.0 - self.locfdr])

    @classmethod
    def from_forward_backward(cls, fb):
        g = fb.marginals()
        trans = fb.transitions() if g.shape[0] > 1 else np.empty((0, 2, 2))
        return cls(float(g[0, 1]), np.ascontiguousarray(trans), np.ascontiguousarray(g[:, 0]))


def posterior_chain(params, x):
    return PosteriorChain.from_forward_backward(forward_backward(params, x))


def sample_hmm(params, m, seed):
    """Draw (theta, x) of length ``m`` from the stationary HMM."""
    if m < 1:
        raise InvalidParameterError("m must be at least 1")
    rng = make_rng(seed)
    A = params.A.as_array()
    pi1 = params.pi[1]
    u = rng.random(m)
    theta = np.empty(m, dtype=np.int8)
    state = 1 if u[0] < pi1 else 0
    theta[0] = state
    p1 = (A[0, 1], A[1, 1])
    for i in range(1, m):
        state = 1 if u[i] < p1[state] else 0
        theta[i] = state
    x = np.empty(m)
    nulls = theta == 0
    n0 = int(nulls.sum())
    x[nulls] = params.f0.sample(rng, n0)
    x[~nulls] = params.f1.sample(rng, m - n0)
    return theta, x


def viterbi_log(pi, A, log_emis):
    with np.errstate(divide="ignore"):
        return _kernels.viterbi_path(np.log(np.asarray(pi, float)), np.log(np.asarray(A, float)),
                                     np.ascontiguousarray(log_emis, dtype=float))


def viterbi(params, x):
    """Most probable state path; ties go to state 0."""
    le, _ = log_emissions(params, x)
    return viterbi_log(params.pi, params.A.as_array(), le)
