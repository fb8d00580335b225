"""Emission densities, weighted Gaussian KDE and p-values.

Two density variants are used throughout: an analytic Gaussian (typically
the known null) and a Gaussian kernel mixture, which is what a weighted
kernel density estimate is.  Both expose ``pdf``, ``logpdf``, ``cdf``,
``sf`` and ``sample``.
"""
from dataclasses import dataclass, field
import math

import numpy as np
from scipy import special

from . import _kernels
from .errors import EstimationError, InvalidParameterError, UnsupportedVariantError

# Below this a directly summed kernel density is recomputed in log space.
_PDF_UNDERFLOW = 1e-280


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class EmissionDensity:
    """Common interface of the two density variants."""

    kind = None

    def pdf(self, x):
        raise NotImplementedError

    def logpdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        raise NotImplementedError

    def sf(self, x):
        return 1.0 - self.cdf(x)

    def sample(self, rng, size):
        raise NotImplementedError

    def to_dict(self):
        raise NotImplementedError


@dataclass(frozen=True)
class GaussianDensity(EmissionDensity):
    mean: float = 0.0
    sd: float = 1.0
    kind = "gaussian"

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.sd)) or self.sd <= 0:
            raise InvalidParameterError(f"invalid Gaussian parameters mean={self.mean}, sd={self.sd}")
        object.__setattr__(self, "mean", float(self.mean))
        object.__setattr__(self, "sd", float(self.sd))

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2.0 * math.pi)

    def pdf(self, x):
        return np.exp(self.logpdf(x))

    def cdf(self, x):
        return special.ndtr((np.asarray(x, dtype=float) - self.mean) / self.sd)

    def sf(self, x):
        return special.ndtr(-(np.asarray(x, dtype=float) - self.mean) / self.sd)

    def sample(self, rng, size):
        return self.mean + self.sd * rng.standard_normal(size)

    def to_dict(self):
        return {"type": "gaussian", "mean": self.mean, "sd": self.sd}


@dataclass(frozen=True, eq=False)
class KernelMixture(EmissionDensity):
    """Mixture ``sum_i w_i N(c_i, h^2)``."""

    centers: np.ndarray
    weights: np.ndarray
    bandwidth: float
    _sorted: tuple = field(init=False, repr=False)
    kind = "kernel_mixture"

    def __post_init__(self):
        c = _frozen(self.centers).ravel()
        w = _frozen(self.weights).ravel()
        h = float(self.bandwidth)
        if c.size == 0 or c.shape != w.shape:
            raise InvalidParameterError("centers and weights must be non-empty and of equal length")
        if not np.all(np.isfinite(c)) or not np.all(np.isfinite(w)):
            raise InvalidParameterError("centers and weights must be finite")
        if not (h > 0 and math.isfinite(h)):
            raise InvalidParameterError(f"bandwidth must be positive, got {h}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-10:
            raise InvalidParameterError("weights must be nonnegative and sum to 1")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bandwidth", h)
        keep = w > 0
        order = np.argsort(c[keep], kind="stable")
        cs = np.ascontiguousarray(c[keep][order])
        ws = np.ascontiguousarray(w[keep][order])
        object.__setattr__(self, "_sorted", (cs, ws, np.log(ws)))

    def pdf(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        cs, ws, _ = self._sorted
        return _kernels.kde_pdf(x.ravel(), cs, ws, self.bandwidth).reshape(x.shape)

    def logpdf(self, x):
        x = np.ascontiguousarray(x, dtype=float)
        flat = x.ravel()
        cs, ws, lws = self._sorted
        p = _kernels.kde_pdf(flat, cs, ws, self.bandwidth)
        with np.errstate(divide="ignore"):
            out = np.log(p)
        low = p < _PDF_UNDERFLOW
        if np.any(low):
            out[low] = _kernels.kde_logpdf_full(np.ascontiguousarray(flat[low]), cs, lws, self.bandwidth)
        return out.reshape(x.shape)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        cs, ws, _ = self._sorted
        z = (x[..., None] - cs) / self.bandwidth
        return special.ndtr(z) @ ws

    def sf(self, x):
        x = np.asarray(x, dtype=float)
        cs, ws, _ = self._sorted
        z = (cs - x[..., None]) / self.bandwidth
        return special.ndtr(z) @ ws

    @property
    def mean(self):
        return float(self.weights @ self.centers)

    def sample(self, rng, size):
        # two-stage composition: pick a kernel by weight, then add its noise
        cum = np.cumsum(self.weights)
        idx = np.searchsorted(cum, rng.random(size) * cum[-1], side="right")
        idx = np.minimum(idx, self.centers.size - 1)
        return self.centers[idx] + self.bandwidth * rng.standard_normal(size)

    def to_dict(self):
        return {
            "type": "kernel_mixture",
            "centers": self.centers.tolist(),
            "weights": self.weights.tolist(),
            "bandwidth": self.bandwidth,
        }

    def same_as(self, other):
        return (
            isinstance(other, KernelMixture)
            and self.bandwidth == other.bandwidth
            and np.array_equal(self.centers, other.centers)
            and np.array_equal(self.weights, other.weights)
        )


def density_from_dict(d):
    kind = d.get("type")
    if kind == "gaussian":
        return GaussianDensity(float(d["mean"]), float(d["sd"]))
    if kind == "kernel_mixture":
        return KernelMixture(np.asarray(d["centers"], float), np.asarray(d["weights"], float), float(d["bandwidth"]))
    raise UnsupportedVariantError(f"unknown density type {kind!r}")


def _weighted_quantiles(values, weights, qs):
    order = np.argsort(values, kind="stable")
    v = values[order]
    w = weights[order]
    pos = np.cumsum(w) - 0.5 * w
    return np.interp(qs, pos, v)


def bandwidth_silverman(values, weights=None):
    """Silverman's rule ``0.9 * min(sd, IQR/1.34) * n**(-1/5)``.

    With ``weights`` the spread statistics are weighted and ``n`` is Kish's
    effective sample size ``(sum w)^2 / sum w^2``.
    """
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise EstimationError("bandwidth needs at least two values")
    if weights is None:
        n = float(v.size)
        sd = float(np.std(v, ddof=1))
        q25, q75 = np.percentile(v, [25, 75])
    else:
        w = np.asarray(weights, dtype=float).ravel()
        tot = w.sum()
        if not tot > 0:
            raise EstimationError("weights sum to zero")
        w = w / tot
        n = 1.0 / float(np.sum(w * w))
        mu = float(w @ v)
        var = float(w @ (v - mu) ** 2)
        if n > 1:
            var *= n / (n - 1.0)
        sd = math.sqrt(max(var, 0.0))
        q25, q75 = _weighted_quantiles(v, w, [0.25, 0.75])
    iqr = float(q75 - q25)
    spread = min(sd, iqr / 1.34)
    if spread <= 0:
        spread = sd
    if not spread > 0:
        raise EstimationError("degenerate bandwidth: values have zero spread")
    return 0.9 * spread * n ** (-0.2)


def weighted_kde(values, weights, h=None):
    """Weighted Gaussian kernel density estimate as a :class:`KernelMixture`.

    ``h`` defaults to the weighted Silverman bandwidth.
    """
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if v.shape != w.shape:
        raise InvalidParameterError("values and weights differ in length")
    if np.any(w < 0):
        raise InvalidParameterError("weights must be nonnegative")
    tot = w.sum()
    if not tot > 0:
        raise EstimationError("all kernel weights are zero")
    if h is None:
        h = bandwidth_silverman(v, w)
    return KernelMixture(v, w / tot, h)


class EmpiricalNullCDF:
    """Weighted step CDF ``F(t) = sum_{x_i < t} w_i / sum_i w_i``.

    The strict inequality makes ``F`` left-continuous: ``F(min x) == 0``.
    """

    def __init__(self, x, null_weights):
        x = np.asarray(x, dtype=float).ravel()
        w = np.asarray(null_weights, dtype=float).ravel()
        if x.shape != w.shape:
            raise InvalidParameterError("x and null weights differ in length")
        tot = w.sum()
        if not tot > 0:
            raise EstimationError("null weights sum to zero")
        order = np.argsort(x, kind="stable")
        self._x = x[order]
        self._cum = np.concatenate([[0.0], np.cumsum(w[order]) / tot])

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        pos = np.searchsorted(self._x, t, side="left")
        return np.minimum(self._cum[pos], 1.0)


def empirical_null_cdf(x, locfdr0):
    return EmpiricalNullCDF(x, locfdr0)


@dataclass(frozen=True, eq=False)
class PValues:
    """P-values with the convention that produced them (``exact`` is one-sided
    under a known Gaussian null, ``empirical`` two-sided from a weighted CDF)."""

    p: np.ndarray
    kind: str

    def __post_init__(self):
        p = _frozen(self.p).ravel()
        if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
            raise InvalidParameterError("p-values must lie in [0, 1]")
        object.__setattr__(self, "p", p)

    def __len__(self):
        return self.p.size


def empirical_pvalues(x, cdf):
    F = cdf(np.asarray(x, dtype=float))
    p = 2.0 * np.minimum(1.0 - F, F)
    return PValues(np.clip(p, 0.0, 1.0), "empirical")


def exact_pvalues(x, f0):
    """One-sided survival p-values ``P(Z >= x_i)`` under an analytic null."""
    if not isinstance(f0, GaussianDensity):
        raise UnsupportedVariantError("exact p-values need an analytic Gaussian null")
    return PValues(f0.sf(x), "exact")
