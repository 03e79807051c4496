"""Offset distribution fitting: streaming Gaussian statistics and uniform fits.

The accumulator keeps running per-dimension mean and sum of squared
deviations (Welford updates), so a single pass over an offset stream is
numerically stable and two partial accumulators can be merged for parallel
reduction. Finalizing divides the squared deviations by the total count
(population variance).

The uniform helpers support the sampling-distribution ablation: given a
fitted diagonal Gaussian, :func:`fit_optimal_uniform` finds, per dimension,
the symmetric interval whose uniform density has maximal pdf-intersection
area with the Gaussian.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class DiagonalGaussian4:
    """Per-dimension Gaussian offset model: means ``mu`` and variances ``var``."""

    mu: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64).reshape(4)
        var = np.asarray(self.var, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(var))):
            raise ValueError("gaussian parameters must be finite")
        if np.any(var < 0):
            raise ValueError(f"variances must be non-negative, got {var}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "var", var)


@dataclass(frozen=True)
class Uniform4:
    """Per-dimension uniform offset model on [lo_d, hi_d)."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=np.float64).reshape(4)
        hi = np.asarray(self.hi, dtype=np.float64).reshape(4)
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("uniform bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError(f"lo must be < hi component-wise, got lo={lo}, hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass
class OffsetAccumulator:
    """Single-pass mean/variance accumulator over 4-d offsets.

    ``m2`` holds the running sum of squared deviations from the running
    mean, per dimension. Use :meth:`merge` (never shared mutation) to
    combine accumulators filled in parallel.
    """

    count: int = 0
    mean: np.ndarray = field(default_factory=lambda: np.zeros(4))
    m2: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def add(self, offset) -> None:
        """Fold one offset (OffsetVec or length-4 array) into the stream."""
        x = offset.as_array() if hasattr(offset, "as_array") else np.asarray(offset, dtype=np.float64)
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self.m2 = self.m2 + delta * (x - self.mean)

    def add_many(self, offsets: np.ndarray) -> None:
        for row in np.asarray(offsets, dtype=np.float64).reshape(-1, 4):
            self.add(row)

    def merge(self, other: OffsetAccumulator) -> OffsetAccumulator:
        """Combine two accumulators as if their streams were concatenated."""
        if self.count == 0:
            return OffsetAccumulator(other.count, other.mean.copy(), other.m2.copy())
        if other.count == 0:
            return OffsetAccumulator(self.count, self.mean.copy(), self.m2.copy())
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta * delta * (self.count * other.count / n)
        return OffsetAccumulator(n, mean, m2)

    def finalize(self) -> DiagonalGaussian4:
        """Fit the Gaussian: mu = mean, var = m2 / count (population variance)."""
        if self.count == 0:
            raise ValueError("cannot finalize an empty accumulator")
        return DiagonalGaussian4(self.mean.copy(), np.maximum(self.m2 / self.count, 0.0))


def uniform_gaussian_overlap(mu: float, sigma: float, lo: float, hi: float) -> float:
    """Intersection area of N(mu, sigma^2) and U(lo, hi) probability densities.

    Integrates min(gaussian pdf, uniform pdf) over [lo, hi] with adaptive
    quadrature, splitting at the points where the two densities cross.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got lo={lo!r}, hi={hi!r}")
    c = 1.0 / (hi - lo)
    inv = 1.0 / (sigma * _SQRT_2PI)

    def integrand(x: float) -> float:
        return min(math.exp(-0.5 * ((x - mu) / sigma) ** 2) * inv, c)

    # Break at pdf crossings plus a few anchors so the quadrature never
    # steps over the Gaussian bump on a wide interval.
    points = [mu, mu - 4 * sigma, mu + 4 * sigma]
    if c < inv:  # uniform height below the Gaussian peak: crossings exist
        r = sigma * math.sqrt(-2.0 * math.log(c * sigma * _SQRT_2PI))
        points += [mu - r, mu + r]
    points = sorted({p for p in points if lo < p < hi})
    area, _ = quad(integrand, lo, hi, points=points or None, epsabs=1e-10, limit=300)
    return max(area, 0.0)


def fit_optimal_uniform(g: DiagonalGaussian4) -> Uniform4:
    """Per dimension, the interval [mu - a*, mu + a*] maximizing pdf overlap.

    The half-width a* is found by ternary search on (0, 8 sigma]; the
    overlap objective vanishes at both ends of that range and is unimodal
    in between.
    """
    if np.any(g.var <= 0):
        raise ValueError("optimal uniform fit requires strictly positive variances")
    lo = np.empty(4)
    hi = np.empty(4)
    for d in range(4):
        mu = float(g.mu[d])
        sigma = math.sqrt(float(g.var[d]))
        a = _ternary_argmax(
            lambda a: uniform_gaussian_overlap(mu, sigma, mu - a, mu + a),
            1e-9 * sigma,
            8.0 * sigma,
            1e-6 * sigma,
        )
        lo[d] = mu - a
        hi[d] = mu + a
    return Uniform4(lo, hi)


def _ternary_argmax(f, lo: float, hi: float, tol: float) -> float:
    while hi - lo > tol:
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) < f(m2):
            lo = m1
        else:
            hi = m2
    return 0.5 * (lo + hi)


# JSON model files: {"kind": "gaussian", "mu": [...], "var": [...]} or
# {"kind": "uniform", "lo": [...], "hi": [...]}, numbers with 17 significant
# digits so values round-trip exactly.

def _fmt(values: np.ndarray) -> str:
    return "[" + ", ".join(f"{float(v):.16e}" for v in values) + "]"


def model_to_json(model: DiagonalGaussian4 | Uniform4) -> str:
    if isinstance(model, DiagonalGaussian4):
        return f'{{"kind": "gaussian", "mu": {_fmt(model.mu)}, "var": {_fmt(model.var)}}}'
    if isinstance(model, Uniform4):
        return f'{{"kind": "uniform", "lo": {_fmt(model.lo)}, "hi": {_fmt(model.hi)}}}'
    raise TypeError(f"unsupported model type: {type(model).__name__}")


def model_from_json(text: str) -> DiagonalGaussian4 | Uniform4:
    doc = json.loads(text)
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ValueError("model document must be an object with a 'kind' field")
    kind = doc["kind"]
    if kind == "gaussian":
        return DiagonalGaussian4(np.asarray(doc["mu"]), np.asarray(doc["var"]))
    if kind == "uniform":
        return Uniform4(np.asarray(doc["lo"]), np.asarray(doc["hi"]))
    raise ValueError(f"unknown model kind: {kind!r}")
