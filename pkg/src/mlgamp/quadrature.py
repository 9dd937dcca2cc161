"""Numerical integration against Gaussian weights and the reference moment oracle

Gauss-Hermite rules are rescaled to the standard normal measure,

    E f(xi) ~ sum_i w_i f(z_i),    xi ~ N(0, 1),    sum_i w_i = 1.
"""

from typing import Any, Callable, Dict, Sequence, Union
import functools
import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy.integrate import quad
from scipy.special import logsumexp

from mlgamp.api import Moments, NonNormalizableDensity

MIN_MASS = 1e-300


@dataclass(frozen=True)
class GaussHermite:
    z: np.ndarray
    w: np.ndarray

    def expect(self, values: np.ndarray, axis: int = 0) -> np.ndarray:
        """Weighted sum of `values` sampled at the nodes along `axis`"""
        return np.tensordot(self.w, values, axes=([0], [axis]))


@functools.lru_cache(maxsize=32)
def gauss_hermite(n: int) -> GaussHermite:
    if n < 2:
        raise ValueError("Gauss-Hermite rule needs at least 2 nodes")
    x, w = hermgauss(n)
    z = np.sqrt(2.0) * x
    w = w / np.sqrt(np.pi)
    z.setflags(write=False)
    w.setflags(write=False)
    return GaussHermite(z=z, w=w)


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float


Support = Union[Interval, Sequence[float], Sequence[complex], np.ndarray]


def quadrature_oracle(
    logdensity: Callable[[float], float],
    support: Support,
    nodes: int = 201,
    span: float = 50.0,
) -> Moments:
    """Mean and variance of an unnormalized density given by its logarithm

    On an `Interval` the moments come from adaptive quadrature, `nodes`
    being the size of the grid used to locate the peak (infinite ends are
    explored up to `span`). Any other support is a finite set of points
    and is summed exactly.
    """
    if nodes < 3:
        raise ValueError("Oracle needs at least 3 nodes")
    if isinstance(support, Interval):
        return _continuous_moments(logdensity, support, nodes, span)
    return _discrete_moments(logdensity, np.asarray(support))


def _discrete_moments(
    logdensity: Callable[[float], float], points: np.ndarray
) -> Moments:
    logw = np.array([logdensity(p) for p in points], dtype=float)
    total = logsumexp(logw)
    if not np.isfinite(total) or total < math.log(MIN_MASS):
        raise NonNormalizableDensity(math.exp(total) if np.isfinite(total) else 0.0)
    w = np.exp(logw - total)
    mean = np.sum(w * points)
    var = float(np.sum(w * np.abs(points - mean) ** 2))
    return Moments(mean=mean, variance=var)


def _continuous_moments(
    logdensity: Callable[[float], float], support: Interval, nodes: int, span: float
) -> Moments:
    lo = support.lo if np.isfinite(support.lo) else min(-span, support.hi - span)
    hi = support.hi if np.isfinite(support.hi) else max(span, support.lo + span)
    grid = np.linspace(lo, hi, nodes)
    logs = np.array([logdensity(x) for x in grid], dtype=float)
    shift = np.max(logs)
    if not np.isfinite(shift):
        raise NonNormalizableDensity(0.0)
    peak = float(grid[np.argmax(logs)])

    finite = np.isfinite(support.lo) and np.isfinite(support.hi)
    points = [peak] if finite and support.lo < peak < support.hi else None

    def integrate(f: Callable[[float], float]) -> float:
        def integrand(x: float) -> float:
            return f(x) * math.exp(logdensity(x) - shift)

        kw: Dict[str, Any] = dict(epsabs=0.0, epsrel=1e-13, limit=500)
        if points is not None:
            kw["points"] = points
        return quad(integrand, support.lo, support.hi, **kw)[0]

    mass = integrate(lambda x: 1.0)
    if not mass > 0 or math.log(mass) + shift < math.log(MIN_MASS):
        raise NonNormalizableDensity(mass * math.exp(min(shift, 700.0)))
    mean = integrate(lambda x: x) / mass
    var = integrate(lambda x: (x - mean) ** 2) / mass
    return Moments(mean=mean, variance=var)
