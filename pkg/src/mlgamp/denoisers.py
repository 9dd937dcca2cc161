"""Scalar posterior-moment kernels

Every kernel works elementwise on numpy arrays (or scalars) and returns
`Moments`. Variances are never clamped here; a kernel may return an exact
zero for a deterministic posterior.

Complex entries are circularly symmetric: a complex pseudo-prior with
variance v has variance v/2 on each real part, and quantizers act on the
real and imaginary parts independently.
"""

from typing import Tuple
import logging
import math

import numpy as np
from scipy.special import erfcx, log_ndtr, logsumexp, ndtr

from mlgamp.api import Channel, Field, KernelError, Moments, Prior, PseudoGaussian
from mlgamp.model import AWGN, GaussianPrior, QPSKPrior, QuantizedAWGN

log = logging.getLogger(__name__)

_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _pdf(x: np.ndarray) -> np.ndarray:
    return _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _positive(name: str, value) -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if not np.all(v > 0):
        raise KernelError(f"{name} must be positive")
    return v


def _flatten_pair(
    a, b
) -> Tuple[Tuple[int, ...], np.ndarray, np.ndarray, np.ndarray]:
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    shape = a.shape
    a = a.ravel()
    b = b.ravel()
    # Reflect upper-tail cells into the lower tail, where Phi is well scaled.
    flip = a > 0
    return shape, flip, np.where(flip, -b, a), np.where(flip, -a, b)


def truncation_ratios(a, b) -> Tuple[np.ndarray, np.ndarray]:
    """Ratios of the standard normal restricted to (a, b]

    Returns r1 = (phi(a) - phi(b)) / Z and r2 = (a phi(a) - b phi(b)) / Z
    with Z = Phi(b) - Phi(a). Cells lying in one tail are evaluated through
    the scaled complementary error function.
    """
    shape, flip, lo, hi = _flatten_pair(a, b)
    r1 = np.empty_like(lo)
    r2 = np.empty_like(lo)

    tail = hi <= 0
    if tail.any():
        l, h = lo[tail], hi[tail]
        lfin = np.isfinite(l)
        l = np.where(lfin, l, h - 1.0)
        el = erfcx(-l / _SQRT2)
        eh = erfcx(-h / _SQRT2)
        gl = _SQRT_2_OVER_PI / el  # phi(l) / Phi(l)
        gh = _SQRT_2_OVER_PI / eh
        logrho = np.log(el) - np.log(eh) - 0.5 * (l - h) * (l + h)
        rho = np.where(lfin, np.exp(logrho), 0.0)  # Phi(l) / Phi(h)
        denom = np.where(lfin, -np.expm1(logrho), 1.0)
        r1[tail] = (gl * rho - gh) / denom
        r2[tail] = (l * gl * rho - h * gh) / denom

    mid = ~tail
    if mid.any():
        l, h = lo[mid], hi[mid]
        mass = ndtr(h) - ndtr(l)
        pl = _pdf(l)
        ph = _pdf(h)
        lf = np.where(np.isfinite(l), l, 0.0)
        hf = np.where(np.isfinite(h), h, 0.0)
        r1[mid] = (pl - ph) / mass
        r2[mid] = (lf * pl - hf * ph) / mass

    r1 = np.where(flip, -r1, r1)
    return r1.reshape(shape), r2.reshape(shape)


def log_interval_prob(a, b) -> np.ndarray:
    """log(Phi(b) - Phi(a)) for a < b"""
    shape, _, lo, hi = _flatten_pair(a, b)
    out = np.empty_like(lo)
    tail = hi <= 0
    if tail.any():
        lh = log_ndtr(hi[tail])
        ll = log_ndtr(lo[tail])
        out[tail] = lh + np.log(-np.expm1(ll - lh))
    mid = ~tail
    if mid.any():
        out[mid] = np.log(ndtr(hi[mid]) - ndtr(lo[mid]))
    return out.reshape(shape)


def truncated_moments(m, v, s, lo, up) -> Moments:
    """Moments of z ~ N(m, v) given that z + w falls in (lo, up], w ~ N(0, s)

    Real valued; all arguments broadcast.
    """
    m = np.asarray(m, dtype=float)
    v = np.asarray(v, dtype=float)
    total = v + s
    se = np.sqrt(total)
    r1, r2 = truncation_ratios((lo - m) / se, (up - m) / se)
    mean = m + v / se * r1
    var = v + v * v / total * (r2 - r1 * r1)
    return Moments(mean=mean, variance=np.maximum(var, 0.0))


def gaussian_product(m1, v1, m2, v2) -> Moments:
    """Moments of N(x | m1, v1) N(x | m2, v2), v2 may be infinite"""
    m1 = np.asarray(m1)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    total = v1 + v2
    gain = v1 / total
    with np.errstate(invalid="ignore"):
        var = np.where(np.isinf(v2), v1, v1 * v2 / total)
    return Moments(mean=m1 + gain * (m2 - m1), variance=var)


def _split(field: Field, *arrays):
    """Per real part views of the arguments"""
    if field is Field.COMPLEX:
        return [
            tuple(np.asarray(a).real for a in arrays),
            tuple(np.asarray(a).imag for a in arrays),
        ]
    return [tuple(np.asarray(a).real for a in arrays)]


def _join(parts) -> Moments:
    if len(parts) == 2:
        re, im = parts
        return Moments(re.mean + 1j * im.mean, re.variance + im.variance)
    return parts[0]


def codebook_posterior(
    r, sig, m, v, s: float, ch: QuantizedAWGN
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Posterior weights of the codebook levels for one real part

    The quantizer input is z + w with z ~ N(m, v), w ~ N(0, s), and its
    output is observed through N(r, sig). Returns the weights (shape
    `(..., K)`), the standardized cell bounds and the levels.
    """
    levels, lo, up = ch.cells()
    r, sig, m, v = (x[..., None] for x in np.broadcast_arrays(r, sig, m, v))
    se = np.sqrt(v + s)
    a = (lo - m) / se
    b = (up - m) / se
    logw = log_interval_prob(a, b) - 0.5 * (levels - r) ** 2 / sig
    w = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    return w, a, b, levels


def _quantized_mid_z(r, sig, m, v, s: float, ch: QuantizedAWGN) -> Moments:
    w, a, b, _ = codebook_posterior(r, sig, m, v, s, ch)
    v = np.asarray(v, dtype=float)[..., None]
    m = np.asarray(m, dtype=float)[..., None]
    total = v + s
    r1, r2 = truncation_ratios(a, b)
    cell_mean = m + v / np.sqrt(total) * r1
    cell_var = np.maximum(v + v * v / total * (r2 - r1 * r1), 0.0)
    mean = np.sum(w * cell_mean, axis=-1)
    var = np.sum(w * (cell_var + (cell_mean - mean[..., None]) ** 2), axis=-1)
    return Moments(mean=mean, variance=var)


def _quantized_mid_x(r, sig, m, v, s: float, ch: QuantizedAWGN) -> Moments:
    w, _, _, levels = codebook_posterior(r, sig, m, v, s, ch)
    mean = np.sum(w * levels, axis=-1)
    var = np.sum(w * (levels - mean[..., None]) ** 2, axis=-1)
    return Moments(mean=mean, variance=var)


def output_moments_last(y, zv: PseudoGaussian, ch: Channel, field: Field) -> Moments:
    """Moments of z under P(y | z) N(z | Z, V)"""
    V = _positive("Pseudo-prior variance V", zv.variance)
    if isinstance(ch, AWGN):
        return gaussian_product(zv.mean, V, y, ch.sigma2)
    if isinstance(ch, QuantizedAWGN):
        p = field.parts
        return _join(
            [
                truncated_moments(m, V / p, ch.sigma2 / p, *ch.interval(yp))
                for yp, m in _split(field, y, zv.mean)
            ]
        )
    raise KernelError(f"Unsupported channel {ch!r}")


def output_moments_mid(
    rx: PseudoGaussian, zv: PseudoGaussian, ch: Channel, field: Field
) -> Moments:
    """Moments of z^(l) given (Z, V) on it and (R, Sigma) on x^(l+1)"""
    S = _positive("Pseudo-prior variance Sigma", rx.variance)
    V = _positive("Pseudo-prior variance V", zv.variance)
    if isinstance(ch, AWGN):
        return gaussian_product(zv.mean, V, rx.mean, S + ch.sigma2)
    if isinstance(ch, QuantizedAWGN):
        p = field.parts
        return _join(
            [
                _quantized_mid_z(r, S / p, m, V / p, ch.sigma2 / p, ch)
                for r, m in _split(field, rx.mean, zv.mean)
            ]
        )
    raise KernelError(f"Unsupported channel {ch!r}")


def input_moments_first(rx: PseudoGaussian, prior: Prior, field: Field) -> Moments:
    """Moments of x^(1) under P_X(x) N(x | R, Sigma)"""
    S = _positive("Pseudo-prior variance Sigma", rx.variance)
    if isinstance(prior, QPSKPrior):
        p = field.parts
        amp = 1.0 / math.sqrt(p)
        parts = []
        for (r,) in _split(field, rx.mean):
            u = amp * r / (S / p)
            with np.errstate(over="ignore"):
                var = amp * amp / np.cosh(u) ** 2
            parts.append(Moments(amp * np.tanh(u), var))
        return _join(parts)
    if isinstance(prior, GaussianPrior):
        return gaussian_product(prior.mean, prior.variance, rx.mean, S)
    raise KernelError(f"Unsupported prior {prior!r}")


def input_moments_mid(
    rx: PseudoGaussian, zv: PseudoGaussian, ch: Channel, field: Field
) -> Moments:
    """Moments of x^(l) given (R, Sigma) on it and (Z, V) on z^(l-1)"""
    S = _positive("Pseudo-prior variance Sigma", rx.variance)
    V = _positive("Pseudo-prior variance V", zv.variance)
    if isinstance(ch, AWGN):
        return gaussian_product(zv.mean, V + ch.sigma2, rx.mean, S)
    if isinstance(ch, QuantizedAWGN):
        p = field.parts
        return _join(
            [
                _quantized_mid_x(r, S / p, m, V / p, ch.sigma2 / p, ch)
                for r, m in _split(field, rx.mean, zv.mean)
            ]
        )
    raise KernelError(f"Unsupported channel {ch!r}")


def output_power(ch: Channel, t_z: float, field: Field) -> float:
    """Second moment of the channel output for input z ~ N(0, t_z)"""
    if isinstance(ch, AWGN):
        return t_z + ch.sigma2
    if isinstance(ch, QuantizedAWGN):
        p = field.parts
        std = math.sqrt((t_z + ch.sigma2) / p)
        levels, lo, up = ch.cells()
        prob = np.exp(log_interval_prob(lo / std, up / std))
        return float(p * np.sum(levels ** 2 * prob))
    raise KernelError(f"Unsupported channel {ch!r}")
