"""Scalar state evolution of the multi-layer estimator

The recursion tracks, per layer, the signal powers T_X and T_Z, the
pseudo-prior variance V, the z-side overlap q, the feedback variance Sigma
and the x-side overlap d. The predicted MSE after an iteration is
T_X^(1) - d^(1).
"""

from typing import List, Optional, Tuple
import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import quad as integrate
from scipy.special import expit, ndtr

from mlgamp import denoisers
from mlgamp.api import Channel, Field, Prior, PseudoGaussian
from mlgamp.model import AWGN, GaussianPrior, ModelSpec, QPSKPrior, QuantizedAWGN
from mlgamp.quadrature import GaussHermite, gauss_hermite

log = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-12
DENOMINATOR_FLOOR = 1e-12
MAX_NEGATIVE_STREAK = 3


class SEBreakdown(Exception):
    def __init__(self, layer: int, iteration: int, reason: str) -> None:
        super().__init__(
            f"State evolution broke down at layer {layer}, iteration {iteration}: {reason}"
        )
        self.layer = layer
        self.iteration = iteration
        self.reason = reason
        self.states: Tuple["SeState", ...] = ()


@dataclass(frozen=True)
class QuadratureSpec:
    hermite_nodes: int = 40
    inner_nodes: int = 40

    def __post_init__(self) -> None:
        if self.hermite_nodes < 10 or self.inner_nodes < 10:
            raise ValueError("Quadrature rules need at least 10 nodes")

    @property
    def outer(self) -> GaussHermite:
        return gauss_hermite(self.hermite_nodes)

    @property
    def inner(self) -> GaussHermite:
        return gauss_hermite(self.inner_nodes)


@dataclass(frozen=True)
class SeState:
    """Per-layer scalars of the recursion, index 0 being layer 1"""

    t_x: Tuple[float, ...]
    t_z: Tuple[float, ...]
    v: Tuple[float, ...]
    q: Tuple[float, ...]
    sigma: Tuple[float, ...]
    d: Tuple[float, ...]
    t: int = 0
    negative_streak: Tuple[int, ...] = ()

    @property
    def mse(self) -> float:
        return self.t_x[0] - self.d[0]


@dataclass(frozen=True)
class SeResult:
    states: Tuple[SeState, ...]
    mse: Tuple[float, ...]
    converged: bool

    @property
    def fixed_point(self) -> SeState:
        return self.states[-1]


def signal_powers(spec: ModelSpec) -> Tuple[Tuple[float, ...], Tuple[float, ...]]:
    """Analytic powers T_X^(l) and T_Z^(l) of every layer"""
    t_x: List[float] = [spec.prior.variance]
    t_z: List[float] = []
    for layer in spec.layers:
        t_z.append(t_x[-1] / float(layer.alpha))
        t_x.append(denoisers.output_power(layer.channel, t_z[-1], spec.field))
    return tuple(t_x[:-1]), tuple(t_z)


def se_init(spec: ModelSpec) -> SeState:
    t_x, t_z = signal_powers(spec)
    n = spec.n_layers
    return SeState(
        t_x=t_x,
        t_z=t_z,
        v=t_z,
        q=(0.0,) * n,
        sigma=(math.inf,) * n,
        d=(0.0,) * n,
        t=0,
        negative_streak=(0,) * n,
    )


def _part_channel(ch: QuantizedAWGN, field: Field) -> QuantizedAWGN:
    return QuantizedAWGN(ch.sigma2 / field.parts, ch.bits, ch.delta)


def _pseudo_prior_means(t_z: float, v: float, parts: int, quad: QuadratureSpec):
    spread = math.sqrt(max(t_z - v, 0.0) / parts)
    return spread * quad.outer.z


def _level_probs(ch: QuantizedAWGN, zs: np.ndarray, vp: float, sp: float):
    _, lo, up = ch.cells()
    se = math.sqrt(vp + sp)
    a = (lo - zs[:, None]) / se
    b = (up - zs[:, None]) / se
    return a, b, np.exp(denoisers.log_interval_prob(a, b))


def adc_overlap_sum(
    ch: QuantizedAWGN, field: Field, t_z: float, v: float, quad: QuadratureSpec
) -> float:
    """E over xi of sum over cells of [phi(eta1) - phi(eta2)]^2 / [Phi(eta2) - Phi(eta1)]"""
    p = field.parts
    zs = _pseudo_prior_means(t_z, v, p, quad)
    a, b, prob = _level_probs(ch, zs, v / p, ch.sigma2 / p)
    r1, _ = denoisers.truncation_ratios(a, b)
    return float(quad.outer.expect(np.sum(r1 * r1 * prob, axis=1)))


def se_adc_vtilde(
    t_z: float,
    v: float,
    sigma2: float,
    bits: int,
    delta: float,
    quad: QuadratureSpec,
    field: Field = Field.COMPLEX,
) -> float:
    """Average posterior variance of z behind an AWGN + ADC last layer"""
    ch = QuantizedAWGN(sigma2, bits, delta)
    return v - v * v / (v + sigma2) * adc_overlap_sum(ch, field, t_z, v, quad)


def se_vtilde_last(
    ch: Channel, field: Field, t_z: float, v: float, quad: QuadratureSpec
) -> float:
    """Average posterior variance of z^(L), by quadrature over the output kernel"""
    if isinstance(ch, AWGN):
        mo = denoisers.output_moments_last(0.0, PseudoGaussian(0.0, v), ch, Field.REAL)
        return float(mo.variance)
    assert isinstance(ch, QuantizedAWGN)
    p = field.parts
    part = _part_channel(ch, field)
    zs = _pseudo_prior_means(t_z, v, p, quad)
    _, _, prob = _level_probs(part, zs, v / p, part.sigma2)
    levels = part.levels
    mo = denoisers.output_moments_last(
        np.broadcast_to(levels, prob.shape),
        PseudoGaussian(np.broadcast_to(zs[:, None], prob.shape), v / p),
        part,
        Field.REAL,
    )
    return p * float(quad.outer.expect(np.sum(prob * mo.variance, axis=1)))


def _quantized_mid_average(
    ch: QuantizedAWGN,
    field: Field,
    t_z: float,
    v: float,
    sigma: float,
    quad: QuadratureSpec,
    side: str,
) -> float:
    """Average over (xi, level, zeta) of |z~ - Z|^2 (side "z") or of var x (side "x")"""
    p = field.parts
    part = _part_channel(ch, field)
    vp, sp = v / p, sigma / p
    zs = _pseudo_prior_means(t_z, v, p, quad)
    _, _, prob = _level_probs(part, zs, vp, part.sigma2)
    levels = part.levels
    inner = quad.inner
    rs = levels[:, None] + math.sqrt(sp) * inner.z[None, :]

    values = np.empty(len(zs))
    for i, zi in enumerate(zs):
        rx = PseudoGaussian(rs, sp)
        zv = PseudoGaussian(np.full(rs.shape, zi), vp)
        if side == "z":
            mo = denoisers.output_moments_mid(rx, zv, part, Field.REAL)
            err = (mo.mean - zi) ** 2
        else:
            mo = denoisers.input_moments_mid(rx, zv, part, Field.REAL)
            err = mo.variance
        values[i] = np.sum(prob[i] * inner.expect(err, axis=1))
    return p * float(quad.outer.expect(values))


def _information_last(
    ch: Channel, field: Field, t_z: float, v: float, quad: QuadratureSpec
) -> float:
    """V - average posterior variance at the last layer"""
    if isinstance(ch, AWGN):
        return v * v / (v + ch.sigma2) if math.isfinite(ch.sigma2) else 0.0
    assert isinstance(ch, QuantizedAWGN)
    return v * v / (v + ch.sigma2) * adc_overlap_sum(ch, field, t_z, v, quad)


def _information_mid(
    ch: Channel, field: Field, t_z: float, v: float, sigma: float, quad: QuadratureSpec
) -> float:
    if isinstance(ch, AWGN):
        noise = sigma + ch.sigma2
        return v * v / (v + noise) if math.isfinite(noise) else 0.0
    assert isinstance(ch, QuantizedAWGN)
    if not math.isfinite(sigma):
        return 0.0
    return _quantized_mid_average(ch, field, t_z, v, sigma, quad, "z")


def se_prior_mse(prior: Prior, sigma: float, field: Field) -> float:
    """MMSE of x^(1) observed as x + N(0, Sigma)"""
    if not math.isfinite(sigma):
        return prior.variance
    if isinstance(prior, GaussianPrior):
        return prior.variance * sigma / (prior.variance + sigma)
    if isinstance(prior, QPSKPrior):
        # Same scalar law for ±1 and (±1±j)/sqrt(2) symbols.
        gain = 1.0 / sigma
        scale = 1.0 / math.sqrt(sigma)

        def integrand(z: float) -> float:
            return 2.0 * expit(-2.0 * (gain + scale * z)) * math.exp(-0.5 * z * z)

        edge = -gain / scale
        points = [edge] if -12.0 < edge < 12.0 else None
        value = integrate(
            integrand, -12.0, 12.0, points=points, epsabs=1e-15, epsrel=1e-12, limit=200
        )[0]
        return value / math.sqrt(2.0 * math.pi)
    raise ValueError(f"Unsupported prior {prior!r}")


def _mse_mid(
    ch: Channel, field: Field, t_z: float, v: float, sigma: float, quad: QuadratureSpec
) -> float:
    if isinstance(ch, AWGN):
        prior_var = v + ch.sigma2
        if not math.isfinite(sigma):
            return prior_var
        return prior_var * sigma / (prior_var + sigma)
    assert isinstance(ch, QuantizedAWGN)
    return _quantized_mid_average(ch, field, t_z, v, sigma, quad, "x")


def _pseudo_prior_variance(t_x: float, d: float, alpha: float, t_z: float) -> float:
    return max((t_x - d) / alpha, DENOMINATOR_FLOOR * t_z)


def se_backward_step(state: SeState, spec: ModelSpec, quad: QuadratureSpec) -> SeState:
    n = spec.n_layers
    v = list(state.v)
    q = list(state.q)
    sigma = list(state.sigma)
    streak = list(state.negative_streak or (0,) * n)
    iteration = state.t + 1

    for l in reversed(range(n)):
        layer = spec.layers[l]
        alpha = float(layer.alpha)
        t_z = state.t_z[l]
        v[l] = _pseudo_prior_variance(state.t_x[l], state.d[l], alpha, t_z)
        if l == n - 1:
            info = _information_last(layer.channel, spec.field, t_z, v[l], quad)
        else:
            info = _information_mid(
                layer.channel, spec.field, t_z, v[l], sigma[l + 1], quad
            )
        if not math.isfinite(info):
            raise SEBreakdown(l + 1, iteration, "non-finite overlap")
        q[l] = t_z - v[l] + info
        streak[l] = streak[l] + 1 if info < 0 else 0
        if streak[l] > MAX_NEGATIVE_STREAK:
            raise SEBreakdown(l + 1, iteration, "V - T_Z + q stayed negative")
        floor = DENOMINATOR_FLOOR * t_z
        if info < floor:
            log.debug("Clamping SE denominator at layer %d (%g)", l + 1, info)
        sigma[l] = v[l] * v[l] / max(info, floor)

    return replace(
        state, v=tuple(v), q=tuple(q), sigma=tuple(sigma), negative_streak=tuple(streak)
    )


def se_forward_step(state: SeState, spec: ModelSpec, quad: QuadratureSpec) -> SeState:
    n = spec.n_layers
    d = list(state.d)
    for l in range(n):
        if l == 0:
            mse = se_prior_mse(spec.prior, state.sigma[0], spec.field)
        else:
            prev = spec.layers[l - 1]
            v_prev = _pseudo_prior_variance(
                state.t_x[l - 1], d[l - 1], float(prev.alpha), state.t_z[l - 1]
            )
            mse = _mse_mid(
                prev.channel, spec.field, state.t_z[l - 1], v_prev, state.sigma[l], quad
            )
        if not math.isfinite(mse):
            raise SEBreakdown(l + 1, state.t + 1, "non-finite MSE")
        d[l] = min(max(state.t_x[l] - mse, 0.0), state.t_x[l])

    v = tuple(
        _pseudo_prior_variance(state.t_x[l], d[l], float(spec.layers[l].alpha), state.t_z[l])
        for l in range(n)
    )
    return replace(state, d=tuple(d), v=v, t=state.t + 1)


def se_run(spec: ModelSpec, iters: int, quad: Optional[QuadratureSpec] = None) -> SeResult:
    """Iterate the recursion up to `iters` times or until d^(1) settles

    The returned MSE sequence always has `iters` entries; after convergence
    it repeats the fixed-point value.
    """
    if iters < 1:
        raise ValueError("State evolution needs at least one iteration")
    quad = quad or QuadratureSpec()
    state = se_init(spec)
    states: List[SeState] = []
    converged = False
    for _ in range(iters):
        previous = state.d[0]
        try:
            state = se_backward_step(state, spec, quad)
            state = se_forward_step(state, spec, quad)
        except SEBreakdown as e:
            e.states = tuple(states)
            raise
        states.append(state)
        log.debug("SE iteration %d: mse %.6g", state.t, state.mse)
        if abs(state.d[0] - previous) <= CONVERGENCE_TOL:
            converged = True
            break

    mse = [s.mse for s in states]
    mse += [mse[-1]] * (iters - len(mse))
    return SeResult(states=tuple(states), mse=tuple(mse), converged=converged)


def fixed_point_residuals(state: SeState, spec: ModelSpec) -> List[Tuple[float, float]]:
    """Residuals of T_Z - V = d/alpha and Sigma = (T_X - d)^2 / (alpha (alpha q - d))"""
    out = []
    for l, layer in enumerate(spec.layers):
        alpha = float(layer.alpha)
        t_x, d = state.t_x[l], state.d[l]
        first = state.t_z[l] - state.v[l] - d / alpha
        second = state.sigma[l] - (t_x - d) ** 2 / (alpha * (alpha * state.q[l] - d))
        out.append((first, second))
    return out


def ser_from_argument(x) -> np.ndarray:
    """2Q(x) - Q(x)^2, the QPSK symbol error rate at per-part argument x"""
    tail = ndtr(-np.asarray(x, dtype=float))
    return 2 * tail - tail * tail


SER_MAPPINGS = ("verbatim", "effective-snr")


def ser_from_mse(mse, mapping: str = "verbatim"):
    """Analytic QPSK symbol error rate for a given MSE

    `verbatim` evaluates Q at sqrt(mse); `effective-snr` evaluates it at
    sqrt((1 - mse) / mse), the per-part SNR of a shrunk unit-energy estimate.
    """
    mse = np.asarray(mse, dtype=float)
    if np.any(mse < 0):
        raise ValueError("MSE must be non-negative")
    if mapping == "verbatim":
        arg = np.sqrt(mse)
    elif mapping == "effective-snr":
        with np.errstate(divide="ignore"):
            arg = np.sqrt(np.clip(1.0 - mse, 0.0, None) / mse)
    else:
        raise ValueError(f"Unknown SER mapping {mapping!r}")
    ser = ser_from_argument(arg)
    return float(ser) if ser.ndim == 0 else ser

