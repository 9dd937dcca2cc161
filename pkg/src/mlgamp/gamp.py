"""Multi-layer GAMP: backward and forward sweeps over the layer chain

Each iteration runs a backward sweep (layer L down to 1) that refreshes the
feedback pseudo-priors (R, Sigma) on every x^(l), followed by a forward
sweep (layer 1 up to L) that refreshes the pseudo-priors (Z, V) on every
z^(l). Both sweeps always consume the values produced earlier in the same
sweep by the neighbouring layer.
"""

from typing import List, Optional, Sequence, Tuple, Union
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from mlgamp.api import Field, PseudoGaussian
from mlgamp.denoisers import (
    input_moments_first,
    input_moments_mid,
    output_moments_last,
    output_moments_mid,
)
from mlgamp.model import ModelSpec, validate
from mlgamp.stateevo import signal_powers

log = logging.getLogger(__name__)

Z_INIT_MODES = ("product", "zero")


class DivergenceError(Exception):
    def __init__(self, layer: int, index: int, quantity: str) -> None:
        super().__init__(f"Non-finite {quantity} at layer {layer}, index {index}")
        self.layer = layer
        self.index = index
        self.quantity = quantity


@dataclass(frozen=True)
class GampOptions:
    max_iters: int = 50
    # None picks 1.0 for up to two layers and 0.8 for deeper stacks.
    damping: Optional[Union[float, Tuple[float, ...]]] = None
    variance_floor: float = 1e-11
    scalar_variance: bool = False
    stop_tol: float = 1e-8
    z_init: str = "product"
    damp_estimates: bool = False
    onsager: bool = True

    def check(self) -> None:
        if self.max_iters < 1:
            raise ValueError("max_iters must be ≥ 1")
        if not self.variance_floor > 0:
            raise ValueError("variance_floor must be > 0")
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be ≥ 0")
        if self.z_init not in Z_INIT_MODES:
            raise ValueError(f"z_init must be one of {Z_INIT_MODES}")

    def damping_factors(self, n_layers: int) -> Tuple[float, ...]:
        if self.damping is None:
            return (1.0 if n_layers <= 2 else 0.8,) * n_layers
        if isinstance(self.damping, (int, float)):
            factors = (float(self.damping),) * n_layers
        else:
            factors = tuple(float(r) for r in self.damping)
            if len(factors) != n_layers:
                raise ValueError(
                    f"Expected {n_layers} damping factors, got {len(factors)}"
                )
        for rho in factors:
            if not 0 < rho <= 1:
                raise ValueError(f"Damping factor {rho} outside (0, 1]")
        return factors


@dataclass
class GampState:
    """Iterating vectors, one array per layer (index 0 is layer 1)

    `Z`, `V`, `s`, `tau` live on z^(l) (length N_{l+1}); `Sigma`, `R`,
    `m_hat`, `v_hat` live on x^(l) (length N_l). With scalar variances the
    variance arrays hold one repeated value.
    """

    Z: List[np.ndarray]
    V: List[np.ndarray]
    s: List[np.ndarray]
    tau: List[np.ndarray]
    Sigma: List[np.ndarray]
    R: List[np.ndarray]
    m_hat: List[np.ndarray]
    v_hat: List[np.ndarray]
    z_tilde: List[np.ndarray]
    v_tilde: List[np.ndarray]
    t: int = 0


@dataclass
class GampTrace:
    estimates: List[np.ndarray] = field(default_factory=list)
    mean_v: List[Tuple[float, ...]] = field(default_factory=list)
    mean_sigma: List[Tuple[float, ...]] = field(default_factory=list)
    mean_v_hat: List[float] = field(default_factory=list)
    converged: bool = False
    failure: Optional[DivergenceError] = None

    def __len__(self) -> int:
        return len(self.estimates)

    def record(self, state: GampState) -> None:
        self.estimates.append(state.m_hat[0].copy())
        self.mean_v.append(tuple(float(np.mean(v)) for v in state.V))
        self.mean_sigma.append(tuple(float(np.mean(s)) for s in state.Sigma))
        self.mean_v_hat.append(float(np.mean(state.v_hat[0])))


def squared_magnitudes(matrices: Sequence[np.ndarray]) -> List[np.ndarray]:
    return [np.abs(h) ** 2 for h in matrices]


def _check_finite(quantity: str, layer: int, values: np.ndarray) -> None:
    bad = ~np.isfinite(values)
    if bad.any():
        raise DivergenceError(layer + 1, int(np.flatnonzero(bad)[0]), quantity)


def _check_problem(
    spec: ModelSpec, matrices: Sequence[np.ndarray], y: np.ndarray
) -> None:
    errors = validate(spec)
    if errors:
        raise ValueError("; ".join(errors))
    if len(matrices) != spec.n_layers:
        raise ValueError(f"Expected {spec.n_layers} matrices, got {len(matrices)}")
    for l, (h, layer) in enumerate(zip(matrices, spec.layers)):
        if h.shape != (layer.n_out, layer.n_in):
            raise ValueError(
                f"Matrix {l + 1} has shape {h.shape}, expected {(layer.n_out, layer.n_in)}"
            )
    if np.shape(y) != (spec.layers[-1].n_out,):
        raise ValueError(f"Observation has {len(y)} entries, expected {spec.layers[-1].n_out}")


def init_state(
    spec: ModelSpec, y: np.ndarray, opts: Optional[GampOptions] = None
) -> GampState:
    opts = opts or GampOptions()
    if np.shape(y) != (spec.layers[-1].n_out,):
        raise ValueError(f"Observation has {len(y)} entries, expected {spec.layers[-1].n_out}")
    dtype = complex if spec.field is Field.COMPLEX else float
    t_x, t_z = signal_powers(spec)
    state = GampState([], [], [], [], [], [], [], [], [], [])
    product = 1.0
    for l, layer in enumerate(spec.layers):
        product *= float(layer.alpha)
        if opts.z_init == "product":
            Z = np.full(layer.n_out, product, dtype=dtype)
            V = np.ones(layer.n_out)
        else:
            Z = np.zeros(layer.n_out, dtype=dtype)
            V = np.full(layer.n_out, t_z[l])
        if l == 0:
            m_hat = np.full(layer.n_in, spec.prior.mean, dtype=dtype)
            v_hat = np.full(layer.n_in, spec.prior.variance)
        else:
            m_hat = np.zeros(layer.n_in, dtype=dtype)
            v_hat = np.full(layer.n_in, t_x[l])
        state.Z.append(Z)
        state.V.append(V)
        state.s.append(np.zeros(layer.n_out, dtype=dtype))
        state.tau.append(np.zeros(layer.n_out))
        state.Sigma.append(np.full(layer.n_in, 1.0 / opts.variance_floor))
        state.R.append(m_hat.copy())
        state.m_hat.append(m_hat)
        state.v_hat.append(v_hat)
        state.z_tilde.append(Z.copy())
        state.v_tilde.append(V.copy())
    return state


def backward_sweep(
    state: GampState,
    spec: ModelSpec,
    matrices: Sequence[np.ndarray],
    y: np.ndarray,
    opts: GampOptions,
    sq: Optional[Sequence[np.ndarray]] = None,
) -> GampState:
    """Refresh (z~, v~, s, tau, Sigma, R) from layer L down to layer 1, in place"""
    sq = sq if sq is not None else squared_magnitudes(matrices)
    floor = opts.variance_floor
    rho = opts.damping_factors(spec.n_layers)
    last = spec.n_layers - 1

    for l in reversed(range(spec.n_layers)):
        layer = spec.layers[l]
        h = matrices[l]
        Z, V = state.Z[l], state.V[l]
        zv = PseudoGaussian(Z, V)
        if l == last:
            mo = output_moments_last(y, zv, layer.channel, spec.field)
        else:
            rx = PseudoGaussian(state.R[l + 1], state.Sigma[l + 1])
            mo = output_moments_mid(rx, zv, layer.channel, spec.field)
        z_tilde = np.asarray(mo.mean)
        if opts.damp_estimates and state.t > 0:
            z_tilde = rho[l] * z_tilde + (1 - rho[l]) * state.z_tilde[l]
        v_tilde = np.broadcast_to(mo.variance, Z.shape).astype(float)
        _check_finite("z~", l, z_tilde)
        _check_finite("v~", l, v_tilde)

        if opts.scalar_variance:
            v_bar = float(np.mean(V))
            gap = max(v_bar - float(np.mean(v_tilde)), floor)
            s = (z_tilde - Z) / v_bar
            tau = np.full(layer.n_out, min(gap / v_bar ** 2, 1.0 / floor))
            Sigma = np.full(layer.n_in, v_bar ** 2 / gap)
        else:
            s = (z_tilde - Z) / V
            tau = np.clip((V - v_tilde) / V ** 2, 0.0, 1.0 / floor)
            Sigma = 1.0 / np.maximum(sq[l].T @ tau, floor)
        R = state.m_hat[l] + Sigma * np.conj(h.T @ np.conj(s))
        _check_finite("s", l, s)
        _check_finite("Sigma", l, Sigma)
        _check_finite("R", l, R)

        state.z_tilde[l] = z_tilde
        state.v_tilde[l] = v_tilde
        state.s[l] = s
        state.tau[l] = tau
        state.Sigma[l] = Sigma
        state.R[l] = R
    return state


def forward_sweep(
    state: GampState,
    spec: ModelSpec,
    matrices: Sequence[np.ndarray],
    opts: GampOptions,
    sq: Optional[Sequence[np.ndarray]] = None,
) -> GampState:
    """Refresh (m^, v^, V, Z) from layer 1 up to layer L, in place"""
    sq = sq if sq is not None else squared_magnitudes(matrices)
    floor = opts.variance_floor
    rho = opts.damping_factors(spec.n_layers)

    for l, layer in enumerate(spec.layers):
        h = matrices[l]
        rx = PseudoGaussian(state.R[l], state.Sigma[l])
        if l == 0:
            mi = input_moments_first(rx, spec.prior, spec.field)
        else:
            zv = PseudoGaussian(state.Z[l - 1], state.V[l - 1])
            mi = input_moments_mid(rx, zv, spec.layers[l - 1].channel, spec.field)
        m_hat = np.asarray(mi.mean)
        if opts.damp_estimates and state.t > 0:
            m_hat = rho[l] * m_hat + (1 - rho[l]) * state.m_hat[l]
        v_hat = np.broadcast_to(mi.variance, m_hat.shape).astype(float)
        _check_finite("m^", l, m_hat)
        _check_finite("v^", l, v_hat)

        if opts.scalar_variance:
            V_new = np.full(layer.n_out, float(np.mean(v_hat)) / float(layer.alpha))
        else:
            V_new = sq[l] @ v_hat
        Z_new = h @ m_hat
        if opts.onsager:
            Z_new = Z_new - V_new * state.s[l]

        Z = rho[l] * Z_new + (1 - rho[l]) * state.Z[l]
        V = np.maximum(rho[l] * V_new + (1 - rho[l]) * state.V[l], floor)
        _check_finite("Z", l, Z)
        _check_finite("V", l, V)

        state.m_hat[l] = m_hat
        state.v_hat[l] = v_hat
        state.Z[l] = Z
        state.V[l] = V
    state.t += 1
    return state


def _relative_change(previous: np.ndarray, current: np.ndarray) -> float:
    norm = np.linalg.norm(previous)
    if norm == 0:
        return np.inf
    return float(np.linalg.norm(current - previous) / norm)


def run(
    spec: ModelSpec,
    matrices: Sequence[np.ndarray],
    y: np.ndarray,
    opts: Optional[GampOptions] = None,
) -> Tuple[np.ndarray, GampTrace]:
    """Iterate the sweeps and return the estimate of x^(1) with the trace

    A non-finite iterate stops the loop; the trace then carries the
    `DivergenceError` in `failure` and the estimate of the last complete
    iteration is returned.
    """
    opts = opts or GampOptions()
    opts.check()
    _check_problem(spec, matrices, y)
    sq = squared_magnitudes(matrices)
    state = init_state(spec, y, opts)
    trace = GampTrace()

    for _ in range(opts.max_iters):
        previous = state.m_hat[0].copy()
        try:
            backward_sweep(state, spec, matrices, y, opts, sq)
            forward_sweep(state, spec, matrices, opts, sq)
        except DivergenceError as e:
            log.warning("Iteration %d diverged: %s", state.t + 1, e)
            trace.failure = e
            break
        trace.record(state)
        change = _relative_change(previous, state.m_hat[0])
        log.debug("Iteration %d: relative change %.3g", state.t, change)
        if opts.stop_tol > 0 and change <= opts.stop_tol:
            trace.converged = True
            break

    estimate = trace.estimates[-1] if trace.estimates else state.m_hat[0]
    return estimate.copy(), trace


def run_scalar_variance(
    spec: ModelSpec,
    matrices: Sequence[np.ndarray],
    y: np.ndarray,
    opts: Optional[GampOptions] = None,
) -> Tuple[np.ndarray, GampTrace]:
    opts = replace(opts or GampOptions(), scalar_variance=True)
    return run(spec, matrices, y, opts)
