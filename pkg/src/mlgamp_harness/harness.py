"""Monte-Carlo experiments: per-iteration NMSE/SER of the estimator next to SE"""

from typing import Dict, List, Optional, Sequence, Tuple
import itertools
import logging
import math
import time
import dataclasses
from dataclasses import dataclass, field, replace

import numpy as np

from mlgamp.api import Field, Prior
from mlgamp.denoisers import output_power
from mlgamp.gamp import GampOptions, run
from mlgamp.model import (
    AWGN,
    LayerSpec,
    ModelError,
    ModelSpec,
    QPSKPrior,
    QuantizedAWGN,
    default_delta,
    sample_instance,
    snr_to_sigma2,
    validate,
)
from mlgamp.stateevo import SER_MAPPINGS, QuadratureSpec, se_run, ser_from_mse
from mlgamp_harness.process import TrialPool

log = logging.getLogger(__name__)

CONVERGED_DB = 0.05
SWEEP_PARAMETERS = ("bits", "snr_db")


def to_db(value: float) -> float:
    return 10 * math.log10(value) if value > 0 else -math.inf


def nmse(x_true: np.ndarray, x_est: np.ndarray) -> float:
    """||x - x^||^2 / ||x||^2"""
    if np.shape(x_true) != np.shape(x_est):
        raise ValueError("Truth and estimate differ in length")
    power = float(np.sum(np.abs(x_true) ** 2))
    if power == 0:
        raise ValueError("NMSE is undefined for a zero-norm truth")
    return float(np.sum(np.abs(x_true - x_est) ** 2)) / power


def ser_qpsk(x_true: np.ndarray, x_est: np.ndarray) -> float:
    """Fraction of symbols whose quadrant differs from the truth"""
    x_true = np.asarray(x_true)
    x_est = np.asarray(x_est)
    if x_true.shape != x_est.shape:
        raise ValueError("Truth and estimate differ in length")
    amp = 1 / math.sqrt(2) if np.iscomplexobj(x_true) else 1.0
    parts = [x_true.real, x_true.imag] if np.iscomplexobj(x_true) else [x_true]
    if not all(np.allclose(np.abs(p), amp) for p in parts):
        raise ValueError("Symbol error rate needs QPSK symbols as truth")
    wrong = np.sign(x_est.real) != np.sign(x_true.real)
    if np.iscomplexobj(x_true):
        wrong |= np.sign(x_est.imag) != np.sign(x_true.imag)
    return float(np.mean(wrong))


@dataclass(frozen=True)
class LayerSetting:
    """Layer as configured: noise by SNR or variance, optional ADC"""

    n_in: int
    n_out: int
    snr_db: Optional[float] = None
    sigma2: Optional[float] = None
    bits: Optional[int] = None
    delta: Optional[float] = None


def build_spec(layers: Sequence[LayerSetting], prior: Prior, field: Field) -> ModelSpec:
    """Resolve SNRs and quantizer steps against the analytic layer powers"""
    t_x = prior.variance
    specs = []
    for i, ls in enumerate(layers):
        if (ls.snr_db is None) == (ls.sigma2 is None):
            raise ValueError(f"layers[{i}]: exactly one of snr_db or sigma2 is required")
        t_z = t_x * ls.n_in / ls.n_out
        sigma2 = ls.sigma2 if ls.sigma2 is not None else snr_to_sigma2(ls.snr_db, t_z)
        if ls.bits is None:
            ch = AWGN(sigma2)
        else:
            delta = ls.delta or default_delta(t_z, sigma2, ls.bits, field)
            ch = QuantizedAWGN(sigma2, ls.bits, delta)
        specs.append(LayerSpec(ls.n_in, ls.n_out, ch))
        t_x = output_power(ch, t_z, field)
    return ModelSpec(tuple(specs), prior, field)


@dataclass(frozen=True)
class Sweep:
    """Swept parameter over some layers (0-based indices)

    Without explicit layers, bits apply to the last layer and SNRs to all.
    """

    parameter: str
    values: Tuple[Optional[float], ...]
    layers: Optional[Tuple[int, ...]] = None

    def targets(self, n_layers: int) -> Tuple[int, ...]:
        if self.layers is not None:
            return self.layers
        if self.parameter == "bits":
            return (n_layers - 1,)
        return tuple(range(n_layers))

    def apply(
        self, layers: Sequence[LayerSetting], value: Optional[float]
    ) -> Tuple[LayerSetting, ...]:
        out = list(layers)
        for i in self.targets(len(layers)):
            if self.parameter == "bits":
                bits = None if value is None else int(value)
                out[i] = replace(out[i], bits=bits)
            else:
                out[i] = replace(out[i], snr_db=value, sigma2=None)
        return tuple(out)

    def label(self, value: Optional[float]) -> str:
        if self.parameter == "bits":
            return "bitsinf" if value is None else f"bits{int(value)}"
        return f"snr{value:g}"


def _experiment_options() -> GampOptions:
    return GampOptions(stop_tol=0.0, z_init="zero")


@dataclass(frozen=True)
class ExperimentConfig:
    layers: Tuple[LayerSetting, ...]
    prior: Prior = dataclasses.field(default_factory=QPSKPrior)
    field: Field = Field.COMPLEX
    trials: int = 1
    iters: int = 15
    seed: int = 0
    opts: GampOptions = dataclasses.field(default_factory=_experiment_options)
    quad: QuadratureSpec = dataclasses.field(default_factory=QuadratureSpec)
    sweep: Optional[Sweep] = None
    ser_mapping: str = "verbatim"
    jobs: int = 1

    @property
    def spec(self) -> ModelSpec:
        return build_spec(self.layers, self.prior, self.field)

    def check(self) -> None:
        if self.trials < 1:
            raise ValueError("trials must be ≥ 1")
        if self.iters < 1:
            raise ValueError("iters must be ≥ 1")
        if self.seed < 0:
            raise ValueError("seed must be ≥ 0")
        if self.ser_mapping not in SER_MAPPINGS:
            raise ValueError(f"ser_mapping must be one of {SER_MAPPINGS}")
        self.opts.check()
        self.opts.damping_factors(len(self.layers))
        if self.sweep is not None:
            self._check_sweep(self.sweep)

    def _check_sweep(self, sweep: Sweep) -> None:
        if sweep.parameter not in SWEEP_PARAMETERS:
            raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMETERS}")
        if not sweep.values:
            raise ValueError("sweep needs at least one value")
        for i in sweep.targets(len(self.layers)):
            if not 0 <= i < len(self.layers):
                raise ValueError(f"sweep layer {i + 1} does not exist")
        for v in sweep.values:
            if sweep.parameter == "bits" and v is not None and (v != int(v) or v < 1):
                raise ValueError(f"swept bits must be integers ≥ 1 or null, got {v}")
            if sweep.parameter == "snr_db" and v is None:
                raise ValueError("swept SNR values must be numbers")

    def points(self) -> List[Tuple[Optional[str], "ExperimentConfig"]]:
        """(label, config) per sweep point, or a single unlabelled point"""
        if self.sweep is None:
            return [(None, self)]
        return [
            (
                self.sweep.label(v),
                replace(self, layers=self.sweep.apply(self.layers, v), sweep=None),
            )
            for v in self.sweep.values
        ]


@dataclass(frozen=True)
class ExperimentRecord:
    trial: int
    iteration: int
    nmse: float
    nmse_db: float
    ser: Optional[float]
    se_mse: float
    se_mse_db: float
    wall_time: float = field(default=0.0, compare=False)


class ExperimentDiverged(Exception):
    def __init__(
        self,
        trial: int,
        message: str,
        records: List[ExperimentRecord],
        iteration: Optional[int] = None,
    ) -> None:
        super().__init__(f"Trial {trial} diverged: {message}")
        self.trial = trial
        self.records = records
        self.iteration = iteration


@dataclass(frozen=True)
class TrialOutcome:
    trial: int
    records: Tuple[ExperimentRecord, ...]
    failure: Optional[str]


def run_trial(
    config: ExperimentConfig, spec: ModelSpec, trial: int, se_mse: Sequence[float]
) -> TrialOutcome:
    start = time.perf_counter()
    instance = sample_instance(spec, [config.seed, trial])
    opts = replace(config.opts, max_iters=config.iters, stop_tol=0.0)
    _, trace = run(spec, instance.matrices, instance.y, opts)
    elapsed = time.perf_counter() - start

    qpsk = isinstance(spec.prior, QPSKPrior)
    records = []
    for t, estimate in enumerate(trace.estimates):
        err = nmse(instance.x0, estimate)
        records.append(
            ExperimentRecord(
                trial=trial,
                iteration=t + 1,
                nmse=err,
                nmse_db=to_db(err),
                ser=ser_qpsk(instance.x0, estimate) if qpsk else None,
                se_mse=se_mse[t],
                se_mse_db=to_db(se_mse[t]),
                wall_time=elapsed,
            )
        )
    failure = str(trace.failure) if trace.failure is not None else None
    return TrialOutcome(trial, tuple(records), failure)


def run_experiment(
    config: ExperimentConfig, jobs: Optional[int] = None
) -> List[ExperimentRecord]:
    """Run all trials with a fixed iteration count, records sorted by (trial, iteration)"""
    config.check()
    spec = config.spec
    errors = validate(spec)
    if errors:
        raise ModelError(errors)

    se = se_run(spec, config.iters, config.quad)
    pool = TrialPool(jobs or config.jobs)
    args = [(config, spec, trial, se.mse) for trial in range(1, config.trials + 1)]
    outcomes = pool.run(run_trial, args)

    records = sorted(
        itertools.chain.from_iterable(o.records for o in outcomes),
        key=lambda r: (r.trial, r.iteration),
    )
    for outcome in outcomes:
        if outcome.failure is not None:
            raise ExperimentDiverged(
                outcome.trial, outcome.failure, records, len(outcome.records) + 1
            )
    log.info("Finished %d trials of %d iterations", config.trials, config.iters)
    return records


def sweep(config: ExperimentConfig) -> Dict[Optional[str], List[ExperimentRecord]]:
    return {label: run_experiment(point) for label, point in config.points()}


@dataclass(frozen=True)
class Summary:
    iterations: Tuple[int, ...]
    mean_nmse: Tuple[float, ...]
    mean_nmse_db: Tuple[float, ...]
    ser: Tuple[Optional[float], ...]
    se_mse: Tuple[float, ...]
    se_mse_db: Tuple[float, ...]
    se_ser: Tuple[Optional[float], ...]
    convergence_iteration: Optional[int]

    @property
    def gap_db(self) -> Tuple[float, ...]:
        return tuple(abs(a - b) for a, b in zip(self.mean_nmse_db, self.se_mse_db))

    @property
    def max_gap_db(self) -> float:
        return max(self.gap_db)

    @property
    def final_nmse_db(self) -> float:
        return self.mean_nmse_db[-1]


def convergence_iteration(curve_db: Sequence[float], tol: float = CONVERGED_DB) -> Optional[int]:
    """First iteration after which every step changes the curve by less than `tol` dB"""
    found = None
    for t in range(1, len(curve_db)):
        if abs(curve_db[t] - curve_db[t - 1]) < tol:
            if found is None:
                found = t + 1
        else:
            found = None
    return found


def summarize(
    records: Sequence[ExperimentRecord], ser_mapping: str = "verbatim"
) -> Summary:
    """Mean NMSE, pooled SER and SE predictions per iteration

    The analytic SER is only reported where the records carry a measured one.
    """
    by_iter: Dict[int, List[ExperimentRecord]] = {}
    for r in records:
        by_iter.setdefault(r.iteration, []).append(r)
    iterations = tuple(sorted(by_iter))
    mean_nmse = tuple(float(np.mean([r.nmse for r in by_iter[t]])) for t in iterations)
    ser = tuple(
        None
        if any(r.ser is None for r in by_iter[t])
        else float(np.mean([r.ser for r in by_iter[t]]))
        for t in iterations
    )
    se_mse = tuple(by_iter[t][0].se_mse for t in iterations)
    mean_db = tuple(to_db(v) for v in mean_nmse)
    return Summary(
        iterations=iterations,
        mean_nmse=mean_nmse,
        mean_nmse_db=mean_db,
        ser=ser,
        se_mse=se_mse,
        se_mse_db=tuple(to_db(v) for v in se_mse),
        se_ser=tuple(
            None if s is None else ser_from_mse(m, ser_mapping) for s, m in zip(ser, se_mse)
        ),
        convergence_iteration=convergence_iteration(mean_db),
    )
