import math
import os
from dataclasses import replace

import numpy as np
import pytest

from mlgamp.api import Field
from mlgamp.gamp import DivergenceError
from mlgamp.model import AWGN, GaussianPrior, ModelError, QPSKPrior, QuantizedAWGN
from mlgamp.stateevo import se_run, ser_from_mse
from mlgamp_harness import harness
from mlgamp_harness.harness import (
    ExperimentConfig,
    ExperimentDiverged,
    ExperimentRecord,
    LayerSetting,
    Sweep,
    build_spec,
    convergence_iteration,
    nmse,
    run_experiment,
    ser_qpsk,
    summarize,
    sweep,
    to_db,
)
from mlgamp_harness.settings import load_settings

CONFIGS = os.path.join(os.path.dirname(__file__), "..", "..", "configs")


def small_experiment(**kwargs) -> ExperimentConfig:
    layers = (
        LayerSetting(32, 64, snr_db=15.0),
        LayerSetting(64, 64, snr_db=10.0, bits=2),
    )
    return ExperimentConfig(layers=layers, **{"trials": 3, "iters": 4, "seed": 5, **kwargs})


def record(trial, iteration, err, ser=None, se_mse=0.1) -> ExperimentRecord:
    return ExperimentRecord(
        trial=trial,
        iteration=iteration,
        nmse=err,
        nmse_db=to_db(err),
        ser=ser,
        se_mse=se_mse,
        se_mse_db=to_db(se_mse),
    )


def qpsk_symbols(n: int, rng: np.random.Generator) -> np.ndarray:
    return QPSKPrior().sample(n, Field.COMPLEX, rng)


class TestNmse:
    def test_values(self, rng) -> None:
        x = qpsk_symbols(100, rng)
        assert nmse(x, x) == 0.0
        assert nmse(x, np.zeros_like(x)) == pytest.approx(1.0)
        assert nmse(x, -x) == pytest.approx(4.0)

    def test_errors(self) -> None:
        with pytest.raises(ValueError):
            nmse(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            nmse(np.zeros(3), np.ones(3))


class TestSerQpsk:
    def test_counting(self, rng) -> None:
        x = qpsk_symbols(40, rng)
        assert ser_qpsk(x, x) == 0.0
        flipped = x.copy()
        flipped[:7] = flipped[:7].conj()
        assert ser_qpsk(x, flipped) == pytest.approx(7 / 40)

    def test_real_field(self) -> None:
        x = np.array([1.0, -1.0, 1.0, 1.0])
        assert ser_qpsk(x, np.array([0.2, -3.0, -0.1, 5.0])) == pytest.approx(0.25)

    def test_non_qpsk_truth(self) -> None:
        with pytest.raises(ValueError):
            ser_qpsk(np.array([0.3 + 0.1j, 1 + 1j]), np.zeros(2, dtype=complex))
        with pytest.raises(ValueError):
            ser_qpsk(np.ones(3, dtype=complex), np.ones(2, dtype=complex))

    def test_calibrated_against_analytic_mapping(self, rng) -> None:
        # GIVEN linear MMSE estimates from x + CN(0, s)
        n, s = 200000, 0.25
        x = qpsk_symbols(n, rng)
        noise = math.sqrt(s / 2) * (rng.normal(size=n) + 1j * rng.normal(size=n))
        estimate = (x + noise) / (1 + s)

        # WHEN
        measured = ser_qpsk(x, estimate)

        # THEN
        expected = ser_from_mse(s / (1 + s), "effective-snr")
        stderr = math.sqrt(expected * (1 - expected) / n)
        assert abs(measured - expected) < 3 * stderr


class TestBuildSpec:
    def test_resolves_snr_and_powers(self) -> None:
        spec = build_spec(
            [LayerSetting(256, 512, snr_db=10.0), LayerSetting(512, 512, sigma2=0.2)],
            QPSKPrior(),
            Field.COMPLEX,
        )
        assert spec.layers[0].channel.sigma2 == pytest.approx(0.05)
        assert spec.layers[1].channel == AWGN(0.2)

    def test_default_quantizer_step(self) -> None:
        spec = build_spec([LayerSetting(64, 64, snr_db=0.0, bits=3)], QPSKPrior(), Field.COMPLEX)
        ch = spec.layers[0].channel
        assert isinstance(ch, QuantizedAWGN)
        assert ch.sigma2 == pytest.approx(1.0)
        assert ch.delta == pytest.approx(6 * math.sqrt(1.0) / 8)

    def test_explicit_quantizer_step(self) -> None:
        spec = build_spec(
            [LayerSetting(64, 64, sigma2=0.1, bits=2, delta=0.3)], GaussianPrior(1.0), Field.REAL
        )
        assert spec.layers[0].channel == QuantizedAWGN(0.1, 2, 0.3)

    @pytest.mark.parametrize(
        "setting", [LayerSetting(8, 8), LayerSetting(8, 8, snr_db=10.0, sigma2=0.1)]
    )
    def test_noise_given_exactly_once(self, setting) -> None:
        with pytest.raises(ValueError):
            build_spec([setting], QPSKPrior(), Field.COMPLEX)


class TestSweep:
    def test_bits_target_last_layer(self) -> None:
        s = Sweep("bits", (1, None))
        layers = small_experiment().layers
        assert s.targets(2) == (1,)
        assert s.apply(layers, 1)[1].bits == 1
        assert s.apply(layers, None)[1].bits is None
        assert s.apply(layers, 1)[0] == layers[0]

    def test_snr_targets_all_layers(self) -> None:
        s = Sweep("snr_db", (0.0, 5.0))
        layers = (LayerSetting(8, 8, sigma2=0.1), LayerSetting(8, 8, snr_db=20.0))
        applied = s.apply(layers, 5.0)
        assert [ls.snr_db for ls in applied] == [5.0, 5.0]
        assert applied[0].sigma2 is None

    def test_labels(self) -> None:
        assert Sweep("bits", (3,)).label(3) == "bits3"
        assert Sweep("bits", (None,)).label(None) == "bitsinf"
        assert Sweep("snr_db", (10.0,)).label(10.0) == "snr10"
        assert Sweep("snr_db", (2.5,)).label(2.5) == "snr2.5"

    def test_points(self) -> None:
        config = small_experiment(sweep=Sweep("bits", (1, 6, None)))
        points = config.points()
        assert [label for label, _ in points] == ["bits1", "bits6", "bitsinf"]
        assert all(p.sweep is None for _, p in points)
        assert isinstance(points[2][1].spec.layers[1].channel, AWGN)
        assert small_experiment().points() == [(None, small_experiment())]

    @pytest.mark.parametrize(
        "bad",
        [
            Sweep("delta", (1.0,)),
            Sweep("bits", ()),
            Sweep("bits", (0,)),
            Sweep("bits", (1.5,)),
            Sweep("bits", (1,), layers=(2,)),
            Sweep("snr_db", (None,)),
        ],
    )
    def test_invalid(self, bad) -> None:
        with pytest.raises(ValueError):
            small_experiment(sweep=bad).check()


class TestExperimentConfig:
    @pytest.mark.parametrize(
        "kwargs",
        [{"trials": 0}, {"iters": 0}, {"seed": -1}, {"ser_mapping": "exact"}],
    )
    def test_invalid(self, kwargs) -> None:
        with pytest.raises(ValueError):
            small_experiment(**kwargs).check()

    def test_experiment_defaults(self) -> None:
        config = ExperimentConfig(layers=(LayerSetting(8, 8, snr_db=1.0),))
        assert config.opts.stop_tol == 0
        assert config.opts.z_init == "zero"
        assert isinstance(config.prior, QPSKPrior)


class TestRunExperiment:
    def test_records(self) -> None:
        records = run_experiment(small_experiment())
        assert len(records) == 12
        assert [(r.trial, r.iteration) for r in records[:5]] == [
            (1, 1), (1, 2), (1, 3), (1, 4), (2, 1)
        ]
        assert all(r.nmse >= 0 for r in records)
        assert all(0 <= r.ser <= 1 for r in records)
        assert all(r.wall_time > 0 for r in records)

    def test_deterministic(self) -> None:
        assert run_experiment(small_experiment()) == run_experiment(small_experiment())
        assert run_experiment(small_experiment()) != run_experiment(small_experiment(seed=6))

    def test_se_alignment(self) -> None:
        config = small_experiment()
        se = se_run(config.spec, config.iters, config.quad)
        for r in run_experiment(config):
            assert r.se_mse == se.mse[r.iteration - 1]

    def test_worker_processes_give_same_records(self) -> None:
        config = small_experiment()
        assert run_experiment(config, jobs=2) == run_experiment(config, jobs=1)

    def test_gaussian_prior_has_no_ser(self) -> None:
        config = small_experiment(prior=GaussianPrior(1.0), trials=1)
        assert all(r.ser is None for r in run_experiment(config))

    def test_invalid_model(self) -> None:
        config = ExperimentConfig(
            layers=(LayerSetting(8, 16, snr_db=10.0), LayerSetting(12, 4, snr_db=10.0))
        )
        with pytest.raises(ModelError):
            run_experiment(config)

    def test_divergence(self, mocker) -> None:
        # GIVEN an estimator whose second trial fails
        estimator = harness.run
        calls = []

        def failing(spec, matrices, y, opts):
            estimate, trace = estimator(spec, matrices, y, opts)
            if len(calls) == 1:
                trace.failure = DivergenceError(2, 7, "Z")
            calls.append(opts)
            return estimate, trace

        mocker.patch.object(harness, "run", side_effect=failing)

        # WHEN
        with pytest.raises(ExperimentDiverged) as einfo:
            run_experiment(small_experiment(), jobs=1)

        # THEN
        assert einfo.value.trial == 2
        assert einfo.value.iteration == 5
        assert "layer 2, index 7" in str(einfo.value)
        assert len(einfo.value.records) == 12

    def test_sweep(self) -> None:
        config = small_experiment(trials=1, iters=2, sweep=Sweep("bits", (1, None)))
        results = sweep(config)
        assert list(results) == ["bits1", "bitsinf"]
        assert all(len(r) == 2 for r in results.values())


class TestSummary:
    def test_means_and_gap(self) -> None:
        records = [
            record(1, 1, 0.1, ser=0.2, se_mse=0.1),
            record(2, 1, 0.3, ser=0.4, se_mse=0.1),
            record(1, 2, 0.01, ser=0.0, se_mse=0.01),
            record(2, 2, 0.01, ser=0.1, se_mse=0.01),
        ]
        summary = summarize(records)
        assert summary.iterations == (1, 2)
        assert summary.mean_nmse == pytest.approx((0.2, 0.01))
        assert summary.ser == pytest.approx((0.3, 0.05))
        assert summary.gap_db[0] == pytest.approx(10 * math.log10(2))
        assert summary.gap_db[1] == pytest.approx(0.0)
        assert summary.max_gap_db == pytest.approx(10 * math.log10(2))
        assert summary.final_nmse_db == pytest.approx(-20.0)
        assert summary.se_ser[1] == pytest.approx(ser_from_mse(0.01))

    def test_effective_snr_mapping(self) -> None:
        summary = summarize([record(1, 1, 0.1, ser=0.0, se_mse=0.1)], "effective-snr")
        assert summary.se_ser[0] == pytest.approx(ser_from_mse(0.1, "effective-snr"))

    def test_no_ser(self) -> None:
        summary = summarize([record(1, 1, 0.5), record(1, 2, 0.4)])
        assert summary.ser == (None, None)
        assert summary.se_ser == (None, None)


def test_convergence_iteration() -> None:
    assert convergence_iteration([-1.0, -5.0, -10.0, -10.01, -10.02]) == 4
    assert convergence_iteration([-1.0, -2.0, -3.0]) is None
    assert convergence_iteration([-3.0]) is None
    assert convergence_iteration([-1.0, -1.01, -5.0, -5.0]) == 4


def test_to_db() -> None:
    assert to_db(0.01) == pytest.approx(-20.0)
    assert to_db(0.0) == -math.inf


def test_example3_quantization_gain_by_state_evolution() -> None:
    settings = load_settings(os.path.join(CONFIGS, "example3.json"))
    mses = {}
    for label, point in settings.experiment.points():
        mses[label] = se_run(point.spec, point.iters, point.quad).fixed_point.mse
    bits = ["bits1", "bits2", "bits3", "bits6"]
    for worse, better in zip(bits, bits[1:]):
        assert mses[better] <= mses[worse] + 1e-9
    assert abs(to_db(mses["bits6"]) - to_db(mses["bitsinf"])) < 0.1


@pytest.mark.slow
def test_standard_error_shrinks_with_trials() -> None:
    layers = (LayerSetting(64, 128, snr_db=10.0),)
    errors = []
    for trials in (10, 40, 160):
        config = ExperimentConfig(layers=layers, trials=trials, iters=3, seed=11)
        values = [r.nmse for r in run_experiment(config) if r.iteration == 3]
        errors.append(np.std(values, ddof=1) / math.sqrt(trials))
    assert 1.2 < errors[0] / errors[1] < 3.3
    assert 1.2 < errors[1] / errors[2] < 3.3


# Below this many symbols' worth of expected squared error, the trial mean is
# dominated by a few rare symbol errors and cannot resolve 0.5 dB.
WELL_SAMPLED_ERRORS = 1000.0


def judged_gaps(summary, n: int, trials: int):
    return [
        gap
        for gap, se in zip(summary.gap_db, summary.se_mse)
        if se * n * trials >= WELL_SAMPLED_ERRORS
    ]


def doubling_layers(n_layers: int, snr_db: float = 10.0):
    dims = [256 * 2 ** i for i in range(n_layers + 1)]
    return tuple(
        LayerSetting(n_in, n_out, snr_db=snr_db) for n_in, n_out in zip(dims, dims[1:])
    )


@pytest.mark.slow
@pytest.mark.parametrize("label", ["bits1", "bits2", "bits3", "bits6", "bitsinf"])
def test_example1_agrees_with_state_evolution(label) -> None:
    # GIVEN
    settings = load_settings(os.path.join(CONFIGS, "example1.json"), environ={})
    config = dict(settings.experiment.points())[label]

    # WHEN
    summary = summarize(run_experiment(config, jobs=os.cpu_count() or 1))

    # THEN
    gaps = judged_gaps(summary, config.layers[0].n_in, config.trials)
    assert gaps
    assert max(gaps) <= 0.5
    if label in ("bits1", "bits2", "bits3"):
        assert summary.convergence_iteration is not None
        assert summary.convergence_iteration <= 15


@pytest.mark.slow
@pytest.mark.parametrize("n_layers, trials", [(2, 400), (3, 200), (4, 200)])
def test_multi_layer_reaches_state_evolution_fixed_point(n_layers, trials) -> None:
    # GIVEN default damping, which is 0.8 from three layers on
    config = ExperimentConfig(
        layers=doubling_layers(n_layers), trials=trials, iters=30, seed=21
    )
    assert config.opts.damping is None

    # WHEN
    summary = summarize(run_experiment(config, jobs=min(4, os.cpu_count() or 1)))

    # THEN
    assert summary.convergence_iteration is not None
    assert abs(summary.final_nmse_db - summary.se_mse_db[-1]) <= 0.5


@pytest.mark.slow
@pytest.mark.parametrize("snr_db", [5.0, 10.0, 15.0])
def test_example3_symbol_errors_fall_with_resolution(snr_db) -> None:
    # GIVEN the same instances at every resolution
    settings = load_settings(os.path.join(CONFIGS, "example3.json"), environ={})
    base = settings.experiment
    config = replace(
        base,
        layers=tuple(replace(ls, snr_db=snr_db, sigma2=None) for ls in base.layers),
        trials=40,
    )
    symbols = config.layers[0].n_in * config.trials

    # WHEN
    ser = [
        summarize(run_experiment(point, jobs=os.cpu_count() or 1)).ser[-1]
        for _, point in config.points()
    ]

    # THEN pooled SER does not grow with the bits, up to a few symbols
    for worse, better in zip(ser, ser[1:]):
        assert better <= worse + 5 / symbols


@pytest.mark.slow
def test_example2_scalar_variance_matches_full() -> None:
    settings = load_settings(
        os.path.join(CONFIGS, "example2.json"), environ={}
    )
    config = replace(settings.experiment, trials=5)
    full = summarize(run_experiment(config, jobs=os.cpu_count() or 1))
    scalar_config = replace(config, opts=replace(config.opts, scalar_variance=True))
    scalar = summarize(run_experiment(scalar_config, jobs=os.cpu_count() or 1))
    assert abs(full.final_nmse_db - scalar.final_nmse_db) < 0.2
