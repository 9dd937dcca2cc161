"""JSON run configuration: strict parsing, overrides and the resolved echo"""

from typing import Any, Dict, Iterable, List, Optional, Tuple, Type, TypeVar, Union
import json
import logging
import os
from dataclasses import dataclass, replace

from mlgamp.api import Field, Prior
from mlgamp.gamp import GampOptions
from mlgamp.model import GaussianPrior, ModelSpec, QPSKPrior, QuantizedAWGN, validate
from mlgamp.stateevo import QuadratureSpec
from mlgamp_harness.harness import ExperimentConfig, LayerSetting, Sweep

log = logging.getLogger(__name__)

SEED_ENV = "MLGAMP_SEED"

T = TypeVar("T")
JsonType = Union[None, bool, int, float, str, List[Any], Dict[str, Any]]


class ConfigError(Exception):
    def __init__(self, key: str, message: str) -> None:
        super().__init__(f"{key}: {message}")
        self.key = key
        self.message = message


class ConfigSection:
    """One JSON object of the configuration, addressed by its dotted path"""

    def __init__(self, data: Any, path: str, allowed: Iterable[str]) -> None:
        if not isinstance(data, dict):
            raise ConfigError(path or "<root>", "expected an object")
        self._data = data
        self.path = path
        unknown = sorted(set(data) - set(allowed))
        if unknown:
            raise ConfigError(self.key(unknown[0]), "unknown key")

    def key(self, name: str) -> str:
        return f"{self.path}.{name}" if self.path else name

    def has(self, name: str) -> bool:
        return self._data.get(name) is not None

    def raw(self, name: str) -> Any:
        return self._data.get(name)

    def get(self, name: str, type: Type[T], default: Optional[T] = None) -> Optional[T]:
        v = self._data.get(name)
        if v is None:
            return default
        if type is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, type) or (isinstance(v, bool) and type is not bool):
            raise ConfigError(self.key(name), f"expected {type.__name__}")
        return v

    def getstrict(self, name: str, type: Type[T]) -> T:
        v = self.get(name, type)
        if v is None:
            raise ConfigError(self.key(name), "missing required key")
        return v

    def section(self, name: str, allowed: Iterable[str]) -> Optional["ConfigSection"]:
        if not self.has(name):
            return None
        return ConfigSection(self._data[name], self.key(name), allowed)

    def sections(self, name: str, allowed: Iterable[str]) -> List["ConfigSection"]:
        items = self._data.get(name)
        if not isinstance(items, list):
            raise ConfigError(self.key(name), "expected a list")
        return [
            ConfigSection(item, f"{self.key(name)}[{i}]", allowed)
            for i, item in enumerate(items)
        ]


@dataclass(frozen=True)
class Overrides:
    """Command-line values, which win over the file"""

    seed: Optional[int] = None
    trials: Optional[int] = None
    iters: Optional[int] = None
    damping: Optional[float] = None
    jobs: Optional[int] = None
    out: Optional[str] = None


@dataclass(frozen=True)
class RunSettings:
    experiment: ExperimentConfig
    output: Optional[str]
    source: str


# "status" is written into the echo of a finished run and ignored on reload
ROOT_KEYS = ("model", "run", "se", "sweep", "output", "status")
MODEL_KEYS = ("field", "prior", "layers")
PRIOR_KEYS = ("type", "variance")
LAYER_KEYS = ("rows", "cols", "channel")
CHANNEL_KEYS = ("type", "snr_db", "sigma2", "bits", "delta")
RUN_KEYS = (
    "trials",
    "iters",
    "seed",
    "damping",
    "scalar_variance",
    "stop_tol",
    "variance_floor",
    "z_init",
    "damp_estimates",
    "jobs",
    "ser_mapping",
)
SE_KEYS = ("hermite_nodes", "inner_nodes")
SWEEP_KEYS = ("parameter", "values", "layers")
OUTPUT_KEYS = ("path", "format")


def _choice(section: ConfigSection, name: str, choices: Tuple[str, ...], default: str) -> str:
    v = section.get(name, str, default)
    assert v is not None
    if v not in choices:
        raise ConfigError(section.key(name), f"expected one of {', '.join(choices)}")
    return v


def _parse_prior(model: ConfigSection) -> Prior:
    section = model.section("prior", PRIOR_KEYS)
    if section is None:
        return QPSKPrior()
    kind = _choice(section, "type", ("qpsk", "gaussian"), "qpsk")
    if kind == "qpsk":
        if section.has("variance"):
            raise ConfigError(section.key("variance"), "QPSK symbols have unit energy")
        return QPSKPrior()
    variance = section.get("variance", float, 1.0)
    assert variance is not None
    if not variance > 0:
        raise ConfigError(section.key("variance"), "must be > 0")
    return GaussianPrior(variance)


def _parse_layer(section: ConfigSection) -> LayerSetting:
    rows = section.getstrict("rows", int)
    cols = section.getstrict("cols", int)
    if rows < 1:
        raise ConfigError(section.key("rows"), "must be ≥ 1")
    if cols < 1:
        raise ConfigError(section.key("cols"), "must be ≥ 1")

    ch = section.section("channel", CHANNEL_KEYS)
    if ch is None:
        raise ConfigError(section.key("channel"), "missing required key")
    if ch.has("snr_db") == ch.has("sigma2"):
        raise ConfigError(ch.path, "exactly one of snr_db or sigma2 is required")
    sigma2 = ch.get("sigma2", float)
    if sigma2 is not None and sigma2 < 0:
        raise ConfigError(ch.key("sigma2"), "must be ≥ 0")

    bits = ch.get("bits", int)
    kind = _choice(ch, "type", ("awgn", "adc"), "awgn" if bits is None else "adc")
    if kind == "awgn" and bits is not None:
        raise ConfigError(ch.key("bits"), "an awgn channel takes no bits")
    if bits is not None and bits < 1:
        raise ConfigError(ch.key("bits"), "must be ≥ 1")
    delta = ch.get("delta", float)
    if delta is not None and not delta > 0:
        raise ConfigError(ch.key("delta"), "must be > 0")

    return LayerSetting(
        n_in=cols,
        n_out=rows,
        snr_db=ch.get("snr_db", float),
        sigma2=sigma2,
        bits=bits,
        delta=delta,
    )


def _parse_damping(section: ConfigSection) -> Optional[Union[float, Tuple[float, ...]]]:
    raw = section.raw("damping")
    if raw is None:
        return None
    if isinstance(raw, list):
        if not all(isinstance(r, (int, float)) and not isinstance(r, bool) for r in raw):
            raise ConfigError(section.key("damping"), "expected a list of numbers")
        return tuple(float(r) for r in raw)
    return section.get("damping", float)


def _parse_sweep(section: Optional[ConfigSection]) -> Optional[Sweep]:
    if section is None:
        return None
    parameter = _choice(section, "parameter", ("bits", "snr_db"), "bits")
    values = section.raw("values")
    if not isinstance(values, list) or not values:
        raise ConfigError(section.key("values"), "expected a non-empty list")
    for v in values:
        if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
            raise ConfigError(section.key("values"), f"invalid sweep value {v!r}")
    layers = section.raw("layers")
    if layers is not None:
        if not isinstance(layers, list) or not all(
            isinstance(i, int) and not isinstance(i, bool) for i in layers
        ):
            raise ConfigError(section.key("layers"), "expected a list of layer numbers")
        layers = tuple(i - 1 for i in layers)
    return Sweep(parameter, tuple(values), layers)


def _resolve_seed(section: Optional[ConfigSection], overrides: Overrides, environ) -> int:
    if overrides.seed is not None:
        return overrides.seed
    if section is not None and section.has("seed"):
        seed = section.get("seed", int)
        assert seed is not None
        return seed
    env = environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(SEED_ENV, "expected an integer")
    return 0


def parse_settings(
    document: Any, source: str, overrides: Overrides = None, environ=None
) -> RunSettings:
    overrides = overrides or Overrides()
    environ = os.environ if environ is None else environ
    root = ConfigSection(document, "", ROOT_KEYS)

    model = root.section("model", MODEL_KEYS)
    if model is None:
        raise ConfigError("model", "missing required key")
    field = Field(_choice(model, "field", ("real", "complex"), "complex"))
    prior = _parse_prior(model)
    layers = tuple(_parse_layer(s) for s in model.sections("layers", LAYER_KEYS))
    if not layers:
        raise ConfigError("model.layers", "needs at least one layer")

    run = root.section("run", RUN_KEYS)
    defaults = ExperimentConfig(layers=layers)
    opts = defaults.opts
    trials, iters = defaults.trials, defaults.iters
    jobs: Optional[int] = None
    ser_mapping = defaults.ser_mapping
    if run is not None:
        trials = run.get("trials", int, trials)
        iters = run.get("iters", int, iters)
        jobs = run.get("jobs", int)
        ser_mapping = run.get("ser_mapping", str, ser_mapping)
        opts = replace(
            opts,
            damping=_parse_damping(run),
            scalar_variance=run.get("scalar_variance", bool, opts.scalar_variance),
            stop_tol=run.get("stop_tol", float, opts.stop_tol),
            variance_floor=run.get("variance_floor", float, opts.variance_floor),
            z_init=run.get("z_init", str, opts.z_init),
            damp_estimates=run.get("damp_estimates", bool, opts.damp_estimates),
        )
    if overrides.trials is not None:
        trials = overrides.trials
    if overrides.iters is not None:
        iters = overrides.iters
    if overrides.jobs is not None:
        jobs = overrides.jobs
    if overrides.damping is not None:
        opts = replace(opts, damping=overrides.damping)
    if jobs is None:
        jobs = os.cpu_count() or 1
    elif jobs < 1:
        raise ConfigError("run.jobs", "must be ≥ 1")

    se = root.section("se", SE_KEYS)
    try:
        quad = QuadratureSpec(
            hermite_nodes=se.get("hermite_nodes", int, 40) if se else 40,
            inner_nodes=se.get("inner_nodes", int, 40) if se else 40,
        )
    except ValueError as e:
        raise ConfigError("se", str(e))

    output = root.section("output", OUTPUT_KEYS)
    path = overrides.out
    if output is not None:
        _choice(output, "format", ("csv",), "csv")
        path = path or output.get("path", str)

    config = ExperimentConfig(
        layers=layers,
        prior=prior,
        field=field,
        trials=trials,
        iters=iters,
        seed=_resolve_seed(run, overrides, environ),
        opts=opts,
        quad=quad,
        sweep=_parse_sweep(root.section("sweep", SWEEP_KEYS)),
        ser_mapping=ser_mapping,
        jobs=jobs,
    )
    try:
        replace(config, sweep=None).check()
    except ValueError as e:
        raise ConfigError("run", str(e))
    try:
        config.check()
    except ValueError as e:
        raise ConfigError("sweep", str(e))
    for _, point in config.points():
        try:
            errors = validate(point.spec)
        except ValueError as e:
            raise ConfigError("model.layers", str(e))
        if errors:
            raise ConfigError("model", "; ".join(errors))
    return RunSettings(experiment=config, output=path, source=source)


def load_settings(
    filename: str, overrides: Overrides = None, environ=None
) -> RunSettings:
    try:
        with open(filename, "r") as f:
            document = json.load(f)
    except OSError as e:
        raise ConfigError(filename, f"cannot read configuration ({e.strerror})")
    except json.JSONDecodeError as e:
        raise ConfigError(filename, f"malformed JSON at line {e.lineno}: {e.msg}")
    log.debug("Loaded configuration from %s", filename)
    return parse_settings(document, filename, overrides, environ)


def _channel_document(ch) -> Dict[str, JsonType]:
    if isinstance(ch, QuantizedAWGN):
        return {"type": "adc", "sigma2": ch.sigma2, "bits": ch.bits, "delta": ch.delta}
    return {"type": "awgn", "sigma2": ch.sigma2}


def _prior_document(prior: Prior) -> Dict[str, JsonType]:
    if isinstance(prior, GaussianPrior):
        return {"type": "gaussian", "variance": prior.sigma2_x}
    return {"type": "qpsk"}


def resolved_document(
    config: ExperimentConfig, output: Optional[str], status: str
) -> Dict[str, JsonType]:
    """Configuration with every default applied and noise levels resolved

    Channels carry the resolved `sigma2` only, so the document loads back
    with `load_settings` and reproduces the same model.
    """
    spec: ModelSpec = config.spec
    opts: GampOptions = config.opts
    damping: JsonType = list(opts.damping_factors(spec.n_layers))
    return {
        "model": {
            "field": config.field.value,
            "prior": _prior_document(config.prior),
            "layers": [
                {
                    "rows": layer.n_out,
                    "cols": layer.n_in,
                    "channel": _channel_document(layer.channel),
                }
                for layer in spec.layers
            ],
        },
        "run": {
            "trials": config.trials,
            "iters": config.iters,
            "seed": config.seed,
            "damping": damping,
            "scalar_variance": opts.scalar_variance,
            "stop_tol": opts.stop_tol,
            "variance_floor": opts.variance_floor,
            "z_init": opts.z_init,
            "damp_estimates": opts.damp_estimates,
            "jobs": config.jobs,
            "ser_mapping": config.ser_mapping,
        },
        "se": {
            "hermite_nodes": config.quad.hermite_nodes,
            "inner_nodes": config.quad.inner_nodes,
        },
        "output": {"path": output, "format": "csv"},
        "status": status,
    }


def write_echo(filename: str, document: Dict[str, JsonType]) -> None:
    with open(filename, "w") as f:
        json.dump(document, f, indent=4, sort_keys=True)
