"""Declarative multi-layer model, instance sampling and validation"""

from typing import List, Sequence, Tuple, Union
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from mlgamp.api import Channel, Field, KernelError, Prior

Seed = Union[int, Sequence[int]]


class ModelError(Exception):
    def __init__(self, errors: List[str]) -> None:
        super().__init__("Invalid model: " + "; ".join(errors))
        self.errors = errors


def gaussian_noise(
    shape: Tuple[int, ...], variance: float, field: Field, rng: np.random.Generator
) -> np.ndarray:
    if field is Field.COMPLEX:
        std = math.sqrt(variance / 2)
        return std * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return math.sqrt(variance) * rng.standard_normal(shape)


@dataclass(frozen=True)
class AWGN:
    sigma2: float

    def transform(self, u: np.ndarray, field: Field) -> np.ndarray:
        return u

    def apply(
        self, z: np.ndarray, field: Field, rng: np.random.Generator
    ) -> np.ndarray:
        if self.sigma2 == 0:
            return z.copy()
        return z + gaussian_noise(z.shape, self.sigma2, field, rng)


@dataclass(frozen=True)
class QuantizedAWGN:
    """AWGN followed by a uniform mid-rise quantizer with 2^bits levels

    Complex signals are quantized per real and imaginary part.
    """

    sigma2: float
    bits: int
    delta: float

    @property
    def n_levels(self) -> int:
        return 2 ** self.bits

    @property
    def levels(self) -> np.ndarray:
        half = self.n_levels // 2
        b = np.arange(-half + 1, half + 1)
        return (b - 0.5) * self.delta

    @property
    def top(self) -> float:
        return (self.n_levels // 2 - 0.5) * self.delta

    def quantize(self, u: np.ndarray) -> np.ndarray:
        q = (np.ceil(np.asarray(u) / self.delta) - 0.5) * self.delta
        return np.clip(q, -self.top, self.top)

    def transform(self, u: np.ndarray, field: Field) -> np.ndarray:
        if field is Field.COMPLEX:
            return self.quantize(u.real) + 1j * self.quantize(u.imag)
        return self.quantize(u)

    def apply(
        self, z: np.ndarray, field: Field, rng: np.random.Generator
    ) -> np.ndarray:
        u = z if self.sigma2 == 0 else z + gaussian_noise(z.shape, self.sigma2, field, rng)
        return self.transform(u, field)

    def interval(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return the quantization cell (lo, up] of each real output symbol

        The lowest cell is open towards -inf and the highest towards +inf.
        """
        y = np.asarray(y, dtype=float)
        pos = y / self.delta + 0.5
        idx = np.rint(pos)
        half = self.n_levels // 2
        off_grid = (np.abs(pos - idx) > 1e-9) | (idx < -half + 1) | (idx > half)
        if np.any(off_grid):
            bad = np.asarray(y)[off_grid].ravel()[0]
            raise KernelError(f"Symbol {bad!r} is not in the quantizer codebook")
        lo = np.where(idx == -half + 1, -np.inf, (idx - 1) * self.delta)
        up = np.where(idx == half, np.inf, idx * self.delta)
        return lo, up

    def cells(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Codebook levels with their cell bounds"""
        lv = self.levels
        lo, up = self.interval(lv)
        return lv, lo, up


@dataclass(frozen=True)
class QPSKPrior:
    @property
    def mean(self) -> float:
        return 0.0

    @property
    def variance(self) -> float:
        return 1.0

    def sample(self, n: int, field: Field, rng: np.random.Generator) -> np.ndarray:
        re = 2 * rng.integers(0, 2, size=n) - 1
        if field is Field.COMPLEX:
            im = 2 * rng.integers(0, 2, size=n) - 1
            return (re + 1j * im) / math.sqrt(2)
        return re.astype(float)

    def constellation(self, field: Field) -> np.ndarray:
        if field is Field.COMPLEX:
            return np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / math.sqrt(2)
        return np.array([1.0, -1.0])


@dataclass(frozen=True)
class GaussianPrior:
    sigma2_x: float = 1.0

    @property
    def mean(self) -> float:
        return 0.0

    @property
    def variance(self) -> float:
        return self.sigma2_x

    def sample(self, n: int, field: Field, rng: np.random.Generator) -> np.ndarray:
        return gaussian_noise((n,), self.sigma2_x, field, rng)


@dataclass(frozen=True)
class LayerSpec:
    n_in: int
    n_out: int
    channel: Channel

    @property
    def alpha(self) -> Fraction:
        return Fraction(self.n_out, self.n_in)


@dataclass(frozen=True)
class ModelSpec:
    layers: Tuple[LayerSpec, ...]
    prior: Prior
    field: Field = Field.COMPLEX

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def dims(self) -> List[int]:
        """N_1, ..., N_{L+1}"""
        return [self.layers[0].n_in] + [ly.n_out for ly in self.layers]


def _freeze(arrays: Sequence[np.ndarray]) -> Tuple[np.ndarray, ...]:
    for a in arrays:
        a.setflags(write=False)
    return tuple(arrays)


@dataclass(frozen=True)
class Instance:
    """One realization of the layer chain

    `xs` holds x^(1) .. x^(L+1) and `zs` holds z^(1) .. z^(L), so that
    `zs[l] == matrices[l] @ xs[l]` and `xs[-1]` is the observation.
    """

    matrices: Tuple[np.ndarray, ...]
    xs: Tuple[np.ndarray, ...]
    zs: Tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "matrices", _freeze(self.matrices))
        object.__setattr__(self, "xs", _freeze(self.xs))
        object.__setattr__(self, "zs", _freeze(self.zs))

    @property
    def x0(self) -> np.ndarray:
        return self.xs[0]

    @property
    def y(self) -> np.ndarray:
        return self.xs[-1]


def _channel_errors(name: str, ch: Channel) -> List[str]:
    errors = []
    if not isinstance(ch, (AWGN, QuantizedAWGN)):
        return [f"{name}: unsupported channel {ch!r}"]
    if not ch.sigma2 >= 0:
        errors.append(f"{name}: noise variance must be ≥ 0")
    if isinstance(ch, QuantizedAWGN):
        if not isinstance(ch.bits, int) or ch.bits < 1:
            errors.append(f"{name}: bits must be ≥ 1")
        if not ch.delta > 0:
            errors.append(f"{name}: quantization step must be > 0")
    return errors


def validate(spec: ModelSpec) -> List[str]:
    """Return all violated model invariants, an empty list means ok"""
    errors: List[str] = []
    if not spec.layers:
        errors.append("model needs at least one layer")
    for i, layer in enumerate(spec.layers):
        if layer.n_in < 1 or layer.n_out < 1:
            errors.append(f"layers[{i}]: dimensions must be ≥ 1")
        if i > 0 and spec.layers[i - 1].n_out != layer.n_in:
            errors.append(
                f"layers[{i}]: dimension chain broken "
                f"({spec.layers[i - 1].n_out} outputs feed {layer.n_in} inputs)"
            )
        errors.extend(_channel_errors(f"layers[{i}].channel", layer.channel))
    if isinstance(spec.prior, GaussianPrior):
        if not spec.prior.sigma2_x > 0:
            errors.append("prior: variance must be > 0")
    elif not isinstance(spec.prior, QPSKPrior):
        errors.append(f"prior: unsupported prior {spec.prior!r}")
    return errors


def mixing_matrix(
    n_out: int, n_in: int, field: Field, rng: np.random.Generator
) -> np.ndarray:
    """I.i.d. zero-mean Gaussian entries with total variance 1/n_out"""
    if field is Field.COMPLEX:
        std = math.sqrt(0.5 / n_out)
        return std * (
            rng.standard_normal((n_out, n_in)) + 1j * rng.standard_normal((n_out, n_in))
        )
    return rng.standard_normal((n_out, n_in)) / math.sqrt(n_out)


def sample_instance(spec: ModelSpec, seed: Seed) -> Instance:
    errors = validate(spec)
    if errors:
        raise ModelError(errors)

    rng = np.random.default_rng(seed)
    x = spec.prior.sample(spec.layers[0].n_in, spec.field, rng)
    matrices, xs, zs = [], [x], []
    for layer in spec.layers:
        h = mixing_matrix(layer.n_out, layer.n_in, spec.field, rng)
        z = h @ x
        x = layer.channel.apply(z, spec.field, rng)
        matrices.append(h)
        zs.append(z)
        xs.append(x)
    return Instance(matrices=tuple(matrices), xs=tuple(xs), zs=tuple(zs))


def snr_to_sigma2(snr_db: float, t_z: float) -> float:
    if not t_z > 0:
        raise ValueError(f"Signal power must be positive, got {t_z}")
    return t_z * 10 ** (-snr_db / 10)


def default_delta(t_z: float, sigma2: float, bits: int, field: Field) -> float:
    """Quantization step spanning ±3 standard deviations of one real part"""
    std = math.sqrt((t_z + sigma2) / field.parts)
    return 6 * std / 2 ** bits

