"""Shared types of the estimator, its kernels and state evolution"""

from typing import Any
import enum
from abc import abstractmethod
from dataclasses import dataclass

import numpy as np
from typing_extensions import Protocol


class Field(enum.Enum):
    REAL = "real"
    COMPLEX = "complex"

    @property
    def parts(self) -> int:
        """Number of independent real parts of one entry"""
        return 2 if self is Field.COMPLEX else 1


class KernelError(ValueError):
    """Invalid arguments passed to a scalar moment kernel"""


class NonNormalizableDensity(KernelError):
    def __init__(self, mass: float) -> None:
        super().__init__(f"Density is not normalizable (total mass {mass:g})")
        self.mass = mass


@dataclass(frozen=True)
class Moments:
    """Posterior mean and variance, elementwise over arrays

    For the complex field `variance` is the total variance E|x - mean|^2.
    """

    mean: Any
    variance: Any


@dataclass(frozen=True)
class PseudoGaussian:
    """Gaussian summary N(mean, variance) of extrinsic messages on a variable

    Complex pseudo-priors are circularly symmetric, so each real part has
    variance `variance / 2`.
    """

    mean: Any
    variance: Any


class Channel(Protocol):
    """Componentwise random mapping P(x | z) of one layer"""

    sigma2: float

    @abstractmethod
    def apply(
        self, z: np.ndarray, field: Field, rng: np.random.Generator
    ) -> np.ndarray:
        """Draw the layer output for the pre-channel signal `z`"""

    @abstractmethod
    def transform(self, u: np.ndarray, field: Field) -> np.ndarray:
        """Deterministic part of the mapping, applied to the noisy signal `u`"""


class Prior(Protocol):
    """Separable distribution of the signal entries"""

    @property
    @abstractmethod
    def mean(self) -> float:
        """Mean of one entry"""

    @property
    @abstractmethod
    def variance(self) -> float:
        """Second moment of one entry (entries are zero mean)"""

    @abstractmethod
    def sample(self, n: int, field: Field, rng: np.random.Generator) -> np.ndarray:
        """Draw `n` i.i.d. entries"""
