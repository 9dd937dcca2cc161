"""Exact posterior mean by enumeration, for tiny QPSK problems"""

from typing import List, Sequence
import itertools
import logging

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from mlgamp.api import Field
from mlgamp.denoisers import log_interval_prob
from mlgamp.model import AWGN, Instance, ModelSpec, QPSKPrior, QuantizedAWGN

log = logging.getLogger(__name__)

MAX_SIGNAL_SIZE = 8
JITTER = 1e-12


class UnsupportedModel(ValueError):
    pass


def _candidates(prior: QPSKPrior, field: Field, n: int) -> np.ndarray:
    points = prior.constellation(field)
    return np.array(list(itertools.product(points, repeat=n)))


def _gaussian_tail_loglik(
    z: np.ndarray,
    sigma2: Sequence[float],
    matrices: Sequence[np.ndarray],
    y: np.ndarray,
    field: Field,
) -> np.ndarray:
    """Log-likelihood of y for each row of z through a chain of AWGN layers

    `sigma2[0]` is the noise added to z, `matrices` are the layers after it.
    """
    n_y = y.shape[0]
    P = np.eye(n_y)
    C = np.zeros((n_y, n_y), dtype=complex if field is Field.COMPLEX else float)
    for j in range(len(sigma2) - 1, -1, -1):
        C = C + sigma2[j] * (P @ P.conj().T)
        if j > 0:
            P = P @ matrices[j - 1]
    C = C + JITTER * max(1.0, float(np.real(np.trace(C))) / n_y) * np.eye(n_y)

    residual = y[None, :] - z @ P.T
    factor = cho_factor(C)
    solved = cho_solve(factor, residual.T).T
    quad = np.real(np.sum(residual.conj() * solved, axis=1))
    if field is Field.COMPLEX:
        return -quad
    return -0.5 * quad


def _quantized_loglik(
    z: np.ndarray, ch: QuantizedAWGN, y: np.ndarray, field: Field
) -> np.ndarray:
    p = field.parts
    std = np.sqrt(ch.sigma2 / p)
    parts = [(y.real, z.real), (y.imag, z.imag)] if p == 2 else [(y.real, z.real)]
    total = np.zeros(z.shape[0])
    for yp, zp in parts:
        lo, up = ch.interval(yp)
        total += np.sum(log_interval_prob((lo - zp) / std, (up - zp) / std), axis=1)
    return total


def brute_force_posterior(spec: ModelSpec, instance: Instance) -> np.ndarray:
    """E[x^(1) | y] over all QPSK candidates

    Leading noiseless layers are propagated per candidate. What remains must
    be a chain of AWGN layers or a single noisy quantized last layer.
    """
    if not isinstance(spec.prior, QPSKPrior):
        raise UnsupportedModel("Exact posterior needs a QPSK prior")
    n1 = spec.layers[0].n_in
    if n1 > MAX_SIGNAL_SIZE:
        raise UnsupportedModel(
            f"Signal of size {n1} is too large to enumerate (max {MAX_SIGNAL_SIZE})"
        )
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer.channel, (AWGN, QuantizedAWGN)):
            raise UnsupportedModel(f"layers[{i}]: unsupported channel {layer.channel!r}")

    field = spec.field
    y = instance.y
    cand = _candidates(spec.prior, field, n1)
    log.debug("Enumerating %d candidates", cand.shape[0])

    signal = cand
    k = 0
    L = spec.n_layers
    while k < L and spec.layers[k].channel.sigma2 == 0:
        signal = spec.layers[k].channel.transform(signal @ instance.matrices[k].T, field)
        k += 1

    if k == L:
        match = np.all(np.isclose(signal, y[None, :], rtol=1e-9, atol=1e-12), axis=1)
        loglik = np.where(match, 0.0, -np.inf)
    else:
        z = signal @ instance.matrices[k].T
        tail = [layer.channel for layer in spec.layers[k:]]
        if all(isinstance(ch, AWGN) for ch in tail):
            sigma2: List[float] = [ch.sigma2 for ch in tail]
            loglik = _gaussian_tail_loglik(z, sigma2, instance.matrices[k + 1 :], y, field)
        elif k == L - 1:
            ch = tail[0]
            assert isinstance(ch, QuantizedAWGN)
            loglik = _quantized_loglik(z, ch, y, field)
        else:
            raise UnsupportedModel("A quantized layer follows a noisy layer")

    if not np.any(np.isfinite(loglik)):
        raise UnsupportedModel("No candidate is consistent with the observation")
    weights = np.exp(loglik - logsumexp(loglik))
    return weights @ cand
