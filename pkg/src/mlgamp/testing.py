"""Reference recursions and model builders for tests and experiments"""

from typing import Dict, List, Optional, Sequence
import math

import numpy as np

from mlgamp.api import Field, Prior
from mlgamp.model import AWGN, GaussianPrior, LayerSpec, ModelSpec, QPSKPrior, snr_to_sigma2


def awgn_spec(
    dims: Sequence[int],
    snr_db: Sequence[float],
    prior: Optional[Prior] = None,
    field: Field = Field.COMPLEX,
) -> ModelSpec:
    """Chain of AWGN layers N_1 -> N_2 -> ... with per-layer SNR in dB"""
    prior = prior or QPSKPrior()
    layers = []
    t_x = prior.variance
    for n_in, n_out, snr in zip(dims[:-1], dims[1:], snr_db):
        t_z = t_x * n_in / n_out
        sigma2 = snr_to_sigma2(snr, t_z)
        layers.append(LayerSpec(n_in, n_out, AWGN(sigma2)))
        t_x = t_z + sigma2
    return ModelSpec(tuple(layers), prior, field)


def _prior_denoiser(r: np.ndarray, sigma: np.ndarray, prior: Prior, field: Field):
    if isinstance(prior, GaussianPrior):
        shrink = prior.sigma2_x / (prior.sigma2_x + sigma)
        return shrink * r, shrink * sigma
    assert isinstance(prior, QPSKPrior)
    if field is Field.COMPLEX:
        m = (
            np.tanh(math.sqrt(2) * r.real / sigma)
            + 1j * np.tanh(math.sqrt(2) * r.imag / sigma)
        ) / math.sqrt(2)
    else:
        m = np.tanh(r / sigma)
    return m, 1.0 - np.abs(m) ** 2


def amp_reference(
    h: np.ndarray,
    y: np.ndarray,
    sigma2: float,
    prior: Prior,
    field: Field,
    iters: int,
    z0: np.ndarray,
    v0: np.ndarray,
) -> List[Dict[str, np.ndarray]]:
    """Single-layer GAMP over an AWGN output, with the output step in closed form

    The output-side moments are substituted analytically: s = (y - Z)/(V + sigma2)
    and tau = 1/(V + sigma2).
    """
    h2 = np.abs(h) ** 2
    dtype = complex if field is Field.COMPLEX else float
    m = np.full(h.shape[1], prior.mean, dtype=dtype)
    Z = np.asarray(z0, dtype=dtype)
    V = np.asarray(v0, dtype=float)
    out = []
    for _ in range(iters):
        s = (y - Z) / (V + sigma2)
        Sigma = 1.0 / (h2.T @ (1.0 / (V + sigma2)))
        R = m + Sigma * (h.conj().T @ s)
        m, v = _prior_denoiser(R, Sigma, prior, field)
        V = h2 @ v
        Z = h @ m - V * s
        out.append(dict(m_hat=m, v_hat=v, Z=Z, V=V, R=R, Sigma=Sigma))
    return out
