"""Information bottleneck: diagonal Gaussian encoder, reparameterized sampling, KL to N(0, I)."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, ShapeError, Tensor

SIGMA_FLOOR = 1e-6

_sample_calls = 0


def sample_count() -> int:
    """Number of times :func:`sample_z` has run in this process (instrumentation)."""
    return _sample_calls


class LatentGaussian(NamedTuple):
    mu: Tensor
    sigma: Tensor
    z: Tensor
    eps: np.ndarray


def encode_latent(m: Tensor, P: dict):
    """``mu = m W_mu + b_mu``, ``sigma = softplus(m W_sigma + b_sigma) + 1e-6``."""
    if m.shape[-1] != P["mu_W"].shape[0]:
        raise ShapeError(f"bottleneck expects dim {P['mu_W'].shape[0]}, got {m.shape[-1]}")
    mu = m @ P["mu_W"] + P["mu_b"]
    sigma = ad.softplus(m @ P["sigma_W"] + P["sigma_b"]) + SIGMA_FLOOR
    return mu, sigma


def sample_z(mu: Tensor, sigma: Tensor, rng: np.random.Generator = None, eps=None) -> LatentGaussian:
    """``z = mu + eps * sigma`` with ``eps ~ N(0, I)`` drawn from ``rng`` unless given."""
    global _sample_calls
    _sample_calls += 1
    if np.any(sigma.value <= 0):
        raise ContractError("sigma must be strictly positive")
    if eps is None:
        if rng is None:
            raise ContractError("sample_z needs a generator or a frozen eps")
        eps = rng.standard_normal(mu.shape)
    eps = np.asarray(eps, dtype=np.float64)
    return LatentGaussian(mu, sigma, mu + sigma * eps, eps)


def kl_loss(mu: Tensor, sigma: Tensor) -> Tensor:
    """Batch mean of ``KL(N(mu, diag sigma^2) || N(0, I))`` in closed form."""
    if np.any(sigma.value <= 0):
        raise ContractError("sigma must be strictly positive")
    B = mu.shape[0] if mu.ndim > 1 else 1
    per = mu * mu + sigma * sigma - 1.0 - ad.scale(ad.log(sigma, eps=0.0), 2.0)
    return ad.scale(ad.sum(per), 0.5 / B)


def inference_repr(m: Tensor, P: dict) -> Tensor:
    """Deterministic representation used at test time: the mean only."""
    if m.shape[-1] != P["mu_W"].shape[0]:
        raise ShapeError(f"bottleneck expects dim {P['mu_W'].shape[0]}, got {m.shape[-1]}")
    return m @ P["mu_W"] + P["mu_b"]
