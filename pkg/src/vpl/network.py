"""Forward compositions of encoder -> fusion -> bottleneck -> classifier."""
from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np

from . import bottleneck as vib
from .autodiff import Graph, Tensor
from .model import classify, encode_image, encode_question, fuse


class TrainForward(NamedTuple):
    m: Tensor
    mu: Tensor
    sigma: Tensor
    z: Tensor
    eps: np.ndarray
    proba: Tensor


def bind(graph: Graph, params: dict, trainable=True) -> dict:
    """Register every parameter array as a named leaf of ``graph``."""
    return {k: graph.leaf(v, name=k, requires_grad=trainable) for k, v in params.items()}


def represent(P: dict, X: Tensor, tokens) -> Tensor:
    V = encode_image(X, P)
    q = encode_question(tokens, P)
    return fuse(V, q, P)


def forward_train(P: dict, X: Tensor, tokens, rng: Optional[np.random.Generator] = None,
                  eps=None) -> TrainForward:
    m = represent(P, X, tokens)
    mu, sigma = vib.encode_latent(m, P)
    lat = vib.sample_z(mu, sigma, rng=rng, eps=eps)
    return TrainForward(m, mu, sigma, lat.z, lat.eps, classify(lat.z, P))


def forward_infer(P: dict, X: Tensor, tokens):
    """Mean-only path; returns ``(mu, proba)`` and never samples."""
    mu = vib.inference_repr(represent(P, X, tokens), P)
    return mu, classify(mu, P)


def predict_proba(params: dict, X: np.ndarray, tokens, batch_size: int = 1024):
    """Inference probabilities and mean embeddings as plain arrays."""
    mus, probs = [], []
    for s in range(0, len(X), batch_size):
        g = Graph()
        P = bind(g, params, trainable=False)
        mu, p = forward_infer(P, g.const(X[s:s + batch_size]), tokens[s:s + batch_size])
        mus.append(mu.value)
        probs.append(p.value)
    return np.concatenate(mus), np.concatenate(probs)
