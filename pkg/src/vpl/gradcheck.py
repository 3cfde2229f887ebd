"""Finite-difference gradient suite on small seeded two-instance batches.

Everything stochastic is frozen up front: the reparameterization noise for
each branch, the perturbed copies, the sampled negative answer and the
detached original-branch prediction used by the class loss, so each loss is a
deterministic function of the parameters.
"""
from __future__ import annotations

from typing import Dict

import numpy as np

from . import autodiff as ad
from . import bottleneck as vib
from .discriminators import build_triplet, class_loss, relation_loss
from .model import ModelDims, init_params, vqa_loss
from .network import forward_train
from .training import total_loss

MODULES = ("all", "tensor", "vib", "losses")
TOLERANCE = 1e-4
DEFAULT_EPS = 1e-5

_DIMS = ModelDims(feature_dim=4, question_dim=4, hidden_dim=5, attention_dim=5, fused_dim=5, latent_dim=3,
                  vocab_size=10, num_answers=6, answer_token_offset=4)
_LAMBDAS = {"vib": 1e-3, "b": 2.0, "c": 4.0}


class Fixture:
    """A frozen two-instance batch with its perturbed copies and noise."""

    def __init__(self, seed: int = 0, dims: ModelDims = _DIMS):
        rng = np.random.default_rng(seed)
        self.dims = dims
        B, N = 2, 3
        self.params = init_params(dims, rng)
        # moderate biases keep relu inputs away from zero
        for k in ("img_b", "fuse_b1", "fuse_b2"):
            self.params[k] = rng.uniform(0.1, 0.3, self.params[k].shape)
        self.X = rng.standard_normal((B, N, dims.feature_dim))
        self.hard = self.X.copy()
        self.hard[:, 0] = self.X[::-1, 1]
        self.soft = self.X.copy()
        self.soft[:, 2] = 0.0
        self.tokens = np.array([[0, 1], [2, 3]])
        y = np.zeros((B, dims.num_answers))
        y[0, 1], y[0, 2], y[1, 4] = 0.7, 0.3, 1.0
        self.y = y
        self.gt_mask = np.zeros((B, dims.num_answers), dtype=bool)
        self.gt_mask[0, 1] = self.gt_mask[1, 4] = True
        self.negative = np.array([3, 0])
        self.eps = rng.standard_normal((3, B, dims.latent_dim))
        # the class loss treats the original prediction as a constant target, so
        # the numeric side must see it fixed at the base parameters as well
        g = ad.Graph()
        P = {k: g.leaf(v, name=k, requires_grad=False) for k, v in self.params.items()}
        self.p_orig = forward_train(P, g.const(self.X), self.tokens, eps=self.eps[0]).proba.value

    def components(self, g: ad.Graph, P: dict) -> Dict[str, ad.Tensor]:
        o, h, s = (forward_train(P, g.const(X), self.tokens, eps=self.eps[i])
                   for i, X in enumerate((self.X, self.hard, self.soft)))
        trip = build_triplet(o.z, s.z, h.z, self.gt_mask, self.negative[:, None], P,
                             self.dims.answer_token_offset, rng=None, choice=self.negative)
        return {"vqa": vqa_loss(o.proba, self.y),
                "vib": vib.kl_loss(o.mu, o.sigma),
                "b": relation_loss(trip.h, trip.h_soft, trip.h_hard),
                "c": class_loss(g.const(self.p_orig), h.proba)}


def _loss_fn(fx: Fixture, name: str):
    def f(g, leaves):
        comps = fx.components(g, leaves)
        return total_loss(comps, _LAMBDAS) if name == "total" else comps[name]
    return f


def _tensor_fn(g, L):
    a, b, c = L["a"], L["b"], L["c"]
    h = ad.softplus(a @ b) + ad.sigmoid(ad.exp(ad.scale(a @ b, 0.3)))
    sm = ad.softmax(ad.concat([h, ad.relu(a @ b)], axis=-1))
    cos = ad.cosine(ad.mean_pool(ad.reshape(c, (2, 2, 3)), axis=1), a + ad.take(b, slice(0, 2)).T.T)
    return ad.sum(ad.log(sm)) + ad.mean(cos) + ad.sum(ad.embed(c, np.array([1, 0, 2])) * ad.take(c, [2, 1, 0]))


def check_tensor(eps: float = DEFAULT_EPS, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((3, 3)), "c": rng.standard_normal((3, 4))}
    return ad.finite_diff_check(_tensor_fn, params, eps)


def check_loss(name: str, eps: float = DEFAULT_EPS, seed: int = 0) -> float:
    fx = Fixture(seed)
    return ad.finite_diff_check(_loss_fn(fx, name), fx.params, eps)


def run(module: str = "all", eps: float = DEFAULT_EPS, seed: int = 0) -> Dict[str, float]:
    """Max relative error per checked quantity for the selected module."""
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {', '.join(MODULES)}")
    out = {}
    if module in ("all", "tensor"):
        out["tensor"] = check_tensor(eps, seed)
    if module in ("all", "vib"):
        out["vib"] = check_loss("vib", eps, seed)
    if module in ("all", "losses"):
        for name in ("vqa", "b", "c", "total"):
            out[name] = check_loss(name, eps, seed)
    return out
