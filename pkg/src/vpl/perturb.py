"""Visual perturbation controller.

Scores regions by the gradient of class probabilities, picks the salient
set, and builds two perturbed copies of each image: a hard one whose top
regions are swapped for regions of a similar batch peer, and a soft one whose
least useful non-salient regions are zeroed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DegenerateVectorError, Graph, NORM_EPS
from .network import bind, forward_infer
from .synth import ConfigError


class PhaseError(ValueError):
    pass


class InsufficientBatchError(ValueError):
    pass


@dataclass
class PerturbedPair:
    hard: np.ndarray       # (N, d_v)
    soft: np.ndarray       # (N, d_v)
    salient: np.ndarray    # indices, highest score first
    donor: int
    replaced: np.ndarray
    zeroed: np.ndarray
    k: int
    p: int


def gradient_scores(proba_fn, X: np.ndarray, weights: Optional[np.ndarray] = None, rectify: bool = False):
    """Per-region gradient of ``sum_k w_k p_k`` summed over feature coordinates.

    ``proba_fn(graph, X_leaf)`` returns the probability tensor. Returns the
    scores (shape ``X.shape[:-1]``) and the probabilities of the same pass.
    """
    X = np.asarray(X, dtype=np.float64)
    g = Graph()
    Xl = g.leaf(X, name="__regions__")
    proba = proba_fn(g, Xl)
    w = np.ones(proba.shape) if weights is None else np.asarray(weights, dtype=np.float64)
    grad = ad.backward(g, ad.sum(proba * w))["__regions__"]
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite contribution gradient")
    return (np.abs(grad) if rectify else grad).sum(axis=-1), proba.value


def contribution_scores(params: dict, X: np.ndarray, tokens, weights: Optional[np.ndarray] = None,
                        rectify: bool = False, return_proba: bool = False):
    """Per-region score: gradient of ``sum_k w_k p(a_k)`` w.r.t. region features, summed over coordinates.

    ``weights=None`` uses ``w = 1`` for every answer. Because the
    probabilities sum to one that sum has zero gradient, so training passes
    the soft answer scores as ``weights`` to aim the saliency at the
    annotated answers. With ``rectify`` the absolute gradient is summed, so
    the score measures sensitivity regardless of the sign convention of the
    feature coordinates. Parameters are read only; the graph is discarded.
    Returns shape ``X.shape[:-1]``, plus the probabilities of the same
    forward pass when ``return_proba`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X, tokens = X[None], np.asarray(tokens)[None]
        if weights is not None:
            weights = np.asarray(weights)[None]

    def proba_fn(g, Xl):
        return forward_infer(bind(g, params, trainable=False), Xl, tokens)[1]

    s, p = gradient_scores(proba_fn, X, weights, rectify)
    if single:
        s, p = s[0], p[0]
    return (s, p) if return_proba else s


def salient_set(scores: np.ndarray, tau: int) -> np.ndarray:
    """Indices of the ``tau`` largest scores, highest first; ties go to the lower index."""
    scores = np.asarray(scores)
    N = scores.shape[-1]
    if not 1 <= tau <= N:
        raise ConfigError(f"tau={tau} outside [1, {N}]")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :tau]


def joint_features(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Mean-pooled regions times the question vector."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != q.shape[-1]:
        raise ContractError(f"region dim {X.shape[-1]} must equal question dim {q.shape[-1]}")
    return X.mean(axis=-2) * q


def instance_similarity(X: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Pairwise cosine of joint vision-language vectors, ``(B, B)``."""
    J = joint_features(X, q)
    norms = np.linalg.norm(J, axis=1)
    bad = np.flatnonzero(norms < NORM_EPS)
    if bad.size:
        raise DegenerateVectorError(f"instance {int(bad[0])} has a degenerate joint vector")
    U = J / norms[:, None]
    R = np.clip(U @ U.T, -1.0, 1.0)
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def donor_candidates(R: np.ndarray, i: int, top: int = 3) -> np.ndarray:
    B = R.shape[0]
    if B < 2:
        raise InsufficientBatchError("donor sampling needs at least two instances in the batch")
    others = np.array([j for j in range(B) if j != i])
    order = np.argsort(-R[i, others], kind="stable")
    return others[order[:min(top, B - 1)]]


def sample_substitute(X: np.ndarray, i: int, R: np.ndarray, K: int, rng: np.random.Generator):
    """Pick a donor uniformly among the 3 peers most similar to ``i`` and draw ``K`` of its regions."""
    if K < 1:
        raise ContractError("K must be >= 1")
    cands = donor_candidates(R, i)
    j = int(cands[rng.integers(len(cands))])
    N = X.shape[1]
    cols = rng.choice(N, size=K, replace=K > N)
    return j, np.array(X[j][cols])


def hard_perturb(V: np.ndarray, salient, substitute: np.ndarray, K: int) -> np.ndarray:
    """Replace the first ``K`` entries of ``salient`` (highest scores) by ``substitute`` rows."""
    salient = np.asarray(salient, dtype=np.int64)
    if K > len(salient):
        raise ContractError(f"K={K} exceeds salient set size {len(salient)}")
    out = np.array(V, copy=True)
    if K == 0:
        return out
    if len(substitute) != K:
        raise ContractError(f"need {K} substitute regions, got {len(substitute)}")
    out[salient[:K]] = substitute
    return out


def soft_mask_indices(scores: np.ndarray, salient, count: int) -> np.ndarray:
    """The ``count`` lowest-scoring non-salient regions (ties to the lower index)."""
    N = len(scores)
    rest = np.setdiff1d(np.arange(N), salient)
    if count > len(rest):
        raise ContractError(f"cannot zero {count} regions, only {len(rest)} are non-salient")
    order = np.argsort(np.asarray(scores)[rest], kind="stable")
    return np.sort(rest[order[:count]])


def soft_perturb(V: np.ndarray, salient, p: int, K: int, scores: np.ndarray) -> np.ndarray:
    """Zero ``p - K`` non-salient regions with the lowest scores."""
    if p < K:
        raise ContractError(f"p={p} must be >= K={K}")
    out = np.array(V, copy=True)
    out[soft_mask_indices(scores, salient, p - K)] = 0.0
    return out


def k_schedule(epoch: int, t0: int, k_max: int) -> int:
    if epoch < t0:
        raise PhaseError(f"epoch {epoch} precedes the perturbation phases (T0={t0})")
    return min(k_max, 1 + (epoch - t0) // 2)


def perturb_batch(X: np.ndarray, q: np.ndarray, scores: np.ndarray, tau: int, p: int, K: int,
                  rng: np.random.Generator):
    """Build hard and soft copies for every instance; returns ``(hard, soft, pairs)``."""
    B, N, _ = X.shape
    R = instance_similarity(X, q)
    sal = salient_set(scores, tau)
    hard = np.array(X, copy=True)
    soft = np.array(X, copy=True)
    pairs = []
    for i in range(B):
        j, sub = sample_substitute(X, i, R, K, rng) if K > 0 else (-1, X[i][:0])
        hard[i] = hard_perturb(X[i], sal[i], sub, K)
        zeroed = soft_mask_indices(scores[i], sal[i], p - K)
        soft[i][zeroed] = 0.0
        pairs.append(PerturbedPair(hard[i], soft[i], sal[i], j, sal[i][:K], zeroed, K, p))
    return hard, soft, pairs
