"""Relation-aware (intra-instance invariance) and class-aware (inter-instance) losses."""
from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DegenerateVectorError, NORM_EPS, ShapeError, Tensor
from .model import VocabularyError

log = logging.getLogger(__name__)


class Triplet(NamedTuple):
    h: Tensor
    h_soft: Tensor
    h_hard: Tensor
    negative: np.ndarray


def negative_candidates(pred: np.ndarray, gt, n_prime: int) -> np.ndarray:
    """Top ``n_prime`` non-ground-truth answers by probability, ties to the lower id.

    ``gt`` is an iterable of answer ids or a boolean mask; batched input gives
    one row per instance.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if n_prime < 1:
        raise ContractError("n_prime must be >= 1")
    if pred.ndim == 2:
        return np.stack([negative_candidates(p, g, n_prime) for p, g in zip(pred, gt)])
    mask = np.zeros(pred.shape[0], dtype=bool)
    gt = np.asarray(sorted(gt) if isinstance(gt, (set, frozenset)) else gt)
    if gt.dtype == bool:
        mask |= gt
    else:
        mask[gt.reshape(-1).astype(np.int64)] = True
    free = np.flatnonzero(~mask)
    if free.size < n_prime:
        raise VocabularyError(f"only {free.size} non-ground-truth answers, need {n_prime}")
    order = np.argsort(-pred[free], kind="stable")
    return free[order[:n_prime]]


def answer_map(x: Tensor, P: dict) -> Tensor:
    return x @ P["ans_W"] + P["ans_b"]


def build_triplet(z: Tensor, z_soft: Tensor, z_hard: Tensor, gt_mask: np.ndarray, negatives: np.ndarray,
                  P: dict, answer_offset: int, rng: np.random.Generator, choice=None) -> Triplet:
    """Fuse each representation with a mapped answer embedding.

    Original and soft copies pair with the mean embedding of the
    ground-truth answers; the hard copy pairs with one negative drawn
    uniformly from ``negatives`` (or ``choice`` when given).
    """
    gt_mask = np.atleast_2d(np.asarray(gt_mask, dtype=np.float64))
    negatives = np.atleast_2d(negatives)
    if negatives.shape[-1] == 0:
        raise ContractError("negative candidate list is empty")
    if not (z.shape == z_soft.shape == z_hard.shape):
        raise ShapeError(f"representation shapes differ: {z.shape}, {z_soft.shape}, {z_hard.shape}")
    counts = gt_mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise ContractError("every instance needs at least one ground-truth answer")
    n_ans = gt_mask.shape[1]
    answer_table = ad.take(P["embed"], slice(answer_offset, answer_offset + n_ans))
    pooled = z.graph.const(gt_mask / counts) @ answer_table
    if choice is None:
        choice = negatives[np.arange(len(negatives)), rng.integers(0, negatives.shape[1], size=len(negatives))]
    choice = np.asarray(choice, dtype=np.int64).reshape(-1)
    neg_emb = ad.embed(P["embed"], choice + answer_offset)
    pos = answer_map(pooled, P)
    neg = answer_map(neg_emb, P)
    if z.ndim == 1:
        pos, neg = ad.reshape(pos, z.shape), ad.reshape(neg, z.shape)
    return Triplet(z * pos, z_soft * pos, z_hard * neg, choice)


def relation_terms(h: Tensor, h_soft: Tensor, h_hard: Tensor) -> Tensor:
    """Per-instance ``log(2 - e^{c1} / (e^{c1} + e^{c2}))`` with ``c1 = cos(h, h~)``, ``c2 = cos(h~, h^)``."""
    c1 = ad.cosine(h, h_soft)
    c2 = ad.cosine(h_soft, h_hard)
    # e^{c1}/(e^{c1}+e^{c2}) == sigmoid(c1 - c2)
    return ad.log(2.0 - ad.sigmoid(c1 - c2))


def relation_loss(h: Tensor, h_soft: Tensor, h_hard: Tensor, skip_degenerate: bool = False) -> Tensor:
    names = ("h", "h_soft", "h_hard")
    norms = [np.linalg.norm(np.atleast_2d(t.value), axis=-1) for t in (h, h_soft, h_hard)]
    bad = np.zeros_like(norms[0], dtype=bool)
    for name, n in zip(names, norms):
        if np.any(n < NORM_EPS) and not skip_degenerate:
            raise DegenerateVectorError(f"{name} is degenerate for instance {int(np.flatnonzero(n < NORM_EPS)[0])}")
        bad |= n < NORM_EPS
    if bad.any():
        keep = np.flatnonzero(~bad)
        log.warning("skipping %d degenerate triplets", int(bad.sum()))
        if keep.size == 0:
            return h.graph.const(0.0)
        h, h_soft, h_hard = (ad.take(t, keep) for t in (h, h_soft, h_hard))
    return ad.mean(relation_terms(h, h_soft, h_hard))


def class_loss(p_orig: Tensor, p_hard: Tensor) -> Tensor:
    """``(1/B) sum_i sum_k p_ik log p^_ik``; the original branch is held constant."""
    if p_orig.shape != p_hard.shape:
        raise ShapeError(f"class_loss: {p_orig.shape} vs {p_hard.shape}")
    B = p_hard.shape[0] if p_hard.ndim > 1 else 1
    return ad.scale(ad.sum(ad.detach(p_orig) * ad.log(p_hard)), 1.0 / B)
