"""Toy VQA base model: region/question encoders, attention fusion, answer classifier.

Region matrices are stored region-major, shape ``(..., N, d)``, so a region
is a row here rather than a column.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, ShapeError


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 32
    question_dim: int = 32
    hidden_dim: int = 64
    attention_dim: int = 64
    fused_dim: int = 64
    latent_dim: int = 16
    vocab_size: int = 68
    num_answers: int = 48
    answer_token_offset: int = 20


# parameter name -> group; fusion group also owns both encoders
PARAM_GROUPS = {
    "img_W": "fusion", "img_b": "fusion", "embed": "fusion",
    "att_Wv": "fusion", "att_Wq": "fusion", "att_w": "fusion",
    "fuse_W1": "fusion", "fuse_b1": "fusion", "fuse_W2": "fusion", "fuse_b2": "fusion",
    "mu_W": "vib", "mu_b": "vib", "sigma_W": "vib", "sigma_b": "vib",
    "cls_W": "classifier", "cls_b": "classifier",
    "ans_W": "answer_map", "ans_b": "answer_map",
}


def param_shapes(d: ModelDims) -> dict:
    return {
        "img_W": (d.feature_dim, d.hidden_dim), "img_b": (d.hidden_dim,),
        "embed": (d.vocab_size, d.question_dim),
        "att_Wv": (d.hidden_dim, d.attention_dim), "att_Wq": (d.question_dim, d.attention_dim),
        "att_w": (d.attention_dim, 1),
        "fuse_W1": (d.hidden_dim, d.fused_dim), "fuse_b1": (d.fused_dim,),
        "fuse_W2": (d.question_dim, d.fused_dim), "fuse_b2": (d.fused_dim,),
        "mu_W": (d.fused_dim, d.latent_dim), "mu_b": (d.latent_dim,),
        "sigma_W": (d.fused_dim, d.latent_dim), "sigma_b": (d.latent_dim,),
        "cls_W": (d.latent_dim, d.num_answers), "cls_b": (d.num_answers,),
        "ans_W": (d.question_dim, d.latent_dim), "ans_b": (d.latent_dim,),
    }


def init_params(dims: ModelDims, rng: np.random.Generator) -> dict:
    """Glorot-uniform weights, zero biases, N(0, 1) embeddings."""
    params = {}
    for name, shape in param_shapes(dims).items():
        if name == "embed":
            params[name] = rng.standard_normal(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            lim = np.sqrt(6.0 / (shape[0] + shape[1]))
            params[name] = rng.uniform(-lim, lim, size=shape)
    return params


def dims_from_params(params: dict) -> ModelDims:
    """Recover dimensions from parameter shapes; answer tokens sit at the end of the vocabulary."""
    missing = sorted(set(PARAM_GROUPS) - set(params))
    if missing:
        raise ValueError(f"checkpoint lacks parameters {missing}")
    vocab, dq = params["embed"].shape
    n_ans = params["cls_W"].shape[1]
    dims = ModelDims(feature_dim=params["img_W"].shape[0], question_dim=dq,
                     hidden_dim=params["img_W"].shape[1], attention_dim=params["att_Wv"].shape[1],
                     fused_dim=params["fuse_W1"].shape[1], latent_dim=params["mu_W"].shape[1],
                     vocab_size=vocab, num_answers=n_ans, answer_token_offset=vocab - n_ans)
    for name, shape in param_shapes(dims).items():
        if params[name].shape != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    return dims


def encode_image(raw: Tensor, P: dict) -> Tensor:
    """Per-region affine projection followed by relu."""
    if raw.shape[-1] != P["img_W"].shape[0]:
        raise ShapeError(f"region features have dim {raw.shape[-1]}, projection expects {P['img_W'].shape[0]}")
    return ad.relu(raw @ P["img_W"] + P["img_b"])


def encode_question(tokens, P: dict) -> Tensor:
    """Mean of token embeddings; ``tokens`` is ``(L,)`` or ``(B, L)``."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] == 0:
        raise VocabularyError("empty token list")
    vocab = P["embed"].shape[0]
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise VocabularyError(f"token id outside vocabulary of size {vocab}")
    return ad.mean(ad.embed(P["embed"], tokens), axis=-2)


def attention(V: Tensor, q: Tensor, P: dict) -> Tensor:
    """Softmax over regions of ``w . relu(W_v v_n + W_q q)``; returns shape ``V.shape[:-1]``."""
    lead = V.shape[:-2]
    hq = ad.reshape(q @ P["att_Wq"], lead + (1, P["att_Wq"].shape[1]))
    logits = ad.relu(V @ P["att_Wv"] + hq) @ P["att_w"]
    return ad.softmax(ad.reshape(logits, V.shape[:-1]), axis=-1)


def fuse(V: Tensor, q: Tensor, P: dict) -> Tensor:
    if V.shape[-1] != P["att_Wv"].shape[0] or q.shape[-1] != P["att_Wq"].shape[0]:
        raise ShapeError(f"fuse: region dim {V.shape[-1]} / question dim {q.shape[-1]} "
                         f"do not match parameters {P['att_Wv'].shape} / {P['att_Wq'].shape}")
    if V.shape[:-2] != q.shape[:-1]:
        raise ShapeError(f"fuse: batch shapes {V.shape[:-2]} and {q.shape[:-1]} differ")
    alpha = attention(V, q, P)
    lead, N, dh = V.shape[:-2], V.shape[-2], V.shape[-1]
    pooled = ad.reshape(ad.reshape(alpha, lead + (1, N)) @ V, lead + (dh,))
    return ad.relu(pooled @ P["fuse_W1"] + P["fuse_b1"]) * ad.relu(q @ P["fuse_W2"] + P["fuse_b2"])


def classify(rep: Tensor, P: dict) -> Tensor:
    if rep.shape[-1] != P["cls_W"].shape[0]:
        raise ShapeError(f"classifier expects dim {P['cls_W'].shape[0]}, got {rep.shape[-1]}")
    return ad.softmax(rep @ P["cls_W"] + P["cls_b"], axis=-1)


def vqa_loss(pred: Tensor, y) -> Tensor:
    """Soft-score cross entropy ``-(1/B) sum_i sum_k y_ik log p_ik``; ``y`` is used as stored."""
    y = np.asarray(y.value if isinstance(y, Tensor) else y, dtype=np.float64)
    if y.shape != pred.shape:
        raise ShapeError(f"vqa_loss: predictions {pred.shape} vs scores {y.shape}")
    B = pred.shape[0] if pred.ndim > 1 else 1
    return ad.scale(ad.sum(ad.log(pred) * y), -1.0 / B)
