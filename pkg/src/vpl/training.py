"""Three-phase collaborative training, evaluation and reference predictors."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from . import autodiff as ad
from . import bottleneck as vib
from .autodiff import Graph, ShapeError
from .discriminators import build_triplet, class_loss, negative_candidates, relation_loss
from .model import ModelDims, PARAM_GROUPS, init_params, vqa_loss
from .network import bind, forward_infer, forward_train, predict_proba
from .perturb import contribution_scores, k_schedule, perturb_batch
from .synth import ConfigError, Dataset, Split, prior_table

log = logging.getLogger(__name__)

LOSSES = ("vqa", "vib", "c", "b")

# which parameter groups each loss may update
LOSS_GROUPS = {
    "vqa": frozenset({"fusion", "vib", "classifier"}),
    "vib": frozenset({"fusion", "vib"}),
    "c": frozenset({"fusion", "vib", "classifier"}),
    "b": frozenset({"fusion", "vib", "answer_map"}),
}

PHASES = ("pretrain", "finetune-c", "finetune-full")

# region scoring: which answers weight the probability gradient, and whether it is rectified
SALIENCY_MODES = ("gt-abs", "gt-signed", "all-signed")


@dataclass(frozen=True)
class TrainConfig:
    lambda_c: float = 4.0
    lambda_b: float = 2.0
    lambda_vib: float = 1e-3
    t0: int = 12
    t1: int = 14
    t2: int = 20
    batch_size: int = 32
    n_prime: int = 20
    tau: int = 2
    p: int = 0                     # 0 selects ceil(N / 2)
    k_max: int = 3
    lr_base: float = 2.5e-5
    lr_cap: float = 1e-4
    lr_decay_start: int = 16
    lr_decay_every: int = 2
    lr_decay_factor: float = 0.25
    lr_floor: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-8
    hidden_dim: int = 64
    attention_dim: int = 64
    fused_dim: int = 64
    latent_dim: int = 16
    order: str = "algorithm1"      # or "prose": relation loss joins first
    saliency: str = "gt-abs"       # gt-signed | gt-abs | all-signed
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.t0 <= self.t1 <= self.t2:
            raise ConfigError(f"need 0 <= t0 <= t1 <= t2, got {self.t0}, {self.t1}, {self.t2}")
        if min(self.lambda_c, self.lambda_b, self.lambda_vib) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 so every instance has a donor peer")
        if self.order not in ("algorithm1", "prose"):
            raise ConfigError(f"order must be algorithm1 or prose, got {self.order!r}")
        if self.saliency not in SALIENCY_MODES:
            raise ConfigError(f"saliency must be one of {SALIENCY_MODES}, got {self.saliency!r}")
        if self.n_prime < 1 or self.tau < 1 or self.k_max < 1 or self.p < 0:
            raise ConfigError("n_prime, tau, k_max must be >= 1 and p >= 0")


@dataclass
class EpochMetrics:
    epoch: int
    phase: str
    loss_vqa: float
    loss_vib: float
    loss_b: float
    loss_c: float
    loss_total: float
    train_acc: float
    test_acc: float
    test_acc_per_type: tuple
    lr: float
    k: int


class EvalReport(NamedTuple):
    overall: float
    per_type: np.ndarray
    predictions: np.ndarray
    instance_scores: np.ndarray


@dataclass
class TrainResult:
    params: dict
    history: List[EpochMetrics]
    dims: ModelDims
    config: TrainConfig


# ------------------------------------------------------------------ losses

def total_loss(components: Dict[str, object], lambdas: Dict[str, float]):
    """``L_vqa + l_vib L_vib + l_b L_b + l_c L_c``; missing components count as zero.

    Works on plain floats and on graph tensors alike.
    """
    total = components["vqa"]
    for key in ("vib", "b", "c"):
        if key in components and components[key] is not None:
            total = total + lambdas[key] * components[key]
    return total


def param_groups(params: dict) -> Dict[str, frozenset]:
    """Map group name -> parameter names; every parameter must belong to exactly one group."""
    unassigned = sorted(set(params) - set(PARAM_GROUPS))
    if unassigned:
        raise ConfigError(f"parameters without a group: {unassigned}")
    groups: Dict[str, set] = {}
    for name in params:
        groups.setdefault(PARAM_GROUPS[name], set()).add(name)
    return {g: frozenset(v) for g, v in groups.items()}


def groups_for(losses) -> frozenset:
    out = frozenset()
    for name in losses:
        out |= LOSS_GROUPS[name]
    return out


# --------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, lr: float, state: AdamState, groups=None) -> dict:
    """In-place Adam update with bias correction, restricted to parameters in ``groups``.

    Step counts are kept per parameter so a group that joins late still gets
    a properly bias-corrected first update.
    """
    for name, g in grads.items():
        if groups is not None and PARAM_GROUPS.get(name) not in groups:
            continue
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {w.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
            state.t[name] = 0
        state.t[name] += 1
        t = state.t[name]
        m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * g * g
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        w -= lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def lr_schedule(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warm-up capped at ``lr_cap``; after ``lr_decay_start`` decays by ``lr_decay_factor`` every ``lr_decay_every`` epochs."""
    if epoch < 1:
        raise ValueError("epochs start at 1")
    lr = min(cfg.lr_base * epoch, cfg.lr_cap)
    if epoch > cfg.lr_decay_start:
        lr = cfg.lr_cap * cfg.lr_decay_factor ** ((epoch - cfg.lr_decay_start) // cfg.lr_decay_every)
        lr = max(lr, cfg.lr_floor)
    return lr


# ------------------------------------------------------------------ phases

def phase_of(epoch: int, cfg: TrainConfig) -> str:
    if epoch <= cfg.t0:
        return "pretrain"
    if epoch <= cfg.t1:
        return "finetune-c" if cfg.order == "algorithm1" else "finetune-b"
    return "finetune-full"


def active_losses(epoch: int, cfg: TrainConfig) -> tuple:
    phase = phase_of(epoch, cfg)
    on = ["vqa"]
    if cfg.lambda_vib > 0:
        on.append("vib")
    if phase in ("finetune-c", "finetune-full") and cfg.lambda_c > 0:
        on.append("c")
    if phase in ("finetune-b", "finetune-full") and cfg.lambda_b > 0:
        on.append("b")
    return tuple(on)


def model_dims(ds_cfg, cfg: TrainConfig) -> ModelDims:
    return ModelDims(feature_dim=ds_cfg.feature_dim, question_dim=ds_cfg.question_dim,
                     hidden_dim=cfg.hidden_dim, attention_dim=cfg.attention_dim, fused_dim=cfg.fused_dim,
                     latent_dim=cfg.latent_dim, vocab_size=ds_cfg.vocab_size, num_answers=ds_cfg.num_answers,
                     answer_token_offset=ds_cfg.answer_token_offset)


def effective_p(cfg: TrainConfig, n_regions: int) -> int:
    return cfg.p if cfg.p > 0 else math.ceil(n_regions / 2)


def check_compatible(cfg: TrainConfig, ds: Dataset):
    dc = ds.config
    N = dc.regions_per_image
    if dc.feature_dim != dc.question_dim:
        raise ConfigError("instance similarity multiplies pooled regions by the question vector: "
                          f"feature_dim={dc.feature_dim} must equal question_dim={dc.question_dim}")
    if cfg.tau > N:
        raise ConfigError(f"tau={cfg.tau} exceeds regions per image {N}")
    p = effective_p(cfg, N)
    k_top = min(cfg.k_max, cfg.tau)
    if p < k_top or p - 1 > N - cfg.tau:
        raise ConfigError(f"p={p} violates K <= p and p - K <= N - tau for K in [1, {k_top}]")
    max_gt = int(ds.train.ground_truth_mask().sum(axis=1).max())
    if dc.num_answers - max_gt < cfg.n_prime:
        raise ConfigError(f"n_prime={cfg.n_prime} exceeds available negatives ({dc.num_answers - max_gt})")
    if cfg.batch_size > len(ds.train):
        raise ConfigError("batch_size exceeds training split size")


# ------------------------------------------------------------------ train

def question_vectors(params: dict, tokens) -> np.ndarray:
    return params["embed"][np.asarray(tokens)].mean(axis=-2)


def train_step(params, state, cfg: TrainConfig, dims: ModelDims, X, tokens, y, gt_mask, epoch, lr,
               noise_rng, perturb_rng, n_regions):
    """One optimizer step; returns per-loss values (0.0 for inactive losses) and K."""
    losses = active_losses(epoch, cfg)
    use_c, use_b = "c" in losses, "b" in losses
    B = len(X)
    k = 0
    parts = [X]
    if use_c or use_b:
        k = min(k_schedule(epoch, cfg.t0, cfg.k_max), cfg.tau)
        weights = None if cfg.saliency == "all-signed" else y
        scores, pred0 = contribution_scores(params, X, tokens, weights, rectify=cfg.saliency == "gt-abs",
                                            return_proba=True)
        q = question_vectors(params, tokens)
        hard, soft, _ = perturb_batch(X, q, scores, cfg.tau, effective_p(cfg, n_regions), k, perturb_rng)
        parts.append(hard)
        if use_b:
            parts.append(soft)
    g = Graph()
    P = bind(g, params)
    n_parts = len(parts)
    Xall = g.const(np.concatenate(parts) if n_parts > 1 else X)
    tok_all = np.concatenate([tokens] * n_parts) if n_parts > 1 else tokens
    eps = noise_rng.standard_normal((n_parts * B, dims.latent_dim))
    fw = forward_train(P, Xall, tok_all, eps=eps)

    def part(t, i):
        return ad.take(t, slice(i * B, (i + 1) * B)) if n_parts > 1 else t

    comps = {"vqa": vqa_loss(part(fw.proba, 0), y)}
    if "vib" in losses:
        comps["vib"] = vib.kl_loss(part(fw.mu, 0), part(fw.sigma, 0))
    if use_c:
        comps["c"] = class_loss(part(fw.proba, 0), part(fw.proba, 1))
    if use_b:
        negs = negative_candidates(pred0, gt_mask, cfg.n_prime)
        trip = build_triplet(part(fw.z, 0), part(fw.z, 2), part(fw.z, 1), gt_mask, negs, P,
                             dims.answer_token_offset, perturb_rng)
        comps["b"] = relation_loss(trip.h, trip.h_soft, trip.h_hard, skip_degenerate=True)
    lambdas = {"vib": cfg.lambda_vib, "b": cfg.lambda_b, "c": cfg.lambda_c}
    total = total_loss(comps, lambdas)
    grads = ad.backward(g, total)
    adam_step(params, grads, lr, state, groups=groups_for(losses))
    vals = {k_: float(comps[k_].value) if k_ in comps else 0.0 for k_ in LOSSES}
    vals["total"] = float(total.value)
    return vals, k


def train(cfg: TrainConfig, ds: Dataset, callback: Optional[Callable[[EpochMetrics], None]] = None,
          params: Optional[dict] = None) -> TrainResult:
    """Run the three training phases and evaluate both splits after every epoch."""
    check_compatible(cfg, ds)
    dims = model_dims(ds.config, cfg)
    init_rng, shuffle_rng, noise_rng, perturb_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(4))
    if params is None:
        params = init_params(dims, init_rng)
    param_groups(params)
    state = AdamState(cfg.beta1, cfg.beta2, cfg.adam_eps)
    # training view: diagnostics (region classes, salient index) are never handed to the step
    tr = ds.train
    feats = tr.features.astype(np.float64)
    tokens, scores = tr.tokens, tr.scores.astype(np.float64)
    gt_mask = tr.ground_truth_mask()
    n, N = len(tr), ds.config.regions_per_image
    history = []
    for epoch in range(1, cfg.t2 + 1):
        lr = lr_schedule(epoch, cfg)
        perm = shuffle_rng.permutation(n)
        sums = {k: 0.0 for k in (*LOSSES, "total")}
        steps, k = 0, 0
        for s in range(0, n - 1, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            vals, k = train_step(params, state, cfg, dims, feats[idx], tokens[idx], scores[idx], gt_mask[idx],
                                 epoch, lr, noise_rng, perturb_rng, N)
            for key, v in vals.items():
                sums[key] += v
            steps += 1
        tr_rep = evaluate(params, ds.train)
        te_rep = evaluate(params, ds.test)
        avg = {key: v / steps for key, v in sums.items()}
        m = EpochMetrics(epoch, phase_of(epoch, cfg), avg["vqa"], avg["vib"], avg["b"], avg["c"], avg["total"],
                         tr_rep.overall, te_rep.overall, tuple(float(x) for x in te_rep.per_type), lr, k)
        history.append(m)
        log.info("epoch %d %s vqa=%.4f total=%.4f train=%.4f test=%.4f", epoch, m.phase, m.loss_vqa,
                 m.loss_total, m.train_acc, m.test_acc)
        if callback:
            callback(m)
    return TrainResult(params, history, dims, cfg)


# --------------------------------------------------------------- evaluate

def vqa_accuracy(votes: np.ndarray, predicted: np.ndarray) -> np.ndarray:
    """``min(1, #annotators giving the predicted answer / 3)`` per instance."""
    got = np.asarray(votes)[np.arange(len(predicted)), predicted]
    return np.minimum(1.0, got / 3.0)


def _report(split: Split, predicted: np.ndarray, mode: str, num_types: Optional[int] = None) -> EvalReport:
    if mode == "vqa-accuracy":
        per = vqa_accuracy(split.votes, predicted)
    elif mode == "train-target":
        per = split.scores.astype(np.float64)[np.arange(len(predicted)), predicted]
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    Q = num_types if num_types is not None else int(split.question_types.max()) + 1
    per_type = np.array([per[split.question_types == t].mean() if np.any(split.question_types == t) else np.nan
                         for t in range(Q)])
    return EvalReport(float(per.mean()), per_type, predicted, per)


def evaluate(params: dict, split: Split, mode: str = "vqa-accuracy", num_types: Optional[int] = None) -> EvalReport:
    """Score argmax predictions from the mean-only inference path."""
    _, proba = predict_proba(params, split.features.astype(np.float64), split.tokens)
    return _report(split, proba.argmax(axis=1), mode, num_types)


def evaluate_sampled(params: dict, split: Split, rng: np.random.Generator) -> EvalReport:
    """Same as :func:`evaluate` but classifies one sampled ``z`` per instance (comparison only)."""
    g = Graph()
    P = bind(g, params, trainable=False)
    fw = forward_train(P, g.const(split.features.astype(np.float64)), split.tokens, rng=rng)
    return _report(split, fw.proba.value.argmax(axis=1), "vqa-accuracy")


def baseline_predict(kind: str, ds: Dataset, split: str = "test", mode: str = "vqa-accuracy") -> EvalReport:
    """Reference predictors: ``prior-only`` (train head answer per question type) or ``oracle``."""
    cfg = ds.config
    target = ds.split(split)
    if kind == "prior-only":
        table = prior_table(ds.train, cfg.num_question_types, cfg.answers_per_type)
        head = table.argmax(axis=1)
        pred = target.question_types * cfg.answers_per_type + head[target.question_types]
    elif kind == "oracle":
        # salient latent class is q * A + a, which is exactly the answer id
        pred = target.region_classes[np.arange(len(target)), target.salient]
    else:
        raise ValueError(f"unknown baseline {kind!r}")
    return _report(target, pred, mode, cfg.num_question_types)
