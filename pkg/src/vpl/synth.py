"""Seeded synthetic VQA data with a controllable question-type answer prior.

Each image holds ``N`` regions. Exactly one region is salient: its latent
class is ``qtype * A + answer``. The other regions get classes belonging to
other question types or to the pure-distractor pool ``[Q*A, G)``. Region
features are the class prototype plus Gaussian noise. The train split puts
mass ``kappa`` on answer 0 of every question type; the test split puts it on
answer 1, so the prior shifts by a known rotation.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import NamedTuple

import numpy as np


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_region_classes: int = 64
    num_question_types: int = 6
    answers_per_type: int = 8
    regions_per_image: int = 8
    feature_dim: int = 32
    question_dim: int = 32
    question_len: int = 4
    filler_tokens: int = 8
    train_size: int = 8000
    test_size: int = 2000
    kappa: float = 0.8
    annotators: int = 10
    annotator_accuracy: float = 0.9
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        A, Q, G = self.answers_per_type, self.num_question_types, self.num_region_classes
        if self.regions_per_image < 2 or A < 2 or Q < 1:
            raise ConfigError("need regions_per_image >= 2, answers_per_type >= 2, num_question_types >= 1")
        if self.train_size < 1 or self.test_size < 1 or self.annotators < 1:
            raise ConfigError("split sizes and annotator count must be >= 1")
        if not (1.0 / A - 1e-12 <= self.kappa <= 1.0):
            raise ConfigError(f"kappa={self.kappa} outside [1/A, 1]")
        if Q * A >= G and Q == 1:
            raise ConfigError(f"Q*A={Q * A} leaves no distractor classes in G={G}")
        if Q * A > G:
            raise ConfigError(f"Q*A={Q * A} exceeds region class capacity G={G}")
        if self.question_len < 2:
            raise ConfigError("question_len must be >= 2")
        if not 0.0 <= self.annotator_accuracy <= 1.0 or self.noise_scale < 0:
            raise ConfigError("annotator_accuracy in [0,1] and noise_scale >= 0 required")

    @property
    def num_answers(self) -> int:
        return self.num_question_types * self.answers_per_type

    @property
    def answer_token_offset(self) -> int:
        return 2 * self.num_question_types + self.filler_tokens

    @property
    def vocab_size(self) -> int:
        """Shared token vocabulary: two type tokens per question type, filler, then one token per answer."""
        return self.answer_token_offset + self.num_answers

    @classmethod
    def field_types(cls) -> dict:
        return {f.name: type(f.default) for f in fields(cls)}


class InstanceRecord(NamedTuple):
    features: np.ndarray      # (N, d_v) float32, one row per region
    region_classes: np.ndarray
    question_type: int
    tokens: np.ndarray
    answers: frozenset        # ground-truth set: answers holding the maximum vote count
    scores: np.ndarray        # votes / annotators over the full answer vocabulary
    salient_index: int


@dataclass
class Split:
    features: np.ndarray        # (n, N, d_v) float32
    question_types: np.ndarray  # (n,) int64
    tokens: np.ndarray          # (n, L) int64
    scores: np.ndarray          # (n, |Omega|) float32
    region_classes: np.ndarray  # (n, N) int64, diagnostics
    salient: np.ndarray         # (n,) int64, diagnostics
    annotators: int = 10

    def __len__(self):
        return self.features.shape[0]

    def __getitem__(self, i) -> InstanceRecord:
        votes = self.votes[i]
        return InstanceRecord(self.features[i], self.region_classes[i], int(self.question_types[i]),
                              self.tokens[i], frozenset(np.flatnonzero(votes == votes.max()).tolist()),
                              self.scores[i], int(self.salient[i]))

    @property
    def votes(self) -> np.ndarray:
        return np.rint(self.scores.astype(np.float64) * self.annotators).astype(np.int64)

    @property
    def majority(self) -> np.ndarray:
        """Lowest-id answer among those with the most votes."""
        return self.votes.argmax(axis=1)

    def ground_truth_mask(self) -> np.ndarray:
        v = self.votes
        return v == v.max(axis=1, keepdims=True)

    def subset(self, idx) -> "Split":
        return replace(self, features=self.features[idx], question_types=self.question_types[idx],
                       tokens=self.tokens[idx], scores=self.scores[idx],
                       region_classes=self.region_classes[idx], salient=self.salient[idx])


@dataclass
class Dataset:
    config: SynthConfig
    answers: list
    train: Split
    test: Split
    prototypes: np.ndarray = field(repr=False, default=None)

    def split(self, name: str) -> Split:
        if name not in ("train", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)


def answer_vocabulary(cfg: SynthConfig) -> list:
    return [f"q{q}a{a}" for q in range(cfg.num_question_types) for a in range(cfg.answers_per_type)]


def head_answer(split: str) -> int:
    """Index within a question type of the answer carrying the prior mass."""
    return 0 if split == "train" else 1


def _draw_split(cfg: SynthConfig, n: int, head: int, protos: np.ndarray, rng: np.random.Generator) -> Split:
    Q, A, N, G = cfg.num_question_types, cfg.answers_per_type, cfg.regions_per_image, cfg.num_region_classes
    qtype = rng.integers(0, Q, size=n)
    # intended answer: head with prob kappa, remainder uniform over the other A-1
    others = rng.integers(0, A - 1, size=n)
    others = others + (others >= head)
    answer = np.where(rng.random(n) < cfg.kappa, head, others)

    salient_cls = qtype * A + answer
    salient_pos = rng.integers(0, N, size=n)
    classes = np.empty((n, N), dtype=np.int64)
    # distractor pool: every class not owned by the instance's question type
    all_cls = np.arange(G)
    pools = [all_cls[(all_cls >= Q * A) | (all_cls // A != q)] for q in range(Q)]
    for q in range(Q):
        rows = np.flatnonzero(qtype == q)
        classes[rows] = rng.choice(pools[q], size=(rows.size, N))
    classes[np.arange(n), salient_pos] = salient_cls

    feats = protos[classes] + cfg.noise_scale * rng.standard_normal((n, N, cfg.feature_dim))

    fillers = rng.integers(0, cfg.filler_tokens, size=(n, cfg.question_len - 2)) + 2 * Q
    tokens = np.concatenate([2 * qtype[:, None], 2 * qtype[:, None] + 1, fillers], axis=1)

    # annotators: correct w.p. accuracy, else uniform over the type's other answers
    correct = rng.random((n, cfg.annotators)) < cfg.annotator_accuracy
    wrong = rng.integers(0, A - 1, size=(n, cfg.annotators))
    wrong = wrong + (wrong >= answer[:, None])
    given = np.where(correct, answer[:, None], wrong) + (qtype * A)[:, None]
    votes = np.zeros((n, cfg.num_answers), dtype=np.int64)
    np.add.at(votes, (np.repeat(np.arange(n), cfg.annotators), given.reshape(-1)), 1)
    scores = (votes / cfg.annotators).astype(np.float32)

    return Split(feats.astype(np.float32), qtype.astype(np.int64), tokens.astype(np.int64), scores,
                 classes, salient_pos.astype(np.int64), cfg.annotators)


def generate(config: SynthConfig) -> Dataset:
    """Build train and test splits that differ only in their answer prior."""
    rng = np.random.default_rng(config.seed)
    protos = rng.standard_normal((config.num_region_classes, config.feature_dim))
    train = _draw_split(config, config.train_size, head_answer("train"), protos, rng)
    test = _draw_split(config, config.test_size, head_answer("test"), protos, rng)
    return Dataset(config, answer_vocabulary(config), train, test, protos)


def prior_table(split: Split, num_question_types: int, answers_per_type: int) -> np.ndarray:
    """Empirical answer distribution per question type, from majority answers.

    Rows are question types, columns the answers of that type.
    """
    if len(split) == 0:
        raise ValueError("prior_table of an empty split")
    A = answers_per_type
    local = split.majority - split.question_types * A
    table = np.zeros((num_question_types, A))
    np.add.at(table, (split.question_types, local), 1.0)
    rows = table.sum(axis=1, keepdims=True)
    return np.divide(table, rows, out=np.full_like(table, 1.0 / A), where=rows > 0)


def prior_shift(ds: Dataset) -> float:
    """Mean total-variation distance between train and test prior tables."""
    cfg = ds.config
    tr = prior_table(ds.train, cfg.num_question_types, cfg.answers_per_type)
    te = prior_table(ds.test, cfg.num_question_types, cfg.answers_per_type)
    return float(0.5 * np.abs(tr - te).sum(axis=1).mean())
