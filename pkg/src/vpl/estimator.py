"""scikit-learn style wrapper around the trainer."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .network import predict_proba as _predict_proba
from .synth import Dataset, Split
from .training import TrainConfig, evaluate, train


def check_split(data, n_answers: int = None, feature_dim: int = None) -> Split:
    """Validate a split (or take the test split of a dataset) and return it.

    Checks rank, matching instance counts, finite features and the answer
    and feature widths when they are known.
    """
    if isinstance(data, Dataset):
        data = data.test
    if not isinstance(data, Split):
        raise TypeError(f"expected a Split or Dataset, got {type(data).__name__}")
    X, tok, y = data.features, data.tokens, data.scores
    if X.ndim != 3:
        raise ValueError(f"features must be (n, regions, dim), got shape {X.shape}")
    if tok.ndim != 2 or y.ndim != 2:
        raise ValueError("tokens and scores must be 2-d")
    n = X.shape[0]
    if n == 0:
        raise ValueError("split is empty")
    if not (tok.shape[0] == y.shape[0] == n == len(data.question_types)):
        raise ValueError("features, tokens, scores and question types disagree on instance count")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if n_answers is not None and y.shape[1] != n_answers:
        raise ValueError(f"scores have {y.shape[1]} answers, model expects {n_answers}")
    if feature_dim is not None and X.shape[2] != feature_dim:
        raise ValueError(f"features have dim {X.shape[2]}, model expects {feature_dim}")
    return data


class PerturbationAwareVQA(ClassifierMixin, BaseEstimator):
    """Estimator facade: ``fit`` on a :class:`Dataset`, predict on splits.

    Constructor arguments mirror :class:`TrainConfig`. ``transform`` returns
    the mean latent vector, ``score`` the vote-based accuracy.
    """

    def __init__(self, lambda_c=4.0, lambda_b=2.0, lambda_vib=1e-3, t0=12, t1=14, t2=20, batch_size=32,
                 n_prime=20, tau=2, p=0, k_max=3, lr_base=2.5e-5, lr_cap=1e-4, lr_decay_start=16,
                 lr_decay_every=2, lr_decay_factor=0.25, lr_floor=1e-6, beta1=0.9, beta2=0.98, adam_eps=1e-8,
                 hidden_dim=64, attention_dim=64, fused_dim=64, latent_dim=16, order="algorithm1",
                 saliency="gt-abs", seed=0):
        self.lambda_c = lambda_c
        self.lambda_b = lambda_b
        self.lambda_vib = lambda_vib
        self.t0 = t0
        self.t1 = t1
        self.t2 = t2
        self.batch_size = batch_size
        self.n_prime = n_prime
        self.tau = tau
        self.p = p
        self.k_max = k_max
        self.lr_base = lr_base
        self.lr_cap = lr_cap
        self.lr_decay_start = lr_decay_start
        self.lr_decay_every = lr_decay_every
        self.lr_decay_factor = lr_decay_factor
        self.lr_floor = lr_floor
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.hidden_dim = hidden_dim
        self.attention_dim = attention_dim
        self.fused_dim = fused_dim
        self.latent_dim = latent_dim
        self.order = order
        self.saliency = saliency
        self.seed = seed

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "PerturbationAwareVQA":
        return cls(**{f.name: getattr(cfg, f.name) for f in fields(cfg)})

    def to_config(self) -> TrainConfig:
        return TrainConfig(**self.get_params())

    def fit(self, X, y=None, callback=None):
        if not isinstance(X, Dataset):
            raise TypeError("fit expects a Dataset (train split for updates, test split for per-epoch metrics)")
        if y is not None:
            raise ValueError("targets live inside the dataset; pass y=None")
        check_split(X.train)
        check_split(X.test)
        result = train(self.to_config(), X, callback=callback)
        self.params_ = result.params
        self.history_ = result.history
        self.dims_ = result.dims
        self.classes_ = np.arange(X.config.num_answers)
        self.answers_ = list(X.answers)
        self.n_features_in_ = X.config.feature_dim
        return self

    def _infer(self, X):
        check_is_fitted(self, "params_")
        split = check_split(X, len(self.classes_), self.n_features_in_)
        return _predict_proba(self.params_, split.features.astype(np.float64), split.tokens)

    def predict_proba(self, X) -> np.ndarray:
        return self._infer(X)[1]

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X) -> np.ndarray:
        return self._infer(X)[0]

    def score(self, X, y=None, sample_weight=None) -> float:
        check_is_fitted(self, "params_")
        split = check_split(X, len(self.classes_), self.n_features_in_)
        return evaluate(self.params_, split).overall
