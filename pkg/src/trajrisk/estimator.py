"""scikit-learn style classifier wrapping tokenizer, network and training loop."""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .datagen import HEADS
from .losses import LossConfig
from .metrics import ks
from .model.network import REFERENCE_HEAD, ModelConfig, ModelShapes, TrajectoryNet
from .preprocess import TrajectoryTokenizer, _split_user, train_validation_split
from .train import TrainConfig, fit, predict_samples
from .validation import check_fitted

__all__ = ["TrajectoryRiskClassifier"]


class TrajectoryRiskClassifier(ClassifierMixin, BaseEstimator):
    """Seven-head delinquency classifier over raw user trajectories.

    ``X`` is a sequence of ``(RawUser, LabelSet)`` pairs for ``fit`` (labels are
    read from the pairs, ``y`` is ignored) and of users or pairs for prediction.
    ``predict_proba`` returns an ``(n_users, 7)`` array in ``HEADS`` order.
    """

    def __init__(self, n_bins: int = 8, embed_dim: int = 32, n_layers: int = 2, n_heads: int = 4,
                 dropout: float = 0.1, feature_cls: bool = True, summary_cls: bool = True,
                 hierarchical: bool = True, multi_head: bool = True, dependency: bool = True,
                 freeze_dependency: bool = False, lr: float = 5e-4, weight_decay: float = 0.01,
                 epochs: int = 12, batch_size: int = 64, grad_clip_norm: float = 5.0,
                 pretrain_epochs: int = 1, p_aug: float = 0.3, validation_fraction: float = 0.2,
                 random_state: int = 0):
        self.n_bins = n_bins
        self.embed_dim = embed_dim
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.dropout = dropout
        self.feature_cls = feature_cls
        self.summary_cls = summary_cls
        self.hierarchical = hierarchical
        self.multi_head = multi_head
        self.dependency = dependency
        self.freeze_dependency = freeze_dependency
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.grad_clip_norm = grad_clip_norm
        self.pretrain_epochs = pretrain_epochs
        self.p_aug = p_aug
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(embed_dim=self.embed_dim, n_layers=self.n_layers, n_heads=self.n_heads,
                           dropout=self.dropout, feature_cls=self.feature_cls,
                           summary_cls=self.summary_cls, hierarchical=self.hierarchical,
                           multi_head=self.multi_head, dependency=self.dependency,
                           freeze_dependency=self.freeze_dependency)

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
                           batch_size=self.batch_size, grad_clip_norm=self.grad_clip_norm,
                           seed=self.random_state, pretrain_epochs=self.pretrain_epochs,
                           p_aug=self.p_aug)

    def fit(self, X, y=None):
        pairs = list(X)
        if not pairs:
            raise ValueError("cannot fit on an empty dataset")
        if any(_split_user(p)[1] is None for p in pairs):
            raise ValueError("fit needs (RawUser, LabelSet) pairs")
        mcfg, tcfg = self._model_config(), self._train_config()
        if self.validation_fraction:
            train, valid = train_validation_split(pairs, self.validation_fraction, self.random_state)
        else:
            train, valid = pairs, []
        self.tokenizer_ = TrajectoryTokenizer(n_bins=self.n_bins).fit(train)
        net = TrajectoryNet(mcfg, ModelShapes.from_artifacts(self.tokenizer_.artifacts_),
                            seed=self.random_state)
        result = fit(net, self.tokenizer_.transform(train), self.tokenizer_.transform(valid),
                     tcfg, LossConfig())
        self.net_ = result.net
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.heads_ = list(HEADS)
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_fitted(self, ["net_", "tokenizer_"])
        samples = self.tokenizer_.transform(list(X))
        return predict_samples(self.net_, samples)

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.predict_proba(X) >= threshold).astype(np.int64)

    def score(self, X, y=None, head: Optional[str] = None) -> float:
        """KS on ``head`` (default the reference head) over users whose label is observed."""
        pairs = list(X)
        head = head or REFERENCE_HEAD
        i = HEADS.index(head)
        probs = self.predict_proba(pairs)
        labels = [_split_user(p)[1] for p in pairs]
        if any(l is None for l in labels):
            raise ValueError("score needs (RawUser, LabelSet) pairs")
        obs = np.array([l.observed(head) for l in labels])
        vals = np.array([l.value(head) for l in labels])
        return ks(probs[obs, i], vals[obs])
