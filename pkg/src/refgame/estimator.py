"""scikit-learn style wrapper around one trained speaker/listener pair."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .config import ExperimentConfig
from .datasets import TRAIN, VALIDATION, EmbeddingDataset
from .game import Trainer


class ReferentialGame(BaseEstimator, TransformerMixin):
    """Trains a speaker and listener to play the referential game on ``X``.

    ``fit(X, y)`` treats rows of ``X`` as input embeddings and ``y`` as their
    categories; distractors are drawn from the target's category.
    ``transform`` returns speaker representations, ``predict`` the greedy
    messages, and ``score`` the listener's accuracy on fresh rounds.
    """

    def __init__(self, loss="ce", vocab_size=10, max_len=5, speaker_hidden=64,
                 listener_hidden=64, embed_dim=50, temperature=0.1, speaker_lr=0.01,
                 listener_lr=0.001, batch_size=32, epochs=30, entropy_coef=0.1,
                 n_candidates=2, random_state=0):
        self.loss = loss
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.speaker_hidden = speaker_hidden
        self.listener_hidden = listener_hidden
        self.embed_dim = embed_dim
        self.temperature = temperature
        self.speaker_lr = speaker_lr
        self.listener_lr = listener_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.entropy_coef = entropy_coef
        self.n_candidates = n_candidates
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        params = self.get_params()
        seed = params.pop("random_state")
        return ExperimentConfig(**params, seeds=[seed]).validate()

    @staticmethod
    def _dataset(X, y, split: str) -> EmbeddingDataset:
        _, categories = np.unique(np.zeros(len(X)) if y is None else np.asarray(y), return_inverse=True)
        return EmbeddingDataset(X, categories, np.full(len(X), split))

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_min_samples=3)
        config = self._config()
        self.n_features_in_ = X.shape[1]
        self.trainer_ = Trainer(config, X.shape[1], self.random_state)
        ds = self._dataset(X, y, TRAIN)
        self.history_ = [self.trainer_.train_epoch(ds) for _ in range(config.epochs)]
        return self

    def _check(self, X) -> np.ndarray:
        check_is_fitted(self, "trainer_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        X = self._check(X)
        with ad.no_grad():
            return self.trainer_.agents.speaker.represent(X, training=False).data

    def predict(self, X):
        return self.trainer_.messages_for(self._check(X))

    def score(self, X, y=None):
        X = self._check(X)
        return self.trainer_.evaluate(self._dataset(X, y, VALIDATION), VALIDATION).accuracy
