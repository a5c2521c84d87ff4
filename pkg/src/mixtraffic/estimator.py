"""scikit-learn style facade over training and acting.

``fit`` takes a :class:`~mixtraffic.env.Scenario` instead of a feature
matrix; ``predict`` maps high-level observation rows to Go(0)/Stop(1).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .env import Episode, Scenario
from .observe import avg_waiting_time, obs_sizes
from .policy import PolicyParams, log_softmax, split_low_output
from .ppo import TrainConfig, train


class HierarchicalController(BaseEstimator):
    def __init__(
        self,
        hidden=(64, 64),
        updates=20,
        stage1_updates=10,
        rollout_len=2000,
        lr=3e-4,
        clip_eps=0.3,
        mode="two_stage",
        random_state=0,
    ):
        self.hidden = hidden
        self.updates = updates
        self.stage1_updates = stage1_updates
        self.rollout_len = rollout_len
        self.lr = lr
        self.clip_eps = clip_eps
        self.mode = mode
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            hidden=tuple(self.hidden),
            updates=self.updates,
            stage1_updates=self.stage1_updates,
            rollout_len=self.rollout_len,
            lr=self.lr,
            clip_eps=self.clip_eps,
            mode=self.mode,
        )

    def fit(self, X: Scenario, y=None):
        if not isinstance(X, Scenario):
            raise TypeError(f"fit expects a Scenario, got {type(X).__name__}")
        cfg = self._train_config()
        params, log = train(X, cfg, seed=int(self.random_state))
        self.params_ = params
        self.training_log_ = log
        self.n_features_in_, self.n_low_features_ = obs_sizes(X.n_cells)
        return self

    def _check(self, X, attr: str) -> np.ndarray:
        check_is_fitted(self, "params_")
        n_features = getattr(self, attr)
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != n_features:
            raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Columns: P(Go), P(Stop)."""
        X = self._check(X, "n_features_in_")
        return np.exp(log_softmax(self.params_.high(X)))

    def predict(self, X) -> np.ndarray:
        return self.predict_proba(X).argmax(axis=1)

    def predict_low(self, X) -> np.ndarray:
        """Greedy continuous action (acc, lc) in [-1, 1] for low-level observation rows."""
        X = self._check(X, "n_low_features_")
        mean, _ = split_low_output(self.params_.low(X))
        return np.tanh(mean)

    def score(self, X: Scenario, y=None) -> float:
        """Negative average waiting time (seconds) of one evaluation episode."""
        check_is_fitted(self, "params_")
        ep = Episode(X, "hierarchical", self.params_).run()
        return -avg_waiting_time(ep.state.event_log)

    def to_params(self) -> PolicyParams:
        check_is_fitted(self, "params_")
        return self.params_.copy()
