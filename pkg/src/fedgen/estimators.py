"""scikit-learn style wrapper around the federated round engine."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .autodiff import sigmoid
from .datasets import Environment
from .fedcore import ALGORITHMS, RunConfig, run_training
from .model import DEFAULT_HIDDEN, predict_proba


class FederatedClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """MLP classifier trained by simulated federated learning.

    Rows of ``X`` are grouped into training distributions by the
    ``environments`` argument of :meth:`fit`, then partitioned over
    ``n_clients`` simulated clients.  With ``algorithm="fedgen"`` the model
    learns one gate per input feature; :meth:`transform` applies the gates and
    ``feature_gates_`` exposes them.

    Parameters mirror :class:`~fedgen.fedcore.RunConfig`; ``random_state``
    seeds initialisation, client sampling and batch order.
    """

    def __init__(self, algorithm="fedgen", n_clients=10, client_fraction=1.0, rounds=30,
                 local_epochs=40, eta=0.001, lam=1.0, l1_weight=1e-6, mu=1e-3, alpha=10.0,
                 beta=0.1, delta=0.9, e_init=5, batch_size=64, hidden=DEFAULT_HIDDEN,
                 partition="stratified", variance_reduction="mean", disable_scaling=False,
                 disable_mask=False, disable_penalty=False, spurious_idx=(), random_state=0):
        self.algorithm = algorithm
        self.n_clients = n_clients
        self.client_fraction = client_fraction
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.eta = eta
        self.lam = lam
        self.l1_weight = l1_weight
        self.mu = mu
        self.alpha = alpha
        self.beta = beta
        self.delta = delta
        self.e_init = e_init
        self.batch_size = batch_size
        self.hidden = hidden
        self.partition = partition
        self.variance_reduction = variance_reduction
        self.disable_scaling = disable_scaling
        self.disable_mask = disable_mask
        self.disable_penalty = disable_penalty
        self.spurious_idx = spurious_idx
        self.random_state = random_state

    def _run_config(self) -> RunConfig:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        return RunConfig(
            algorithm=self.algorithm, n_clients=self.n_clients,
            client_fraction=self.client_fraction, rounds=self.rounds,
            local_epochs=self.local_epochs, eta=self.eta, lam=self.lam, l1_weight=self.l1_weight,
            mu=self.mu, alpha=self.alpha, beta=self.beta, delta=self.delta, e_init=self.e_init,
            batch_size=self.batch_size, hidden=tuple(self.hidden), seed=int(self.random_state),
            partition=self.partition, variance_reduction=self.variance_reduction,
            disable_scaling=self.disable_scaling, disable_mask=self.disable_mask,
            disable_penalty=self.disable_penalty,
        )

    def fit(self, X, y, environments=None):
        """Train on ``X, y``.

        ``environments`` is an optional per-row label naming the training
        distribution of each sample; all rows form one distribution if omitted.
        """
        config = self._run_config()
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need samples of at least two classes")
        if environments is None:
            environments = np.zeros(len(y), dtype=int)
        environments = np.asarray(environments)
        if environments.shape != (len(y),):
            raise ValueError(f"environments must have one entry per row, got shape "
                             f"{environments.shape} for {len(y)} rows")
        C = len(self.classes_)
        envs = []
        for i, label in enumerate(np.unique(environments)):
            rows = environments == label
            envs.append(Environment(X[rows], y_enc[rows], float("nan"), tuple(self.spurious_idx),
                                    f"env{i}", C))
        result = run_training(config, envs)
        self.n_features_in_ = X.shape[1]
        self.params_ = result.params
        self.mask_logits_ = result.mask_logits
        self.history_ = result.reports
        return self

    def _gating(self):
        if self.algorithm != "fedgen" or self.disable_mask:
            return None
        return self.mask_logits_

    def _validate(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, model was fitted with "
                             f"{self.n_features_in_}")
        return X

    @property
    def feature_gates_(self) -> np.ndarray:
        """Per-feature gate in (0, 1); all ones when the algorithm has no mask."""
        check_is_fitted(self, "params_")
        if self._gating() is None:
            return np.ones(self.n_features_in_)
        return sigmoid(self.mask_logits_)

    def predict_proba(self, X):
        X = self._validate(X)
        return predict_proba(self.params_, X, self._gating())

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]

    def transform(self, X):
        """Inputs scaled by the learned feature gates."""
        X = self._validate(X)
        return X * self.feature_gates_
