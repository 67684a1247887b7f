"""Scikit-learn style estimators wrapping the federated trainer.

`FedBIADClassifier` fits flat feature vectors (feed-forward model) or
integer token sequences (recurrent model, one row per sequence); the data
is partitioned across simulated clients inside ``fit``.  `FedBIADRegressor`
does the same for real-valued targets.  Both expose ``get_params`` /
``set_params`` and compose with pipelines, grid search, and `clone`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import (
    IMAGE_CLASS,
    SEQ_NEXT_TOKEN,
    TEACHER_REGRESSION,
    Dataset,
    partition_iid,
    partition_noniid,
)
from .federation import FedConfig, FederatedTrainer, VariationalSettings
from .nn import MLP, RNN, ModelSpec, forward, softmax
from .strategies import TopKConfig

_TAG_PARTITION = 11


def _partition_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, _TAG_PARTITION]))


class _FederatedMixin:
    """Shared fit plumbing: build the config, partition, train, keep state."""

    def _fed_config(self) -> FedConfig:
        boundary = self.stage_boundary
        if boundary is None:
            boundary = max(1, self.rounds - 5)
        return FedConfig(
            K=self.n_clients,
            kappa=self.participation,
            V=self.local_iters,
            R=self.rounds,
            R_b=boundary,
            tau=self.tau,
            eta=self.learning_rate,
            seed=self.random_state,
            strategy=self.strategy,
            agg_mode=self.agg_mode,
            p=self.p,
        )

    def _train(self, dataset: Dataset, spec: ModelSpec):
        fed = self._fed_config()
        if self.partition == "iid":
            part = partition_iid(dataset, fed.K, _partition_rng(self.random_state))
        elif self.partition == "noniid":
            part = partition_noniid(
                dataset, fed.K, self.classes_per_client, _partition_rng(self.random_state)
            )
        else:
            raise ValueError(f"partition must be 'iid' or 'noniid', got {self.partition!r}")
        var = VariationalSettings(
            alpha=self.alpha,
            sigma2=self.sigma2,
            prior_var=self.prior_var,
            s2=self.posterior_variance,
            weight_bound=self.weight_bound,
        )
        topk = TopKConfig(self.topk_fraction) if self.topk_fraction else None
        trainer = FederatedTrainer(fed, spec, var, dataset, part, test=dataset, topk=topk)
        self.reports_ = trainer.run()
        self.global_means_ = trainer.server.global_means
        self.layout_ = trainer.layout
        return self


class FedBIADClassifier(_FederatedMixin, ClassifierMixin, BaseEstimator):
    """Federated classifier with Bayesian adaptive row dropout.

    Parameters mirror the round engine: ``strategy`` selects adaptive
    dropout or one of the baselines, ``p`` the dropout rate, and
    ``stage_boundary`` the round after which patterns are fixed from the
    accumulated row scores (default: five rounds before the end).
    """

    def __init__(
        self,
        strategy: str = "fedbiad",
        p: float = 0.2,
        rounds: int = 30,
        stage_boundary: int | None = None,
        n_clients: int = 20,
        participation: float = 0.5,
        local_iters: int = 10,
        tau: int = 3,
        learning_rate: float = 1e-3,
        model: str = MLP,
        hidden_dim: int = 64,
        n_layers: int = 1,
        alpha: float = 0.5,
        sigma2: float = 1.0,
        prior_var: float = 1.0,
        posterior_variance: float | str = "auto",
        weight_bound: float = 2.0,
        agg_mode: str = "literal",
        topk_fraction: float = 0.0,
        partition: str = "iid",
        classes_per_client: int = 2,
        random_state: int = 0,
    ):
        self.strategy = strategy
        self.p = p
        self.rounds = rounds
        self.stage_boundary = stage_boundary
        self.n_clients = n_clients
        self.participation = participation
        self.local_iters = local_iters
        self.tau = tau
        self.learning_rate = learning_rate
        self.model = model
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.alpha = alpha
        self.sigma2 = sigma2
        self.prior_var = prior_var
        self.posterior_variance = posterior_variance
        self.weight_bound = weight_bound
        self.agg_mode = agg_mode
        self.topk_fraction = topk_fraction
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.random_state = random_state

    def fit(self, X, y):
        if self.model == MLP:
            X, y = check_X_y(X, y, dtype=np.float64)
            self.classes_, encoded = np.unique(y, return_inverse=True)
            dataset = Dataset(X, encoded.astype(np.int64), IMAGE_CLASS, len(self.classes_))
            spec = ModelSpec(
                MLP, self.n_layers, X.shape[1], self.hidden_dim, len(self.classes_)
            )
        elif self.model == RNN:
            X, y = check_X_y(X, y, dtype="numeric")
            X = np.asarray(X)
            if not np.issubdtype(X.dtype, np.integer) and not np.allclose(X, X.astype(int)):
                raise ValueError("recurrent model expects integer token sequences")
            X = X.astype(np.int64)
            y = np.asarray(y).astype(np.int64)
            if X.min() < 0 or y.min() < 0:
                raise ValueError("token ids must be non-negative")
            vocab = int(max(X.max(), y.max())) + 1
            self.classes_ = np.arange(vocab)
            dataset = Dataset(X, y, SEQ_NEXT_TOKEN, vocab)
            spec = ModelSpec(RNN, X.shape[1], vocab, self.hidden_dim, vocab)
        else:
            raise ValueError(f"model must be '{MLP}' or '{RNN}', got {self.model!r}")
        self.n_features_in_ = X.shape[1]
        return self._train(dataset, spec)

    def decision_function(self, X):
        check_is_fitted(self, "global_means_")
        if self.model == RNN:
            X = np.asarray(check_array(X, dtype="numeric")).astype(np.int64)
            if X.min() < 0 or X.max() >= len(self.classes_):
                raise ValueError(
                    f"token ids must lie in [0, {len(self.classes_)}) as seen during fit"
                )
            X = np.eye(len(self.classes_))[X]
        else:
            X = check_array(X, dtype=np.float64)
        logits, _ = forward(self.global_means_, X)
        return logits

    def predict_proba(self, X):
        return softmax(self.decision_function(X))

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]


class FedBIADRegressor(_FederatedMixin, RegressorMixin, BaseEstimator):
    """Federated regressor counterpart (identity readout, squared error)."""

    def __init__(
        self,
        strategy: str = "fedbiad",
        p: float = 0.2,
        rounds: int = 30,
        stage_boundary: int | None = None,
        n_clients: int = 10,
        participation: float = 0.5,
        local_iters: int = 10,
        tau: int = 3,
        learning_rate: float = 1e-3,
        hidden_dim: int = 16,
        n_layers: int = 1,
        alpha: float = 0.5,
        sigma2: float = 1.0,
        prior_var: float = 1.0,
        posterior_variance: float | str = "auto",
        weight_bound: float = 2.0,
        agg_mode: str = "literal",
        topk_fraction: float = 0.0,
        partition: str = "iid",
        classes_per_client: int = 2,
        random_state: int = 0,
    ):
        self.strategy = strategy
        self.p = p
        self.rounds = rounds
        self.stage_boundary = stage_boundary
        self.n_clients = n_clients
        self.participation = participation
        self.local_iters = local_iters
        self.tau = tau
        self.learning_rate = learning_rate
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.alpha = alpha
        self.sigma2 = sigma2
        self.prior_var = prior_var
        self.posterior_variance = posterior_variance
        self.weight_bound = weight_bound
        self.agg_mode = agg_mode
        self.topk_fraction = topk_fraction
        self.partition = partition
        self.classes_per_client = classes_per_client
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, multi_output=True)
        self._single_output = y.ndim == 1
        targets = y[:, np.newaxis] if self._single_output else y
        dataset = Dataset(X, targets, TEACHER_REGRESSION)
        spec = ModelSpec(
            MLP,
            self.n_layers,
            X.shape[1],
            self.hidden_dim,
            targets.shape[1],
            readout_activation="identity",
        )
        self.n_features_in_ = X.shape[1]
        return self._train(dataset, spec)

    def predict(self, X):
        check_is_fitted(self, "global_means_")
        X = check_array(X, dtype=np.float64)
        out, _ = forward(self.global_means_, X)
        return out[:, 0] if self._single_output else out
