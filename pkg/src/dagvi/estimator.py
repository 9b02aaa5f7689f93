"""scikit-learn style front end for variational DAG learning."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .metrics import heldout_mse, mean_edge_probs, posterior_draws
from .sampler import PosteriorParams
from .validation import check_lr_grid, check_observations
from .vi import FunctionalModels, PriorSpec, TrainConfig, search_learning_rate, train_arrays

__all__ = ["VariationalDAGLearner"]


class VariationalDAGLearner(BaseEstimator):
    """Learn a posterior over DAGs from observational data.

    ``fit`` holds out ``validation_fraction`` of the rows for early stopping
    unless an explicit ``X_val`` is passed. With ``lr_grid`` set, one run is
    trained per learning rate and the best by validation ELBO is kept.

    Fitted attributes: ``posterior_`` (:class:`PosteriorParams`), ``models_``,
    ``edge_probs_`` (d x d frequencies over ``n_eval_samples`` draws),
    ``train_result_`` and ``n_features_in_``.

    Examples
    --------
    >>> import numpy as np
    >>> rng = np.random.default_rng(0)
    >>> x = rng.normal(size=(400, 1))
    >>> X = np.hstack([x, 1.5 * x + rng.normal(size=(400, 1))])
    >>> est = VariationalDAGLearner(max_epochs=60, random_state=0).fit(X)
    >>> est.edge_probs_.shape
    (2, 2)
    """

    def __init__(
        self,
        mechanism="linear",
        lr=1e-2,
        lr_grid=None,
        t=0.3,
        tau=1.0,
        kl_edge_weight=1.0,
        kl_score_weight=1.0,
        edge_prior=0.01,
        score_prior_scale=0.1,
        batch_size=64,
        max_epochs=500,
        check_every=10,
        patience=5,
        weight_decay=1e-4,
        hidden=32,
        validation_fraction=0.2,
        n_eval_samples=100,
        random_state=0,
    ):
        self.mechanism = mechanism
        self.lr = lr
        self.lr_grid = lr_grid
        self.t = t
        self.tau = tau
        self.kl_edge_weight = kl_edge_weight
        self.kl_score_weight = kl_score_weight
        self.edge_prior = edge_prior
        self.score_prior_scale = score_prior_scale
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.check_every = check_every
        self.patience = patience
        self.weight_decay = weight_decay
        self.hidden = hidden
        self.validation_fraction = validation_fraction
        self.n_eval_samples = n_eval_samples
        self.random_state = random_state

    def _seed(self) -> int:
        if self.random_state is None:
            return int(np.random.default_rng().integers(2**31))
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        raise ValueError("random_state must be an int or None")

    def _config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            lr=self.lr, t=self.t, tau=self.tau,
            kl_edge_weight=self.kl_edge_weight, kl_score_weight=self.kl_score_weight,
            batch_size=self.batch_size, max_epochs=self.max_epochs,
            check_every=self.check_every, patience=self.patience,
            weight_decay=self.weight_decay, seed=seed,
            mechanism=self.mechanism, hidden=self.hidden,
        )

    def fit(self, X, y=None, X_val=None):
        X = check_observations(X)
        seed = self._seed()
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must be in (0, 1)")
            order = np.random.default_rng(seed).permutation(len(X))
            n_val = max(1, int(round(self.validation_fraction * len(X))))
            X, X_val = X[order[n_val:]], X[order[:n_val]]
        else:
            X_val = check_observations(X_val, "X_val", min_samples=1, n_features=X.shape[1])
        config = self._config(seed)
        prior = PriorSpec(edge_prob=self.edge_prior, score_scale=self.score_prior_scale)
        if self.lr_grid is None:
            result = train_arrays(X, X_val, config, prior)
            self.lr_ = self.lr
        else:
            search = search_learning_rate((X, X_val), config, prior, grid=check_lr_grid(self.lr_grid))
            result, self.lr_ = search.best, search.lr
            self.lr_scores_ = search.scores
        self.train_result_ = result
        self.posterior_: PosteriorParams = result.params
        self.models_: FunctionalModels = result.models
        self.n_features_in_ = X.shape[1]
        self.edge_probs_ = mean_edge_probs(self.posterior_, self.t, self.tau, self.n_eval_samples, rng=seed).S
        return self

    def sample_dags(self, n_samples: int = 1, random_state=None) -> np.ndarray:
        """Hard adjacency matrices drawn from the fitted posterior, shape (n, d, d)."""
        check_is_fitted(self, "posterior_")
        return posterior_draws(self.posterior_, self.t, self.tau, int(n_samples), np.random.default_rng(random_state))

    def predict(self, X, adjacency=None) -> np.ndarray:
        """Reconstruct every column from its parents.

        Uses ``adjacency`` when given, otherwise the posterior edge
        frequencies thresholded at 0.5.
        """
        check_is_fitted(self, "posterior_")
        X = check_observations(X, min_samples=1, n_features=self.n_features_in_)
        A = (self.edge_probs_ > 0.5).astype(np.float64) if adjacency is None else np.asarray(adjacency, dtype=np.float64)
        return self.models_.predict(X, A)

    def score(self, X, y=None) -> float:
        """Negative held-out MSE averaged over ``n_eval_samples`` posterior graphs."""
        check_is_fitted(self, "posterior_")
        X = check_observations(X, min_samples=1, n_features=self.n_features_in_)
        mse = heldout_mse(self.models_, self.posterior_, X, self.t, self.tau, self.n_eval_samples, rng=self._seed())
        return -mse
