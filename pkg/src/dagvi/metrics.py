"""Posterior summaries and structure/fit metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .sampler import PosteriorParams, sample_dag
from .vi import FunctionalModels

__all__ = [
    "ScoreMatrix",
    "MetricsReport",
    "mean_edge_probs",
    "auc_roc",
    "auc_pr",
    "heldout_mse",
]


@dataclass
class ScoreMatrix:
    S: np.ndarray
    M: int


@dataclass
class MetricsReport:
    auc_roc: float | None
    auc_pr: float | None
    heldout_mse: float | None
    M: int
    seed: int | None
    dataset_id: str | None = None

    def to_dict(self) -> dict:
        return {
            "auc_roc": self.auc_roc,
            "auc_pr": self.auc_pr,
            "mse": self.heldout_mse,
            "M": self.M,
            "seed": self.seed,
            "dataset_id": self.dataset_id,
        }


def posterior_draws(params: PosteriorParams, t: float, tau: float, M: int, rng) -> np.ndarray:
    draws = np.empty((M, params.d, params.d))
    for m in range(M):
        draws[m] = sample_dag(params, rng, t, tau).hard
    return draws


def mean_edge_probs(params: PosteriorParams, t: float = 0.3, tau: float = 1.0, M: int = 100, rng=None) -> ScoreMatrix:
    """Edge frequencies over ``M`` hard posterior draws."""
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(rng)
    return ScoreMatrix(posterior_draws(params, t, tau, M, rng).mean(axis=0), M)


def _offdiag(S, truth):
    S = np.asarray(getattr(S, "S", S), dtype=np.float64)
    truth = np.asarray(truth)
    if S.shape != truth.shape or S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score/truth shape mismatch: {S.shape} vs {truth.shape}")
    keep = ~np.eye(S.shape[0], dtype=bool)
    return S[keep], truth[keep] != 0


def auc_roc(S, truth) -> float | None:
    """Mann-Whitney AUC over off-diagonal entries with midranks for ties.

    Returns None when the labels are all positive or all negative.
    """
    scores, labels = _offdiag(S, truth)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(S, truth) -> float | None:
    """Average precision over off-diagonal entries, tied scores grouped."""
    scores, labels = _offdiag(S, truth)
    n_pos = int(labels.sum())
    if n_pos == 0:
        return None
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]
    tp = np.cumsum(labels)
    # the last index of each run of equal scores is a threshold
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    tp_at = tp[ends]
    precision = tp_at / (ends + 1.0)
    recall_gain = np.diff(np.r_[0, tp_at]) / n_pos
    return float(np.sum(recall_gain * precision))


def heldout_mse(
    models: FunctionalModels,
    params: PosteriorParams,
    X_test,
    t: float = 0.3,
    tau: float = 1.0,
    M: int = 100,
    rng=None,
    mode: str = "sampled",
) -> float:
    """Mean squared residual per entry of ``X_test``.

    ``sampled`` averages over ``M`` posterior DAGs; ``mode`` thresholds the
    edge frequencies at 0.5 and evaluates that single graph.
    """
    rng = np.random.default_rng(rng)
    X_test = np.asarray(X_test, dtype=np.float64)
    draws = posterior_draws(params, t, tau, M, rng)
    if mode == "sampled":
        return float(np.mean([np.mean((X_test - models.predict(X_test, A)) ** 2) for A in draws]))
    if mode == "mode":
        A = (draws.mean(axis=0) > 0.5).astype(np.float64)
        return float(np.mean((X_test - models.predict(X_test, A)) ** 2))
    raise ValueError(f"unknown MSE mode {mode!r}")
