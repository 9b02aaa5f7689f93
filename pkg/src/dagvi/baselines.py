"""Permutation-based DAG samplers and the sampling-time benchmark.

Both baselines draw a relaxed permutation, harden it, and return the DAG
``Pi.T @ U @ Pi`` with ``U`` the strictly upper-triangular all-ones mask.
The Sinkhorn baseline hardens greedily (row by row, excluding used columns)
instead of with the Hungarian algorithm.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .sampler import PosteriorParams, sample_dag

__all__ = [
    "PermutationSample",
    "baseline_sinkhorn_sample",
    "baseline_topk_sample",
    "permutation_matrix",
    "dag_from_permutation",
    "BenchResult",
    "bench_sampling",
    "SAMPLERS",
]


@dataclass
class PermutationSample:
    relaxed: np.ndarray
    permutation: np.ndarray
    dag: np.ndarray
    seconds: float


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    d = len(perm)
    P = np.zeros((d, d))
    P[np.arange(d), perm] = 1.0
    return P


def dag_from_permutation(P: np.ndarray) -> np.ndarray:
    d = P.shape[0]
    U = np.triu(np.ones((d, d)), k=1)
    return P.T @ U @ P


def _greedy_match(relaxed: np.ndarray) -> np.ndarray:
    scores = relaxed.copy()
    perm = np.empty(scores.shape[0], dtype=np.int64)
    for i in range(scores.shape[0]):
        j = int(np.argmax(scores[i]))
        perm[i] = j
        scores[:, j] = -np.inf
    return perm


def baseline_sinkhorn_sample(logits, iterations: int = 20, tau: float = 1.0, rng=None) -> PermutationSample:
    """Gumbel-Sinkhorn draw with log-space row/column normalisation."""
    start = time.perf_counter()
    rng = np.random.default_rng(rng)
    logits = np.asarray(logits, dtype=np.float64)
    log_alpha = (logits + rng.gumbel(size=logits.shape)) / tau
    for _ in range(iterations):
        log_alpha = log_alpha - logsumexp(log_alpha, axis=1, keepdims=True)
        log_alpha = log_alpha - logsumexp(log_alpha, axis=0, keepdims=True)
    relaxed = np.exp(log_alpha)
    perm = _greedy_match(relaxed)
    P = permutation_matrix(perm)
    dag = dag_from_permutation(P)
    return PermutationSample(relaxed, P, dag, time.perf_counter() - start)


def baseline_topk_sample(scores, tau: float = 1.0, rng=None) -> PermutationSample:
    """Gumbel-Top-k draw relaxed with SoftSort.

    Row ``i`` of the relaxed matrix is a softmax over ``-|sorted_i - s_j| / tau``
    where ``sorted`` is the perturbed scores in decreasing order.
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    start = time.perf_counter()
    rng = np.random.default_rng(rng)
    s = np.asarray(scores, dtype=np.float64) + rng.gumbel(size=len(scores))
    order = np.argsort(-s, kind="stable")
    logits = -np.abs(s[order][:, None] - s[None, :]) / tau
    relaxed = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
    P = permutation_matrix(order)
    dag = dag_from_permutation(P)
    return PermutationSample(relaxed, P, dag, time.perf_counter() - start)


def _time_proposed(d, rng):
    params = PosteriorParams.from_arrays(rng.normal(size=(d, d)), rng.normal(size=d), np.log(0.1))
    start = time.perf_counter()
    sample_dag(params, rng)
    return time.perf_counter() - start


def _time_sinkhorn(d, rng):
    logits = rng.normal(size=(d, d))
    return baseline_sinkhorn_sample(logits, rng=rng).seconds


def _time_topk(d, rng):
    return baseline_topk_sample(rng.normal(size=d), rng=rng).seconds


SAMPLERS = {
    "proposed": _time_proposed,
    "gumbel_sinkhorn": _time_sinkhorn,
    "gumbel_topk": _time_topk,
}


@dataclass
class BenchResult:
    rows: list[tuple[str, int, int, float]]

    def medians(self) -> dict[tuple[str, int], float]:
        out = {}
        for name in dict.fromkeys(r[0] for r in self.rows):
            for d in sorted({r[1] for r in self.rows if r[0] == name}):
                out[name, d] = float(np.median([r[3] for r in self.rows if r[0] == name and r[1] == d]))
        return out

    def iqr(self, sampler: str, d: int) -> float:
        secs = [r[3] for r in self.rows if r[0] == sampler and r[1] == d]
        q1, q3 = np.percentile(secs, [25, 75])
        return float(q3 - q1)

    def slope(self, sampler: str) -> float:
        """Least-squares slope of log(median seconds) against log(d)."""
        med = self.medians()
        dims = sorted(d for (s, d) in med if s == sampler)
        x = np.log(dims)
        y = np.log([med[sampler, d] for d in dims])
        return float(np.polyfit(x, y, 1)[0])

    def summary(self) -> list[dict]:
        med = self.medians()
        out = []
        for (name, d), m in med.items():
            out.append({"sampler": name, "d": d, "median": m, "iqr": self.iqr(name, d)})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sampler", "d", "rep", "seconds"])
            for row in self.rows:
                w.writerow([row[0], row[1], row[2], repr(row[3])])


def bench_sampling(dims, reps: int = 20, seed: int = 0, samplers=None) -> BenchResult:
    """Wall-clock of one full sample per (sampler, d, repetition)."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("need at least two dimensions to fit a slope")
    if reps < 5:
        raise ValueError("need at least 5 repetitions")
    names = list(samplers or SAMPLERS)
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    rng = np.random.default_rng(seed)
    rows = []
    ctx = threadpool_limits(limits=1) if threadpool_limits else _nullctx()
    with ctx:
        for name in names:
            fn = SAMPLERS[name]
            for d in dims:
                fn(d, rng)  # warm-up
                for rep in range(reps):
                    rows.append((name, d, rep, fn(d, rng)))
    return BenchResult(rows)


class _nullctx:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None
