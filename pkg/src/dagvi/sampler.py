"""Differentiable sampling of acyclic binary adjacency matrices.

A DAG is drawn as ``A = W * topo(p)``: ``W`` is a binary edge matrix from a
two-class Gumbel-Softmax over edge logits and ``topo(p)`` is the complete DAG
induced by a vector of priority scores ``p``. Edges only go from lower to
higher score, so every draw is acyclic without any constraint on the
parameters. The forward pass is hard (binary); gradients flow through the
soft relaxation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import diffcore as dc
from .diffcore import Tensor

__all__ = [
    "PosteriorParams",
    "TopoMatrix",
    "EdgeSample",
    "AdjacencySample",
    "CyclicGraphError",
    "grad_matrix",
    "priority_ranks",
    "topological_matrix",
    "sample_priority",
    "sample_edges",
    "compose_dag",
    "construct_from_dag",
    "topological_order",
    "is_acyclic",
    "draw_noise",
    "sample_dag",
    "sample_dags_hard",
]


class CyclicGraphError(ValueError):
    """Raised when an operation needs a DAG and receives a cyclic graph."""


@dataclass
class PosteriorParams:
    """Variational parameters of the DAG distribution.

    ``score_log_scale`` is a scalar (isotropic Gaussian) unless built with
    ``per_dim_scale=True``, in which case it has one entry per node.
    """

    edge_logits: Tensor
    score_mean: Tensor
    score_log_scale: Tensor

    def __post_init__(self):
        d = self.edge_logits.shape[0]
        if self.edge_logits.shape != (d, d):
            raise ValueError(f"edge_logits must be square, got {self.edge_logits.shape}")
        if d < 2:
            raise ValueError("need at least 2 nodes")
        if self.score_mean.shape != (d,):
            raise ValueError(f"score_mean must have shape ({d},), got {self.score_mean.shape}")
        if self.score_log_scale.shape not in ((), (d,)):
            raise ValueError(f"score_log_scale must be scalar or ({d},), got {self.score_log_scale.shape}")
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t.data)):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def d(self) -> int:
        return self.edge_logits.shape[0]

    @classmethod
    def from_arrays(cls, edge_logits, score_mean, score_log_scale, requires_grad=False):
        return cls(
            Tensor(edge_logits, requires_grad=requires_grad),
            Tensor(score_mean, requires_grad=requires_grad),
            Tensor(score_log_scale, requires_grad=requires_grad),
        )

    @classmethod
    def initialize(cls, d, rng, edge_logit=-1.0, score_scale=0.1, per_dim_scale=False):
        log_scale = np.full(d, np.log(score_scale)) if per_dim_scale else np.log(score_scale)
        return cls.from_arrays(
            np.full((d, d), edge_logit),
            rng.normal(0.0, score_scale, size=d),
            log_scale,
            requires_grad=True,
        )

    def tensors(self) -> dict[str, Tensor]:
        return {
            "edge_logits": self.edge_logits,
            "score_mean": self.score_mean,
            "score_log_scale": self.score_log_scale,
        }

    def to_dict(self) -> dict:
        return {k: v.data.tolist() for k, v in self.tensors().items()}

    @classmethod
    def from_dict(cls, payload: dict, requires_grad=False) -> PosteriorParams:
        return cls.from_arrays(
            payload["edge_logits"], payload["score_mean"], payload["score_log_scale"], requires_grad
        )

    def copy(self) -> PosteriorParams:
        return PosteriorParams.from_arrays(
            self.edge_logits.data.copy(),
            self.score_mean.data.copy(),
            self.score_log_scale.data.copy(),
        )


@dataclass
class TopoMatrix:
    soft: Tensor
    hard: np.ndarray  # bool
    temperature: float
    scores: np.ndarray


@dataclass
class EdgeSample:
    hard: np.ndarray  # bool
    soft: Tensor
    temperature: float


@dataclass
class AdjacencySample:
    """One DAG draw.

    ``value`` is what downstream code consumes: the hard matrix carrying
    straight-through gradients, or the soft matrix on the relaxed path.
    """

    hard: np.ndarray
    soft: Tensor
    value: Tensor
    priority: np.ndarray
    edges: np.ndarray


def _off_diagonal(d: int) -> np.ndarray:
    return 1.0 - np.eye(d)


def grad_matrix(p) -> Tensor:
    """Pairwise score differences, entry (i, j) = p[j] - p[i]."""
    p = p if isinstance(p, Tensor) else Tensor(p)
    d = p.shape[0]
    return dc.sub(dc.reshape(p, (1, d)), dc.reshape(p, (d, 1)))


def priority_ranks(p: np.ndarray) -> np.ndarray:
    """Rank of each score, ties broken by node index (lower index first)."""
    order = np.argsort(p, kind="stable")
    ranks = np.empty(len(p), dtype=np.int64)
    ranks[order] = np.arange(len(p))
    return ranks


def _tempered_sigmoid(name, x: np.ndarray, t: float, source: Tensor, pullback) -> Tensor:
    """sigmoid(x / t) with a zeroed diagonal, recorded as one primitive.

    ``pullback(G)`` maps the gradient w.r.t. ``x`` onto ``source``.
    """
    out = np.multiply(x, 1.0 / t)
    expit(out, out=out)
    np.fill_diagonal(out, 0.0)

    def backward(g):
        return (pullback(g * out * (1.0 - out) / t),)

    return dc.make_op(name, out, (source,), backward)


def topological_matrix(p, t: float) -> TopoMatrix:
    """Tempered-sigmoid orientation matrix of the complete DAG induced by ``p``.

    ``soft = sigmoid(grad_matrix(p) / t)`` off the diagonal, zero on it.
    ``hard[i, j] = 1`` iff ``p[j] > p[i]``; it is computed from score ranks
    rather than by rounding ``soft`` so that it stays exact when the sigmoid
    saturates to 0.5 in floating point. Exact ties fall back to index order.
    """
    if not t > 0:
        raise ValueError(f"topological temperature must be positive, got {t}")
    p = p if isinstance(p, Tensor) else Tensor(p)
    diff = p.data[None, :] - p.data[:, None]
    soft = _tempered_sigmoid("topo_sigmoid", diff, t, p, lambda G: G.sum(axis=0) - G.sum(axis=1))
    ranks = priority_ranks(p.data)
    hard = ranks[None, :] > ranks[:, None]
    return TopoMatrix(soft=soft, hard=hard, temperature=float(t), scores=p.data.copy())


def sample_priority(params: PosteriorParams, noise) -> Tensor:
    """Reparameterised draw ``p = mu + exp(log_scale) * noise``."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != (params.d,):
        raise ValueError(f"expected {params.d} normal draws, got shape {noise.shape}")
    return dc.add(params.score_mean, dc.mul(dc.exp(params.score_log_scale), noise))


def sample_edges(params: PosteriorParams, tau: float, gumbel_noise) -> EdgeSample:
    """Two-class Gumbel-Softmax over {absent, present} for every ordered pair.

    ``gumbel_noise`` has shape ``(2, d, d)``: standard Gumbel draws for the
    "absent" (logit 0) and "present" (logit ``edge_logits``) classes. The
    two-class softmax equals a sigmoid of the perturbed logit difference.
    """
    if not tau > 0:
        raise ValueError(f"Gumbel-Softmax temperature must be positive, got {tau}")
    d = params.d
    g = np.asarray(gumbel_noise, dtype=np.float64)
    if g.shape != (2, d, d):
        raise ValueError(f"expected Gumbel noise of shape (2, {d}, {d}), got {g.shape}")
    perturbed = g[1] - g[0]
    perturbed += params.edge_logits.data
    soft = _tempered_sigmoid("gumbel_softmax", perturbed, tau, params.edge_logits, lambda G: G)
    # argmax[1 - soft, soft]; ties (soft == 0.5) go to "absent"
    hard = perturbed > 0
    np.fill_diagonal(hard, False)
    return EdgeSample(hard=hard, soft=soft, temperature=float(tau))


def compose_dag(edges: EdgeSample, topo: TopoMatrix, straight_through: bool = True) -> AdjacencySample:
    """Mask the edge sample with the orientation matrix.

    With ``straight_through`` the returned ``value`` is the binary matrix in
    the forward pass and backpropagates into ``edges.soft * topo.soft``;
    otherwise ``value`` is the soft product itself.
    """
    if edges.hard.shape != topo.hard.shape:
        raise ValueError(f"shape mismatch: edges {edges.hard.shape} vs topo {topo.hard.shape}")
    hard = (np.logical_and(edges.hard, topo.hard)).astype(np.float64)
    soft = dc.mul(edges.soft, topo.soft)
    value = dc.straight_through(hard, soft) if straight_through else soft
    return AdjacencySample(
        hard=hard, soft=soft, value=value, priority=topo.scores, edges=edges.hard.astype(np.float64)
    )


def topological_order(A) -> np.ndarray:
    """Kahn ordering of a binary adjacency matrix; raises on a cycle."""
    A = np.asarray(A) != 0
    d = A.shape[0]
    indeg = A.sum(axis=0).astype(np.int64)
    order = np.empty(d, dtype=np.int64)
    frontier = list(np.flatnonzero(indeg == 0)[::-1])
    k = 0
    while frontier:
        node = frontier.pop()
        order[k] = node
        k += 1
        children = np.flatnonzero(A[node])
        indeg[children] -= 1
        frontier.extend(children[indeg[children] == 0][::-1].tolist())
    if k < d:
        raise CyclicGraphError(f"graph has a cycle among {d - k} nodes")
    return order


def is_acyclic(A) -> bool:
    """True iff repeatedly removing zero in-degree nodes consumes the graph."""
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    A = A != 0
    if np.any(np.diagonal(A)):
        return False
    alive = np.ones(A.shape[0], dtype=bool)
    indeg = A.sum(axis=0).astype(np.int64)
    while alive.any():
        sources = alive & (indeg == 0)
        if not sources.any():
            return False
        alive &= ~sources
        indeg -= A[sources].sum(axis=0)
    return True


def construct_from_dag(A) -> tuple[EdgeSample, np.ndarray]:
    """Edge matrix and priority scores that reproduce the DAG ``A`` exactly.

    The scores give each node its position in a topological order.
    """
    A = np.asarray(A, dtype=np.float64)
    order = topological_order(A)
    p = np.empty(A.shape[0])
    p[order] = np.arange(A.shape[0], dtype=np.float64)
    edges = EdgeSample(hard=A != 0, soft=Tensor(A), temperature=0.0)
    return edges, p


def draw_noise(rng: np.random.Generator, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Standard normal score noise and paired Gumbel edge noise."""
    # -log of a unit exponential is standard Gumbel, and cheaper than rng.gumbel
    return rng.standard_normal(d), -np.log(rng.standard_exponential((2, d, d)))


def sample_dag(
    params: PosteriorParams,
    rng: np.random.Generator,
    t: float = 0.3,
    tau: float = 1.0,
    straight_through: bool = True,
    noise=None,
) -> AdjacencySample:
    """Full differentiable draw of one DAG."""
    z, g = draw_noise(rng, params.d) if noise is None else noise
    p = sample_priority(params, z)
    topo = topological_matrix(p, t)
    edges = sample_edges(params, tau, g)
    return compose_dag(edges, topo, straight_through=straight_through)


def sample_dags_hard(params: PosteriorParams, rng: np.random.Generator, m: int) -> np.ndarray:
    """``m`` binary DAG draws without the relaxation.

    The Gumbel-argmax of the two-class relaxation is Bernoulli with
    probability ``sigmoid(edge_logits)``, so each edge is drawn with a single
    uniform. Orientation uses the same rank rule as :func:`topological_matrix`.
    """
    d = params.d
    prob = expit(params.edge_logits.data) * _off_diagonal(d)
    scale = np.exp(params.score_log_scale.data)
    out = np.empty((m, d, d))
    for k in range(m):
        p = params.score_mean.data + scale * rng.standard_normal(d)
        ranks = priority_ranks(p)
        out[k] = (rng.random((d, d)) < prob) & (ranks[None, :] > ranks[:, None])
    return out
