"""Variational inference over DAGs: mechanisms, ELBO and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Adam, Tape, Tensor
from .sampler import AdjacencySample, PosteriorParams, is_acyclic, sample_dag

__all__ = [
    "FunctionalModels",
    "PriorSpec",
    "TrainConfig",
    "TrainResult",
    "ElboTerms",
    "TrainingDivergedError",
    "reconstruct",
    "recon_loss",
    "kl_edges",
    "kl_scores",
    "elbo_loss",
    "validation_elbo",
    "train",
    "train_arrays",
    "LR_GRID",
    "LearningRateSearch",
    "search_learning_rate",
    "save_result",
    "load_result",
]

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory or []


@dataclass
class PriorSpec:
    edge_prob: float = 0.01
    score_mean: float = 0.0
    score_scale: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.edge_prob < 1.0:
            raise ValueError(f"edge prior probability must be in (0, 1), got {self.edge_prob}")
        if not self.score_scale > 0:
            raise ValueError(f"score prior scale must be positive, got {self.score_scale}")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    t: float = 0.3
    tau: float = 1.0
    kl_edge_weight: float = 1.0
    kl_score_weight: float = 1.0
    batch_size: int = 64
    max_epochs: int = 500
    check_every: int = 10
    patience: int = 5
    weight_decay: float = 1e-4
    seed: int = 0
    mechanism: str = "linear"
    hidden: int = 32
    val_samples: int = 8
    samples_per_batch: int = 1
    per_dim_scale: bool = False
    init_edge_logit: float = -1.0
    time_budget: float | None = None
    debug: bool = False

    def __post_init__(self):
        if not (self.t > 0 and self.tau > 0):
            raise ValueError("temperatures must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_edge_weight < 0 or self.kl_score_weight < 0:
            raise ValueError("KL weights must be non-negative")
        if self.mechanism not in ("linear", "mlp"):
            raise ValueError(f"unknown mechanism kind {self.mechanism!r}")
        if self.mechanism == "mlp" and self.hidden < 1:
            raise ValueError("hidden width must be >= 1")

    @classmethod
    def from_dict(cls, payload: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**payload)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FunctionalModels:
    """Per-node mechanisms, stored stacked over nodes.

    linear: ``coef[j, i]`` is the weight of parent ``j`` in node ``i``.
    mlp: ``w1[i, j, :]`` maps parent ``j`` into node ``i``'s hidden layer.
    """

    kind: str
    params: dict[str, Tensor]
    hidden: int = 0

    @classmethod
    def initialize(cls, kind: str, d: int, rng, hidden: int = 32) -> FunctionalModels:
        bound = 1.0 / np.sqrt(d)
        if kind == "linear":
            params = {
                "coef": Tensor(rng.uniform(-bound, bound, size=(d, d)), requires_grad=True),
                "bias": Tensor(np.zeros(d), requires_grad=True),
            }
            return cls(kind, params, 0)
        if kind == "mlp":
            hb = 1.0 / np.sqrt(hidden)
            params = {
                "w1": Tensor(rng.uniform(-bound, bound, size=(d, d, hidden)), requires_grad=True),
                "b1": Tensor(np.zeros((d, hidden)), requires_grad=True),
                "w2": Tensor(rng.uniform(-hb, hb, size=(d, hidden)), requires_grad=True),
                "b2": Tensor(np.zeros(d), requires_grad=True),
            }
            return cls(kind, params, hidden)
        raise ValueError(f"unknown mechanism kind {kind!r}")

    @property
    def d(self) -> int:
        return self.params["bias" if self.kind == "linear" else "b2"].shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {f"theta.{k}": v for k, v in self.params.items()}

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "hidden": self.hidden,
            "params": {k: v.data.tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, payload: dict) -> FunctionalModels:
        params = {k: Tensor(v) for k, v in payload["params"].items()}
        return cls(payload["kind"], params, payload.get("hidden", 0))

    def copy(self) -> FunctionalModels:
        return FunctionalModels(self.kind, {k: Tensor(v.data.copy()) for k, v in self.params.items()}, self.hidden)

    def predict(self, X: np.ndarray, A: np.ndarray) -> np.ndarray:
        """Reconstruction under a fixed binary adjacency, outside any tape."""
        return reconstruct(self, Tensor(X), Tensor(A)).data


def reconstruct(models: FunctionalModels, X, A) -> Tensor:
    """Predict every node from its parents under adjacency ``A``.

    Column ``i`` of ``A`` masks the inputs of node ``i``. Masking the weights
    instead of the inputs is equivalent and keeps the batch dimension out of
    the masked product.
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    A = A if isinstance(A, Tensor) else Tensor(A)
    d = models.d
    if X.shape[1] != d or A.shape != (d, d):
        raise dc.ShapeError(f"reconstruct: incompatible shapes {X.shape} and {A.shape}")
    p = models.params
    if models.kind == "linear":
        return dc.add(dc.matmul(X, dc.mul(A, p["coef"])), p["bias"])
    masked = dc.mul(dc.reshape(dc.transpose(A), (d, d, 1)), p["w1"])
    hidden = dc.relu(dc.add(dc.einsum("bj,ijh->bih", X, masked), p["b1"]))
    return dc.add(dc.einsum("bih,ih->bi", hidden, p["w2"]), p["b2"])


def recon_loss(X, X_hat) -> Tensor:
    """Sum of squared residuals."""
    X = X if isinstance(X, Tensor) else Tensor(X)
    if X.shape != X_hat.shape:
        raise dc.ShapeError(f"recon_loss: incompatible shapes {X.shape} and {X_hat.shape}")
    return dc.sum(dc.square(dc.sub(X, X_hat)))


def kl_edges(params: PosteriorParams, prior: PriorSpec) -> Tensor:
    """Bernoulli KL summed over off-diagonal edges, in log-sigmoid form."""
    phi = params.edge_logits
    d = params.d
    rho = prior.edge_prob
    theta = dc.sigmoid(phi)
    log_theta = dc.neg(dc.softplus(dc.neg(phi)))
    log_not_theta = dc.neg(dc.softplus(phi))
    present = dc.mul(theta, dc.sub(log_theta, np.log(rho)))
    absent = dc.mul(dc.sub(1.0, theta), dc.sub(log_not_theta, np.log1p(-rho)))
    return dc.sum(dc.mul(dc.add(present, absent), 1.0 - np.eye(d)))


def kl_scores(params: PosteriorParams, prior: PriorSpec) -> Tensor:
    """KL(N(mu, sigma^2 I) || N(m, s^2 I)) summed over dimensions."""
    d = params.d
    s = prior.score_scale
    log_sigma = dc.mul(params.score_log_scale, np.ones(d))
    var = dc.exp(dc.mul(log_sigma, 2.0))
    centred = dc.square(dc.sub(params.score_mean, prior.score_mean))
    per_dim = dc.add(dc.sub(np.log(s), log_sigma), dc.mul(dc.add(var, centred), 1.0 / (2.0 * s * s)))
    return dc.sub(dc.sum(per_dim), 0.5 * d)


@dataclass
class ElboTerms:
    elbo: Tensor
    recon: float
    kl_edges: float
    kl_scores: float

    def as_row(self) -> dict:
        return {
            "elbo": float(self.elbo.data),
            "recon": self.recon,
            "kl_edges": self.kl_edges,
            "kl_scores": self.kl_scores,
        }


def elbo_loss(X_batch, sample: AdjacencySample, models, params, prior, config: TrainConfig) -> ElboTerms:
    """(-recon - w1 * KL_edges - w2 * KL_scores) / d, to be maximised."""
    d = params.d
    parts = {}
    try:
        parts["recon"] = recon_loss(X_batch, reconstruct(models, X_batch, sample.value))
        parts["kl_edges"] = kl_edges(params, prior)
        parts["kl_scores"] = kl_scores(params, prior)
    except FloatingPointError as exc:
        done = {k: float(v.data) for k, v in parts.items()}
        raise FloatingPointError(f"ELBO became non-finite ({exc}); finished components: {done}") from exc
    total = dc.add(
        dc.add(parts["recon"], dc.mul(parts["kl_edges"], config.kl_edge_weight)),
        dc.mul(parts["kl_scores"], config.kl_score_weight),
    )
    elbo = dc.mul(total, -1.0 / d)
    return ElboTerms(elbo, float(parts["recon"].data), float(parts["kl_edges"].data), float(parts["kl_scores"].data))


def validation_elbo(X, models, params, prior, config, rng, n_samples=None) -> dict:
    """Average ELBO components over several hard posterior draws."""
    n_samples = n_samples or config.val_samples
    rows = []
    for _ in range(n_samples):
        sample = sample_dag(params, rng, config.t, config.tau)
        rows.append(elbo_loss(X, sample, models, params, prior, config).as_row())
    return {k: float(np.mean([r[k] for r in rows])) for k in rows[0]}


@dataclass
class TrainResult:
    params: PosteriorParams
    models: FunctionalModels
    trajectory: list[dict]
    stop_epoch: int
    best_epoch: int
    wall_clock: float
    stopped_by: str = "max_epochs"
    config: TrainConfig = field(default_factory=TrainConfig)


def _snapshot(params: PosteriorParams, models: FunctionalModels):
    return params.copy(), models.copy()


def train(dataset, config: TrainConfig | None = None, prior: PriorSpec | None = None) -> TrainResult:
    """Fit the variational posterior to a dataset's train split.

    ``dataset`` is anything exposing ``X_train`` and ``X_val`` (for example
    :class:`dagvi.sem.Dataset`) or a ``(X_train, X_val)`` pair.
    """
    if isinstance(dataset, (tuple, list)) and len(dataset) == 2:
        X_train, X_val = dataset
    elif hasattr(dataset, "X_train") and hasattr(dataset, "X_val"):
        X_train, X_val = dataset.X_train, dataset.X_val
    else:
        raise TypeError("dataset must expose X_train and X_val, or be an (X_train, X_val) pair")
    if X_val is None or len(X_val) == 0:
        raise ValueError("training needs a non-empty validation split")
    return train_arrays(X_train, X_val, config, prior)


def train_arrays(X_train, X_val, config: TrainConfig | None = None, prior: PriorSpec | None = None) -> TrainResult:
    """Maximise the ELBO with Adam, one DAG draw per mini-batch.

    Every ``check_every`` epochs the validation ELBO (averaged over
    ``val_samples`` draws) is evaluated; training stops after ``patience``
    checks without improvement and the best-validation parameters are
    returned.
    """
    config = config or TrainConfig()
    prior = prior or PriorSpec()
    X_train = np.asarray(X_train, dtype=np.float64)
    X_val = np.asarray(X_val, dtype=np.float64)
    n, d = X_train.shape
    rng = np.random.default_rng(config.seed)
    params = PosteriorParams.initialize(
        d, rng, edge_logit=config.init_edge_logit, score_scale=prior.score_scale, per_dim_scale=config.per_dim_scale
    )
    models = FunctionalModels.initialize(config.mechanism, d, rng, config.hidden)
    named = {**params.tensors(), **models.tensors()}
    opt = Adam(named, lr=config.lr, weight_decay=config.weight_decay)
    names = list(named)
    leaves = list(named.values())

    start = time.perf_counter()
    trajectory: list[dict] = []
    best = (-np.inf, 0, _snapshot(params, models))
    since_best = 0
    stopped_by = "max_epochs"
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n)
        sums = {"elbo": 0.0, "recon": 0.0, "kl_edges": 0.0, "kl_scores": 0.0}
        n_batches = 0
        for lo in range(0, n, config.batch_size):
            batch = X_train[order[lo:lo + config.batch_size]]
            with Tape() as tape:
                terms = []
                for _ in range(config.samples_per_batch):
                    sample = sample_dag(params, rng, config.t, config.tau)
                    if config.debug and not is_acyclic(sample.hard):
                        raise AssertionError("sampler produced a cyclic graph")
                    terms.append(elbo_loss(batch, sample, models, params, prior, config))
                objective = terms[0].elbo
                for extra in terms[1:]:
                    objective = dc.add(objective, extra.elbo)
                loss = dc.mul(objective, -1.0 / len(terms))
            grads = tape.backward(loss, leaves)
            opt.step(dict(zip(names, grads)))
            for leaf in leaves:
                leaf.zero_grad()
            for term in terms:
                for k, v in term.as_row().items():
                    sums[k] += v / len(terms)
            n_batches += 1
        row = {"epoch": epoch, "train_elbo": sums["elbo"] / n_batches}
        row.update({k: sums[k] / n_batches for k in ("recon", "kl_edges", "kl_scores")})
        row["val_elbo"] = None
        if epoch % config.check_every == 0 or epoch == config.max_epochs:
            val = validation_elbo(X_val, models, params, prior, config, rng)
            row["val_elbo"] = val["elbo"]
            if not np.isfinite(val["elbo"]):
                trajectory.append(row)
                raise TrainingDivergedError(f"validation ELBO diverged at epoch {epoch}", trajectory)
            if val["elbo"] > best[0]:
                best = (val["elbo"], epoch, _snapshot(params, models))
                since_best = 0
            else:
                since_best += 1
            log.debug("epoch %d train %.4f val %.4f", epoch, row["train_elbo"], val["elbo"])
        trajectory.append(row)
        if since_best >= config.patience:
            stopped_by = "early_stopping"
            break
        if config.time_budget is not None and time.perf_counter() - start > config.time_budget:
            stopped_by = "time_budget"
            break
    if best[1] == 0:
        best = (-np.inf, epoch, _snapshot(params, models))
    best_params, best_models = best[2]
    return TrainResult(
        params=best_params,
        models=best_models,
        trajectory=trajectory,
        stop_epoch=epoch,
        best_epoch=best[1],
        wall_clock=time.perf_counter() - start,
        stopped_by=stopped_by,
        config=config,
    )


LR_GRID = (1e-3, 3e-3, 1e-2, 3e-2, 1e-1)


@dataclass
class LearningRateSearch:
    best: TrainResult
    lr: float
    scores: list[tuple[float, float]]  # (lr, selection ELBO) in grid order


def search_learning_rate(
    dataset,
    config: TrainConfig | None = None,
    prior: PriorSpec | None = None,
    grid=LR_GRID,
    selection_samples: int = 32,
) -> LearningRateSearch:
    """Train once per learning rate and keep the run with the best validation ELBO.

    Each candidate gets its own initialisation seed derived from
    ``(config.seed, k)``: the initial priority scores largely fix which
    orientation a run converges to, so the grid doubles as a set of restarts.
    The selection ELBO is re-estimated with ``selection_samples`` draws from a
    generator seeded by ``config.seed``, so the winner is deterministic.
    """
    config = config or TrainConfig()
    prior = prior or PriorSpec()
    grid = [float(lr) for lr in grid]
    if not grid or any(lr <= 0 for lr in grid):
        raise ValueError(f"learning-rate grid must be non-empty and positive, got {grid}")
    X_val = dataset[1] if isinstance(dataset, (tuple, list)) else dataset.X_val
    best, scores = None, []
    for k, lr in enumerate(grid):
        seed = int(np.random.SeedSequence([config.seed, k]).generate_state(1)[0])
        cfg = TrainConfig.from_dict({**config.to_dict(), "lr": lr, "seed": seed})
        result = train(dataset, cfg, prior)
        val = validation_elbo(
            np.asarray(X_val, dtype=np.float64), result.models, result.params, prior, cfg,
            np.random.default_rng(config.seed), selection_samples,
        )["elbo"]
        scores.append((lr, val))
        log.info("lr %.4g: selection ELBO %.5f", lr, val)
        if best is None or val > best[0]:
            best = (val, lr, result)
    return LearningRateSearch(best=best[2], lr=best[1], scores=scores)


TRAJECTORY_COLUMNS = ["epoch", "train_elbo", "val_elbo", "recon", "kl_edges", "kl_scores"]


def save_result(result: TrainResult, directory, extra_config: dict | None = None) -> Path:
    """Write params.json, trajectory.csv and config.json."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    payload = {
        "posterior": result.params.to_dict(),
        "theta": result.models.to_dict(),
        "shapes": {
            **{k: list(v.shape) for k, v in result.params.tensors().items()},
            **{k: list(v.shape) for k, v in result.models.tensors().items()},
        },
        "stop_epoch": result.stop_epoch,
        "best_epoch": result.best_epoch,
        "stopped_by": result.stopped_by,
    }
    with open(directory / "params.json", "w") as fh:
        json.dump(payload, fh)
    with open(directory / "trajectory.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in result.trajectory:
            w.writerow({k: ("" if row.get(k) is None else repr(row[k])) for k in TRAJECTORY_COLUMNS})
    with open(directory / "config.json", "w") as fh:
        json.dump({**result.config.to_dict(), **(extra_config or {})}, fh, indent=2, sort_keys=True)
    return directory


def load_result(directory) -> tuple[PosteriorParams, FunctionalModels, dict]:
    directory = Path(directory)
    for name in ("params.json", "config.json"):
        if not (directory / name).exists():
            raise FileNotFoundError(f"run directory {directory} is missing {name}")
    with open(directory / "params.json") as fh:
        payload = json.load(fh)
    with open(directory / "config.json") as fh:
        config = json.load(fh)
    return PosteriorParams.from_dict(payload["posterior"]), FunctionalModels.from_dict(payload["theta"]), config
