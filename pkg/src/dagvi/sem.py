"""Synthetic causal data: random DAGs, SEM mechanisms, dataset persistence."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from .sampler import is_acyclic, topological_order

__all__ = [
    "GroundTruthGraph",
    "Mechanism",
    "Dataset",
    "DatasetFormatError",
    "gen_er_dag",
    "gen_sf_dag",
    "gen_linear_mechanism",
    "simulate_linear",
    "simulate_gp",
    "make_dataset",
    "save_dataset",
    "load_dataset",
    "load_sachs",
    "SACHS_SHAPE",
]

SACHS_SHAPE = (853, 11)


class DatasetFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass
class GroundTruthGraph:
    adjacency: np.ndarray
    graph_family: str
    seed: int | None = None

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        if not is_acyclic(self.adjacency):
            raise ValueError("ground-truth graph must be acyclic")

    @property
    def d(self) -> int:
        return self.adjacency.shape[0]

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum())


@dataclass
class Mechanism:
    kind: str
    weights: np.ndarray | None = None
    noise_variance: float = 1.0
    kernel: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Observations plus row-index splits and optional ground truth."""

    X: np.ndarray
    splits: dict[str, np.ndarray]
    graph: GroundTruthGraph | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if not np.all(np.isfinite(self.X)):
            raise ValueError("dataset contains non-finite values")
        seen = set()
        for name, idx in self.splits.items():
            idx = self.splits[name] = np.asarray(idx, dtype=np.int64)
            overlap = seen.intersection(idx.tolist())
            if overlap:
                raise ValueError(f"split {name!r} overlaps another split")
            seen.update(idx.tolist())

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def split(self, name: str) -> np.ndarray:
        return self.X[self.splits[name]]

    @property
    def X_train(self):
        return self.split("train")

    @property
    def X_val(self):
        return self.split("val")

    @property
    def X_test(self):
        return self.split("test")

    @property
    def adjacency(self):
        return None if self.graph is None else self.graph.adjacency


# --- graphs -----------------------------------------------------------------


def gen_er_dag(d: int, expected_edges: float, rng: np.random.Generator) -> GroundTruthGraph:
    """Erdos-Renyi DAG: each order-respecting pair kept with equal probability."""
    max_edges = d * (d - 1) / 2
    if not 0 <= expected_edges <= max_edges:
        raise ValueError(f"expected_edges must lie in [0, {max_edges}], got {expected_edges}")
    prob = expected_edges / max_edges if max_edges else 0.0
    upper = np.triu(rng.random((d, d)) < prob, k=1).astype(np.float64)
    perm = rng.permutation(d)
    # node perm[k] sits at position k of the causal order
    A = np.zeros((d, d))
    A[np.ix_(perm, perm)] = upper
    return GroundTruthGraph(A, "er")


def gen_sf_dag(d: int, m: int, rng: np.random.Generator) -> GroundTruthGraph:
    """Preferential attachment: each arriving node links to ``m`` earlier nodes.

    Targets are chosen without replacement with probability proportional to
    degree + 1; edges point from the earlier node to the newcomer.
    """
    if m < 1:
        raise ValueError(f"attachment m must be >= 1, got {m}")
    A = np.zeros((d, d))
    degree = np.zeros(d)
    for new in range(1, d):
        k = min(m, new)
        weights = degree[:new] + 1.0
        targets = rng.choice(new, size=k, replace=False, p=weights / weights.sum())
        A[targets, new] = 1.0
        degree[targets] += 1.0
        degree[new] += k
    return GroundTruthGraph(A, "sf")


# --- mechanisms -------------------------------------------------------------


def gen_linear_mechanism(graph: GroundTruthGraph, rng: np.random.Generator) -> Mechanism:
    """Edge weights uniform on [-2, -0.5] U [0.5, 2]."""
    A = graph.adjacency
    magnitude = rng.uniform(0.5, 2.0, size=A.shape)
    sign = np.where(rng.random(A.shape) < 0.5, -1.0, 1.0)
    return Mechanism("linear", weights=A * magnitude * sign)


def simulate_linear(graph: GroundTruthGraph, mechanism: Mechanism, n: int, rng) -> np.ndarray:
    """Draw ``n`` rows of X_j = sum_i W_ij X_i + eps_j in topological order."""
    d = graph.d
    W = mechanism.weights
    X = np.zeros((n, d))
    noise = rng.normal(0.0, np.sqrt(mechanism.noise_variance), size=(n, d))
    for j in topological_order(graph.adjacency):
        X[:, j] = X @ W[:, j] + noise[:, j]
    return X


def _rbf_kernel(P: np.ndarray, lengthscale: float) -> np.ndarray:
    sq = np.sum(P * P, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * P @ P.T, 0.0)
    return np.exp(-dist / (2.0 * lengthscale**2))


def _gp_draw(K: np.ndarray, rng, jitter=1e-6, max_jitter=1e-3) -> np.ndarray:
    n = K.shape[0]
    z = rng.standard_normal(n)
    level = jitter
    while True:
        try:
            L = cholesky(K + level * np.eye(n), lower=True)
            return L @ z
        except LinAlgError:
            if level >= max_jitter:
                raise RuntimeError(
                    f"GP kernel ({n}x{n}) not positive definite even with jitter {level:g}"
                ) from None
            level *= 10.0


def simulate_gp(graph: GroundTruthGraph, n: int, rng, lengthscale: float = 1.0) -> np.ndarray:
    """X_j = f_j(parents) + eps_j with f_j a fresh GP draw under an RBF kernel."""
    d = graph.d
    A = graph.adjacency
    X = np.zeros((n, d))
    for j in topological_order(A):
        parents = np.flatnonzero(A[:, j])
        noise = rng.standard_normal(n)
        if parents.size == 0:
            X[:, j] = noise
            continue
        K = _rbf_kernel(X[:, parents], lengthscale)
        X[:, j] = _gp_draw(K, rng) + noise
    return X


def make_dataset(
    d: int,
    graph_family: str = "er",
    mechanism: str = "linear",
    n: int = 1000,
    n_test: int = 100,
    expected_edges: float | None = None,
    sf_m: int = 1,
    seed: int = 0,
    val_fraction: float = 0.2,
) -> Dataset:
    """Graph, mechanism and one draw of ``n + n_test`` rows.

    The first ``n`` rows are split into train/validation, the last ``n_test``
    rows form the held-out test set. All rows share one mechanism draw.
    """
    if d < 2:
        raise ValueError("d must be at least 2")
    rng = np.random.default_rng(seed)
    if expected_edges is None:
        expected_edges = float(d)
    if graph_family == "er":
        graph = gen_er_dag(d, expected_edges, rng)
    elif graph_family == "sf":
        graph = gen_sf_dag(d, sf_m, rng)
    else:
        raise ValueError(f"unknown graph family {graph_family!r}")
    graph.seed = seed
    total = n + n_test
    if mechanism == "linear":
        X = simulate_linear(graph, gen_linear_mechanism(graph, rng), total, rng)
    elif mechanism == "gp":
        X = simulate_gp(graph, total, rng)
    else:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    n_val = int(round(n * val_fraction))
    splits = {
        "train": np.arange(0, n - n_val),
        "val": np.arange(n - n_val, n),
        "test": np.arange(n, total),
    }
    meta = {
        "seed": seed,
        "d": d,
        "n": n,
        "n_test": n_test,
        "graph_family": graph_family,
        "expected_edges": expected_edges if graph_family == "er" else sf_m * (d - 1),
        "mechanism": mechanism,
        "noise_variance": 1.0,
    }
    return Dataset(X, splits, graph, meta)


# --- persistence ------------------------------------------------------------

_SPLIT_FILES = {"train": "X_train.csv", "val": "X_val.csv", "test": "X_test.csv"}


def _write_matrix(path: Path, X: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(X.shape[1])])
        for row in X:
            w.writerow([repr(float(v)) for v in row])


def _read_matrix(path: Path, d: int | None = None) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: empty file")
    header = rows[0]
    if header != [f"x{j}" for j in range(len(header))]:
        raise DatasetFormatError(f"{path}: header must be x0..x{{d-1}}, got {header[:5]}")
    if d is not None and len(header) != d:
        raise DatasetFormatError(f"{path}: header has {len(header)} columns, expected {d}")
    out = np.empty((len(rows) - 1, len(header)))
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise DatasetFormatError(f"{path}: line {r} has {len(row)} columns, expected {len(header)}")
        for c, cell in enumerate(row):
            try:
                out[r - 2, c] = float(cell)
            except ValueError:
                raise DatasetFormatError(f"{path}: line {r}, column {c}: not a number: {cell!r}") from None
    return out


def save_dataset(dataset: Dataset, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, fname in _SPLIT_FILES.items():
        if name in dataset.splits:
            _write_matrix(directory / fname, dataset.split(name))
    if dataset.graph is not None:
        np.savetxt(directory / "adjacency.csv", dataset.graph.adjacency, fmt="%d", delimiter=",")
    meta = dict(dataset.meta)
    meta.setdefault("d", dataset.d)
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    return directory


def load_dataset(directory) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"dataset directory {directory} does not exist")
    meta = {}
    if (directory / "meta.json").exists():
        with open(directory / "meta.json") as fh:
            meta = json.load(fh)
    d = meta.get("d")
    blocks, splits, offset = [], {}, 0
    for name, fname in _SPLIT_FILES.items():
        path = directory / fname
        if not path.exists():
            continue
        block = _read_matrix(path, d)
        d = block.shape[1]
        blocks.append(block)
        splits[name] = np.arange(offset, offset + len(block))
        offset += len(block)
    if not blocks:
        raise DatasetFormatError(f"{directory}: no X_*.csv files found")
    graph = None
    adj_path = directory / "adjacency.csv"
    if adj_path.exists():
        graph = GroundTruthGraph(_read_adjacency(adj_path, d), meta.get("graph_family", "unknown"), meta.get("seed"))
    return Dataset(np.vstack(blocks), splits, graph, meta)


def _read_adjacency(path: Path, d: int) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if len(rows) != d:
        raise DatasetFormatError(f"{path}: {len(rows)} rows, expected {d}")
    A = np.zeros((d, d))
    for r, row in enumerate(rows):
        if len(row) != d:
            raise DatasetFormatError(f"{path}: row {r + 1} has {len(row)} columns, expected {d}")
        for c, cell in enumerate(row):
            if cell.strip() not in ("0", "1"):
                raise DatasetFormatError(f"{path}: row {r + 1}, column {c}: expected 0/1, got {cell!r}")
            A[r, c] = float(cell)
    return A


def load_sachs(data_path, edges_path, val_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Sachs observational data (853 x 11) with the consensus network.

    ``data_path`` is a CSV with a header of 11 protein names; ``edges_path``
    lists one ``source,target`` pair of those names per line. Columns are
    standardised to zero mean and unit variance.
    """
    with open(data_path, newline="") as fh:
        sniff = csv.Sniffer().sniff(fh.read(4096), delimiters=",\t; ")
        fh.seek(0)
        rows = [r for r in csv.reader(fh, sniff) if r]
    names = [h.strip() for h in rows[0]]
    try:
        X = np.array([[float(c) for c in r] for r in rows[1:]])
    except ValueError as exc:
        raise DatasetFormatError(f"{data_path}: {exc}") from None
    if X.shape != SACHS_SHAPE:
        raise DatasetFormatError(f"{data_path}: shape {X.shape}, expected {SACHS_SHAPE[0]}x{SACHS_SHAPE[1]}")
    X = (X - X.mean(axis=0)) / X.std(axis=0)
    index = {name.lower(): k for k, name in enumerate(names)}
    A = np.zeros((len(names), len(names)))
    with open(edges_path, newline="") as fh:
        for line, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].strip().startswith("#"):
                continue
            src, dst = (c.strip().lower() for c in row[:2])
            if src in ("source", "from") and line == 1:
                continue
            if src not in index or dst not in index:
                raise DatasetFormatError(f"{edges_path}: line {line}: unknown node in {row}")
            A[index[src], index[dst]] = 1.0
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(X))
    n_val = int(round(len(X) * val_fraction))
    splits = {"train": np.sort(perm[n_val:]), "val": np.sort(perm[:n_val])}
    meta = {"seed": seed, "d": X.shape[1], "n": len(X), "graph_family": "sachs", "mechanism": "real",
            "columns": names, "source": os.fspath(data_path)}
    return Dataset(X, splits, GroundTruthGraph(A, "sachs"), meta)
