"""Experiment orchestration: training/evaluation runs, manifests and suites."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .metrics import MetricsReport, auc_pr, auc_roc, heldout_mse, mean_edge_probs
from .sem import Dataset, load_dataset, load_sachs, make_dataset, save_dataset
from .vi import LR_GRID, PriorSpec, TrainConfig, load_result, save_result, search_learning_rate, train

__all__ = [
    "SuiteSpec",
    "SUITES",
    "ExperimentSuite",
    "RunManifest",
    "build_suite",
    "dataset_fingerprint",
    "train_run",
    "evaluate_run",
    "reproduce",
]

log = logging.getLogger(__name__)

DEFAULT_SEEDS = 10
HOUR = 3600.0


@dataclass(frozen=True)
class SuiteSpec:
    d: int
    graph_family: str  # "er", "sf" or "sachs"
    sem: str  # "linear", "gp" or "real"
    time_budget: float | None = None

    @property
    def mechanism(self) -> str:
        return "linear" if self.sem == "linear" else "mlp"


SUITES: dict[str, SuiteSpec] = {
    "linear-er-d10": SuiteSpec(10, "er", "linear"),
    "linear-sf-d10": SuiteSpec(10, "sf", "linear"),
    "linear-er-d50": SuiteSpec(50, "er", "linear", HOUR),
    "linear-sf-d50": SuiteSpec(50, "sf", "linear", HOUR),
    "nonlinear-er-d10": SuiteSpec(10, "er", "gp"),
    "nonlinear-sf-d10": SuiteSpec(10, "sf", "gp"),
    "nonlinear-er-d50": SuiteSpec(50, "er", "gp", HOUR),
    "nonlinear-sf-d50": SuiteSpec(50, "sf", "gp", HOUR),
    "linear-d100": SuiteSpec(100, "er", "linear", HOUR),
    "nonlinear-d100": SuiteSpec(100, "er", "gp", HOUR),
    "sachs": SuiteSpec(11, "sachs", "real"),
}

METRICS = ("auc_roc", "auc_pr", "mse")


@dataclass
class ExperimentSuite:
    suite_id: str
    runs: list[tuple[int, dict, TrainConfig]]
    aggregation: str = "mean_std"

    def __post_init__(self):
        if not self.runs:
            raise ValueError("a suite needs at least one run")
        for seed, spec, cfg in self.runs:
            expected = "linear" if spec.get("sem") == "linear" else "mlp"
            if cfg.mechanism != expected:
                raise ValueError(f"seed {seed}: mechanism {cfg.mechanism!r} does not fit {spec.get('sem')!r} data")


def build_suite(suite_id: str, seeds: int = DEFAULT_SEEDS, overrides: dict | None = None) -> ExperimentSuite:
    if suite_id not in SUITES:
        raise KeyError(f"unknown suite {suite_id!r}; choose from {', '.join(SUITES)}")
    spec = SUITES[suite_id]
    runs = []
    for seed in range(seeds):
        cfg = TrainConfig.from_dict(
            {"seed": seed, "mechanism": spec.mechanism, "time_budget": spec.time_budget, **(overrides or {})}
        )
        dataset_spec = {"d": spec.d, "graph_family": spec.graph_family, "sem": spec.sem, "seed": seed}
        runs.append((seed, dataset_spec, cfg))
    return ExperimentSuite(suite_id, runs)


# --- manifests --------------------------------------------------------------


def dataset_fingerprint(directory) -> str:
    """sha256 over every file of a dataset directory, in name order."""
    h = hashlib.sha256()
    for path in sorted(Path(directory).iterdir()):
        if path.is_file():
            h.update(path.name.encode())
            h.update(b"\0")
            h.update(path.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    run_dir: str
    config: dict
    dataset_dir: str
    dataset_fingerprint: str
    version: str = __version__
    started: str = ""
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self) -> Path:
        path = Path(self.run_dir) / "manifest.json"
        with open(path, "w") as fh:
            json.dump(self.__dict__, fh, indent=2, sort_keys=True)
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def train_run(dataset_dir, run_dir, config: TrainConfig, prior: PriorSpec | None = None, lr_grid=None) -> Path:
    """Train on a dataset directory and persist a self-describing run directory."""
    dataset_dir, run_dir = Path(dataset_dir), Path(run_dir)
    dataset = load_dataset(dataset_dir)
    if "val" not in dataset.splits or len(dataset.splits["val"]) == 0:
        raise ValueError(f"{dataset_dir} has no validation split")
    started = _now()
    extra = {"dataset": os.fspath(dataset_dir.resolve())}
    if lr_grid:
        search = search_learning_rate(dataset, config, prior, grid=lr_grid)
        result = search.best
        extra["lr_search"] = [{"lr": lr, "selection_elbo": v} for lr, v in search.scores]
    else:
        result = train(dataset, config, prior)
    save_result(result, run_dir, extra_config=extra)
    RunManifest(
        run_dir=os.fspath(run_dir),
        config=result.config.to_dict(),
        dataset_dir=extra["dataset"],
        dataset_fingerprint=dataset_fingerprint(dataset_dir),
        started=started,
        finished=_now(),
        extra={"stop_epoch": result.stop_epoch, "best_epoch": result.best_epoch,
               "stopped_by": result.stopped_by, "wall_clock": result.wall_clock,
               **({"lr_search": extra["lr_search"]} if lr_grid else {})},
    ).write()
    return run_dir


def evaluate_run(
    run_dir,
    dataset_dir=None,
    M: int = 100,
    seed: int | None = None,
    mse_mode: str = "sampled",
    scores_path=None,
    out_path=None,
) -> MetricsReport:
    """Compute AUC-ROC, AUC-PR and held-out MSE for a run; write metrics.json.

    The posterior-draw seed defaults to the training seed, so evaluating the
    same run twice gives identical files. MSE uses the test split, or the
    validation split when a dataset has no test rows.
    """
    run_dir = Path(run_dir)
    params, models, config = load_result(run_dir)
    dataset_dir = Path(dataset_dir or config.get("dataset", ""))
    if not dataset_dir.is_dir():
        raise FileNotFoundError(f"dataset directory {dataset_dir} not found")
    dataset = load_dataset(dataset_dir)
    if dataset.d != params.d:
        raise ValueError(f"run has d={params.d} but dataset has d={dataset.d}")
    seed = int(config.get("seed", 0)) if seed is None else int(seed)
    t, tau = float(config.get("t", 0.3)), float(config.get("tau", 1.0))
    S = mean_edge_probs(params, t, tau, M, rng=np.random.default_rng([seed, 1]))
    truth = dataset.adjacency
    heldout = "test" if len(dataset.splits.get("test", ())) else "val"
    mse = heldout_mse(models, params, dataset.split(heldout), t, tau, M, rng=np.random.default_rng([seed, 2]), mode=mse_mode)
    report = MetricsReport(
        auc_roc=None if truth is None else auc_roc(S, truth),
        auc_pr=None if truth is None else auc_pr(S, truth),
        heldout_mse=mse,
        M=M,
        seed=seed,
        dataset_id=dataset_fingerprint(dataset_dir)[:16],
    )
    payload = {k: v for k, v in report.to_dict().items() if v is not None or k not in ("auc_roc", "auc_pr")}
    out_path = Path(out_path) if out_path else run_dir / "metrics.json"
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
    if scores_path:
        np.savetxt(scores_path, S.S, delimiter=",", fmt="%.17g")
    return report


# --- suites -----------------------------------------------------------------


def _prepare_dataset(spec: dict, directory: Path, sachs: dict | None) -> Path:
    if spec["graph_family"] == "sachs":
        if not sachs:
            raise FileNotFoundError("the sachs suite needs user-supplied data (--sachs-data and --sachs-edges)")
        dataset = load_sachs(sachs["data"], sachs["edges"], seed=spec["seed"])
    else:
        dataset = make_dataset(spec["d"], spec["graph_family"], spec["sem"], seed=spec["seed"])
    save_dataset(dataset, directory)
    return directory


def _run_one(suite_id: str, seed: int, spec: dict, cfg_dict: dict, root: str, lr_grid, sachs, M: int) -> dict:
    root = Path(root)
    data_dir = root / "data" / f"seed{seed}"
    run_dir = root / "runs" / f"seed{seed}"
    start = time.perf_counter()
    try:
        _prepare_dataset(spec, data_dir, sachs)
        train_run(data_dir, run_dir, TrainConfig.from_dict(cfg_dict), lr_grid=lr_grid)
        report = evaluate_run(run_dir, data_dir, M=M)
    except Exception as exc:  # reported per seed; the aggregate is marked incomplete
        log.error("%s seed %d failed: %s", suite_id, seed, exc)
        return {"seed": seed, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "seconds": time.perf_counter() - start}
    return {"seed": seed, "status": "ok", "seconds": time.perf_counter() - start,
            "auc_roc": report.auc_roc, "auc_pr": report.auc_pr, "mse": report.heldout_mse}


@dataclass
class SuiteOutcome:
    suite_id: str
    per_seed: list[dict]
    summary: dict[str, tuple[float, float, int]]
    complete: bool
    csv_path: Path


def reproduce(
    suite_id: str,
    out_dir,
    seeds: int = DEFAULT_SEEDS,
    jobs: int = 1,
    lr_grid=LR_GRID,
    overrides: dict | None = None,
    sachs: dict | None = None,
    M: int = 100,
) -> SuiteOutcome:
    """gen + train + eval for every seed of a suite; writes ``<suite>.csv``.

    The CSV has columns suite, metric, mean, std, n_ok, n_failed, complete;
    per-seed rows go to ``<suite>_runs.csv``.
    """
    suite = build_suite(suite_id, seeds, overrides)
    out_dir = Path(out_dir) / suite_id
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(suite_id, seed, spec, cfg.to_dict(), os.fspath(out_dir), lr_grid, sachs, M) for seed, spec, cfg in suite.runs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_one, *zip(*tasks)))
    else:
        rows = [_run_one(*task) for task in tasks]

    ok = [r for r in rows if r["status"] == "ok"]
    complete = len(ok) == len(rows)
    summary = {}
    for metric in METRICS:
        vals = np.array([r[metric] for r in ok if r.get(metric) is not None], dtype=np.float64)
        summary[metric] = (float(vals.mean()) if vals.size else float("nan"),
                           float(vals.std(ddof=1)) if vals.size > 1 else float("nan"), int(vals.size))
    csv_path = out_dir / f"{suite_id}.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["suite", "metric", "mean", "std", "n_ok", "n_failed", "complete"])
        for metric, (mean, std, n) in summary.items():
            w.writerow([suite_id, metric, repr(mean), repr(std), n, len(rows) - len(ok), str(complete).lower()])
    with open(out_dir / f"{suite_id}_runs.csv", "w", newline="") as fh:
        cols = ["seed", "status", "auc_roc", "auc_pr", "mse", "seconds", "error"]
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return SuiteOutcome(suite_id, rows, summary, complete, csv_path)
