"""Command line: gen, train, eval, bench-sampler, reproduce.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .validation import check_lr_grid

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("dagvi")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# flag name -> TrainConfig field; None means "not given"
TRAIN_FLAGS = {
    "lr": float, "t": float, "tau": float, "kl_edge_weight": float, "kl_score_weight": float,
    "batch_size": int, "max_epochs": int, "check_every": int, "patience": int,
    "weight_decay": float, "seed": int, "mechanism": str, "hidden": int,
    "samples_per_batch": int, "time_budget": float,
}


def _add_train_flags(p):
    for name, typ in TRAIN_FLAGS.items():
        flag = "--" + name.replace("_", "-")
        if name == "mechanism":
            p.add_argument(flag, choices=["linear", "mlp"], default=None)
        else:
            p.add_argument(flag, type=typ, default=None)
    p.add_argument("--debug", action="store_true", help="check acyclicity of every training sample")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dagvi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="simulate a synthetic dataset")
    g.add_argument("--graph", choices=["er", "sf"], default="er")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--edges", type=float, default=None, help="expected edge count for ER (default d)")
    g.add_argument("--sf-m", type=int, default=1, help="edges per arriving node for SF")
    g.add_argument("--sem", choices=["linear", "gp"], default="linear")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--n-test", type=int, default=100)
    g.add_argument("--val-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit the variational posterior on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat JSON of TrainConfig fields; flags override it")
    t.add_argument("--lr-grid", help="comma-separated learning rates; keeps the best by validation ELBO")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="score a trained run")
    e.add_argument("--run", required=True)
    e.add_argument("--data", help="dataset directory (default: the one the run was trained on)")
    e.add_argument("--samples", type=int, default=100, help="posterior draws M")
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--mse-mode", choices=["sampled", "mode"], default="sampled")
    e.add_argument("--scores", help="also write the d x d score matrix to this CSV")
    e.add_argument("--out", help="metrics path (default <run>/metrics.json)")

    b = sub.add_parser("bench-sampler", help="time the proposed sampler against permutation baselines")
    b.add_argument("--dims", default="250,500,1000,2000")
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--samplers", default=None, help="comma-separated subset")
    b.add_argument("--out", default="bench.csv")

    r = sub.add_parser("reproduce", help="run gen+train+eval over a suite's seeds")
    r.add_argument("suite")
    r.add_argument("--out", default="results")
    r.add_argument("--seeds", type=int, default=10)
    r.add_argument("--jobs", type=int, default=1)
    r.add_argument("--samples", type=int, default=100)
    r.add_argument("--lr-grid", default=None, help="comma-separated learning rates (default 1e-3..1e-1, 5 points)")
    r.add_argument("--no-lr-search", action="store_true", help="train once at --lr instead of a grid")
    r.add_argument("--sachs-data")
    r.add_argument("--sachs-edges")
    _add_train_flags(r)
    return parser


def _train_overrides(args) -> dict:
    out = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k) is not None}
    if args.debug:
        out["debug"] = True
    return out


def cmd_gen(args) -> int:
    from .sem import make_dataset, save_dataset

    if args.d < 2:
        raise UsageError("--d must be at least 2")
    if args.n < 2 or args.n_test < 0:
        raise UsageError("--n must be >= 2 and --n-test >= 0")
    if not 0.0 < args.val_fraction < 1.0:
        raise UsageError("--val-fraction must lie in (0, 1)")
    if args.graph == "sf" and args.edges is not None:
        raise UsageError("--edges applies to ER graphs; use --sf-m for SF")
    if args.graph == "er" and args.edges is not None and not 0 <= args.edges <= args.d * (args.d - 1) / 2:
        raise UsageError(f"--edges must lie in [0, {args.d * (args.d - 1) // 2}] for d={args.d}")
    if args.sf_m < 1:
        raise UsageError("--sf-m must be >= 1")
    ds = make_dataset(args.d, args.graph, args.sem, n=args.n, n_test=args.n_test, expected_edges=args.edges,
                      sf_m=args.sf_m, seed=args.seed, val_fraction=args.val_fraction)
    out = save_dataset(ds, args.out)
    sizes = {k: len(v) for k, v in ds.splits.items()}
    print(f"wrote {out} ({sizes}, {int(ds.adjacency.sum())} edges)")
    return EXIT_OK


def _load_config(args):
    from .vi import TrainConfig

    payload = {}
    if args.config:
        try:
            with open(args.config) as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(payload, dict):
            raise UsageError("config file must hold a flat JSON object")
    payload.update(_train_overrides(args))
    try:
        return TrainConfig.from_dict(payload)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _parse_grid(text):
    if text is None:
        return None
    try:
        return check_lr_grid(text)
    except ValueError as exc:
        raise UsageError(f"--lr-grid: {exc}") from None


def cmd_train(args) -> int:
    from .harness import train_run
    from .sem import load_dataset

    config = _load_config(args)
    grid = _parse_grid(args.lr_grid)
    if not Path(args.data).is_dir():
        raise FileNotFoundError(f"dataset directory {args.data} not found")
    if args.mechanism is None and not (args.config and "mechanism" in json.loads(Path(args.config).read_text())):
        sem_kind = load_dataset(args.data).meta.get("mechanism", "linear")
        if sem_kind != "linear":
            config = type(config).from_dict({**config.to_dict(), "mechanism": "mlp"})
    run = train_run(args.data, args.out, config, lr_grid=grid)
    manifest = json.loads((run / "manifest.json").read_text())["extra"]
    print(f"wrote {run} (stopped by {manifest['stopped_by']} at epoch {manifest['stop_epoch']}, "
          f"best epoch {manifest['best_epoch']})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_run

    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    report = evaluate_run(args.run, args.data, M=args.samples, seed=args.seed, mse_mode=args.mse_mode,
                          scores_path=args.scores, out_path=args.out)
    print(json.dumps({k: v for k, v in report.to_dict().items() if v is not None}, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .baselines import SAMPLERS, bench_sampling

    try:
        dims = [int(x) for x in args.dims.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--dims must be comma-separated integers, got {args.dims!r}") from None
    if len(dims) < 2 or min(dims) < 2:
        raise UsageError("--dims needs at least two sizes, each >= 2")
    if args.reps < 5:
        raise UsageError("--reps must be >= 5")
    samplers = None
    if args.samplers:
        samplers = [s.strip() for s in args.samplers.split(",")]
        unknown = set(samplers) - set(SAMPLERS)
        if unknown:
            raise UsageError(f"unknown samplers {sorted(unknown)}; choose from {list(SAMPLERS)}")
    result = bench_sampling(dims, args.reps, args.seed, samplers)
    result.write_csv(args.out)
    summary_path = Path(args.out).with_name(Path(args.out).stem + "_summary.csv")
    names = list(dict.fromkeys(r[0] for r in result.rows))
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sampler", "d", "median", "iqr", "slope"])
        for row in result.summary():
            w.writerow([row["sampler"], row["d"], repr(row["median"]), repr(row["iqr"]), ""])
        for name in names:
            w.writerow([name, "all", "", "", repr(result.slope(name))])
    for name in names:
        print(f"{name:16s} slope {result.slope(name):.3f}  " + "  ".join(
            f"d={r['d']}: {r['median'] * 1e3:.2f} ms" for r in result.summary() if r["sampler"] == name))
    print(f"wrote {args.out} and {summary_path}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .harness import SUITES, reproduce
    from .vi import LR_GRID

    if args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from {', '.join(SUITES)}")
    if args.seeds < 1 or args.jobs < 1:
        raise UsageError("--seeds and --jobs must be >= 1")
    if args.no_lr_search and args.lr_grid:
        raise UsageError("--no-lr-search and --lr-grid are mutually exclusive")
    sachs = None
    if args.suite == "sachs":
        if not (args.sachs_data and args.sachs_edges):
            raise UsageError("the sachs suite needs --sachs-data and --sachs-edges")
        sachs = {"data": args.sachs_data, "edges": args.sachs_edges}
    overrides = _train_overrides(args)
    overrides.pop("seed", None)
    grid = None if args.no_lr_search else (_parse_grid(args.lr_grid) or LR_GRID)
    outcome = reproduce(args.suite, args.out, seeds=args.seeds, jobs=args.jobs, lr_grid=grid,
                        overrides=overrides, sachs=sachs, M=args.samples)
    for metric, (mean, std, n) in outcome.summary.items():
        print(f"{args.suite} {metric}: {mean:.4f} +- {std:.4f} (n={n})")
    failed = [r for r in outcome.per_seed if r["status"] != "ok"]
    for r in failed:
        print(f"seed {r['seed']} failed: {r['error']}", file=sys.stderr)
    print(f"wrote {outcome.csv_path}" + ("" if outcome.complete else " (INCOMPLETE)"))
    return EXIT_OK if outcome.complete else EXIT_RUNTIME


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "bench-sampler": cmd_bench,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dagvi {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        trajectory = getattr(exc, "trajectory", None)
        if trajectory:
            dump = Path(getattr(args, "out", ".") or ".") / "diverged_trajectory.json"
            dump.parent.mkdir(parents=True, exist_ok=True)
            dump.write_text(json.dumps(trajectory, indent=1))
            print(f"trajectory written to {dump}", file=sys.stderr)
        print(f"dagvi {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
