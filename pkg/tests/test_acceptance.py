"""Acceptance criteria A1-A11.

Each test prints one ``A<n> PASS|FAIL ...`` line (collected again in the
terminal summary). The suite-level checks (A7-A9, A11) run the real
gen -> train -> eval pipeline and take tens of minutes on one core.

A10 needs the Sachs data: set DAGVI_SACHS_DATA (853 x 11 CSV with a header
of protein names) and DAGVI_SACHS_EDGES (``source,target`` lines).
"""

import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from dagvi import diffcore as dc
from dagvi.baselines import bench_sampling
from dagvi.harness import _run_one, build_suite, reproduce
from dagvi.metrics import auc_pr, auc_roc
from dagvi.sampler import (
    PosteriorParams,
    compose_dag,
    construct_from_dag,
    draw_noise,
    is_acyclic,
    sample_dag,
    sample_dags_hard,
    topological_matrix,
)
from dagvi.vi import FunctionalModels, PriorSpec, TrainConfig, elbo_loss, kl_edges, kl_scores

from .conftest import ACCEPTANCE_LINES, all_digraphs, has_cycle_dfs, random_dag
from .test_diffcore import PRIMITIVES
from .test_metrics import brute_pr, brute_roc, random_case


def report(cid: str, passed: bool, detail: str) -> bool:
    line = f"{cid} {'PASS' if passed else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return passed


def random_posterior(rng, d):
    return PosteriorParams.from_arrays(
        rng.normal(0, 2, size=(d, d)), rng.normal(0, 1, size=d), np.log(rng.uniform(0.05, 1.0))
    )


def test_a1_acyclicity():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    failures, total = 0, 0
    for d in (5, 50):
        for _ in range(10_000):
            failures += not is_acyclic(sample_dag(random_posterior(rng, d), rng).hard)
            total += 1
    # at d=500 the relaxation is skipped (hard path only); a slice of full-path draws is checked as well
    for _ in range(100):
        for A in sample_dags_hard(random_posterior(rng, 500), rng, 100):
            failures += not is_acyclic(A)
            total += 1
    for _ in range(200):
        failures += not is_acyclic(sample_dag(random_posterior(rng, 500), rng).hard)
        total += 1
    seconds = time.perf_counter() - start
    ok = report("A1", failures == 0 and seconds < 120,
                f"{total} draws over d in {{5, 50, 500}}: {failures} cyclic, {seconds:.1f}s (limit 120s)")
    assert ok


def count_labelled_dags(n: int) -> int:
    """Robinson's recurrence for the number of DAGs on n labelled nodes."""
    a = [1]
    for m in range(1, n + 1):
        a.append(sum((-1) ** (k + 1) * math.comb(m, k) * 2 ** (k * (m - k)) * a[m - k] for k in range(1, m + 1)))
    return a[n]


def test_a2_completeness():
    start = time.perf_counter()
    mismatches, count = 0, 0
    for A in all_digraphs(4):
        if has_cycle_dfs(A):
            continue
        count += 1
        W, p = construct_from_dag(A)
        mismatches += not np.array_equal(compose_dag(W, topological_matrix(p, 0.3)).hard, A)
    rng = np.random.default_rng(202)
    for _ in range(1000):
        A = random_dag(20, rng, density=rng.uniform(0.0, 0.6))
        W, p = construct_from_dag(A)
        mismatches += not np.array_equal(compose_dag(W, topological_matrix(p, 0.3)).hard, A)
    expected = count_labelled_dags(4)
    seconds = time.perf_counter() - start
    ok = report("A2", mismatches == 0 and count == expected and seconds < 60,
                f"{count} four-node DAGs enumerated (recurrence: {expected}) + 1000 at d=20; "
                f"{mismatches} mismatches, {seconds:.1f}s")
    assert ok


def test_a3_sampler_complexity():
    start = time.perf_counter()
    result = bench_sampling([250, 500, 1000, 2000], reps=20, seed=0)
    med = result.medians()
    slope = result.slope("proposed")
    worst_2000 = max(r[3] for r in result.rows if r[0] == "proposed" and r[1] == 2000)
    beats = med["proposed", 1000] < min(med["gumbel_sinkhorn", 1000], med["gumbel_topk", 1000])
    seconds = time.perf_counter() - start
    ok = report(
        "A3",
        slope <= 2.4 and beats and worst_2000 < 1.0 and seconds < 600,
        f"slope {slope:.2f} (<= 2.4); d=1000 medians proposed {med['proposed', 1000] * 1e3:.1f} ms, "
        f"sinkhorn {med['gumbel_sinkhorn', 1000] * 1e3:.1f} ms, topk {med['gumbel_topk', 1000] * 1e3:.1f} ms; "
        f"slowest d=2000 draw {worst_2000:.3f}s; {seconds:.0f}s total",
    )
    assert ok


def test_a4_gradients():
    start = time.perf_counter()
    worst_primitive = 0.0
    for name, (fn, shapes) in PRIMITIVES.items():
        for seed in range(3):
            rng = np.random.default_rng(seed)
            params = {f"x{k}": dc.Tensor(rng.uniform(-3, 3, size=s), requires_grad=True) for k, s in enumerate(shapes)}
            if name == "relu":
                for p in params.values():
                    p.data = np.where(np.abs(p.data) < 1e-2, 0.5, p.data)
            rep = dc.finite_difference_check(lambda: fn(*params.values()), params, epsilon=1e-5, tolerance=1e-6)
            worst_primitive = max(worst_primitive, rep.max_rel_error)
    worst_elbo = 0.0
    for kind in ("linear", "mlp"):
        for seed in range(3):
            rng = np.random.default_rng(seed)
            d = 5
            params = PosteriorParams.initialize(d, rng, edge_logit=0.5)
            models = FunctionalModels.initialize(kind, d, rng, hidden=4)
            X = rng.normal(size=(20, d))
            noise = draw_noise(rng, d)
            cfg = TrainConfig(mechanism=kind)

            def loss():
                s = sample_dag(params, rng, cfg.t, cfg.tau, straight_through=False, noise=noise)
                return elbo_loss(X, s, models, params, PriorSpec(), cfg).elbo

            rep = dc.finite_difference_check(loss, {**params.tensors(), **models.tensors()}, tolerance=1e-4)
            worst_elbo = max(worst_elbo, rep.max_rel_error)
    seconds = time.perf_counter() - start
    ok = report("A4", worst_elbo < 1e-4 and worst_primitive < 1e-6 and seconds < 60,
                f"ELBO surrogate max rel err {worst_elbo:.2e} (< 1e-4); primitives {worst_primitive:.2e} (< 1e-6); "
                f"{seconds:.1f}s")
    assert ok


def test_a5_kl_terms():
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    n = 100_000
    worst = 0.0
    for _ in range(20):
        d = int(rng.integers(2, 5))
        rho = float(rng.uniform(0.005, 0.3))
        s = float(rng.uniform(0.05, 1.0))
        phi = rng.normal(0, 2, size=(d, d))
        mu = rng.normal(0, 0.5, size=d)
        sigma = float(rng.uniform(0.02, 1.0))
        prior = PriorSpec(edge_prob=rho, score_scale=s)
        params = PosteriorParams.from_arrays(phi, mu, np.log(sigma))

        off = ~np.eye(d, dtype=bool)
        theta = expit(phi[off])
        w = rng.random((n, theta.size)) < theta
        log_ratio = np.where(w, np.log(theta / rho), np.log((1 - theta) / (1 - rho))).sum(axis=1)
        z = mu + sigma * rng.standard_normal((n, d))
        log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)
        log_p = -0.5 * (z / s) ** 2 - np.log(s)
        score_ratio = (log_q - log_p).sum(axis=1)
        for closed, mc in ((kl_edges(params, prior), log_ratio), (kl_scores(params, prior), score_ratio)):
            se = mc.std(ddof=1) / np.sqrt(n)
            worst = max(worst, abs(mc.mean() - float(closed.data)) / se)
    seconds = time.perf_counter() - start
    ok = report("A5", worst < 3.0 and seconds < 60,
                f"20 settings x 2 KL terms, worst |closed - MC| = {worst:.2f} s.e. (< 3), {seconds:.1f}s")
    assert ok


def test_a6_metric_oracles():
    rng = np.random.default_rng(606)
    worst = 0.0
    for k in range(100):
        S, truth = random_case(rng, d=6, ties=k % 2 == 1)
        worst = max(worst, abs(auc_roc(S, truth) - brute_roc(S, truth)), abs(auc_pr(S, truth) - brute_pr(S, truth)))
    ok = report("A6", worst <= 1e-12, f"100 random (S, truth) pairs at d=6, max deviation {worst:.1e} (<= 1e-12)")
    assert ok


# --- suite-level criteria -----------------------------------------------------


@pytest.fixture(scope="module")
def suite_root(tmp_path_factory):
    root = os.environ.get("DAGVI_ACCEPTANCE_OUT")
    if root:
        Path(root).mkdir(parents=True, exist_ok=True)
        return Path(root)
    return tmp_path_factory.mktemp("suites")


@pytest.fixture(scope="module")
def linear_suites(suite_root):
    return {s: reproduce(s, suite_root) for s in ("linear-er-d10", "linear-sf-d10")}


def _describe(outcome):
    mean, std, n = outcome.summary["auc_roc"]
    return mean, f"{outcome.suite_id} AUC-ROC {mean:.3f} +- {std:.3f} over {n} seeds" + (
        "" if outcome.complete else " (incomplete)")


def test_a7_linear_recovery(linear_suites):
    parts, ok = [], True
    for outcome in linear_suites.values():
        mean, text = _describe(outcome)
        parts.append(text)
        ok &= outcome.complete and mean >= 0.90
    assert report("A7", ok, "; ".join(parts) + " (target >= 0.90 each)")


def test_a8_nonlinear_recovery(suite_root):
    outcome = reproduce("nonlinear-er-d10", suite_root)
    mean, text = _describe(outcome)
    assert report("A8", outcome.complete and mean >= 0.78, text + " (target >= 0.78)")


def test_a9_scale(suite_root):
    outcome = reproduce("linear-er-d50", suite_root, seeds=3)
    mean, text = _describe(outcome)
    budget = build_suite("linear-er-d50", 1).runs[0][2].time_budget
    # the budget applies per training run; a full lr grid is 5 runs
    slowest = max(r["seconds"] for r in outcome.per_seed)
    ok = outcome.complete and mean >= 0.85 and slowest < 3600
    assert report("A9", ok, f"{text} (target >= 0.85); slowest dataset {slowest:.0f}s "
                            f"(limit 3600s, per-run budget {budget:.0f}s)")


@pytest.mark.skipif(
    not (os.environ.get("DAGVI_SACHS_DATA") and os.environ.get("DAGVI_SACHS_EDGES")),
    reason="Sachs data not supplied (set DAGVI_SACHS_DATA and DAGVI_SACHS_EDGES)",
)
def test_a10_sachs(suite_root):
    sachs = {"data": os.environ["DAGVI_SACHS_DATA"], "edges": os.environ["DAGVI_SACHS_EDGES"]}
    outcome = reproduce("sachs", suite_root, sachs=sachs)
    roc, roc_std, n = outcome.summary["auc_roc"]
    pr = outcome.summary["auc_pr"][0]
    ok = outcome.complete and 0.63 <= roc <= 0.79 and pr >= 0.24
    assert report("A10", ok, f"Sachs AUC-ROC {roc:.3f} +- {roc_std:.3f} (target [0.63, 0.79]), "
                             f"AUC-PR {pr:.3f} (target >= 0.24), {n} restarts")


def test_a11_determinism(linear_suites, suite_root, tmp_path):
    suite = build_suite("linear-er-d10", 1)
    seed, spec, cfg = suite.runs[0]
    from dagvi.vi import LR_GRID

    _run_one("linear-er-d10", seed, spec, cfg.to_dict(), str(tmp_path), LR_GRID, None, 100)
    first = (suite_root / "linear-er-d10" / "runs" / "seed0" / "metrics.json").read_bytes()
    again = (tmp_path / "runs" / "seed0" / "metrics.json").read_bytes()
    assert report("A11", first == again,
                  f"linear-er-d10 seed 0 re-run: metrics.json {'identical' if first == again else 'differs'} "
                  f"({len(first)} bytes)")
