import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import expit

from dagvi import diffcore as dc
from dagvi.diffcore import Tape, Tensor
from dagvi.sampler import (
    CyclicGraphError,
    PosteriorParams,
    compose_dag,
    construct_from_dag,
    draw_noise,
    grad_matrix,
    is_acyclic,
    sample_dag,
    sample_dags_hard,
    sample_edges,
    sample_priority,
    topological_matrix,
)

from .conftest import all_digraphs, has_cycle_dfs, random_dag

finite = st.floats(-5, 5, allow_nan=False)


def random_params(rng, d, scale=1.0):
    return PosteriorParams.from_arrays(
        rng.normal(0, 2 * scale, size=(d, d)), rng.normal(0, scale, size=d), np.log(rng.uniform(0.05, 1.0))
    )


class TestGradMatrix:
    def test_two_nodes(self):
        np.testing.assert_array_equal(grad_matrix([0.0, 1.0]).data, [[0, 1], [-1, 0]])

    def test_equal_scores(self):
        np.testing.assert_array_equal(grad_matrix([2.0, 2.0, 2.0]).data, np.zeros((3, 3)))

    @given(arrays(np.float64, st.integers(2, 8), elements=finite))
    def test_antisymmetric(self, p):
        G = grad_matrix(p).data
        np.testing.assert_array_equal(G + G.T, 0.0)
        np.testing.assert_array_equal(np.diag(G), 0.0)


class TestTopologicalMatrix:
    def test_two_node_values(self):
        topo = topological_matrix([0.0, 1.0], 0.3)
        # logistic(10/3) evaluated independently
        expected = 1.0 / (1.0 + np.exp(-10.0 / 3.0))
        assert topo.soft.data[0, 1] == pytest.approx(expected, abs=1e-15)
        assert topo.soft.data[0, 1] == pytest.approx(0.965555, abs=5e-7)
        assert topo.soft.data[1, 0] == pytest.approx(0.034445, abs=5e-7)
        np.testing.assert_array_equal(topo.hard, [[0, 1], [0, 0]])

    def test_rejects_nonpositive_temperature(self):
        with pytest.raises(ValueError):
            topological_matrix([0.0, 1.0], 0.0)

    @settings(max_examples=50)
    @given(arrays(np.float64, st.integers(2, 10), elements=finite, unique=True), st.floats(0.01, 5))
    def test_invariants(self, p, t):
        topo = topological_matrix(p, t)
        d = len(p)
        off = ~np.eye(d, dtype=bool)
        np.testing.assert_allclose((topo.soft.data + topo.soft.data.T)[off], 1.0, atol=1e-12)
        assert not np.any(np.diag(topo.hard))
        expected_hard = p[None, :] > p[:, None]
        np.testing.assert_array_equal(topo.hard, expected_hard)
        # complete DAG: exactly one orientation per pair
        np.testing.assert_array_equal((topo.hard + topo.hard.T)[off], 1)
        assert is_acyclic(topo.hard)
        np.testing.assert_allclose(
            topo.soft.data[off], expit(grad_matrix(p).data / t)[off], rtol=1e-12
        )

    def test_ties_are_broken_by_index(self):
        topo = topological_matrix([0.5, 0.5, 0.5], 0.3)
        np.testing.assert_array_equal(topo.hard, np.triu(np.ones((3, 3)), 1))

    def test_small_temperature_limit(self):
        p = np.array([0.3, -0.2, 1.1, 0.0])
        soft = topological_matrix(p, 1e-4).soft.data
        off = ~np.eye(4, dtype=bool)
        np.testing.assert_allclose(soft[off], (p[None, :] > p[:, None])[off], atol=1e-12)

    def test_monotone_in_temperature(self):
        p = np.array([0.0, 0.4])
        vals = [topological_matrix(p, t).soft.data[0, 1] for t in (2.0, 1.0, 0.5, 0.1)]
        assert all(a < b for a, b in zip(vals, vals[1:]))

    def test_gradient_matches_finite_differences(self, rng):
        p = Tensor(rng.normal(size=5), requires_grad=True)
        weights = rng.normal(size=(5, 5))
        report = dc.finite_difference_check(
            lambda: dc.sum(dc.mul(topological_matrix(p, 0.7).soft, weights)), {"p": p}, tolerance=1e-6
        )
        assert report.passed, report


class TestSamplePriority:
    def test_zero_noise_is_mean(self):
        params = PosteriorParams.from_arrays(np.zeros((3, 3)), [1.0, 2.0, 3.0], np.log(0.1))
        np.testing.assert_array_equal(sample_priority(params, np.zeros(3)).data, [1.0, 2.0, 3.0])

    def test_unit_noise_shifts_by_scale(self):
        params = PosteriorParams.from_arrays(np.zeros((3, 3)), [1.0, 2.0, 3.0], np.log(0.1))
        np.testing.assert_allclose(sample_priority(params, np.ones(3)).data, [1.1, 2.1, 3.1], rtol=1e-15)

    def test_monte_carlo_mean(self, rng):
        mu = np.array([0.5, -1.0])
        params = PosteriorParams.from_arrays(np.zeros((2, 2)), mu, np.log(0.3))
        draws = np.array([sample_priority(params, rng.standard_normal(2)).data for _ in range(100_000)])
        se = 0.3 / np.sqrt(len(draws))
        assert np.all(np.abs(draws.mean(axis=0) - mu) < 4 * se)
        np.testing.assert_allclose(draws.std(axis=0), 0.3, rtol=0.01)

    def test_differentiable(self, rng):
        params = PosteriorParams.from_arrays(np.zeros((3, 3)), rng.normal(size=3), np.log(0.2), requires_grad=True)
        z = rng.normal(size=3)
        named = {"mu": params.score_mean, "log_scale": params.score_log_scale}
        report = dc.finite_difference_check(lambda: dc.sum(dc.square(sample_priority(params, z))), named)
        assert report.passed, report


class TestSampleEdges:
    def test_saturated_logit(self, rng):
        params = PosteriorParams.from_arrays(np.full((3, 3), 50.0), np.zeros(3), 0.0)
        for _ in range(20):
            e = sample_edges(params, 1.0, draw_noise(rng, 3)[1])
            np.testing.assert_array_equal(e.hard, 1 - np.eye(3))

    @pytest.mark.parametrize("prob", [0.5, 0.3])
    def test_edge_frequency_matches_sigmoid(self, rng, prob):
        d, reps = 300, 5
        logit = np.log(prob / (1 - prob))
        params = PosteriorParams.from_arrays(np.full((d, d), logit), np.zeros(d), 0.0)
        off = ~np.eye(d, dtype=bool)
        hits = trials = 0
        for _ in range(reps):
            e = sample_edges(params, 0.5, draw_noise(rng, d)[1])
            hits += e.hard[off].sum()
            trials += off.sum()
        se = np.sqrt(prob * (1 - prob) / trials)
        assert abs(hits / trials - prob) < 3 * se

    def test_hard_matches_soft_threshold(self, rng):
        params = random_params(rng, 6)
        e = sample_edges(params, 0.7, draw_noise(rng, 6)[1])
        off = ~np.eye(6, dtype=bool)
        np.testing.assert_array_equal(e.hard[off], (e.soft.data > 0.5)[off])
        assert not np.any(np.diag(e.hard))
        assert np.all(np.diag(e.soft.data) == 0)

    def test_rejects_bad_temperature(self, rng):
        params = random_params(rng, 3)
        with pytest.raises(ValueError):
            sample_edges(params, 0.0, draw_noise(rng, 3)[1])

    def test_gradient_matches_finite_differences(self, rng):
        params = random_params(rng, 4)
        params.edge_logits.requires_grad = True
        g = draw_noise(rng, 4)[1]
        w = rng.normal(size=(4, 4))
        report = dc.finite_difference_check(
            lambda: dc.sum(dc.mul(sample_edges(params, 0.8, g).soft, w)), {"phi": params.edge_logits}
        )
        assert report.passed, report


class TestComposeDag:
    def test_full_edges_give_complete_order(self):
        params = PosteriorParams.from_arrays(np.full((3, 3), 60.0), [1.0, 2.0, 3.0], np.log(1e-9))
        A = sample_dag(params, np.random.default_rng(0), t=1e-3).hard
        np.testing.assert_array_equal(A, [[0, 1, 1], [0, 0, 1], [0, 0, 0]])

    def test_empty_edges_give_empty_graph(self, rng):
        params = PosteriorParams.from_arrays(np.full((4, 4), -60.0), rng.normal(size=4), 0.0)
        np.testing.assert_array_equal(sample_dag(params, rng).hard, 0)

    @pytest.mark.parametrize("d", [5, 50])
    def test_full_path_draws_are_acyclic(self, rng, d):
        for _ in range(300):
            s = sample_dag(random_params(rng, d), rng)
            assert is_acyclic(s.hard)
            assert np.all(s.hard <= s.edges)
            assert not np.any(np.diag(s.hard))

    def test_full_path_acyclic_large(self, rng):
        for _ in range(50):
            assert is_acyclic(sample_dag(random_params(rng, 500), rng).hard)

    def test_straight_through_matches_soft_path_gradients(self, rng):
        """Forward is binary; backward equals the pure-soft path for a linear read-out."""
        d = 5
        params = random_params(rng, d)
        for t in params.tensors().values():
            t.requires_grad = True
        noise = draw_noise(rng, d)
        C = rng.normal(size=(d, d))
        leaves = list(params.tensors().values())

        def grads(st):
            for leaf in leaves:
                leaf.zero_grad()
            with Tape() as tape:
                s = sample_dag(params, rng, t=0.5, tau=0.7, straight_through=st, noise=noise)
                loss = dc.sum(dc.mul(s.value, C))
            return s, tape.backward(loss, leaves)

        hard_sample, g_st = grads(True)
        soft_sample, g_soft = grads(False)
        assert set(np.unique(hard_sample.value.data)) <= {0.0, 1.0}
        np.testing.assert_array_equal(hard_sample.value.data, hard_sample.hard)
        for a, b in zip(g_st, g_soft):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-14)

    def test_mismatched_dimensions(self, rng):
        e = sample_edges(random_params(rng, 3), 1.0, draw_noise(rng, 3)[1])
        topo = topological_matrix(rng.normal(size=4), 0.3)
        with pytest.raises(ValueError):
            compose_dag(e, topo)


class TestIsAcyclic:
    def test_two_cycle(self):
        assert not is_acyclic([[0, 1], [1, 0]])

    def test_upper_triangular(self):
        assert is_acyclic(np.triu(np.ones((6, 6)), 1))

    def test_self_loop(self):
        assert not is_acyclic([[1, 0], [0, 0]])

    def test_agrees_with_dfs(self, rng):
        for _ in range(10_000):
            A = (rng.random((8, 8)) < rng.uniform(0.02, 0.3)).astype(float)
            np.fill_diagonal(A, 0)
            assert is_acyclic(A) == (not has_cycle_dfs(A))


class TestConstructFromDag:
    def test_chain(self):
        A = np.array([[0, 1, 0], [0, 0, 1], [0, 0, 0]], dtype=float)
        W, p = construct_from_dag(A)
        np.testing.assert_array_equal(p, [0, 1, 2])
        np.testing.assert_array_equal(W.hard, A)
        np.testing.assert_array_equal(compose_dag(W, topological_matrix(p, 1e-3)).hard, A)

    def test_empty(self):
        A = np.zeros((5, 5))
        W, p = construct_from_dag(A)
        np.testing.assert_array_equal(compose_dag(W, topological_matrix(p, 0.3)).hard, A)

    def test_cyclic_rejected(self):
        with pytest.raises(CyclicGraphError):
            construct_from_dag([[0, 1], [1, 0]])

    def test_all_four_node_dags_round_trip(self):
        count = 0
        for A in all_digraphs(4):
            if has_cycle_dfs(A):
                with pytest.raises(CyclicGraphError):
                    construct_from_dag(A)
                continue
            count += 1
            W, p = construct_from_dag(A)
            np.testing.assert_array_equal(compose_dag(W, topological_matrix(p, 1e-2)).hard, A)
        assert count == 543

    def test_random_dags_round_trip(self, rng):
        for _ in range(1000):
            A = random_dag(20, rng, density=rng.uniform(0.05, 0.5))
            W, p = construct_from_dag(A)
            np.testing.assert_array_equal(compose_dag(W, topological_matrix(p, 0.3)).hard, A)

    def test_no_curl_weighted_projection(self, rng):
        """The weighted ReLU(grad p) form from the same construction keeps exactly A's support."""
        A = random_dag(7, rng, 0.4)
        W, p = construct_from_dag(A)
        weights = rng.uniform(0.5, 2.0, size=A.shape) * W.hard
        projected = weights * np.maximum(grad_matrix(p).data, 0.0)
        np.testing.assert_array_equal(projected != 0, A != 0)
        assert is_acyclic(projected)


class TestFastHardSampler:
    def test_acyclic_and_calibrated(self, rng):
        d = 4
        phi = rng.normal(size=(d, d))
        params = PosteriorParams.from_arrays(phi, np.zeros(d), np.log(50.0))
        draws = sample_dags_hard(params, rng, 20_000)
        assert all(is_acyclic(A) for A in draws[:500])
        # with a very diffuse ordering each orientation is equally likely,
        # so P(A_ij) = sigmoid(phi_ij) / 2
        freq = draws.mean(axis=0)
        target = expit(phi) / 2
        se = np.sqrt(target * (1 - target) / len(draws))
        off = ~np.eye(d, dtype=bool)
        assert np.all(np.abs(freq - target)[off] < 4 * se[off])

    def test_matches_full_sampler_distribution(self, rng):
        d = 3
        params = random_params(rng, d, scale=0.5)
        full = np.mean([sample_dag(params, rng).hard for _ in range(20_000)], axis=0)
        fast = sample_dags_hard(params, rng, 20_000).mean(axis=0)
        se = np.sqrt(np.maximum(full * (1 - full), 1e-4) * 2 / 20_000)
        assert np.all(np.abs(full - fast) < 4 * se)


def test_params_validation():
    with pytest.raises(ValueError):
        PosteriorParams.from_arrays(np.zeros((1, 1)), np.zeros(1), 0.0)
    with pytest.raises(ValueError):
        PosteriorParams.from_arrays(np.zeros((3, 3)), np.zeros(2), 0.0)
    with pytest.raises(ValueError):
        PosteriorParams.from_arrays(np.full((2, 2), np.inf), np.zeros(2), 0.0)
