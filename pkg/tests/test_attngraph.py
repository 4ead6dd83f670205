"""Attention DAG construction, Dijkstra paths, group ranking."""

import math

import numpy as np
import pytest

from attnpath import attngraph as ag
from attnpath.errors import ConfigError, NoPathError, ValidationError

from conftest import enumerate_best_path, random_row_stochastic


class TestBuildDag:
    def test_vertex_and_arc_counts(self):
        dag = ag.build_dag([np.array([[0.5, 0.5], [0.3, 0.7]])])
        assert dag.num_vertices == 4
        assert dag.num_arcs() == 4

    def test_identity_prunes_off_diagonal(self):
        dag = ag.build_dag([np.eye(3), np.eye(3)])
        assert dag.num_arcs() == 6
        for cost in dag.costs:
            assert np.all(np.isfinite(np.diag(cost)))
            np.testing.assert_array_equal(np.diag(cost), 0.0)

    def test_arc_weights_equal_matrix_entries(self):
        rng = np.random.default_rng(0)
        stack = random_row_stochastic(4, 3, rng)
        dag = ag.build_dag(stack)
        for w, a in zip(dag.weights, stack):
            np.testing.assert_array_equal(w, a)

    def test_rejects_inconsistent_sizes(self):
        with pytest.raises(ValidationError):
            ag.build_dag([np.eye(2), np.eye(3)])
        with pytest.raises(ValidationError):
            ag.build_dag([np.ones((2, 3))])


class TestMaxProbPath:
    def test_identity_ties_break_to_lowest_index(self):
        dag = ag.build_dag([np.eye(4)] * 3)
        res = ag.max_prob_path(dag)
        assert res.vertices == (0, 0, 0, 0)
        assert res.probability == 1.0
        assert res.cost == 0.0

    def test_uniform_ties_break_lexicographically(self):
        dag = ag.build_dag([np.full((3, 3), 1 / 3)] * 2)
        res = ag.max_prob_path(dag)
        assert res.vertices == (0, 0, 0)
        assert abs(res.probability - 1 / 9) < 1e-15

    def test_matches_enumeration_on_random_stacks(self):
        rng = np.random.default_rng(1)
        for _ in range(150):
            m = int(rng.integers(2, 7))
            layers = int(rng.integers(1, 6))
            stack = random_row_stochastic(m, layers, rng)
            res = ag.max_prob_path(ag.build_dag(stack))
            seq, prob = enumerate_best_path(stack)
            assert res.vertices == seq
            assert abs(res.probability - prob) <= 1e-12
            assert abs(res.cost - (-math.log(res.probability))) <= 1e-12

    def test_disconnected_graph(self):
        dag = ag.build_dag([np.array([[1.0, 0.0], [0.0, 1.0]]),
                            np.zeros((2, 2))])
        with pytest.raises(NoPathError):
            ag.max_prob_path(dag)

    def test_restricted_starts(self):
        a = np.array([[0.9, 0.1], [0.2, 0.8]])
        dag = ag.build_dag([a])
        res = ag.max_prob_path(dag, allowed_starts={1})
        assert res.vertices == (1, 1)
        assert res.probability == 0.8


class TestBestGroups:
    def test_two_group_ranking_is_forced(self):
        rng = np.random.default_rng(2)
        stack = random_row_stochastic(2, 2, rng)
        ranked = ag.best_groups(stack, 2)
        assert sorted(ranked) == [0, 1]

    def test_hand_enumerated_example(self):
        # best path starts at group 1 (weight 0.9); removal forces group 0 next
        a = np.array([[0.6, 0.4], [0.9, 0.1]])
        ranked = ag.best_groups([a], 2)
        assert ranked == [1, 0]

    def test_identity_orders_by_tie_break(self):
        assert ag.best_groups([np.eye(4)] * 2, 4) == [0, 1, 2, 3]

    def test_k_out_of_range(self):
        stack = [np.eye(2)]
        with pytest.raises(ConfigError):
            ag.best_groups(stack, 3)
        with pytest.raises(ConfigError):
            ag.best_groups(stack, 0)

    def test_full_ranking_is_permutation_property(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            m = int(rng.integers(2, 7))
            stack = random_row_stochastic(m, int(rng.integers(1, 5)), rng)
            assert sorted(ag.best_groups(stack, m)) == list(range(m))

    def test_removal_never_increases_probability(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            m = int(rng.integers(2, 6))
            stack = random_row_stochastic(m, int(rng.integers(1, 4)), rng)
            dag = ag.build_dag(stack)
            first = ag.max_prob_path(dag)
            rest = set(range(m)) - {first.vertices[0]}
            second = ag.max_prob_path(dag, allowed_starts=rest)
            assert second.probability <= first.probability + 1e-15


class TestPathProbabilityMatrix:
    def test_single_layer_equals_matrix(self):
        rng = np.random.default_rng(5)
        stack = random_row_stochastic(3, 1, rng)
        np.testing.assert_array_equal(ag.path_probability_matrix(stack), stack[0])

    def test_identity_stack(self):
        np.testing.assert_array_equal(
            ag.path_probability_matrix([np.eye(3)] * 4), np.eye(3))

    def test_matches_brute_force_over_intermediates(self):
        rng = np.random.default_rng(6)
        stack = random_row_stochastic(3, 2, rng)
        got = ag.path_probability_matrix(stack)
        expected = np.zeros((3, 3))
        for j in range(3):
            for k in range(3):
                expected[j, k] = max(stack[0][j, t] * stack[1][t, k] for t in range(3))
        np.testing.assert_array_equal(got, expected)

    def test_max_entry_equals_dijkstra_probability(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            m = int(rng.integers(2, 7))
            stack = random_row_stochastic(m, int(rng.integers(1, 6)), rng)
            dag = ag.build_dag(stack)
            assert ag.path_probability_matrix(dag).max() == ag.max_prob_path(dag).probability


class TestScaleUnit:
    def test_basic(self):
        np.testing.assert_allclose(ag.scale_unit([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])

    def test_constant_maps_to_zero(self):
        np.testing.assert_array_equal(ag.scale_unit([5.0, 5.0]), [0.0, 0.0])

    def test_idempotent(self):
        scaled = ag.scale_unit([1.0, 3.0, 2.0])
        np.testing.assert_allclose(ag.scale_unit(scaled), scaled, atol=1e-15)

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ag.scale_unit([])


class TestDagDump:
    def test_stable_and_complete(self):
        rng = np.random.default_rng(8)
        stack = random_row_stochastic(2, 2, rng)
        dag = ag.build_dag(stack)
        text = ag.format_dag(dag)
        assert text == ag.format_dag(ag.build_dag(stack))
        assert text.count("vertex") == dag.num_vertices
        assert text.count("arc") == dag.num_arcs()
        assert text.splitlines()[0] == "dag groups=2 layers=2"
