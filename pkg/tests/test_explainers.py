"""Explanation methods: MLA/LL reductions, saliency, Shapley values."""

import itertools
import math

import numpy as np
import pytest

from attnpath.data import synth_planted
from attnpath.errors import ConfigError, DataError
from attnpath.explainers import (Explanation, background_reference, explain_batch,
                                 explain_ll, explain_mla, explain_sa, explain_sh,
                                 input_gradients, ll_from_stack, masked_inputs,
                                 mla_from_stack, predicted_class_probability,
                                 read_interchange, saliency_scores,
                                 shapley_permutation_values, top_k_groups,
                                 write_explanations)
from attnpath.model import AttentionStack, ConceptTransformer, GroupSchema, ModelConfig

from conftest import finite_difference, random_row_stochastic, rel_error


def exact_shapley(value_fn, n_features: int) -> np.ndarray:
    """Brute-force Shapley values by full 2^n coalition enumeration."""
    values = np.zeros(n_features)
    fact = math.factorial
    for f in range(n_features):
        others = [i for i in range(n_features) if i != f]
        for r in range(n_features):
            for subset in itertools.combinations(others, r):
                mask = np.zeros(n_features, dtype=bool)
                mask[list(subset)] = True
                without = value_fn(mask)
                mask[f] = True
                with_f = value_fn(mask)
                weight = fact(r) * fact(n_features - r - 1) / fact(n_features)
                values[f] += weight * (with_f - without)
    return values


class TestTopK:
    def test_ties_break_to_lower_index(self):
        assert top_k_groups(np.array([0.5, 0.8, 0.8, 0.1]), 2) == [1, 2]
        assert top_k_groups(np.array([0.3, 0.3, 0.3]), 3) == [0, 1, 2]

    def test_k_validation(self):
        with pytest.raises(ConfigError):
            top_k_groups(np.array([1.0, 2.0]), 3)


class TestMlaFromStack:
    def test_identity_stack(self):
        stack = AttentionStack([np.eye(3)] * 2)
        scores, groups, heatmap = mla_from_stack(stack, 3)
        assert groups == [0, 1, 2]
        np.testing.assert_array_equal(heatmap, np.eye(3))
        np.testing.assert_array_equal(scores, np.ones(3))

    def test_two_group_single_layer_hand_enumeration(self):
        a = np.array([[0.6, 0.4], [0.9, 0.1]])
        stack = AttentionStack([a])
        scores, groups, heatmap = mla_from_stack(stack, 2)
        np.testing.assert_array_equal(heatmap, a)
        # per-group score: best end vertex of each start row
        np.testing.assert_array_equal(scores, [0.6, 0.9])
        assert groups == [1, 0]

    def test_full_k_returns_permutation(self):
        rng = np.random.default_rng(0)
        stack = AttentionStack(random_row_stochastic(4, 3, rng))
        _, groups, _ = mla_from_stack(stack, 4)
        assert sorted(groups) == [0, 1, 2, 3]


class TestLlFromStack:
    def test_uniform_matrix(self):
        stack = AttentionStack([np.full((4, 4), 0.25)])
        scores, groups, _ = ll_from_stack(stack, 1)
        np.testing.assert_allclose(scores, 0.25)
        assert groups == [0]

    def test_dominant_column(self):
        a = np.tile([0.1, 0.2, 0.7], (3, 1))
        stack = AttentionStack([np.full((3, 3), 1 / 3), a])
        scores, groups, heatmap = ll_from_stack(stack, 1)
        np.testing.assert_allclose(scores, [0.1, 0.2, 0.7], atol=1e-15)
        assert groups == [2]
        np.testing.assert_array_equal(heatmap, a)

    def test_random_matches_column_mean(self):
        rng = np.random.default_rng(1)
        stack = AttentionStack(random_row_stochastic(5, 2, rng))
        scores, _, _ = ll_from_stack(stack, 2)
        np.testing.assert_allclose(scores, stack[1].mean(axis=0), atol=1e-12)


class TestMethodAdapters:
    def test_mla_and_ll_compose_predict_with_helpers(self, tiny_model):
        sample = np.random.default_rng(2).standard_normal(6)
        stack = tiny_model.predict(sample).stacks[0]
        e_mla = explain_mla(tiny_model, sample, k=2)
        scores, groups, heatmap = mla_from_stack(stack, 2)
        np.testing.assert_array_equal(e_mla.scores, scores)
        assert e_mla.best_groups == groups
        np.testing.assert_array_equal(e_mla.heatmap, heatmap)
        e_ll = explain_ll(tiny_model, sample, k=2)
        scores, groups, heatmap = ll_from_stack(stack, 2)
        np.testing.assert_array_equal(e_ll.scores, scores)
        assert e_ll.best_groups == groups

    def test_heatmap_invariants(self, tiny_model):
        sample = np.random.default_rng(3).standard_normal(6)
        e_mla = explain_mla(tiny_model, sample, k=2)
        assert e_mla.heatmap.min() > 0.0 and e_mla.heatmap.max() <= 1.0
        e_ll = explain_ll(tiny_model, sample, k=2)
        np.testing.assert_allclose(e_ll.heatmap.sum(axis=1), 1.0, atol=1e-9)

    def test_ranking_invariant_under_monotone_transform(self, tiny_model):
        sample = np.random.default_rng(4).standard_normal(6)
        for fn in (explain_mla, explain_ll, explain_sa):
            e = fn(tiny_model, sample, k=3)
            transformed = np.exp(3.0 * e.scores) + 1.0
            assert top_k_groups(transformed, 3) == e.best_groups


class TestSaliency:
    def test_gradients_match_finite_differences(self, tiny_model):
        rng = np.random.default_rng(5)
        sample = rng.standard_normal(6)
        grads, predicted = input_gradients(tiny_model, sample)
        target = int(predicted[0])

        x = sample.copy()

        def loss():
            from attnpath.numkernel import Tensor
            from attnpath import numkernel as nk
            from attnpath.training import one_hot
            logits, _ = tiny_model.forward(Tensor(x[None, :]))
            return float(nk.cross_entropy_soft(
                None, logits, one_hot(np.array([target]), 3)).data)

        fd = finite_difference(loss, x, h=1e-6)
        assert rel_error(grads[0], fd) < 1e-3

    def test_unused_feature_gets_zero_gradient(self, tiny_model):
        # zero the projection column that consumes input feature 3
        tiny_model.weights.proj[1].data[:, 1] = 0.0
        grads, _ = input_gradients(tiny_model,
                                   np.random.default_rng(6).standard_normal(6))
        assert grads[0][3] == 0.0
        assert np.any(grads[0] != 0.0)

    def test_batched_equals_per_sample(self, tiny_model):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 6))
        batched, _ = input_gradients(tiny_model, x)
        for i in range(5):
            single, _ = input_gradients(tiny_model, x[i])
            np.testing.assert_allclose(batched[i], single[0], atol=1e-12)

    def test_explain_sa_scores_are_group_means(self, tiny_model):
        sample = np.random.default_rng(8).standard_normal(6)
        e = explain_sa(tiny_model, sample, k=2)
        grads, _ = input_gradients(tiny_model, sample)
        np.testing.assert_array_equal(
            e.scores, saliency_scores(grads[0], tiny_model.schema))


class TestShapley:
    def test_null_player_is_exactly_zero(self, tiny_model):
        tiny_model.weights.proj[2].data[:, 0] = 0.0   # feature 4 unused
        rng = np.random.default_rng(9)
        background = rng.standard_normal((30, 6))
        e = explain_sh(tiny_model, rng.standard_normal(6), k=2,
                       background=background, sampling_budget=40, seed=0)
        assert e.feature_values[4] == 0.0

    def test_efficiency_identity(self, tiny_model):
        rng = np.random.default_rng(10)
        background = rng.standard_normal((30, 6))
        sample = rng.standard_normal(6)
        e = explain_sh(tiny_model, sample, k=2, background=background,
                       sampling_budget=25, seed=1)
        reference = background_reference(background)
        pred = int(tiny_model.predict(sample).labels[0])
        v_full = predicted_class_probability(tiny_model, sample[None, :], pred)[0]
        v_none = predicted_class_probability(tiny_model, reference[None, :], pred)[0]
        assert abs(e.feature_values.sum() - (v_full - v_none)) < 1e-12

    def test_single_feature_block_equals_probability_difference(self, tiny_model):
        rng = np.random.default_rng(11)
        sample = rng.standard_normal(6)
        reference = rng.standard_normal(6)
        pred = int(tiny_model.predict(sample).labels[0])
        values = shapley_permutation_values(
            tiny_model, sample, reference, pred, blocks=[tuple(range(6))],
            budget=1, rng=np.random.default_rng(0))
        v_full = predicted_class_probability(tiny_model, sample[None, :], pred)[0]
        v_none = predicted_class_probability(tiny_model, reference[None, :], pred)[0]
        assert values.shape == (1,)
        assert abs(values[0] - (v_full - v_none)) < 1e-15

    def test_sampling_close_to_exact_enumeration(self, tiny_model):
        rng = np.random.default_rng(12)
        sample = rng.standard_normal(6)
        background = rng.standard_normal((20, 6))
        reference = background_reference(background)
        pred = int(tiny_model.predict(sample).labels[0])
        blocks = [(i,) for i in range(6)]

        def value_fn(mask):
            inp = masked_inputs(sample, reference, mask[None, :], blocks)
            return predicted_class_probability(tiny_model, inp, pred)[0]

        exact = exact_shapley(value_fn, 6)
        estimate = shapley_permutation_values(tiny_model, sample, reference, pred,
                                              blocks, budget=500,
                                              rng=np.random.default_rng(3))
        assert np.abs(estimate - exact).mean() < 0.02

    def test_categorical_blocks_toggle_atomically(self):
        schema = GroupSchema.from_groups([("a", [0, 1, 2]), ("b", [3])])
        config = ModelConfig(num_layers=1, num_heads=1, latent_dim=4, ff_dim=4,
                             dropout=0.0, num_classes=2)
        model = ConceptTransformer.init(schema, config, seed=4)
        # columns 0-2 are a one-hot block
        from attnpath.data import RawFeature
        feats = [RawFeature("cat", "categorical", (0, 1, 2), ("p", "q", "r")),
                 RawFeature("num", "numeric", (3,))]
        background = np.array([[1.0, 0, 0, 0.5], [1.0, 0, 0, -0.5],
                               [0.0, 1, 0, 1.5]])
        sample = np.array([0.0, 0.0, 1.0, 2.0])
        reference = background_reference(background, raw_features=feats)
        np.testing.assert_array_equal(reference[:3], [1.0, 0.0, 0.0])
        e = explain_sh(model, sample, k=2, background=background,
                       sampling_budget=30, seed=5, raw_features=feats)
        assert e.feature_values.shape == (2,)
        assert e.scores.shape == (2,)

    def test_budget_and_background_validation(self, tiny_model):
        with pytest.raises(ConfigError):
            explain_sh(tiny_model, np.zeros(6), background=np.zeros((3, 6)),
                       sampling_budget=0)
        with pytest.raises(ConfigError):
            explain_sh(tiny_model, np.zeros(6), background=None)


class TestExplainBatch:
    def _dataset_model(self):
        dataset, schema = synth_planted(n=120, m=3, k_per_group=2, seed=15)
        config = ModelConfig(num_layers=2, num_heads=1, latent_dim=8, ff_dim=16,
                             dropout=0.0, num_classes=2)
        return dataset, ConceptTransformer.init(schema, config, seed=16)

    def test_empty_split_gives_empty_list(self):
        dataset, model = self._dataset_model()
        assert explain_batch(model, dataset, "mla", split="test") == []

    def test_batch_equals_per_sample_calls(self):
        dataset, model = self._dataset_model()
        idx = dataset.indices("val")[:4]
        for method, single in (("mla", explain_mla), ("ll", explain_ll),
                               ("sa", explain_sa)):
            batch = explain_batch(model, dataset, method, k=2)[:4]
            for out, i in zip(batch, idx):
                ref = single(model, dataset.features[i], k=2)
                np.testing.assert_allclose(out.scores, ref.scores, atol=1e-12)
                assert out.best_groups == ref.best_groups
                assert out.sample_id == int(i)

    def test_sh_batch_reproducible_via_derived_seed(self):
        dataset, model = self._dataset_model()
        batch = explain_batch(model, dataset, "sh", k=2, shap_budget=20,
                              background_size=30, seed=9)
        again = explain_batch(model, dataset, "sh", k=2, shap_budget=20,
                              background_size=30, seed=9)
        for a, b in zip(batch, again):
            np.testing.assert_array_equal(a.scores, b.scores)

    def test_best_group_counts_cover_all_samples(self):
        dataset, model = self._dataset_model()
        for method in ("mla", "ll", "sa"):
            batch = explain_batch(model, dataset, method, k=2)
            counts = np.zeros(3)
            for e in batch:
                counts[e.best_groups[0]] += 1
            assert counts.sum() == len(batch) == dataset.indices("val").size

    def test_correctness_flags(self):
        dataset, model = self._dataset_model()
        batch = explain_batch(model, dataset, "ll", k=2)
        idx = dataset.indices("val")
        predicted = model.predict(dataset.features[idx]).labels
        for e, i, p in zip(batch, idx, predicted):
            assert e.correct == (p == dataset.labels[i])

    def test_unknown_method(self):
        dataset, model = self._dataset_model()
        with pytest.raises(ConfigError, match="mla, ll, sa, sh"):
            explain_batch(model, dataset, "lime")


class TestInterchange:
    def test_round_trip(self, tmp_path):
        explanations = [
            Explanation(method="mla", scores=np.array([0.2, 0.8]), best_groups=[1, 0],
                        predicted_class=1, sample_id=3, correct=True),
            Explanation(method="mla", scores=np.array([0.6, 0.4]), best_groups=[0, 1],
                        predicted_class=0, sample_id=5, correct=False),
        ]
        path = tmp_path / "expl.jsonl"
        write_explanations(path, explanations, dataset_id="synth", method="mla",
                           seed=7, group_names=["g0", "g1"], k=2)
        header, records = read_interchange(path)
        assert header["method"] == "mla"
        assert header["seed"] == 7
        assert header["m"] == 2
        assert [r["sample_id"] for r in records] == [3, 5]
        assert records[0]["best_groups"] == [1, 0]
        assert records[1]["correct"] is False

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            read_interchange(tmp_path / "missing.jsonl")

    def test_writes_are_deterministic(self, tmp_path):
        e = [Explanation(method="ll", scores=np.array([0.5, 0.5]), best_groups=[0, 1],
                         predicted_class=0, sample_id=0, correct=True)]
        p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        for p in (p1, p2):
            write_explanations(p, e, dataset_id="d", method="ll", seed=0,
                               group_names=["a", "b"], k=2)
        assert p1.read_bytes() == p2.read_bytes()
