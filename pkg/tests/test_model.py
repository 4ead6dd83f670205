"""Encoder forward pass, attention extraction, schema, checkpoints."""

import math

import numpy as np
import pytest

from attnpath import numkernel as nk
from attnpath.errors import ConfigError, SchemaError, ValidationError
from attnpath.model import (AttentionStack, ConceptTransformer, EncoderWeights,
                            GroupSchema, ModelConfig, encoder_forward, tokenize)
from attnpath.numkernel import Tensor


def straight_line_forward(sample, schema, weights, config):
    """Independent single-sample re-computation of the whole forward pass.

    Plain numpy, no tape, explicit per-head loops; used as the oracle
    for encoder_forward.  Returns (logits, attention matrices).
    """
    d, h = config.latent_dim, config.num_heads
    dh = d // h
    x = np.stack([weights.proj[i].data @ sample[list(cols)]
                  for i, cols in enumerate(schema.columns)])

    def ln(v, gain, bias):
        mu = v.mean(axis=-1, keepdims=True)
        var = v.var(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + 1e-5) * gain + bias

    attn_mats = []
    for lw in weights.layers:
        q, k, v = x @ lw.wq.data, x @ lw.wk.data, x @ lw.wv.data
        heads = []
        for head in range(h):
            sl = slice(head * dh, (head + 1) * dh)
            scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            a = e / e.sum(axis=1, keepdims=True)
            attn_mats.append(a)
            heads.append(a @ v[:, sl])
        sub = np.concatenate(heads, axis=1) @ lw.wo.data
        x = ln(x + sub, lw.ln1_gain.data, lw.ln1_bias.data)
        ff = np.maximum(x @ lw.ff1.data + lw.ff1_bias.data, 0.0) @ lw.ff2.data \
            + lw.ff2_bias.data
        x = ln(x + ff, lw.ln2_gain.data, lw.ln2_bias.data)
    logits = x.mean(axis=0) @ weights.head_w.data + weights.head_b.data
    return logits, attn_mats


class TestGroupSchema:
    def test_rejects_single_group(self):
        with pytest.raises(SchemaError):
            GroupSchema.from_groups([("only", [0, 1])])

    def test_rejects_overlap(self):
        with pytest.raises(SchemaError, match="reuses"):
            GroupSchema.from_groups([("a", [0, 1]), ("b", [1, 2])])

    def test_rejects_gap(self):
        with pytest.raises(SchemaError, match="cover"):
            GroupSchema.from_groups([("a", [0]), ("b", [2])])

    def test_round_trip_and_digest(self):
        schema = GroupSchema.from_groups([("a", [0, 2]), ("b", [1])])
        again = GroupSchema.from_json_obj(schema.to_json_obj())
        assert again == schema
        assert again.digest() == schema.digest()
        other = GroupSchema.from_groups([("a", [0, 1]), ("b", [2])])
        assert other.digest() != schema.digest()


class TestModelConfig:
    def test_head_divisibility(self):
        with pytest.raises(ConfigError):
            ModelConfig(latent_dim=10, num_heads=4)

    def test_dropout_range(self):
        with pytest.raises(ConfigError):
            ModelConfig(dropout=1.0)


class TestTokenize:
    def setup_method(self):
        self.schema = GroupSchema.from_groups([("a", [0]), ("b", [1, 2])])
        self.config = ModelConfig(num_layers=1, num_heads=1, latent_dim=4,
                                  ff_dim=4, dropout=0.0, num_classes=2)
        self.weights = EncoderWeights.init(self.schema, self.config,
                                           np.random.default_rng(0))

    def test_zero_projection_gives_zero_row(self):
        self.weights.proj[0].data[:] = 0.0
        out = tokenize(np.array([5.0, 1.0, 2.0]), self.schema, self.weights)
        np.testing.assert_array_equal(out.data[0], np.zeros(4))

    def test_scaled_basis_projection(self):
        self.weights.proj[0].data[:] = 0.0
        self.weights.proj[0].data[0, 0] = 2.0
        out = tokenize(np.array([3.0, 0.0, 0.0]), self.schema, self.weights)
        np.testing.assert_array_equal(out.data[0], [6.0, 0.0, 0.0, 0.0])

    def test_matches_independent_matvec(self):
        rng = np.random.default_rng(1)
        sample = rng.standard_normal(3)
        out = tokenize(sample, self.schema, self.weights)
        np.testing.assert_array_equal(out.data[0], self.weights.proj[0].data @ sample[:1])
        np.testing.assert_array_equal(out.data[1], self.weights.proj[1].data @ sample[1:])

    def test_length_mismatch(self):
        with pytest.raises(SchemaError):
            tokenize(np.zeros(5), self.schema, self.weights)


class TestEncoderForward:
    def test_single_token_attention_is_one(self):
        config = ModelConfig(num_layers=2, num_heads=2, latent_dim=4, ff_dim=4,
                             dropout=0.0, num_classes=2)
        schema = GroupSchema.from_groups([("a", [0]), ("b", [1])])
        weights = EncoderWeights.init(schema, config, np.random.default_rng(2))
        tokens = Tensor(np.random.default_rng(3).standard_normal((1, 4)))
        _, attn = encoder_forward(tokens, weights, config)
        for layer in attn:
            np.testing.assert_array_equal(layer.data, np.ones((1, 2, 1, 1)))

    def test_identical_tokens_give_identical_attention_rows(self):
        config = ModelConfig(num_layers=1, num_heads=1, latent_dim=4, ff_dim=4,
                             dropout=0.0, num_classes=2)
        schema = GroupSchema.from_groups([("a", [0]), ("b", [1]), ("c", [2])])
        weights = EncoderWeights.init(schema, config, np.random.default_rng(4))
        row = np.random.default_rng(5).standard_normal(4)
        tokens = Tensor(np.tile(row, (3, 1)))
        _, attn = encoder_forward(tokens, weights, config)
        a = attn[0].data[0, 0]
        np.testing.assert_allclose(a[1], a[0], atol=1e-15)
        np.testing.assert_allclose(a[2], a[0], atol=1e-15)

    def test_matches_straight_line_recomputation(self, tiny_model):
        rng = np.random.default_rng(6)
        for _ in range(5):
            sample = rng.standard_normal(6)
            logits, attn = tiny_model.forward(Tensor(sample))
            oracle_logits, oracle_attn = straight_line_forward(
                sample, tiny_model.schema, tiny_model.weights, tiny_model.config)
            np.testing.assert_allclose(logits.data, oracle_logits, atol=1e-10)
            got = [layer.data[0, head] for layer in attn
                   for head in range(tiny_model.config.num_heads)]
            for a, b in zip(got, oracle_attn):
                np.testing.assert_allclose(a, b, atol=1e-12)

    def test_matrix_counts_teacher_vs_student(self):
        schema = GroupSchema.from_groups([("a", [0]), ("b", [1])])
        teacher_cfg = ModelConfig(num_layers=2, num_heads=4, latent_dim=8, ff_dim=8,
                                  dropout=0.0, num_classes=2)
        student_cfg = ModelConfig(num_layers=4, num_heads=1, latent_dim=8, ff_dim=8,
                                  dropout=0.0, num_classes=2)
        x = np.random.default_rng(7).standard_normal(2)
        teacher = ConceptTransformer.init(schema, teacher_cfg, seed=0)
        student = ConceptTransformer.init(schema, student_cfg, seed=0)
        assert len(teacher.predict(x).stacks[0]) == 2 * 4
        assert len(student.predict(x).stacks[0]) == 4

    def test_attention_rows_stochastic_property(self, tiny_model):
        rng = np.random.default_rng(8)
        result = tiny_model.predict(rng.standard_normal((20, 6)))
        for stack in result.stacks:
            for a in stack:
                np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-9)
                assert a.min() >= 0.0 and a.max() <= 1.0 + 1e-9


class TestPermutationInvariance:
    def test_group_permutation_preserves_logits(self, tiny_model):
        rng = np.random.default_rng(9)
        sample = rng.standard_normal(6)
        base_logits, base_attn = tiny_model.forward(Tensor(sample))

        perm = [2, 0, 1]
        # permute groups in the schema (and re-index columns to stay a cover)
        order = [c for g in perm for c in tiny_model.schema.columns[g]]
        new_cols = []
        pos = 0
        for g in perm:
            size = len(tiny_model.schema.columns[g])
            new_cols.append(tuple(range(pos, pos + size)))
            pos += size
        schema = GroupSchema(
            tuple(tiny_model.schema.names[g] for g in perm), tuple(new_cols))
        weights = tiny_model.weights.copy()
        weights.proj = [weights.proj[g] for g in perm]
        permuted_model = ConceptTransformer(schema, tiny_model.config, weights)
        logits, attn = permuted_model.forward(Tensor(sample[order]))
        np.testing.assert_allclose(logits.data, base_logits.data, atol=1e-9)
        # attention matrices permute with the groups
        p = np.array(perm)
        for a, b in zip(attn, base_attn):
            np.testing.assert_allclose(a.data[0, 0], b.data[0, 0][np.ix_(p, p)],
                                       atol=1e-9)


class TestPredict:
    def test_uniform_logits_tie_break_to_class_zero(self, tiny_model):
        tiny_model.weights.head_w.data[:] = 0.0
        tiny_model.weights.head_b.data[:] = 0.0
        result = tiny_model.predict(np.random.default_rng(10).standard_normal((4, 6)))
        assert np.all(result.labels == 0)

    def test_probabilities_sum_to_one(self, tiny_model):
        result = tiny_model.predict(np.random.default_rng(11).standard_normal((50, 6)))
        np.testing.assert_allclose(result.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_agrees_with_forward_composition(self, tiny_model):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((100, 6))
        result = tiny_model.predict(x)
        logits, _ = tiny_model.forward(Tensor(x))
        np.testing.assert_array_equal(result.labels, np.argmax(logits.data, axis=1))


class TestAttentionStack:
    def test_rejects_non_stochastic(self):
        with pytest.raises(ValidationError):
            AttentionStack([np.array([[0.5, 0.2], [0.5, 0.5]])])

    def test_mean_row_entropy_uniform(self):
        a = np.full((3, 3), 1 / 3)
        stack = AttentionStack([a, a])
        assert abs(stack.mean_row_entropy() - math.log(3)) < 1e-12


class TestCheckpoint:
    def test_round_trip_exact_and_byte_stable(self, tiny_model, tmp_path):
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        tiny_model.save(p1)
        tiny_model.save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        loaded = ConceptTransformer.load(p1)
        for (na, ta), (nb, tb) in zip(tiny_model.weights.named_parameters(),
                                      loaded.weights.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        assert loaded.config == tiny_model.config
        assert loaded.schema == tiny_model.schema
        # loaded model reproduces predictions bit-for-bit
        x = np.random.default_rng(13).standard_normal((5, 6))
        np.testing.assert_array_equal(
            loaded.predict(x).probs, tiny_model.predict(x).probs)

    def test_load_missing_file(self, tmp_path):
        from attnpath.errors import DataError
        with pytest.raises(DataError):
            ConceptTransformer.load(tmp_path / "nope.json")
