"""Shared fixtures and independent oracle helpers for the test suite."""

import itertools

import numpy as np
import pytest

from attnpath.model import ConceptTransformer, GroupSchema, ModelConfig


def finite_difference(loss_fn, array: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of a scalar function w.r.t. an array, in place."""
    grad = np.zeros_like(array)
    flat = array.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = loss_fn()
        flat[i] = orig - h
        fm = loss_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Infinity-norm relative error against the reference."""
    denom = max(np.abs(reference).max(), 1e-8)
    return float(np.abs(analytic - reference).max() / denom)


def random_row_stochastic(m: int, layers: int, rng: np.random.Generator,
                          floor: float = 1e-4) -> list[np.ndarray]:
    """A stack of strictly positive row-stochastic matrices."""
    mats = []
    for _ in range(layers):
        a = rng.random((m, m)) + floor
        mats.append(a / a.sum(axis=1, keepdims=True))
    return mats


def enumerate_best_path(stack: list[np.ndarray]) -> tuple[tuple[int, ...], float]:
    """Exhaustive maximum-probability path with lexicographic tie-break.

    itertools.product yields index tuples in lexicographic order, so
    keeping the first strictly-larger probability implements the same
    tie-break the library promises.
    """
    m = stack[0].shape[0]
    layers = len(stack)
    best_prob = -1.0
    best_seq = None
    for seq in itertools.product(range(m), repeat=layers + 1):
        prob = 1.0
        for l in range(layers):
            prob = prob * stack[l][seq[l], seq[l + 1]]
        if prob > best_prob:
            best_prob = prob
            best_seq = seq
    return best_seq, best_prob


@pytest.fixture
def tiny_model():
    """A small randomly initialized model over 3 groups of 2 features."""
    schema = GroupSchema.from_groups([("a", [0, 1]), ("b", [2, 3]), ("c", [4, 5])])
    config = ModelConfig(num_layers=2, num_heads=2, latent_dim=8, ff_dim=16,
                         dropout=0.0, num_classes=3)
    return ConceptTransformer.init(schema, config, seed=11)
