"""Uniform explanation interface: attention paths plus three baselines.

All four methods explain the student's own prediction for a sample and
reduce to per-concept-group scores with a ranked best-group list:

* MLA -- maximum-probability paths through the all-layer attention DAG;
* LL  -- last-layer attention, column means (attention received);
* SA  -- gradient saliency, mean absolute input gradient per group;
* SH  -- Shapley values of the predicted-class probability, estimated
  by permutation sampling with mean/mode background imputation.

Explanations serialize to a line-delimited JSON interchange file with a
single header line, which the analysis stage consumes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attngraph, numkernel as nk
from .data import RawFeature, TabularDataset
from .errors import ConfigError, DataError, NumericError, SchemaError, ValidationError
from .model import AttentionStack, ConceptTransformer, GroupSchema
from .numkernel import Tape, Tensor
from .training import one_hot

INTERCHANGE_FORMAT_VERSION = 1

METHODS = ("mla", "ll", "sa", "sh")


@dataclass
class Explanation:
    """Per-group scores and ranked best groups for one prediction."""

    method: str
    scores: np.ndarray                    # (m,) nonnegative
    best_groups: list[int]                # distinct indices in 0..m-1
    predicted_class: int
    heatmap: np.ndarray | None = None     # (m, m); MLA and LL only
    sample_id: int | None = None
    correct: bool | None = None
    feature_values: np.ndarray | None = None   # per raw feature; SH only


def top_k_groups(scores: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest scores, ties resolved to the lower index."""
    if not 1 <= k <= scores.shape[0]:
        raise ConfigError(f"k must be in [1, {scores.shape[0]}], got {k}")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]


def mla_from_stack(stack: AttentionStack, k: int) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Scores, ranked groups, and heatmap from one attention stack.

    The heatmap entry (j, k) is the maximum path probability from input
    vertex j to final-layer vertex k; a group's score is its best
    reachable end vertex, and ranking comes from iterative best-group
    extraction on the DAG.
    """
    heatmap = attngraph.path_probability_matrix(stack)
    scores = heatmap.max(axis=1)
    groups = attngraph.best_groups(stack, k)
    return scores, groups, heatmap


def ll_from_stack(stack: AttentionStack, k: int) -> tuple[np.ndarray, list[int], np.ndarray]:
    """Column means of the last attention matrix: attention received per group."""
    heatmap = stack[len(stack) - 1]
    scores = heatmap.mean(axis=0)
    return scores, top_k_groups(scores, k), heatmap


def explain_mla(model: ConceptTransformer, sample: np.ndarray, k: int = 2) -> Explanation:
    result = model.predict(sample)
    scores, groups, heatmap = mla_from_stack(result.stacks[0], k)
    return Explanation(method="mla", scores=scores, best_groups=groups,
                       predicted_class=int(result.labels[0]), heatmap=heatmap)


def explain_ll(model: ConceptTransformer, sample: np.ndarray, k: int = 2) -> Explanation:
    result = model.predict(sample)
    scores, groups, heatmap = ll_from_stack(result.stacks[0], k)
    return Explanation(method="ll", scores=scores, best_groups=groups,
                       predicted_class=int(result.labels[0]), heatmap=heatmap)


# ---------------------------------------------------------------------------
# gradient saliency
# ---------------------------------------------------------------------------


def input_gradients(model: ConceptTransformer, x: np.ndarray,
                    target: str = "predicted", labels: np.ndarray | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Loss gradients w.r.t. the raw input features, one row per sample.

    The loss is cross entropy against each sample's own predicted class
    (``target="predicted"``), or against given labels.  Batching is
    exact: per-sample losses are independent, so gradients of their sum
    coincide with per-sample gradients.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tape = Tape()
    leaf = Tensor(x, requires_grad=True, name="input")
    logits, _ = model.forward(leaf, train_mode=False, tape=tape)
    predicted = np.argmax(logits.data, axis=1)
    if target == "predicted":
        chosen = predicted
    elif target == "label":
        if labels is None:
            raise ConfigError("target='label' requires labels")
        chosen = np.asarray(labels, dtype=np.int64)
    else:
        raise ConfigError(f"unknown saliency target {target!r}")
    targets = one_hot(chosen, model.config.num_classes)
    # scale by n so the mean-reduced loss yields per-sample gradients
    loss = nk.scale(tape, nk.cross_entropy_soft(tape, logits, targets), float(x.shape[0]))
    nk.backward(tape, loss)
    grads = leaf.grad
    if grads is None or not np.all(np.isfinite(grads)):
        raise NumericError("saliency gradients are missing or non-finite")
    return grads, predicted


def saliency_scores(grads_row: np.ndarray, schema: GroupSchema) -> np.ndarray:
    """Mean absolute gradient over each group's columns."""
    return np.array([np.abs(grads_row[list(cols)]).mean() for cols in schema.columns])


def explain_sa(model: ConceptTransformer, sample: np.ndarray, k: int = 2,
               target: str = "predicted", label: int | None = None) -> Explanation:
    labels = None if label is None else np.array([label])
    grads, predicted = input_gradients(model, sample, target=target, labels=labels)
    scores = saliency_scores(grads[0], model.schema)
    return Explanation(method="sa", scores=scores, best_groups=top_k_groups(scores, k),
                       predicted_class=int(predicted[0]))


# ---------------------------------------------------------------------------
# Shapley values
# ---------------------------------------------------------------------------


def _default_blocks(n_features: int) -> list[tuple[int, ...]]:
    return [(i,) for i in range(n_features)]


def background_reference(background: np.ndarray,
                         blocks: list[tuple[int, ...]] | None = None,
                         raw_features: list[RawFeature] | None = None) -> np.ndarray:
    """Imputation vector: column means, with one-hot blocks set to the mode.

    Modal category ties resolve to the lowest category index so the
    reference is deterministic.
    """
    bg = np.atleast_2d(np.asarray(background, dtype=np.float64))
    if bg.shape[0] == 0:
        raise ConfigError("background dataset is empty")
    ref = bg.mean(axis=0)
    features = raw_features or []
    if raw_features is None and blocks is not None:
        features = [RawFeature(f"f{i}", "categorical" if len(b) > 1 else "numeric",
                               tuple(b)) for i, b in enumerate(blocks)]
    for feat in features:
        if feat.kind == "categorical":
            cols = list(feat.processed)
            counts = bg[:, cols].sum(axis=0)
            winner = int(np.argmax(counts))      # argmax ties -> lowest index
            pattern = np.zeros(len(cols))
            pattern[winner] = 1.0
            ref[cols] = pattern
    return ref


def predicted_class_probability(model: ConceptTransformer, inputs: np.ndarray,
                                class_index: int, batch_size: int = 4096) -> np.ndarray:
    """Model probability of a fixed class for each input row."""
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    out = np.empty(x.shape[0])
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model.forward(Tensor(x[start:start + batch_size]), train_mode=False)
        z = logits.data
        e = np.exp(z - z.max(axis=1, keepdims=True))
        p = e / e.sum(axis=1, keepdims=True)
        out[start:start + p.shape[0]] = p[:, class_index]
    return out


def masked_inputs(sample: np.ndarray, reference: np.ndarray, feature_masks: np.ndarray,
                  blocks: list[tuple[int, ...]]) -> np.ndarray:
    """Composite rows: block f comes from the sample where mask[.., f] is set."""
    col_mask = np.zeros((feature_masks.shape[0], sample.shape[0]), dtype=bool)
    for f, cols in enumerate(blocks):
        col_mask[:, list(cols)] = feature_masks[:, [f]]
    return np.where(col_mask, sample[None, :], reference[None, :])


def shapley_permutation_values(model: ConceptTransformer, sample: np.ndarray,
                               reference: np.ndarray, class_index: int,
                               blocks: list[tuple[int, ...]], budget: int,
                               rng: np.random.Generator) -> np.ndarray:
    """Permutation-sampling Shapley estimates for every raw feature.

    For each sampled permutation, features flip one at a time from the
    reference value to the sample value; the probability change at each
    flip is that feature's marginal contribution.  All flip states of
    all permutations are evaluated in one batched forward pass, and the
    telescoping sum makes the efficiency identity exact per permutation.
    """
    if budget < 1:
        raise ConfigError(f"sampling budget must be >= 1, got {budget}")
    p = len(blocks)
    perms = np.empty((budget, p), dtype=np.intp)
    for b in range(budget):
        perms[b] = rng.permutation(p)
    # position[b, f] = index of feature f within permutation b
    position = np.argsort(perms, axis=1)
    # masks[b, s, f]: feature f is active among the first s flips of perm b
    steps = np.arange(p + 1)[None, :, None]
    masks = position[:, None, :] < steps
    flat = masks.reshape(budget * (p + 1), p)
    inputs = masked_inputs(sample, reference, flat, blocks)
    probs = predicted_class_probability(model, inputs, class_index)
    probs = probs.reshape(budget, p + 1)
    contributions = np.diff(probs, axis=1)       # (budget, p); step s flips perms[b, s]
    values = np.zeros(p)
    for b in range(budget):
        values[perms[b]] += contributions[b]
    return values / budget


def explain_sh(model: ConceptTransformer, sample: np.ndarray, k: int = 2,
               background: np.ndarray | None = None, sampling_budget: int = 200,
               seed: int = 0, raw_features: list[RawFeature] | None = None) -> Explanation:
    """Shapley attribution of the predicted-class probability.

    ``raw_features`` supplies the atomic one-hot blocks; by default
    every column is its own feature.  A group's score is the mean
    absolute Shapley value over its raw features.
    """
    if background is None or np.atleast_2d(background).shape[0] == 0:
        raise ConfigError("explain_sh requires a nonempty background dataset")
    sample = np.asarray(sample, dtype=np.float64)
    features = raw_features or [
        RawFeature(f"f{i}", "numeric", (i,)) for i in range(sample.shape[0])
    ]
    blocks = [f.processed for f in features]
    covered = sorted(c for b in blocks for c in b)
    if covered != list(range(sample.shape[0])):
        raise SchemaError("raw features must partition the input columns")
    result = model.predict(sample)
    class_index = int(result.labels[0])
    reference = background_reference(background, raw_features=features)
    rng = np.random.default_rng(seed)
    values = shapley_permutation_values(model, sample, reference, class_index,
                                        blocks, sampling_budget, rng)
    scores = _group_scores_from_feature_values(values, features, model.schema)
    return Explanation(method="sh", scores=scores, best_groups=top_k_groups(scores, k),
                       predicted_class=class_index, feature_values=values)


def _group_scores_from_feature_values(values: np.ndarray, features: list[RawFeature],
                                      schema: GroupSchema) -> np.ndarray:
    """Mean |value| over the raw features inside each group."""
    col_to_feature = {}
    for fi, feat in enumerate(features):
        for c in feat.processed:
            col_to_feature[c] = fi
    scores = np.zeros(schema.m)
    for g, cols in enumerate(schema.columns):
        members = sorted({col_to_feature[c] for c in cols})
        for c in cols:
            if set(features[col_to_feature[c]].processed) - set(cols):
                raise SchemaError(
                    f"raw feature {features[col_to_feature[c]].name!r} straddles group "
                    f"{schema.names[g]!r}"
                )
        scores[g] = np.abs(values[members]).mean()
    return scores


# ---------------------------------------------------------------------------
# batch driver and interchange files
# ---------------------------------------------------------------------------


def explain_batch(model: ConceptTransformer, dataset: TabularDataset, method: str,
                  k: int = 2, split: str = "val", shap_budget: int = 200,
                  background_size: int = 100, seed: int = 0,
                  sa_target: str = "predicted") -> list[Explanation]:
    """Explain every sample of a split, in dataset order.

    Sample ids are dataset row indices, so different methods and runs
    align.  SH derives one generator per sample from (seed, sample id),
    keeping results independent of evaluation order.
    """
    method = method.lower()
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")
    idx = dataset.indices(split)
    if idx.size == 0:
        return []
    x = dataset.features[idx]
    y = dataset.labels[idx]
    out: list[Explanation] = []
    if method in ("mla", "ll"):
        result = model.predict(x)
        helper = mla_from_stack if method == "mla" else ll_from_stack
        for i, stack in enumerate(result.stacks):
            scores, groups, heatmap = helper(stack, k)
            out.append(Explanation(
                method=method, scores=scores, best_groups=groups,
                predicted_class=int(result.labels[i]), heatmap=heatmap,
                sample_id=int(idx[i]), correct=bool(result.labels[i] == y[i]),
            ))
    elif method == "sa":
        grads, predicted = input_gradients(model, x, target=sa_target,
                                           labels=y if sa_target == "label" else None)
        for i in range(x.shape[0]):
            scores = saliency_scores(grads[i], model.schema)
            out.append(Explanation(
                method=method, scores=scores, best_groups=top_k_groups(scores, k),
                predicted_class=int(predicted[i]),
                sample_id=int(idx[i]), correct=bool(predicted[i] == y[i]),
            ))
    else:
        train_x, _ = dataset.split_arrays("train")
        if train_x.shape[0] == 0:
            raise ConfigError("SH needs training rows for the background")
        bg_rng = np.random.default_rng([seed, 0xB6])
        take = min(background_size, train_x.shape[0])
        background = train_x[bg_rng.choice(train_x.shape[0], size=take, replace=False)]
        reference = background_reference(background, raw_features=dataset.raw_features)
        blocks = [f.processed for f in dataset.raw_features]
        for i in range(x.shape[0]):
            sample = x[i]
            result = model.predict(sample)
            class_index = int(result.labels[0])
            rng = np.random.default_rng([seed, int(idx[i])])
            values = shapley_permutation_values(model, sample, reference, class_index,
                                                blocks, shap_budget, rng)
            scores = _group_scores_from_feature_values(values, dataset.raw_features,
                                                       model.schema)
            out.append(Explanation(
                method=method, scores=scores, best_groups=top_k_groups(scores, k),
                predicted_class=class_index, feature_values=values,
                sample_id=int(idx[i]), correct=bool(class_index == y[i]),
            ))
    return out


def write_explanations(path, explanations: list[Explanation], *, dataset_id: str,
                       method: str, seed: int, group_names, k: int) -> None:
    """Write the interchange file: one header line, then one line per sample."""
    header = {
        "type": "header",
        "format_version": INTERCHANGE_FORMAT_VERSION,
        "dataset": dataset_id,
        "method": method,
        "seed": seed,
        "m": len(tuple(group_names)),
        "group_names": list(group_names),
        "k": k,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for e in explanations:
            rec = {
                "type": "record",
                "sample_id": e.sample_id,
                "predicted": e.predicted_class,
                "correct": e.correct,
                "scores": [float(s) for s in e.scores],
                "best_groups": [int(g) for g in e.best_groups],
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_interchange(path) -> tuple[dict, list[dict]]:
    """Parse an interchange file into its header and record dicts."""
    try:
        with open(path) as fh:
            lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    except FileNotFoundError:
        raise DataError(f"explanation file not found: {path}")
    if not lines:
        raise DataError(f"explanation file {path} is empty")
    header = json.loads(lines[0])
    if header.get("type") != "header":
        raise DataError(f"{path}: first line is not a header record")
    if header.get("format_version") != INTERCHANGE_FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {header.get('format_version')}")
    records = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        if rec.get("type") != "record":
            raise ValidationError(f"{path}: unexpected line type {rec.get('type')!r}")
        records.append(rec)
    return header, records
