"""Teacher training and entropy-penalized student distillation.

The teacher minimizes hard-label cross entropy; the student minimizes
cross entropy against the teacher's temperature-softened outputs plus
lambda * sum a*log(a) over every attention entry of every layer, which
(being minimized) pushes attention rows toward higher entropy.  Both
losses are batch means, so lambda is batch-size invariant.  Runs are
fully seeded: identical seed, config, and data give bit-identical
weights and records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from sklearn.metrics import f1_score

from . import numkernel as nk
from .data import TabularDataset
from .errors import ConfigError, NumericError, SchemaError
from .model import ConceptTransformer, EncoderWeights, GroupSchema, ModelConfig
from .numkernel import AdamState, Tape, Tensor

MANIFEST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    """Optimization hyperparameters shared by teacher and student runs."""

    batch_size: int = 128
    epochs: int = 30
    learning_rate: float = 1e-3
    temperature: float = 2.0
    lam: float = 0.0
    seed: int = 0
    metric: str = "f1_macro"        # or "accuracy"
    patience: int = 5               # early-stop patience; 0 disables

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")
        if self.metric not in ("f1_macro", "accuracy"):
            raise ConfigError(f"unknown metric {self.metric!r}")

    def to_json_obj(self):
        return {
            "batch_size": self.batch_size, "epochs": self.epochs,
            "learning_rate": self.learning_rate, "temperature": self.temperature,
            "lam": self.lam, "seed": self.seed, "metric": self.metric,
            "patience": self.patience,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "TrainConfig":
        return cls(**obj)


@dataclass
class RunRecord:
    """History of one training run plus the checkpoint it produced."""

    seed: int
    train_loss: list[float] = field(default_factory=list)
    val_metric: list[float] = field(default_factory=list)
    metric_name: str = "f1_macro"
    checkpoint_path: str | None = None
    kind: str = "teacher"
    lam: float = 0.0
    temperature: float = 1.0
    model_config: dict = field(default_factory=dict)
    train_config: dict = field(default_factory=dict)

    @property
    def epochs_run(self) -> int:
        return len(self.train_loss)

    @property
    def best_val_metric(self) -> float:
        return max(self.val_metric) if self.val_metric else float("-inf")

    def to_manifest(self, path) -> None:
        obj = {
            "format_version": MANIFEST_FORMAT_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "train_loss": self.train_loss,
            "val_metric": self.val_metric,
            "metric_name": self.metric_name,
            "checkpoint": self.checkpoint_path,
            "lam": self.lam,
            "temperature": self.temperature,
            "model_config": self.model_config,
            "train_config": self.train_config,
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, sort_keys=True, indent=1)

    @classmethod
    def from_manifest(cls, path) -> "RunRecord":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(
            seed=obj["seed"], train_loss=obj["train_loss"], val_metric=obj["val_metric"],
            metric_name=obj["metric_name"], checkpoint_path=obj.get("checkpoint"),
            kind=obj.get("kind", "teacher"), lam=obj.get("lam", 0.0),
            temperature=obj.get("temperature", 1.0),
            model_config=obj.get("model_config", {}),
            train_config=obj.get("train_config", {}),
        )


def evaluate_metric(labels: np.ndarray, predicted: np.ndarray, metric: str,
                    num_classes: int) -> float:
    if metric == "accuracy":
        return float((labels == predicted).mean())
    return float(f1_score(labels, predicted, average="macro",
                          labels=np.arange(num_classes), zero_division=0))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def distillation_loss(tape: Tape | None, student_logits: Tensor, teacher_probs,
                      attn: list[Tensor], lam: float, temperature: float = 1.0) -> Tensor:
    """Soft cross entropy at temperature plus the attention entropy penalty.

    ``teacher_probs`` must already be softened at the same temperature;
    the penalty lam * sum_l sum_jk a*log(a) is averaged over the batch
    like the first term, with entries clamped at 1e-12 before the log.
    """
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    scaled = nk.scale(tape, student_logits, 1.0 / temperature) if temperature != 1.0 \
        else student_logits
    loss = nk.cross_entropy_soft(tape, scaled, teacher_probs)
    if lam > 0 and attn:
        batch = student_logits.shape[0] if student_logits.ndim == 2 else 1
        penalty = nk.plogp_sum(tape, attn[0])
        for a in attn[1:]:
            penalty = nk.add(tape, penalty, nk.plogp_sum(tape, a))
        loss = nk.add(tape, loss, nk.scale(tape, penalty, lam / batch))
    return loss


def _fit_encoder(dataset: TabularDataset, schema: GroupSchema, model_config: ModelConfig,
                 train_config: TrainConfig, target_probs: np.ndarray, lam: float,
                 temperature: float, kind: str) -> tuple[ConceptTransformer, RunRecord]:
    """Shared minibatch Adam loop for teacher and student objectives.

    ``target_probs`` are per-train-sample target distributions.  Keeps
    the weights from the best validation epoch; early-stops after
    ``patience`` epochs without improvement.
    """
    train_x, train_y = dataset.split_arrays("train")
    val_x, val_y = dataset.split_arrays("val")
    if train_x.shape[0] == 0:
        raise ConfigError("dataset has no training rows")
    if target_probs.shape != (train_x.shape[0], model_config.num_classes):
        raise ConfigError(
            f"target distribution shape {target_probs.shape} does not match "
            f"({train_x.shape[0]}, {model_config.num_classes})"
        )
    if train_x.shape[1] != schema.total_features:
        raise SchemaError(
            f"dataset has {train_x.shape[1]} features, schema expects {schema.total_features}"
        )

    seed_root = np.random.SeedSequence(train_config.seed)
    init_seed, shuffle_seed, dropout_seed = seed_root.spawn(3)
    model = ConceptTransformer(
        schema, model_config,
        EncoderWeights.init(schema, model_config, np.random.default_rng(init_seed)),
        train_seed=train_config.seed,
    )
    params = model.weights.parameters()
    adam = AdamState.for_params(params, lr=train_config.learning_rate)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)

    record = RunRecord(
        seed=train_config.seed, metric_name=train_config.metric, kind=kind,
        lam=lam, temperature=temperature,
        model_config=model_config.to_json_obj(), train_config=train_config.to_json_obj(),
    )
    best_metric = float("-inf")
    best_weights = model.weights.copy()
    since_best = 0
    n = train_x.shape[0]
    for epoch in range(train_config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            tape = Tape()
            logits, attn = model.forward(Tensor(train_x[idx]), train_mode=True,
                                         tape=tape, rng=dropout_rng)
            loss = distillation_loss(tape, logits, target_probs[idx], attn,
                                     lam=lam, temperature=temperature)
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise NumericError(
                    f"training diverged: non-finite loss at epoch {epoch}, "
                    f"batch {start // train_config.batch_size}"
                )
            nk.zero_grads(params)
            nk.backward(tape, loss)
            nk.adam_step(params, adam)
            epoch_losses.append(loss_val)
        record.train_loss.append(float(np.mean(epoch_losses)))
        if val_x.shape[0]:
            predicted = predict_labels(model, val_x)
            metric = evaluate_metric(val_y, predicted, train_config.metric,
                                     model_config.num_classes)
        else:
            metric = float("nan")
        record.val_metric.append(metric)
        if val_x.shape[0] and metric > best_metric:
            best_metric = metric
            best_weights = model.weights.copy()
            since_best = 0
        else:
            # ties refresh the kept weights (training keeps sharpening after
            # the metric plateaus) but still count toward the patience
            if val_x.shape[0] and metric == best_metric:
                best_weights = model.weights.copy()
            since_best += 1
            if train_config.patience and since_best >= train_config.patience:
                break
    if val_x.shape[0] and train_config.epochs > 0:
        model = ConceptTransformer(schema, model_config, best_weights,
                                   train_seed=train_config.seed)
    return model, record


def predict_labels(model: ConceptTransformer, x: np.ndarray,
                   batch_size: int = 1024) -> np.ndarray:
    """Argmax labels over a feature matrix, computed in inference batches."""
    outs = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model.forward(Tensor(x[start:start + batch_size]), train_mode=False)
        outs.append(np.argmax(logits.data, axis=1))
    return np.concatenate(outs) if outs else np.empty(0, dtype=np.int64)


def predict_soft_targets(model: ConceptTransformer, x: np.ndarray, temperature: float,
                         batch_size: int = 1024) -> np.ndarray:
    """Temperature-softened softmax outputs, for use as distillation targets."""
    outs = []
    for start in range(0, x.shape[0], batch_size):
        logits, _ = model.forward(Tensor(x[start:start + batch_size]), train_mode=False)
        z = logits.data / temperature
        e = np.exp(z - z.max(axis=1, keepdims=True))
        outs.append(e / e.sum(axis=1, keepdims=True))
    return np.vstack(outs)


def train_teacher(dataset: TabularDataset, schema: GroupSchema, model_config: ModelConfig,
                  train_config: TrainConfig) -> tuple[ConceptTransformer, RunRecord]:
    """Minimize hard-label cross entropy with Adam over shuffled minibatches."""
    if dataset.num_classes > model_config.num_classes:
        raise ConfigError(
            f"dataset has {dataset.num_classes} classes, model allows {model_config.num_classes}"
        )
    _, train_y = dataset.split_arrays("train")
    targets = one_hot(train_y, model_config.num_classes)
    return _fit_encoder(dataset, schema, model_config, train_config,
                        target_probs=targets, lam=0.0, temperature=1.0, kind="teacher")


def distill_student(dataset: TabularDataset, teacher: ConceptTransformer,
                    student_config: ModelConfig, train_config: TrainConfig,
                    target_probs: np.ndarray | None = None
                    ) -> tuple[ConceptTransformer, RunRecord]:
    """Train a student on the teacher's temperature-softened predictions.

    The teacher runs in inference mode once to produce soft targets;
    precomputed target distributions may be passed instead (e.g. cached
    teacher outputs, or hard one-hot targets, in which case lam=0 and
    temperature=1 makes this coincide with teacher-style training).
    """
    if teacher.config.num_classes != student_config.num_classes:
        raise ConfigError("teacher and student class counts differ")
    if teacher.schema.total_features != dataset.n_features:
        raise SchemaError("teacher schema does not match the dataset")
    train_x, _ = dataset.split_arrays("train")
    if target_probs is None:
        target_probs = predict_soft_targets(teacher, train_x, train_config.temperature)
    return _fit_encoder(dataset, teacher.schema, student_config, train_config,
                        target_probs=target_probs, lam=train_config.lam,
                        temperature=train_config.temperature, kind="student")


@dataclass
class LambdaSelection:
    best_lambda: float
    best_model: ConceptTransformer
    best_record: RunRecord
    records: dict[float, RunRecord]


def select_lambda(dataset: TabularDataset, teacher: ConceptTransformer,
                  student_config: ModelConfig, train_config: TrainConfig,
                  candidates) -> LambdaSelection:
    """Train one student per candidate lambda, keep the best validation score.

    Ties resolve to the smaller lambda; candidates are evaluated in
    ascending order with seeds derived independently per lambda so runs
    could execute in parallel.
    """
    cands = sorted(float(c) for c in candidates)
    if not cands:
        raise ConfigError("select_lambda needs at least one candidate")
    train_x, _ = dataset.split_arrays("train")
    targets = predict_soft_targets(teacher, train_x, train_config.temperature)
    best = None
    records: dict[float, RunRecord] = {}
    for lam in cands:
        cfg = TrainConfig(**{**train_config.to_json_obj(), "lam": lam})
        model, record = distill_student(dataset, teacher, student_config, cfg,
                                        target_probs=targets)
        records[lam] = record
        if best is None or record.best_val_metric > best[1]:
            best = (lam, record.best_val_metric, model, record)
    return LambdaSelection(best_lambda=best[0], best_model=best[2],
                           best_record=best[3], records=records)
