"""Concept-grouped transformer encoder for tabular classification.

Each a-priori concept group of raw features becomes one token via a
trainable per-group linear projection; the encoder runs standard
post-norm self-attention blocks over the m tokens with no positional
encoding, mean-pools the outputs, and classifies with a single affine
head.  All per-layer (and per-head) attention matrices are exposed,
since they are the raw material for the graph explanations.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .errors import ConfigError, DataError, SchemaError, ShapeError, ValidationError
from .numkernel import Tape, Tensor

CHECKPOINT_FORMAT_VERSION = 1

ATTENTION_ROW_SUM_TOL = 1e-9


@dataclass(frozen=True)
class GroupSchema:
    """Ordered partition of input columns into named concept groups."""

    names: tuple[str, ...]
    columns: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if len(self.names) != len(self.columns):
            raise SchemaError("each group needs exactly one name")
        if len(self.names) < 2:
            raise SchemaError(f"need at least 2 concept groups, got {len(self.names)}")
        if len(set(self.names)) != len(self.names):
            raise SchemaError("group names must be unique")
        seen: set[int] = set()
        for name, cols in zip(self.names, self.columns):
            if len(cols) < 1:
                raise SchemaError(f"group {name!r} is empty")
            overlap = seen.intersection(cols)
            if overlap:
                raise SchemaError(f"group {name!r} reuses columns {sorted(overlap)}")
            seen.update(cols)
        expected = set(range(len(seen)))
        if seen != expected:
            raise SchemaError(
                "group columns must cover exactly 0..F-1; "
                f"missing {sorted(expected - seen)[:5]}, extra {sorted(seen - expected)[:5]}"
            )

    @classmethod
    def from_groups(cls, groups) -> "GroupSchema":
        """Build from an iterable of (name, column indices) pairs."""
        pairs = list(groups)
        names = tuple(str(n) for n, _ in pairs)
        columns = tuple(tuple(int(c) for c in cols) for _, cols in pairs)
        return cls(names, columns)

    @property
    def m(self) -> int:
        return len(self.names)

    @property
    def total_features(self) -> int:
        return sum(len(c) for c in self.columns)

    def group_sizes(self) -> tuple[int, ...]:
        return tuple(len(c) for c in self.columns)

    def to_json_obj(self):
        return [{"name": n, "columns": list(c)} for n, c in zip(self.names, self.columns)]

    @classmethod
    def from_json_obj(cls, obj) -> "GroupSchema":
        return cls.from_groups((g["name"], g["columns"]) for g in obj)

    def digest(self) -> str:
        blob = json.dumps(self.to_json_obj(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one encoder (teacher or student)."""

    num_layers: int = 2
    num_heads: int = 4
    latent_dim: int = 64
    ff_dim: int = 128
    dropout: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        if min(self.num_layers, self.num_heads, self.latent_dim, self.ff_dim, self.num_classes) < 1:
            raise ConfigError("all model dimensions must be >= 1")
        if self.latent_dim % self.num_heads != 0:
            raise ConfigError(
                f"latent_dim {self.latent_dim} not divisible by num_heads {self.num_heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.latent_dim // self.num_heads

    def to_json_obj(self):
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "latent_dim": self.latent_dim,
            "ff_dim": self.ff_dim,
            "dropout": self.dropout,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_json_obj(cls, obj) -> "ModelConfig":
        return cls(**obj)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class LayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1: Tensor
    ff1_bias: Tensor
    ff2: Tensor
    ff2_bias: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


class EncoderWeights:
    """All trainable parameters, with a stable naming and ordering."""

    def __init__(self, proj: list[Tensor], layers: list[LayerWeights],
                 head_w: Tensor, head_b: Tensor):
        self.proj = proj
        self.layers = layers
        self.head_w = head_w
        self.head_b = head_b

    @classmethod
    def init(cls, schema: GroupSchema, config: ModelConfig,
             rng: np.random.Generator) -> "EncoderWeights":
        d, ff = config.latent_dim, config.ff_dim
        proj = [
            Tensor(_glorot(rng, k, d, (d, k)), requires_grad=True, name=f"proj.{i}")
            for i, k in enumerate(schema.group_sizes())
        ]
        layers = []
        for l in range(config.num_layers):
            def mat(name, fan_in, fan_out, shape):
                return Tensor(_glorot(rng, fan_in, fan_out, shape),
                              requires_grad=True, name=f"layers.{l}.{name}")

            def vec(name, size, fill):
                return Tensor(np.full(size, fill, dtype=np.float64),
                              requires_grad=True, name=f"layers.{l}.{name}")

            layers.append(LayerWeights(
                wq=mat("wq", d, d, (d, d)),
                wk=mat("wk", d, d, (d, d)),
                wv=mat("wv", d, d, (d, d)),
                wo=mat("wo", d, d, (d, d)),
                ff1=mat("ff1", d, ff, (d, ff)),
                ff1_bias=vec("ff1_bias", ff, 0.0),
                ff2=mat("ff2", ff, d, (ff, d)),
                ff2_bias=vec("ff2_bias", d, 0.0),
                ln1_gain=vec("ln1_gain", d, 1.0),
                ln1_bias=vec("ln1_bias", d, 0.0),
                ln2_gain=vec("ln2_gain", d, 1.0),
                ln2_bias=vec("ln2_bias", d, 0.0),
            ))
        head_w = Tensor(_glorot(rng, d, config.num_classes, (d, config.num_classes)),
                        requires_grad=True, name="head.w")
        head_b = Tensor(np.zeros(config.num_classes), requires_grad=True, name="head.b")
        return cls(proj, layers, head_w, head_b)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [(p.name, p) for p in self.proj]
        for lw in self.layers:
            for t in (lw.wq, lw.wk, lw.wv, lw.wo, lw.ff1, lw.ff1_bias, lw.ff2,
                      lw.ff2_bias, lw.ln1_gain, lw.ln1_bias, lw.ln2_gain, lw.ln2_bias):
                out.append((t.name, t))
        out.append((self.head_w.name, self.head_w))
        out.append((self.head_b.name, self.head_b))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def copy(self) -> "EncoderWeights":
        mapping = {name: Tensor(t.data.copy(), requires_grad=True, name=name)
                   for name, t in self.named_parameters()}
        proj = [mapping[p.name] for p in self.proj]
        layers = []
        for lw in self.layers:
            layers.append(LayerWeights(**{
                f: mapping[getattr(lw, f).name]
                for f in ("wq", "wk", "wv", "wo", "ff1", "ff1_bias", "ff2", "ff2_bias",
                          "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias")
            }))
        return EncoderWeights(proj, layers, mapping["head.w"], mapping["head.b"])

    def validate_shapes(self, schema: GroupSchema, config: ModelConfig) -> None:
        d, ff, c = config.latent_dim, config.ff_dim, config.num_classes
        if len(self.proj) != schema.m:
            raise ShapeError(f"{len(self.proj)} projections for {schema.m} groups")
        for p, k in zip(self.proj, schema.group_sizes()):
            if p.shape != (d, k):
                raise ShapeError(f"projection {p.name} has shape {p.shape}, expected {(d, k)}")
        if len(self.layers) != config.num_layers:
            raise ShapeError(f"{len(self.layers)} layers, config says {config.num_layers}")
        for lw in self.layers:
            for t, shape in ((lw.wq, (d, d)), (lw.wk, (d, d)), (lw.wv, (d, d)),
                             (lw.wo, (d, d)), (lw.ff1, (d, ff)), (lw.ff1_bias, (ff,)),
                             (lw.ff2, (ff, d)), (lw.ff2_bias, (d,)),
                             (lw.ln1_gain, (d,)), (lw.ln1_bias, (d,)),
                             (lw.ln2_gain, (d,)), (lw.ln2_bias, (d,))):
                if t.shape != shape:
                    raise ShapeError(f"{t.name} has shape {t.shape}, expected {shape}")
        if self.head_w.shape != (d, c) or self.head_b.shape != (c,):
            raise ShapeError("classifier head shape mismatch")
        for name, t in self.named_parameters():
            if not np.all(np.isfinite(t.data)):
                raise ValidationError(f"parameter {name} contains non-finite entries")


class AttentionStack:
    """Per-sample sequence of row-stochastic m x m attention matrices.

    Layer-major, head-major within a layer: a student contributes M
    matrices, a teacher N*h.
    """

    def __init__(self, matrices: list[np.ndarray], validate: bool = True):
        self.matrices = [np.asarray(a, dtype=np.float64) for a in matrices]
        if validate:
            self.validate()

    def validate(self) -> None:
        if not self.matrices:
            raise ValidationError("attention stack is empty")
        m = self.matrices[0].shape[0]
        for i, a in enumerate(self.matrices):
            if a.ndim != 2 or a.shape != (m, m):
                raise ValidationError(f"matrix {i} has shape {a.shape}, expected ({m}, {m})")
            if a.min() < -ATTENTION_ROW_SUM_TOL or a.max() > 1.0 + ATTENTION_ROW_SUM_TOL:
                raise ValidationError(f"matrix {i} has entries outside [0, 1]")
            if np.abs(a.sum(axis=1) - 1.0).max() > ATTENTION_ROW_SUM_TOL:
                raise ValidationError(f"matrix {i} rows do not sum to 1")

    @property
    def m(self) -> int:
        return self.matrices[0].shape[0]

    def __len__(self) -> int:
        return len(self.matrices)

    def __iter__(self):
        return iter(self.matrices)

    def __getitem__(self, i) -> np.ndarray:
        return self.matrices[i]

    def mean_row_entropy(self) -> float:
        """Mean Shannon entropy (nats) of attention rows across all matrices."""
        total = 0.0
        rows = 0
        for a in self.matrices:
            p = np.maximum(a, nk.PLOGP_CLAMP)
            total += -(p * np.log(p)).sum()
            rows += a.shape[0]
        return total / rows


def tokenize(sample, schema: GroupSchema, weights: EncoderWeights,
             tape: Tape | None = None) -> Tensor:
    """Project raw features into one latent token per concept group.

    Accepts a single sample (F,) giving (m, d), or a batch (B, F) giving
    (B, m, d).  No positional encoding is added.
    """
    x = sample if isinstance(sample, Tensor) else Tensor(sample)
    single = x.ndim == 1
    if single:
        x = nk.reshape(tape, x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != schema.total_features:
        raise SchemaError(
            f"sample has {x.shape[-1]} features, schema expects {schema.total_features}"
        )
    parts = []
    for cols, proj in zip(schema.columns, weights.proj):
        xg = nk.gather_columns(tape, x, cols)            # (B, k_i)
        proj_t = nk.transpose(tape, proj, (1, 0))        # (k_i, d)
        parts.append(nk.matmul(tape, xg, proj_t))        # (B, d)
    tokens = nk.stack_rows(tape, parts)                  # (B, m, d)
    if single:
        return nk.reshape(tape, tokens, tokens.shape[1:])
    return tokens


def encoder_forward(tokens: Tensor, weights: EncoderWeights, config: ModelConfig,
                    train_mode: bool = False, tape: Tape | None = None,
                    rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
    """Run the encoder stack and classification head.

    ``tokens`` is (B, m, d) or (m, d).  Returns logits (B, C) or (C,)
    plus one (B, h, m, m) attention-weight tensor per layer (softmax
    output, before any dropout).
    """
    single = tokens.ndim == 2
    if single:
        tokens = nk.reshape(tape, tokens, (1,) + tokens.shape)
    if tokens.ndim != 3 or tokens.shape[2] != config.latent_dim:
        raise ShapeError(f"tokens shape {tokens.shape} incompatible with d={config.latent_dim}")
    if train_mode and config.dropout > 0.0 and rng is None:
        raise ConfigError("training with dropout requires an rng")
    b, m, d = tokens.shape
    h, dh = config.num_heads, config.head_dim
    x = tokens
    attn_per_layer: list[Tensor] = []
    for lw in weights.layers:
        q = nk.matmul(tape, x, lw.wq)
        k = nk.matmul(tape, x, lw.wk)
        v = nk.matmul(tape, x, lw.wv)
        # (B, m, d) -> (B, h, m, dh)
        q = nk.transpose(tape, nk.reshape(tape, q, (b, m, h, dh)), (0, 2, 1, 3))
        k = nk.transpose(tape, nk.reshape(tape, k, (b, m, h, dh)), (0, 2, 1, 3))
        v = nk.transpose(tape, nk.reshape(tape, v, (b, m, h, dh)), (0, 2, 1, 3))
        scores = nk.scale(tape, nk.matmul(tape, q, nk.transpose(tape, k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(dh))
        attn = nk.softmax_rows(tape, scores)             # (B, h, m, m)
        attn_per_layer.append(attn)
        ctx = nk.matmul(tape, attn, v)                   # (B, h, m, dh)
        ctx = nk.reshape(tape, nk.transpose(tape, ctx, (0, 2, 1, 3)), (b, m, d))
        sub = nk.matmul(tape, ctx, lw.wo)
        if train_mode:
            sub = nk.dropout(tape, sub, config.dropout, rng)
        x = nk.layer_norm(tape, nk.add(tape, x, sub), lw.ln1_gain, lw.ln1_bias)
        ff = nk.relu(tape, nk.add(tape, nk.matmul(tape, x, lw.ff1), lw.ff1_bias))
        ff = nk.add(tape, nk.matmul(tape, ff, lw.ff2), lw.ff2_bias)
        if train_mode:
            ff = nk.dropout(tape, ff, config.dropout, rng)
        x = nk.layer_norm(tape, nk.add(tape, x, ff), lw.ln2_gain, lw.ln2_bias)
    pooled = nk.mean_rows(tape, x)                       # (B, d)
    logits = nk.add(tape, nk.matmul(tape, pooled, weights.head_w), weights.head_b)
    if single:
        logits = nk.reshape(tape, logits, (config.num_classes,))
    return logits, attn_per_layer


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class PredictResult:
    labels: np.ndarray                 # (B,) int
    probs: np.ndarray                  # (B, C)
    stacks: list[AttentionStack]       # length B


class ConceptTransformer:
    """A schema + config + weights bundle with inference conveniences."""

    def __init__(self, schema: GroupSchema, config: ModelConfig, weights: EncoderWeights,
                 train_seed: int | None = None):
        weights.validate_shapes(schema, config)
        self.schema = schema
        self.config = config
        self.weights = weights
        self.train_seed = train_seed

    @classmethod
    def init(cls, schema: GroupSchema, config: ModelConfig, seed: int) -> "ConceptTransformer":
        rng = np.random.default_rng(seed)
        return cls(schema, config, EncoderWeights.init(schema, config, rng), train_seed=seed)

    @property
    def m(self) -> int:
        return self.schema.m

    def forward(self, x, train_mode: bool = False, tape: Tape | None = None,
                rng: np.random.Generator | None = None) -> tuple[Tensor, list[Tensor]]:
        """Tokenize raw features and run the encoder; x is (B, F) or (F,)."""
        tokens = tokenize(x, self.schema, self.weights, tape=tape)
        return encoder_forward(tokens, self.weights, self.config,
                               train_mode=train_mode, tape=tape, rng=rng)

    def predict(self, samples: np.ndarray) -> PredictResult:
        """Deterministic inference: argmax labels (ties to the lowest class),
        softmax probabilities, and the per-sample attention stacks."""
        x = np.asarray(samples, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        logits, attn = self.forward(Tensor(x), train_mode=False, tape=None)
        probs = _softmax_np(logits.data)
        labels = np.argmax(probs, axis=1)
        stacks = []
        for i in range(x.shape[0]):
            mats = []
            for layer in attn:
                for head in range(layer.shape[1]):
                    mats.append(layer.data[i, head])
            stacks.append(AttentionStack(mats))
        return PredictResult(labels=labels, probs=probs, stacks=stacks)

    # -- checkpointing ------------------------------------------------------

    def save(self, path) -> None:
        obj = {
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "config": self.config.to_json_obj(),
            "schema": {"groups": self.schema.to_json_obj(), "digest": self.schema.digest()},
            "train_seed": self.train_seed,
            "weights": {
                name: {"shape": list(t.data.shape), "data": t.data.ravel().tolist()}
                for name, t in self.weights.named_parameters()
            },
        }
        with open(path, "w") as fh:
            json.dump(obj, fh, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "ConceptTransformer":
        try:
            with open(path) as fh:
                obj = json.load(fh)
        except FileNotFoundError:
            raise DataError(f"checkpoint not found: {path}")
        except json.JSONDecodeError as exc:
            raise DataError(f"checkpoint {path} is not valid JSON: {exc}")
        if obj.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint format version {obj.get('format_version')}")
        config = ModelConfig.from_json_obj(obj["config"])
        schema = GroupSchema.from_json_obj(obj["schema"]["groups"])
        if obj["schema"].get("digest") != schema.digest():
            raise DataError("checkpoint schema digest mismatch")
        stored = obj["weights"]
        rng = np.random.default_rng(0)
        weights = EncoderWeights.init(schema, config, rng)
        for name, t in weights.named_parameters():
            if name not in stored:
                raise DataError(f"checkpoint missing weight {name}")
            rec = stored[name]
            arr = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            if arr.shape != t.data.shape:
                raise DataError(f"weight {name} has shape {arr.shape}, expected {t.data.shape}")
            t.data = arr
        return cls(schema, config, weights, train_seed=obj.get("train_seed"))
