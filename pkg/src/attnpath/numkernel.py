"""Minimal dense float64 tensor kernel with taped reverse-mode gradients.

Every primitive takes the recording tape as its first argument; passing
``tape=None`` runs the forward computation without building a graph
(inference mode).  Gradients accumulate into ``Tensor.grad`` buffers and
are never zeroed implicitly -- callers reset them between optimizer steps.

Shapes follow numpy conventions.  ``matmul`` contracts the trailing two
axes; elementwise broadcasting is limited to a trailing 1-D bias vector
in ``add``.  Everything is IEEE double precision and bit-reproducible
given identical inputs and seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError, ShapeError, ValidationError


class Tensor:
    """A dense float64 array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "needs_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        # True when this tensor lies on a differentiable path from a leaf
        # with requires_grad; set by the op that produced it.
        self.needs_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)
        return t

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}{tag})"


class Tape:
    """Ordered record of primitive ops enabling a single reverse sweep.

    Nodes are appended in execution order, which is automatically a
    topological order: an op's inputs always exist before it runs.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self._nodes.append((out, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self._nodes)


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(x) to every tensor on the tape.

    The loss must be scalar.  Each tape node is visited exactly once, in
    reverse execution order; nodes not on a path to the loss carry no
    output gradient and are skipped, so detached branches get zero
    gradient.
    """
    if loss.data.shape != ():
        raise ConfigError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.accumulate_grad(np.array(1.0))
    for out, inputs, backward_fn in reversed(tape._nodes):
        if out.grad is None:
            continue
        grads = backward_fn(out.grad)
        for tensor, g in zip(inputs, grads):
            if g is not None:
                tensor.accumulate_grad(g)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def _maybe_record(tape: Tape | None, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    if tape is not None and any(t.needs_grad for t in inputs):
        out.needs_grad = True
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def matmul(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the trailing two axes.

    Supports ``(..., m, k) @ (k, n)`` with an unbatched right operand and
    ``(..., m, k) @ (..., k, n)`` with identical leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul leading dimensions disagree: {a.shape} vs {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def backward_fn(g: np.ndarray):
        ga = gb = None
        if a.needs_grad:
            if b.ndim == 2:
                ga = np.matmul(g, b.data.T)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.needs_grad:
            if b.ndim == 2:
                k = a.shape[-1]
                n = g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _maybe_record(tape, out, (a, b), backward_fn)


def add(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may be a 1-D vector broadcast over the last axis."""
    bias_mode = b.ndim == 1 and a.ndim > 1
    if bias_mode:
        if b.shape[0] != a.shape[-1]:
            raise ShapeError(f"bias length {b.shape[0]} does not match last axis of {a.shape}")
    elif a.shape != b.shape:
        raise ShapeError(f"add shapes disagree: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)

    def backward_fn(g: np.ndarray):
        ga = g if a.needs_grad else None
        gb = None
        if b.needs_grad:
            gb = g.sum(axis=tuple(range(g.ndim - 1))) if bias_mode else g
        return ga, gb

    return _maybe_record(tape, out, (a, b), backward_fn)


def scale(tape: Tape | None, a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar constant."""
    factor = float(factor)
    out = Tensor(a.data * factor)

    def backward_fn(g: np.ndarray):
        return (g * factor if a.needs_grad else None,)

    return _maybe_record(tape, out, (a,), backward_fn)


def softmax_rows(tape: Tape | None, x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax_rows received non-finite input")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def backward_fn(g: np.ndarray):
        if not x.needs_grad:
            return (None,)
        inner = (g * p).sum(axis=-1, keepdims=True)
        return (p * (g - inner),)

    return _maybe_record(tape, out, (x,), backward_fn)


LAYER_NORM_EPS = 1e-5


def layer_norm(tape: Tape | None, x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({c},), got {gain.shape} and {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    y0 = (x.data - mu) * inv
    out = Tensor(y0 * gain.data + bias.data)

    def backward_fn(g: np.ndarray):
        gx = ggain = gbias = None
        lead = tuple(range(g.ndim - 1))
        if gain.needs_grad:
            ggain = (g * y0).sum(axis=lead)
        if bias.needs_grad:
            gbias = g.sum(axis=lead)
        if x.needs_grad:
            gh = g * gain.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - y0 * (gh * y0).mean(axis=-1, keepdims=True)
            )
        return gx, ggain, gbias

    return _maybe_record(tape, out, (x, gain, bias), backward_fn)


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    mask = x.data > 0.0

    def backward_fn(g: np.ndarray):
        return (g * mask if x.needs_grad else None,)

    return _maybe_record(tape, out, (x,), backward_fn)


def dropout(tape: Tape | None, x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a mask drawn from the given generator.

    Callers skip this op entirely at evaluation time; rate 0 returns the
    input unchanged without consuming randomness.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = Tensor(x.data * mask)

    def backward_fn(g: np.ndarray):
        return (g * mask if x.needs_grad else None,)

    return _maybe_record(tape, out, (x,), backward_fn)


def reshape(tape: Tape | None, x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    old_shape = x.data.shape

    def backward_fn(g: np.ndarray):
        return (g.reshape(old_shape) if x.needs_grad else None,)

    return _maybe_record(tape, out, (x,), backward_fn)


def transpose(tape: Tape | None, x: Tensor, axes: tuple[int, ...]) -> Tensor:
    out = Tensor(np.transpose(x.data, axes))
    inverse = tuple(np.argsort(axes))

    def backward_fn(g: np.ndarray):
        return (np.transpose(g, inverse) if x.needs_grad else None,)

    return _maybe_record(tape, out, (x,), backward_fn)


def stack_rows(tape: Tape | None, parts: list[Tensor]) -> Tensor:
    """Stack equal-shaped tensors along a new second-to-last axis."""
    if not parts:
        raise ShapeError("stack_rows needs at least one tensor")
    base = parts[0].shape
    for p in parts:
        if p.shape != base:
            raise ShapeError(f"stack_rows shapes disagree: {base} vs {p.shape}")
    out = Tensor(np.stack([p.data for p in parts], axis=-2))

    def backward_fn(g: np.ndarray):
        slices = np.moveaxis(g, -2, 0)
        return tuple(slices[i] if p.needs_grad else None for i, p in enumerate(parts))

    tuple_parts = tuple(parts)
    if tape is not None and any(p.needs_grad for p in tuple_parts):
        out.needs_grad = True
        tape.record(out, tuple_parts, backward_fn)
    return out


def gather_columns(tape: Tape | None, x: Tensor, cols) -> Tensor:
    """Select columns of a 2-D tensor; indices must be unique."""
    if x.ndim != 2:
        raise ShapeError(f"gather_columns expects a 2-D tensor, got {x.shape}")
    cols = np.asarray(cols, dtype=np.intp)
    if len(np.unique(cols)) != len(cols):
        raise ConfigError("gather_columns indices must be unique")
    out = Tensor(x.data[:, cols])

    def backward_fn(g: np.ndarray):
        if not x.needs_grad:
            return (None,)
        gx = np.zeros_like(x.data)
        gx[:, cols] = g
        return (gx,)

    return _maybe_record(tape, out, (x,), backward_fn)


def mean_rows(tape: Tape | None, x: Tensor) -> Tensor:
    """Mean over the second-to-last axis: (..., m, d) -> (..., d)."""
    if x.ndim < 2:
        raise ShapeError(f"mean_rows expects >=2-D input, got {x.shape}")
    m = x.shape[-2]
    out = Tensor(x.data.mean(axis=-2))

    def backward_fn(g: np.ndarray):
        if not x.needs_grad:
            return (None,)
        return (np.repeat(np.expand_dims(g / m, -2), m, axis=-2),)

    return _maybe_record(tape, out, (x,), backward_fn)


def sum_all(tape: Tape | None, x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def backward_fn(g: np.ndarray):
        return (np.full_like(x.data, float(g)) if x.needs_grad else None,)

    return _maybe_record(tape, out, (x,), backward_fn)


def cross_entropy_soft(tape: Tape | None, logits: Tensor, target_probs) -> Tensor:
    """Mean soft cross entropy: -(1/n) sum_i sum_c t_ic log softmax(z_i)_c.

    Targets are constants (no gradient flows into them); each target row
    must sum to one within 1e-6.
    """
    t = target_probs.data if isinstance(target_probs, Tensor) else np.asarray(target_probs, float)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_soft expects 2-D logits, got {logits.shape}")
    if t.shape != logits.shape:
        raise ShapeError(f"targets {t.shape} do not match logits {logits.shape}")
    row_sums = t.sum(axis=1)
    if not np.all(np.abs(row_sums - 1.0) <= 1e-6):
        bad = int(np.argmax(np.abs(row_sums - 1.0)))
        raise ValidationError(f"target row {bad} sums to {row_sums[bad]!r}, not 1")
    n = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    out = Tensor(-(t * logp).sum() / n)

    def backward_fn(g: np.ndarray):
        if not logits.needs_grad:
            return (None,)
        p = np.exp(logp)
        return ((p - t) * (float(g) / n),)

    return _maybe_record(tape, out, (logits,), backward_fn)


PLOGP_CLAMP = 1e-12


def plogp_sum(tape: Tape | None, p: Tensor, clamp: float = PLOGP_CLAMP) -> Tensor:
    """Sum of p*log(p) over all entries, with entries clamped at ``clamp``.

    Used for the attention entropy penalty; the result is <= 0 for
    inputs in [0, 1].
    """
    pc = np.maximum(p.data, clamp)
    logpc = np.log(pc)
    out = Tensor((pc * logpc).sum())

    def backward_fn(g: np.ndarray):
        if not p.needs_grad:
            return (None,)
        # below the clamp the term is constant in p
        return (float(g) * (logpc + 1.0) * (p.data >= clamp),)

    return _maybe_record(tape, out, (p,), backward_fn)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Adam accumulators for a fixed, ordered parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[Tensor], lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, step_count=0,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


def adam_step(params: list[Tensor], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    Missing gradients count as zero.  Any non-finite gradient aborts the
    step before mutating parameters or state.
    """
    if len(params) != len(state.m):
        raise ConfigError(
            f"AdamState tracks {len(state.m)} parameters, got {len(params)}"
        )
    grads = []
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"parameter {i}: gradient shape {g.shape} != {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"parameter {i} has a non-finite gradient; step aborted")
        grads.append(g)
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
