"""Layered attention DAG and maximum-probability path extraction.

The stack of per-layer attention matrices maps to a weighted DAG: one
vertex per (layer, concept group), plus an input layer 0, with the arc
from group c_hat at layer l-1 to group c_tld at layer l carrying the
attention value a^l[c_hat, c_tld].  Arc costs are -log(weight), so a
shortest path under Dijkstra is a maximum-probability path, and the
group at its layer-0 start vertex is the best concept group for the
prediction.  Additional groups are ranked by deleting the winning start
vertex and re-solving.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NoPathError, ValidationError

# Attention weights below this are treated as zero and their arcs pruned,
# which also guards the -log against underflow.
WEIGHT_CLAMP = 1e-12


@dataclass
class AttentionDag:
    """Weighted layered DAG over (M+1) * m vertices.

    ``weights[l - 1][c_hat, c_tld]`` is the arc weight from vertex
    (l-1, c_hat) to (l, c_tld); ``costs`` holds -log(weight), with
    pruned arcs (weight below the clamp) set to +inf.
    """

    m: int
    num_layers: int
    weights: list[np.ndarray]
    costs: list[np.ndarray]

    @property
    def num_vertices(self) -> int:
        return (self.num_layers + 1) * self.m

    def num_arcs(self) -> int:
        return int(sum(np.isfinite(c).sum() for c in self.costs))


def build_dag(attn) -> AttentionDag:
    """Map an attention stack (iterable of m x m matrices) to the DAG."""
    matrices = [np.asarray(a, dtype=np.float64) for a in attn]
    if not matrices:
        raise ValidationError("attention stack has no layers")
    m = matrices[0].shape[0]
    weights = []
    costs = []
    for i, a in enumerate(matrices):
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError(f"attention matrix {i} is not square: {a.shape}")
        if a.shape[0] != m:
            raise ValidationError(
                f"attention matrix {i} is {a.shape[0]}x{a.shape[0]}, expected {m}x{m}"
            )
        w = a.copy()
        kept = w >= WEIGHT_CLAMP
        cost = np.full_like(w, np.inf)
        # row-stochastic rows bound entries by 1, so costs are >= 0;
        # clip guards the few-ulp excursions allowed by the stack tolerance
        cost[kept] = -np.log(np.minimum(w[kept], 1.0))
        weights.append(w)
        costs.append(cost)
    return AttentionDag(m=m, num_layers=len(matrices), weights=weights, costs=costs)


@dataclass(frozen=True)
class PathResult:
    """A layer-0-to-layer-M path: group indices, probability, -log cost."""

    vertices: tuple[int, ...]
    probability: float
    cost: float


def _path_probability(dag: AttentionDag, vertices: tuple[int, ...]) -> float:
    prob = 1.0
    for l in range(dag.num_layers):
        prob = prob * dag.weights[l][vertices[l], vertices[l + 1]]
    return prob


def max_prob_path(dag: AttentionDag, allowed_starts=None) -> PathResult:
    """Globally maximum-probability path via Dijkstra.

    A zero-cost super-source feeds every allowed layer-0 vertex and a
    zero-cost super-sink drains layer M, so the maximum is taken over
    all start/end pairs.  Ties resolve to the lexicographically
    smallest vertex-index sequence: the heap orders entries by (cost,
    sequence), and a lexicographically minimal prefix stays minimal
    under extension.
    """
    m, M = dag.m, dag.num_layers
    if allowed_starts is None:
        starts = list(range(m))
    else:
        starts = sorted(allowed_starts)
        if not starts:
            raise NoPathError("no layer-0 start vertices left")
    # heap entries: (cost, sequence of group indices, layer)
    heap: list[tuple[float, tuple[int, ...], int]] = [(0.0, (c,), 0) for c in starts]
    heapq.heapify(heap)
    settled: set[tuple[int, int]] = set()
    while heap:
        cost, seq, layer = heapq.heappop(heap)
        vertex = (layer, seq[-1])
        if vertex in settled:
            continue
        settled.add(vertex)
        if layer == M:
            return PathResult(vertices=seq, probability=_path_probability(dag, seq), cost=cost)
        row = dag.costs[layer][seq[-1]]
        for nxt in range(m):
            arc = row[nxt]
            if np.isfinite(arc) and (layer + 1, nxt) not in settled:
                heapq.heappush(heap, (cost + arc, seq + (nxt,), layer + 1))
    raise NoPathError("attention graph is disconnected: every start-to-end path is pruned")


def best_groups(attn, k: int) -> list[int]:
    """Rank the k best concept groups by iterative start-vertex removal.

    The first entry is the layer-0 group of the maximum-probability
    path; each following entry re-solves with the previously returned
    layer-0 vertices deleted (their later-layer copies stay available).
    """
    dag = attn if isinstance(attn, AttentionDag) else build_dag(attn)
    if not 1 <= k <= dag.m:
        raise ConfigError(f"k must be in [1, {dag.m}], got {k}")
    remaining = set(range(dag.m))
    ranked: list[int] = []
    for _ in range(k):
        result = max_prob_path(dag, allowed_starts=remaining)
        start = result.vertices[0]
        ranked.append(start)
        remaining.remove(start)
    return ranked


def path_probability_matrix(attn) -> np.ndarray:
    """(j, k) entry: max probability over paths from v0_j to vM_k.

    Layered dynamic programming over products; entries with every path
    pruned come out 0.  The maximum entry equals max_prob_path's
    probability (cross-checked in the test suite).
    """
    dag = attn if isinstance(attn, AttentionDag) else build_dag(attn)
    masked = []
    for w, c in zip(dag.weights, dag.costs):
        wm = np.where(np.isfinite(c), w, 0.0)
        masked.append(wm)
    best = np.eye(dag.m)
    for wm in masked:
        # best[j, c] = max over c_hat of best[j, c_hat] * w[c_hat, c]
        best = (best[:, :, None] * wm[None, :, :]).max(axis=1)
    return best


def scale_unit(scores) -> np.ndarray:
    """Min-max scale to [0, 1]; constant input maps to all zeros."""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.size == 0:
        raise ConfigError("scale_unit needs at least one score")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("scale_unit requires finite scores")
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def format_dag(dag: AttentionDag) -> str:
    """Stable text dump of vertices and arcs, layer-major then index."""
    lines = [f"dag groups={dag.m} layers={dag.num_layers}"]
    for layer in range(dag.num_layers + 1):
        for c in range(dag.m):
            lines.append(f"vertex layer={layer} group={c}")
    for l in range(1, dag.num_layers + 1):
        w, cost = dag.weights[l - 1], dag.costs[l - 1]
        for src in range(dag.m):
            for dst in range(dag.m):
                if np.isfinite(cost[src, dst]):
                    lines.append(
                        f"arc layer={l} src={src} dst={dst} "
                        f"weight={w[src, dst]!r} cost={cost[src, dst]!r}"
                    )
    return "\n".join(lines) + "\n"
