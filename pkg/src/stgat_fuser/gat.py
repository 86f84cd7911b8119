"""GATv2 attention over an arbitrary node set (sensor channels or time steps).

Scores follow the dynamic form ``e_ij = a^T LeakyReLU(W_a [h_i || h_j])``,
normalised per query node over its neighbourhood, and messages are the value
transform ``W_v h_j`` weighted by those coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError, ValidationError
from .layers import Module, init_uniform
from .tensor import Tensor, concat, leaky_relu, softmax


@dataclass(frozen=True)
class Graph:
    num_nodes: int
    neighbors: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.num_nodes < 1:
            raise ValidationError(f"graph: num_nodes must be positive, got {self.num_nodes}")
        if len(self.neighbors) != self.num_nodes:
            raise ValidationError(f"graph: expected {self.num_nodes} neighbor sets, got {len(self.neighbors)}")
        for i, nbrs in enumerate(self.neighbors):
            if not nbrs:
                raise ValidationError(f"graph: node {i} has an empty neighbor set")
            if any(j < 0 or j >= self.num_nodes for j in nbrs):
                raise ValidationError(f"graph: node {i} has out-of-range neighbor in {nbrs}")

    @cached_property
    def mask(self) -> np.ndarray:
        """Boolean (num_nodes, num_nodes) adjacency; ``mask[i, j]`` iff j in N(i)."""
        m = np.zeros((self.num_nodes, self.num_nodes), dtype=bool)
        for i, nbrs in enumerate(self.neighbors):
            m[i, list(nbrs)] = True
        m.flags.writeable = False
        return m

    def per_node(self, matrix) -> list[list[float]]:
        """Read a dense (N, N) score/coefficient matrix back as neighbor lists."""
        arr = matrix.data if isinstance(matrix, Tensor) else np.asarray(matrix)
        if arr.shape != (self.num_nodes, self.num_nodes):
            raise ShapeError(f"graph: expected a ({self.num_nodes}, {self.num_nodes}) matrix, got {arr.shape}")
        return [[float(arr[i, j]) for j in nbrs] for i, nbrs in enumerate(self.neighbors)]


def build_complete_graph(n: int, self_loops: bool = True) -> Graph:
    if n < 1:
        raise ValidationError(f"graph: n must be >= 1, got {n}")
    if n == 1 and not self_loops:
        raise ValidationError("graph: a single node without a self-loop has no neighbors")
    neighbors = tuple(tuple(j for j in range(n) if self_loops or j != i) for i in range(n))
    return Graph(n, neighbors)


class Gatv2Layer(Module):
    """Single- or multi-head GATv2 layer.

    ``attn_weight[h]`` is (attn_dim, 2*in_dim) and acts on ``[h_i || h_j]``;
    ``attn_vector[h]`` has length attn_dim; ``value_weight[h]`` is
    (out_dim, in_dim).  Heads are averaged before the output activation.
    """

    def __init__(self, in_dim: int, attn_dim: int, out_dim: int, rng: np.random.Generator,
                 leaky_slope: float = 0.2, heads: int = 1):
        if min(in_dim, attn_dim, out_dim, heads) < 1:
            raise ValidationError(f"gatv2: dims must be >= 1, got in={in_dim} attn={attn_dim} "
                                  f"out={out_dim} heads={heads}")
        self.in_dim = in_dim
        self.attn_dim = attn_dim
        self.out_dim = out_dim
        self.leaky_slope = leaky_slope
        self.heads = heads
        self.attn_weight = [init_uniform(rng, (attn_dim, 2 * in_dim), 2 * in_dim) for _ in range(heads)]
        self.attn_vector = [init_uniform(rng, (attn_dim,), attn_dim) for _ in range(heads)]
        self.value_weight = [init_uniform(rng, (out_dim, in_dim), in_dim) for _ in range(heads)]

    def forward(self, H: Tensor, graph: Graph, return_attention: bool = False):
        messages = []
        alphas = []
        for head in range(self.heads):
            alpha = gatv2_attention(gatv2_scores(self, H, graph, head), graph)
            messages.append(alpha @ (H @ self.value_weight[head].swap_last()))
            alphas.append(alpha)
        pooled = messages[0]
        for m in messages[1:]:
            pooled = pooled + m
        if self.heads > 1:
            pooled = pooled * (1.0 / self.heads)
        out = leaky_relu(pooled, self.leaky_slope)
        return (out, alphas) if return_attention else out


def _check_nodes(layer: Gatv2Layer, H: Tensor, graph: Graph):
    if H.ndim < 2 or H.shape[-2] != graph.num_nodes or H.shape[-1] != layer.in_dim:
        raise ShapeError(f"gatv2: expected node features (..., {graph.num_nodes}, {layer.in_dim}), "
                         f"got {H.shape}")


def gatv2_scores(layer: Gatv2Layer, H: Tensor, graph: Graph, head: int = 0) -> Tensor:
    """Dense (..., N, N) matrix of unnormalised scores; entry [i, j] is e_ij.

    Entries outside the graph's edge set are computed but carry no meaning;
    :func:`gatv2_attention` masks them out.
    """
    _check_nodes(layer, H, graph)
    *lead, n, d = H.shape
    queries = H.reshape(*lead, n, 1, d).broadcast_to(*lead, n, n, d)
    keys = H.reshape(*lead, 1, n, d).broadcast_to(*lead, n, n, d)
    pairs = concat([queries, keys], axis=-1)
    hidden = leaky_relu(pairs @ layer.attn_weight[head].swap_last(), layer.leaky_slope)
    return (hidden @ layer.attn_vector[head].reshape(layer.attn_dim, 1)).reshape(*lead, n, n)


def gatv2_attention(scores: Tensor, graph: Graph) -> Tensor:
    """Softmax of each query row over N(i); non-neighbors get exactly zero."""
    if scores.shape[-2:] != (graph.num_nodes, graph.num_nodes):
        raise ShapeError(f"gatv2: score matrix {scores.shape} does not match graph of {graph.num_nodes} nodes")
    return softmax(scores, axis=-1, mask=graph.mask)


def gatv2_aggregate(layer: Gatv2Layer, H: Tensor, graph: Graph, alpha: Tensor, head: int = 0) -> Tensor:
    """h'_i = LeakyReLU(sum_j alpha_ij W_v h_j) for one head."""
    _check_nodes(layer, H, graph)
    if alpha.shape[-2:] != (graph.num_nodes, graph.num_nodes):
        raise ShapeError(f"gatv2: attention matrix {alpha.shape} does not match graph of {graph.num_nodes} nodes")
    values = H @ layer.value_weight[head].swap_last()
    return leaky_relu(alpha @ values, layer.leaky_slope)
