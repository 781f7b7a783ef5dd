"""Damped closed-walk signatures and walk-based anchor selection.

The signature of a node v is the vector [damping^k * (A^k)_vv for k = 1..order]:
the number of closed walks of each length at v, geometrically damped.  Powers
of A are never materialized; columns of the identity are pushed through k
sparse multiplications instead, which costs O(order * |E|) per column batch.

The module also builds matched graph pairs (a path ending in an odd cycle vs
the same path ending in an even cycle) whose root signatures first separate at
a known walk order, used to probe how much locality a signature captures.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ParameterError
from .graphs import Graph, adjacency


def _check_walk_params(damping: float, order: int) -> None:
    if not (0.0 < damping < 1.0):
        raise ParameterError(f"damping must lie in (0, 1), got {damping}")
    if int(order) != order or order < 1:
        raise ParameterError(f"order must be an integer >= 1, got {order}")


def walk_signature_matrix(
    graph: Graph, damping: float = 0.5, order: int = 8, batch_size: int = 256
) -> np.ndarray:
    """Per-node damped closed-walk counts, shape (node_count, order)."""
    _check_walk_params(damping, order)
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    a = adjacency(graph)
    n = graph.node_count
    out = np.zeros((n, order), dtype=np.float64)
    damp = np.array([damping ** k for k in range(1, order + 1)])
    for start in range(0, n, batch_size):
        cols = np.arange(start, min(start + batch_size, n))
        cur = np.zeros((n, len(cols)))
        cur[cols, np.arange(len(cols))] = 1.0
        for k in range(order):
            cur = a @ cur
            out[cols, k] = cur[cols, np.arange(len(cols))]
    return out * damp


@dataclass(frozen=True)
class WalkSignature:
    node: int
    damping: float
    order: int
    values: np.ndarray


@dataclass(frozen=True)
class AnchorScore:
    node: int
    score: float


def walk_signatures(graph: Graph, damping: float = 0.5, order: int = 8) -> list[WalkSignature]:
    mat = walk_signature_matrix(graph, damping, order)
    return [
        WalkSignature(node=v, damping=damping, order=order, values=mat[v])
        for v in range(graph.node_count)
    ]


def anchor_scores(signature_matrix: np.ndarray) -> list[AnchorScore]:
    """Rank nodes by total damped closed-walk mass, ties broken by node id."""
    totals = signature_matrix.sum(axis=1)
    order = sorted(range(len(totals)), key=lambda v: (-totals[v], v))
    return [AnchorScore(node=v, score=float(totals[v])) for v in order]


def select_anchors(signature_matrix: np.ndarray, count: int) -> list[int]:
    """Top-``count`` nodes by anchor score; all nodes if count exceeds size."""
    if count < 1:
        raise ParameterError(f"anchor count must be >= 1, got {count}")
    ranked = anchor_scores(signature_matrix)
    return [s.node for s in ranked[:count]]


class ClosedWalkEncoder(BaseEstimator, TransformerMixin):
    """Transformer wrapper over walk_signature_matrix.

    Stateless apart from its parameters; fit only validates them.
    """

    def __init__(self, damping: float = 0.5, order: int = 8, batch_size: int = 256):
        self.damping = damping
        self.order = order
        self.batch_size = batch_size

    def fit(self, graph: Graph, y=None):
        _check_walk_params(self.damping, self.order)
        self.n_features_out_ = self.order
        return self

    def transform(self, graph: Graph) -> np.ndarray:
        return walk_signature_matrix(graph, self.damping, self.order, self.batch_size)


def _cycle_edges(first: int, length: int) -> list[tuple[int, int]]:
    """Edges of a cycle on nodes [first, first + length) closing back to first."""
    ring = list(range(first, first + length))
    return [(ring[i], ring[(i + 1) % length]) for i in range(length)]


def path_cycle_pair(
    tail_length: int, odd_cycle: int, even_cycle: int
) -> tuple[Graph, Graph, int]:
    """Matched pair: a tail of ``tail_length + 1`` edges ending in a cycle.

    Graph one closes with an odd cycle, graph two with an even cycle; node 0
    is the root in both.  Returns (odd_graph, even_graph, split_order): root
    signatures agree for every walk order below split_order and differ at it,
    because the even-cycle graph is bipartite and so has no odd closed walks,
    while the odd graph first closes an odd walk of length
    2 * (tail_length + 1) + odd_cycle through the root.
    """
    if tail_length < 0:
        raise ParameterError(f"tail_length must be >= 0, got {tail_length}")
    if odd_cycle < 3 or odd_cycle % 2 == 0:
        raise ParameterError(f"odd_cycle must be an odd integer >= 3, got {odd_cycle}")
    if even_cycle < 4 or even_cycle % 2 == 1:
        raise ParameterError(f"even_cycle must be an even integer >= 4, got {even_cycle}")

    def build(cycle_len: int, dataset_id: str) -> Graph:
        # Tail nodes 0..tail_length+1; the cycle reuses node tail_length+1.
        junction = tail_length + 1
        edges = [(i, i + 1) for i in range(junction)]
        ring = [junction] + list(range(junction + 1, junction + cycle_len))
        edges += [(ring[i], ring[(i + 1) % cycle_len]) for i in range(cycle_len)]
        n = junction + cycle_len
        return Graph(
            dataset_id=dataset_id,
            domain_id="probe",
            node_count=n,
            edges=tuple(edges),
            features=np.zeros((n, 1)),
        )

    split_order = 2 * (tail_length + 1) + odd_cycle
    return (
        build(odd_cycle, f"tail{tail_length}-odd{odd_cycle}"),
        build(even_cycle, f"tail{tail_length}-even{even_cycle}"),
        split_order,
    )
