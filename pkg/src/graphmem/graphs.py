"""Undirected graph model, adjacency operators, ego extraction, and bundle I/O.

A bundle file is a single JSON object::

    {"graphs": [{"dataset_id": ..., "domain_id": ..., "node_count": ...,
                 "edges": [[u, v], ...], "features": [[...], ...],
                 "texts": [...] | null, "labels": [...] | null}, ...]}

Floats are written at full precision so a save/load cycle is lossless.
"""

from __future__ import annotations

import json
import logging
import os
from collections import deque
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import GraphValidationError, ParameterError, ParseError

logger = logging.getLogger(__name__)

BUNDLE_VERSION = 1


def _canonical_edge(u: int, v: int) -> tuple[int, int]:
    return (u, v) if u < v else (v, u)


@dataclass(frozen=True)
class Graph:
    """A simple undirected graph with per-node features and optional texts/labels.

    Edges are stored canonically as (min, max) pairs with no self loops and no
    duplicates.  ``features`` is a dense float array of shape
    (node_count, feature_dim).  ``texts`` and ``labels``, when present, have
    one entry per node.
    """

    dataset_id: str
    domain_id: str
    node_count: int
    edges: tuple[tuple[int, int], ...]
    features: np.ndarray
    texts: Optional[tuple[str, ...]] = None
    labels: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        name = self.dataset_id or "<unnamed>"
        if self.node_count < 1:
            raise GraphValidationError(f"graph {name}: node_count must be >= 1")
        canon = []
        seen = set()
        for e in self.edges:
            if len(e) != 2:
                raise GraphValidationError(f"graph {name}: edge {e!r} is not a pair")
            u, v = int(e[0]), int(e[1])
            if u == v:
                raise GraphValidationError(f"graph {name}: self loop at node {u}")
            if not (0 <= u < self.node_count and 0 <= v < self.node_count):
                raise GraphValidationError(
                    f"graph {name}: edge ({u}, {v}) outside [0, {self.node_count})"
                )
            key = _canonical_edge(u, v)
            if key in seen:
                raise GraphValidationError(f"graph {name}: duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        object.__setattr__(self, "edges", tuple(canon))
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.node_count:
            raise GraphValidationError(
                f"graph {name}: features shape {feats.shape} does not match "
                f"({self.node_count}, feature_dim)"
            )
        if not np.all(np.isfinite(feats)):
            raise GraphValidationError(f"graph {name}: features contain non-finite values")
        object.__setattr__(self, "features", feats)
        if self.texts is not None:
            texts = tuple(str(t) for t in self.texts)
            if len(texts) != self.node_count:
                raise GraphValidationError(
                    f"graph {name}: texts has {len(texts)} entries for "
                    f"{self.node_count} nodes"
                )
            object.__setattr__(self, "texts", texts)
        if self.labels is not None:
            labels = tuple(int(c) for c in self.labels)
            if len(labels) != self.node_count:
                raise GraphValidationError(
                    f"graph {name}: labels has {len(labels)} entries for "
                    f"{self.node_count} nodes"
                )
            object.__setattr__(self, "labels", labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def with_ids(self, dataset_id: str, domain_id: str) -> "Graph":
        return replace(self, dataset_id=dataset_id, domain_id=domain_id)


def adjacency(graph: Graph) -> sp.csr_matrix:
    """Binary symmetric adjacency matrix with zero diagonal."""
    n = graph.node_count
    if not graph.edges:
        return sp.csr_matrix((n, n), dtype=np.float64)
    rows, cols = zip(*graph.edges)
    rows, cols = np.array(rows), np.array(cols)
    data = np.ones(len(rows), dtype=np.float64)
    a = sp.coo_matrix(
        (np.concatenate([data, data]),
         (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    )
    return a.tocsr()


def normalize_sparse_adjacency(a: sp.spmatrix) -> sp.csr_matrix:
    """D^{-1/2} (A + I) D^{-1/2} for a symmetric binary adjacency matrix."""
    n = a.shape[0]
    a_loop = (a + sp.eye(n, format="csr")).tocsr()
    deg = np.asarray(a_loop.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    return (d @ a_loop @ d).tocsr()


def normalized_adjacency(graph: Graph) -> sp.csr_matrix:
    """Symmetric degree-normalized adjacency with self loops.

    Every entry lies in [0, 1] and an isolated node maps to a 1.0 diagonal.
    """
    return normalize_sparse_adjacency(adjacency(graph))


def _adjacency_lists(graph: Graph) -> list[list[int]]:
    nbrs: list[list[int]] = [[] for _ in range(graph.node_count)]
    for u, v in graph.edges:
        nbrs[u].append(v)
        nbrs[v].append(u)
    return nbrs


@dataclass(frozen=True)
class EgoSubgraph:
    """The induced subgraph on all nodes within ``hop_radius`` of ``center``.

    ``nodes`` holds original node ids in ascending order; ``edges`` use local
    indices into ``nodes``.  ``center_local`` is the center's local index.
    """

    center: int
    hop_radius: int
    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def center_local(self) -> int:
        return self.nodes.index(self.center)

    def local_adjacency(self) -> sp.csr_matrix:
        n = len(self.nodes)
        if not self.edges:
            return sp.csr_matrix((n, n), dtype=np.float64)
        rows, cols = zip(*self.edges)
        rows, cols = np.array(rows), np.array(cols)
        data = np.ones(len(rows), dtype=np.float64)
        a = sp.coo_matrix(
            (np.concatenate([data, data]),
             (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
            shape=(n, n),
        )
        return a.tocsr()

    def as_graph(self, graph: Graph) -> Graph:
        """Materialize the ego ball as a standalone graph, carrying features."""
        idx = np.array(self.nodes, dtype=int)
        texts = None if graph.texts is None else tuple(graph.texts[i] for i in idx)
        labels = None if graph.labels is None else tuple(graph.labels[i] for i in idx)
        return Graph(
            dataset_id=graph.dataset_id,
            domain_id=graph.domain_id,
            node_count=len(self.nodes),
            edges=self.edges,
            features=graph.features[idx],
            texts=texts,
            labels=labels,
        )


def ego_subgraph(graph: Graph, center: int, hop_radius: int) -> EgoSubgraph:
    """Extract the induced subgraph within ``hop_radius`` hops of ``center``.

    hop_radius == 0 yields the single center node with no edges.
    """
    if not (0 <= center < graph.node_count):
        raise GraphValidationError(
            f"graph {graph.dataset_id}: ego center {center} outside "
            f"[0, {graph.node_count})"
        )
    if hop_radius < 0:
        raise ParameterError(f"hop_radius must be >= 0, got {hop_radius}")
    nbrs = _adjacency_lists(graph)
    dist = {center: 0}
    queue = deque([center])
    while queue:
        u = queue.popleft()
        if dist[u] == hop_radius:
            continue
        for v in nbrs[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    nodes = tuple(sorted(dist))
    local = {g: i for i, g in enumerate(nodes)}
    kept = tuple(
        (local[u], local[v]) for u, v in graph.edges if u in dist and v in dist
    )
    return EgoSubgraph(center=center, hop_radius=hop_radius, nodes=nodes, edges=kept)


def _dedupe_edges(raw_edges: Iterable[Sequence[int]], name: str) -> list[tuple[int, int]]:
    """Canonicalize raw edge pairs, symmetrizing directed inputs.

    A pair listed in both orientations collapses to one undirected edge with a
    logged warning; a pair repeated in the same orientation is an error.
    """
    canon: list[tuple[int, int]] = []
    seen_ordered: set[tuple[int, int]] = set()
    seen_canon: set[tuple[int, int]] = set()
    symmetrized = 0
    for e in raw_edges:
        if len(e) != 2:
            raise GraphValidationError(f"graph {name}: edge {e!r} is not a pair")
        u, v = int(e[0]), int(e[1])
        if (u, v) in seen_ordered:
            raise GraphValidationError(f"graph {name}: duplicate edge ({u}, {v})")
        seen_ordered.add((u, v))
        key = _canonical_edge(u, v)
        if key in seen_canon:
            symmetrized += 1
            continue
        seen_canon.add(key)
        canon.append(key)
    if symmetrized:
        logger.warning(
            "graph %s: symmetrized %d directed edge pair(s)", name, symmetrized
        )
    return canon


def graph_from_dict(obj: dict) -> Graph:
    """Build a validated Graph from one bundle entry."""
    try:
        name = str(obj.get("dataset_id", "<unnamed>"))
        edges = _dedupe_edges(obj["edges"], name)
        return Graph(
            dataset_id=str(obj["dataset_id"]),
            domain_id=str(obj["domain_id"]),
            node_count=int(obj["node_count"]),
            edges=tuple(edges),
            features=np.asarray(obj["features"], dtype=np.float64),
            texts=None if obj.get("texts") is None else tuple(obj["texts"]),
            labels=None if obj.get("labels") is None else tuple(obj["labels"]),
        )
    except KeyError as exc:
        raise ParseError(f"bundle entry missing field {exc}") from exc


def graph_to_dict(graph: Graph) -> dict:
    return {
        "dataset_id": graph.dataset_id,
        "domain_id": graph.domain_id,
        "node_count": graph.node_count,
        "edges": [list(e) for e in graph.edges],
        "features": [[float(x) for x in row] for row in graph.features],
        "texts": None if graph.texts is None else list(graph.texts),
        "labels": None if graph.labels is None else list(graph.labels),
    }


def load_graph_bundle(path: str) -> list[Graph]:
    """Load and validate every graph in a bundle file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(
            f"{path}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(payload, dict) or "graphs" not in payload:
        raise ParseError(f"{path}: expected a top-level object with a 'graphs' list")
    graphs = [graph_from_dict(entry) for entry in payload["graphs"]]
    ids = [g.dataset_id for g in graphs]
    if len(set(ids)) != len(ids):
        raise ParseError(f"{path}: duplicate dataset_id in bundle")
    return graphs


def save_graph_bundle(graphs: Sequence[Graph], path: str) -> None:
    """Write graphs to a bundle file atomically (write temp, then rename)."""
    payload = {"version": BUNDLE_VERSION, "graphs": [graph_to_dict(g) for g in graphs]}
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    os.replace(tmp, path)


def domain_ids(graphs: Sequence[Graph]) -> list[str]:
    """Distinct domain ids in first-appearance order."""
    seen: dict[str, None] = {}
    for g in graphs:
        seen.setdefault(g.domain_id, None)
    return list(seen)
