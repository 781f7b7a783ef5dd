"""End-to-end wiring: features, store building, pre-training, checkpoints.

Every graph is reduced to the same encoder input layout regardless of its raw
feature width: a per-graph PCA brings features to a shared aligned width
(zero-padded when the graph is too small to support that many components), a
node-level hashing embedding of the same width is fused next to it, and walk
signatures feed the structural view.

Encoder inputs are standardized per graph (walk counts through log1p first,
since they span orders of magnitude and are otherwise nearly collinear across
nodes).  The transform lives in text_view_input/struct_view_input and is
applied both when building training views and inside Checkpoint.encode_*, so
pre-training and every later consumer see the same distribution.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .config import RunConfig
from .encoder import (
    EncoderDims,
    ParamDict,
    encode_view,
    init_params,
    params_from_jsonable,
    params_to_jsonable,
    token_key,
)
from .errors import ParseError, ValidationError
from .graphs import Graph, domain_ids, ego_subgraph, normalized_adjacency
from .pretrain import PretrainResult, ViewBundle, run_pretraining
from .store import SemanticRecord, SemanticStore, StructuralRecord, StructuralStore
from .textpipe import (
    HashingEmbedder,
    PcaAligner,
    PrefixedDocument,
    chunk_document,
    fuse_features,
)
from .walks import select_anchors, walk_signature_matrix

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class GraphInputs:
    """Everything the encoders and stores need from one graph."""

    graph: Graph
    aligned: np.ndarray
    semantic: np.ndarray
    fused: np.ndarray
    signatures: np.ndarray
    a_hat: sp.csr_matrix
    pca: Optional[PcaAligner]


def node_label_text(graph: Graph, node: int) -> str:
    if graph.labels is None:
        return "unknown"
    return f"class-{graph.labels[node]}"


def node_document(graph: Graph, node: int) -> PrefixedDocument:
    label = node_label_text(graph, node)
    text = "" if graph.texts is None else graph.texts[node]
    return PrefixedDocument(
        dataset=graph.dataset_id,
        node_id=str(node),
        label=label,
        description=f"Dataset {graph.dataset_id}, domain {graph.domain_id}, "
                    f"label {label}.",
        node_text=text,
    )


def prepare_graph_inputs(graph: Graph, cfg: RunConfig) -> GraphInputs:
    """Per-graph feature preparation; deterministic given graph and config."""
    k = min(cfg.align_dim, graph.feature_dim, graph.node_count)
    pca = PcaAligner(n_components=k).fit(graph.features)
    aligned = pca.transform(graph.features)
    if k < cfg.align_dim:
        pad = np.zeros((graph.node_count, cfg.align_dim - k))
        aligned = np.hstack([aligned, pad])
    embedder = HashingEmbedder(dim=cfg.align_dim, seed=cfg.embed_seed)
    if graph.texts is None:
        semantic = np.zeros((graph.node_count, cfg.align_dim))
    else:
        semantic = embedder.transform(graph.texts)
    fused = fuse_features(aligned, semantic)
    signatures = walk_signature_matrix(graph, cfg.damping, cfg.walk_order)
    return GraphInputs(
        graph=graph,
        aligned=aligned,
        semantic=semantic,
        fused=fused,
        signatures=signatures,
        a_hat=normalized_adjacency(graph),
        pca=pca,
    )


def standardize_columns(x: np.ndarray) -> np.ndarray:
    """Column z-score over the given rows; constant columns become zero."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    return (x - mu) / sd


def text_view_input(fused: np.ndarray) -> np.ndarray:
    return standardize_columns(fused)


def struct_view_input(signatures: np.ndarray) -> np.ndarray:
    # Damped closed-walk counts are non-negative and grow geometrically with
    # walk order; without log1p the rows are nearly collinear and the encoder
    # cannot tell same-class nodes apart.
    return standardize_columns(np.log1p(signatures))


def view_bundle(inputs: GraphInputs) -> ViewBundle:
    return ViewBundle(
        dataset_id=inputs.graph.dataset_id,
        domain_id=inputs.graph.domain_id,
        a_hat=inputs.a_hat,
        text_x=text_view_input(inputs.fused),
        struct_x=struct_view_input(inputs.signatures),
    )


def chunk_embedder(cfg: RunConfig) -> HashingEmbedder:
    """The store-width embedder; adaptation must reuse the exact same one."""
    return HashingEmbedder(dim=cfg.store_dim, seed=cfg.embed_seed)


def build_semantic_store(
    inputs: Sequence[GraphInputs], cfg: RunConfig
) -> SemanticStore:
    store = SemanticStore(dim=cfg.store_dim)
    embedder = chunk_embedder(cfg)
    for gi in inputs:
        graph = gi.graph
        if graph.texts is None:
            logger.warning(
                "graph %s has no texts; skipped by the semantic store",
                graph.dataset_id,
            )
            continue
        for v in range(graph.node_count):
            doc = node_document(graph, v)
            for chunk in chunk_document(doc):
                store.insert(
                    SemanticRecord(
                        dataset=graph.dataset_id,
                        node=v,
                        chunk_index=chunk.chunk_index,
                        vec=embedder.embed(chunk.text),
                        meta={
                            "dataset": graph.dataset_id,
                            "node_id": str(v),
                            "label": doc.label,
                            "description": doc.description,
                            "field_tag": chunk.field_tag,
                            "domain_id": graph.domain_id,
                        },
                    )
                )
    return store


def build_structural_store(
    inputs: Sequence[GraphInputs], cfg: RunConfig
) -> StructuralStore:
    store = StructuralStore(dim=cfg.walk_order)
    for gi in inputs:
        graph = gi.graph
        count = min(cfg.anchors_per_graph, graph.node_count)
        for anchor in select_anchors(gi.signatures, count):
            motif = ego_subgraph(graph, anchor, cfg.hop_radius)
            rows = gi.signatures[np.array(motif.nodes, dtype=int)]
            store.insert(
                StructuralRecord(
                    dataset=graph.dataset_id,
                    node=anchor,
                    vec=gi.signatures[anchor].copy(),
                    motif=motif,
                    motif_features=rows,
                    meta={
                        "dataset": graph.dataset_id,
                        "hop_radius": cfg.hop_radius,
                        "anchor_score": float(gi.signatures[anchor].sum()),
                        "domain_id": graph.domain_id,
                    },
                )
            )
    return store


def build_stores(
    inputs: Sequence[GraphInputs], cfg: RunConfig
) -> tuple[SemanticStore, StructuralStore]:
    return build_semantic_store(inputs, cfg), build_structural_store(inputs, cfg)


@dataclass
class Checkpoint:
    """Frozen backbone plus the two fixed projections adaptation relies on.

    gate_proj maps embeddings into token space for domain gating; chunk_proj
    maps store-width chunk vectors into embedding space.  Both are frozen at
    pre-training time and never updated afterwards.
    """

    dims: EncoderDims
    domain_ids: list[str]
    params: ParamDict
    gate_proj: np.ndarray
    chunk_proj: np.ndarray
    config: dict

    def encode_text(self, a_hat, fused: np.ndarray, domain_id: Optional[str]) -> np.ndarray:
        """Text-view embeddings from raw fused features.

        Standardizes the input columns itself, matching the training views;
        unknown domains use an all-zero token.
        """
        token = self._token(domain_id)
        out, _ = encode_view(
            a_hat, text_view_input(fused), token,
            self.params["text_w1"], self.params["text_w2"],
        )
        return out

    def encode_struct(self, a_hat, signatures: np.ndarray, domain_id: Optional[str]) -> np.ndarray:
        """Structure-view embeddings from raw damped walk counts."""
        token = self._token(domain_id)
        out, _ = encode_view(
            a_hat, struct_view_input(signatures), token,
            self.params["struct_w1"], self.params["struct_w2"],
        )
        return out

    def encode_instance(
        self,
        a_hat,
        fused: np.ndarray,
        signatures: np.ndarray,
        domain_id: Optional[str],
    ) -> np.ndarray:
        """Node embeddings used downstream: the mean of the two views.

        Pre-training aligns the views per node, which is what makes their
        mean meaningful; with an unaligned backbone the views disagree and
        averaging degrades them.
        """
        zt = self.encode_text(a_hat, fused, domain_id)
        zs = self.encode_struct(a_hat, signatures, domain_id)
        return 0.5 * (zt + zs)

    def _token(self, domain_id: Optional[str]) -> np.ndarray:
        if domain_id is not None:
            key = token_key(domain_id)
            if key in self.params:
                return self.params[key]
        return np.zeros(self.dims.token_dim)

    def tokens(self) -> dict[str, np.ndarray]:
        return {dom: self.params[token_key(dom)] for dom in self.domain_ids}


def _array_to_jsonable(arr: np.ndarray) -> dict:
    return {"shape": list(arr.shape), "data": [float(x) for x in arr.reshape(-1)]}


def _array_from_jsonable(obj: dict) -> np.ndarray:
    return np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"])


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    payload = {
        "version": CHECKPOINT_VERSION,
        "dims": ckpt.dims.to_dict(),
        "domain_ids": ckpt.domain_ids,
        "params": params_to_jsonable(ckpt.params),
        "gate_proj": _array_to_jsonable(ckpt.gate_proj),
        "chunk_proj": _array_to_jsonable(ckpt.chunk_proj),
        "config": ckpt.config,
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON: {exc.msg}") from exc
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version")
    try:
        return Checkpoint(
            dims=EncoderDims.from_dict(payload["dims"]),
            domain_ids=list(payload["domain_ids"]),
            params=params_from_jsonable(payload["params"]),
            gate_proj=_array_from_jsonable(payload["gate_proj"]),
            chunk_proj=_array_from_jsonable(payload["chunk_proj"]),
            config=dict(payload["config"]),
        )
    except KeyError as exc:
        raise ParseError(f"{path}: checkpoint missing field {exc}") from exc


def fit_chunk_projection(
    sem_store: SemanticStore,
    node_embeddings: dict[tuple[str, int], np.ndarray],
    store_dim: int,
    embed_dim: int,
) -> np.ndarray:
    """Least-squares map from chunk vectors to their node's embedding.

    Solves min_W ||C W - Z||_F over all stored chunks whose parent node has an
    embedding.  An empty store yields the zero map (augmentation then adds
    nothing).
    """
    rows, targets = [], []
    for record in sem_store.records:
        z = node_embeddings.get((record.dataset, record.node))
        if z is not None:
            rows.append(record.vec)
            targets.append(z)
    if not rows:
        logger.warning("no chunks available; chunk projection is the zero map")
        return np.zeros((store_dim, embed_dim))
    c = np.stack(rows)
    z = np.stack(targets)
    w, *_ = np.linalg.lstsq(c, z, rcond=None)
    return w


def pretrain_pipeline(
    graphs: Sequence[Graph],
    cfg: RunConfig,
    inputs: Optional[Sequence[GraphInputs]] = None,
    sem_store: Optional[SemanticStore] = None,
    align_weight: float = 1.0,
) -> tuple[Checkpoint, PretrainResult]:
    """Initialize, pre-train, and package a checkpoint for the given graphs."""
    if inputs is None:
        inputs = [prepare_graph_inputs(g, cfg) for g in graphs]
    bundles = [view_bundle(gi) for gi in inputs]
    dims = EncoderDims(
        text_in=2 * cfg.align_dim,
        struct_in=cfg.walk_order,
        token_dim=cfg.token_dim,
        hidden_dim=cfg.hidden_dim,
        embed_dim=cfg.embed_dim,
        proj_dim=cfg.proj_dim,
    )
    rng = np.random.default_rng(cfg.seed)
    domains = domain_ids(graphs)
    params = init_params(dims, domains, rng)
    gate_proj = rng.standard_normal((cfg.embed_dim, cfg.token_dim)) / np.sqrt(
        cfg.embed_dim
    )
    result = run_pretraining(
        bundles,
        params,
        beta=cfg.beta,
        gamma=cfg.gamma,
        tau=cfg.pretrain_tau,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        patience=cfg.patience,
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        seed=cfg.seed,
        align_weight=align_weight,
    )
    ckpt = Checkpoint(
        dims=dims,
        domain_ids=domains,
        params=result.params,
        gate_proj=gate_proj,
        chunk_proj=np.zeros((cfg.store_dim, cfg.embed_dim)),
        config=cfg.to_dict(),
    )
    if sem_store is None:
        sem_store = build_semantic_store(inputs, cfg)
    node_embeddings: dict[tuple[str, int], np.ndarray] = {}
    for gi in inputs:
        z = ckpt.encode_instance(gi.a_hat, gi.fused, gi.signatures, gi.graph.domain_id)
        for v in range(gi.graph.node_count):
            node_embeddings[(gi.graph.dataset_id, v)] = z[v]
    ckpt.chunk_proj = fit_chunk_projection(
        sem_store, node_embeddings, cfg.store_dim, cfg.embed_dim
    )
    return ckpt, result
