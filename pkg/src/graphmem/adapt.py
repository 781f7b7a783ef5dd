"""Few-shot adaptation: domain gating, dual retrieval augmentation, prompts.

The backbone never changes here.  Each episode augments its instance
embeddings with (a) a semantic delta retrieved from the chunk store and
mapped through the frozen chunk projection and (b) a gated mixture of encoded
motifs from the structural store, then trains a single prompt vector with a
prototype-contrastive loss and classifies queries by nearest prototype.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .config import RunConfig
from .encoder import AdamState, adam_step
from .errors import ConfigError, GraphMemError, NumericalError, ParameterError
from .graphs import Graph, ego_subgraph, normalize_sparse_adjacency
from .pipeline import Checkpoint, GraphInputs, chunk_embedder, prepare_graph_inputs
from .pretrain import cosine_rows, cosine_rows_backward
from .store import SemanticStore, StructuralStore
from .walks import walk_signature_matrix

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Episode:
    """An m-shot task on one target graph: labeled support, unlabeled queries."""

    task: str
    shots: int
    support: tuple[tuple[int, int], ...]
    queries: tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class RetrievalPolicy:
    """Mandatory retrieval filter: what the episode must never see."""

    forbidden_datasets: frozenset = frozenset()
    forbidden_domains: frozenset = frozenset()

    def allows(self, meta: dict) -> bool:
        return (
            meta.get("dataset") not in self.forbidden_datasets
            and meta.get("domain_id") not in self.forbidden_domains
        )

    def violations(self, results) -> int:
        return sum(1 for r in results if not self.allows(r.record.meta))


def domain_gates(
    z: np.ndarray, tokens: Sequence[np.ndarray], gate_proj: np.ndarray
) -> np.ndarray:
    """Softmax over cosine(token-space projection of z, each domain token).

    Zero-norm tokens contribute similarity 0; a zero-norm embedding is an
    error because the instance carries no signal to gate on.
    """
    z = np.asarray(z, dtype=np.float64)
    if np.linalg.norm(z) == 0.0:
        raise NumericalError("cannot gate a zero-norm instance embedding")
    q = z @ gate_proj
    qn = np.linalg.norm(q)
    sims = np.zeros(len(tokens))
    if qn > 0.0:
        for i, tok in enumerate(tokens):
            tn = np.linalg.norm(tok)
            if tn > 0.0:
                sims[i] = float(q @ tok) / (qn * tn)
    return softmax(sims)


def semantic_query_text(graph: Graph, node: int) -> str:
    """Node text joined with its one-hop neighbor texts, in node-id order."""
    if graph.texts is None:
        return ""
    neighbors = sorted(
        {v for u, v in graph.edges if u == node} | {u for u, v in graph.edges if v == node}
    )
    parts = [graph.texts[node]] + [graph.texts[v] for v in neighbors]
    return "\n".join(p for p in parts if p)


def semantic_augment(
    z: np.ndarray,
    query_text: str,
    store: SemanticStore,
    chunk_proj: np.ndarray,
    k: int,
    lam: float,
    policy: RetrievalPolicy,
    embedder,
) -> tuple[np.ndarray, list[dict], int]:
    """z + lam * (attention-weighted retrieved chunks through chunk_proj).

    Returns the augmented embedding, the attention entries for the dump, and
    the count of policy violations among returned records (always 0 unless
    the store filter itself is broken).
    """
    qvec = embedder.embed(query_text)
    if np.linalg.norm(qvec) == 0.0 or len(store) == 0:
        if len(store) == 0:
            logger.warning("semantic store is empty; no text augmentation")
        return z.copy(), [], 0
    results = store.topk(qvec, k, where=policy.allows)
    if not results:
        logger.warning("no semantic records pass the retrieval filter")
        return z.copy(), [], 0
    weights = softmax(np.array([r.score for r in results]))
    delta_raw = np.zeros(store.dim)
    attention = []
    for w, r in zip(weights, results):
        delta_raw += w * r.record.vec
        attention.append(
            {
                "record": {
                    "dataset": r.record.dataset,
                    "node": r.record.node,
                    "chunk_index": r.record.chunk_index,
                    "field_tag": r.record.meta.get("field_tag"),
                },
                "w": float(w),
            }
        )
    return z + lam * (delta_raw @ chunk_proj), attention, policy.violations(results)


def structural_augment(
    z: np.ndarray,
    signature: np.ndarray,
    store: StructuralStore,
    ckpt: Checkpoint,
    gates: np.ndarray,
    lam: float,
    policy: RetrievalPolicy,
) -> tuple[np.ndarray, list[dict], int]:
    """z + lam * sum_k pi_k * mean-pooled encoding of domain k's best motif.

    Domains with no admissible motif contribute nothing.  A zero-norm query
    signature (an isolated center) skips structural augmentation entirely.
    """
    out = z.copy()
    dump = []
    violations = 0
    if np.linalg.norm(signature) == 0.0 or len(store) == 0:
        if len(store) == 0:
            logger.warning("structural store is empty; no motif augmentation")
        for dom, pi in zip(ckpt.domain_ids, gates):
            dump.append({"domain": dom, "pi": float(pi)})
        return out, dump, 0
    for dom, pi in zip(ckpt.domain_ids, gates):
        results = store.topk(
            signature,
            1,
            where=lambda meta, d=dom: meta.get("domain_id") == d and policy.allows(meta),
        )
        entry = {"domain": dom, "pi": float(pi)}
        if results:
            violations += policy.violations(results)
            rec = results[0].record
            a_hat = normalize_sparse_adjacency(rec.motif.local_adjacency())
            encoded = ckpt.encode_struct(a_hat, rec.motif_features, dom)
            pooled = encoded.mean(axis=0)
            out += lam * float(pi) * pooled
            entry["record"] = {"dataset": rec.dataset, "node": rec.node}
        dump.append(entry)
    return out, dump, violations


def init_prompt(gates: np.ndarray, ckpt: Checkpoint) -> np.ndarray:
    """Gate-weighted mixture of the frozen domain tokens."""
    prompt = np.zeros(ckpt.dims.token_dim)
    for pi, dom in zip(gates, ckpt.domain_ids):
        prompt += float(pi) * ckpt.params[f"token:{dom}"]
    return prompt


def _prompt_rows(features: np.ndarray, prompt: np.ndarray) -> np.ndarray:
    if prompt.shape[0] == 0:
        return features
    tiled = np.broadcast_to(prompt, (features.shape[0], prompt.shape[0]))
    return np.hstack([features, tiled])


def _prototypes(h: np.ndarray, y: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    proto = np.zeros((n_classes, h.shape[1]))
    np.add.at(proto, y, h)
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    return proto / counts[:, None], counts


def finetune_loss(
    features: np.ndarray,
    labels: Sequence[int],
    prompt: np.ndarray,
    tau: float,
) -> tuple[float, np.ndarray]:
    """Prototype-contrastive loss over the support set; gradient w.r.t. prompt.

    Prototypes are class means of [feature, prompt] rows, so the prompt
    gradient flows both through each instance and through every prototype.
    As tau grows the softmax flattens and the loss tends to log(#classes).
    """
    if tau <= 0.0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    feats = np.asarray(features, dtype=np.float64)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise ConfigError("support set must cover at least 2 classes")
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[l] for l in labels])
    h = _prompt_rows(feats, prompt)
    proto, counts = _prototypes(h, y, len(classes))
    sims, cache = cosine_rows(h, proto)
    logits = sims / tau
    n = feats.shape[0]
    ell = logsumexp(logits, axis=1) - logits[np.arange(n), y]
    loss = float(ell.mean())
    if not np.isfinite(loss):
        raise NumericalError("fine-tune loss is non-finite")
    dlogits = softmax(logits, axis=1)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dh, dproto = cosine_rows_backward(cache, dlogits / tau)
    dh_total = dh + dproto[y] / counts[y][:, None]
    dprompt = dh_total[:, feats.shape[1]:].sum(axis=0)
    return loss, dprompt


def nearest_prototype(
    query_features: np.ndarray,
    support_features: np.ndarray,
    support_labels: Sequence[int],
    prompt: np.ndarray,
) -> list[int]:
    """Cosine argmax over class prototypes; ties go to the lowest class id."""
    classes = sorted(set(support_labels))
    index = {c: i for i, c in enumerate(classes)}
    y = np.array([index[l] for l in support_labels])
    proto, _ = _prototypes(_prompt_rows(support_features, prompt), y, len(classes))
    sims, _ = cosine_rows(_prompt_rows(query_features, prompt), proto)
    return [classes[i] for i in sims.argmax(axis=1)]


@dataclass
class EpisodeResult:
    episode: Episode
    predictions: tuple[int, ...]
    accuracy: float
    prompt: np.ndarray
    prompt_losses: list[float]
    attention: list[dict]
    leakage_violations: int


def _instance_embedding(
    graph: Graph, node: int, z_all: np.ndarray, task: str, hop_radius: int
) -> np.ndarray:
    if task == "node":
        return z_all[node]
    ego = ego_subgraph(graph, node, hop_radius)
    return z_all[np.array(ego.nodes, dtype=int)].mean(axis=0)


def _center_signature(graph: Graph, node: int, cfg: RunConfig) -> np.ndarray:
    """Walk signature of the center computed inside its own ego ball."""
    ego = ego_subgraph(graph, node, cfg.hop_radius)
    local = ego.as_graph(graph)
    sig = walk_signature_matrix(local, cfg.damping, cfg.walk_order)
    return sig[ego.center_local]


def run_episode(
    graph: Graph,
    episode: Episode,
    ckpt: Checkpoint,
    sem_store: SemanticStore,
    str_store: StructuralStore,
    cfg: RunConfig,
    policy: RetrievalPolicy,
    inputs: Optional[GraphInputs] = None,
    no_text_qa: bool = False,
    no_struct_qa: bool = False,
) -> EpisodeResult:
    """One full adaptation episode on a frozen backbone.

    The ablation switches only force the matching mixing weight to zero; the
    rest of the computation is identical to a full run.
    """
    if graph.labels is None:
        raise ConfigError(f"graph {graph.dataset_id} has no labels to evaluate")
    before = {k: v.tobytes() for k, v in ckpt.params.items()}
    if inputs is None:
        inputs = prepare_graph_inputs(graph, cfg)
    lam_text = 0.0 if no_text_qa else cfg.lambda_text
    lam_struct = 0.0 if no_struct_qa else cfg.lambda_struct
    domain = graph.domain_id if graph.domain_id in ckpt.domain_ids else None
    z_all = ckpt.encode_instance(inputs.a_hat, inputs.fused, inputs.signatures, domain)
    tokens = [ckpt.params[f"token:{d}"] for d in ckpt.domain_ids]
    embedder = chunk_embedder(cfg)

    support_nodes = [v for v, _ in episode.support]
    support_labels = [c for _, c in episode.support]
    leakage = 0

    def build_features(nodes):
        nonlocal leakage
        feats, gate_rows, dumps = [], [], []
        for v in nodes:
            z = _instance_embedding(graph, v, z_all, episode.task, cfg.hop_radius)
            gates = domain_gates(z, tokens, ckpt.gate_proj)
            z_text, attention, bad = semantic_augment(
                z, semantic_query_text(graph, v), sem_store, ckpt.chunk_proj,
                cfg.retrieve_k, lam_text, policy, embedder,
            )
            leakage += bad
            sig = _center_signature(graph, v, cfg)
            z_full, gate_dump, bad = structural_augment(
                z_text, sig, str_store, ckpt, gates, lam_struct, policy
            )
            leakage += bad
            feats.append(z_full)
            gate_rows.append(gates)
            dumps.append(
                {
                    "query_id": f"{graph.dataset_id}:{v}",
                    "text_attention": attention,
                    "domain_gates": [
                        {"domain": d["domain"], "pi": d["pi"]} for d in gate_dump
                    ],
                }
            )
        return np.stack(feats), np.stack(gate_rows), dumps

    support_feats, support_gates, _ = build_features(support_nodes)
    query_feats, _, query_dumps = build_features(episode.queries)

    prompt = init_prompt(support_gates.mean(axis=0), ckpt)
    losses: list[float] = []
    best_prompt = prompt.copy()
    best_loss = np.inf
    if ckpt.dims.token_dim > 0:
        state = AdamState(lr=cfg.adapt_lr)
        bad_steps = 0
        for _ in range(cfg.adapt_epochs):
            loss, dprompt = finetune_loss(
                support_feats, support_labels, prompt, cfg.adapt_tau
            )
            losses.append(loss)
            if loss < best_loss - 1e-12:
                best_loss = loss
                best_prompt = prompt.copy()
                bad_steps = 0
            else:
                bad_steps += 1
            if bad_steps >= cfg.adapt_patience:
                break
            adam_step({"prompt": prompt}, {"prompt": dprompt}, state)

    preds = nearest_prototype(query_feats, support_feats, support_labels, best_prompt)
    truth = [graph.labels[q] for q in episode.queries]
    accuracy = float(np.mean([p == t for p, t in zip(preds, truth)])) if preds else 0.0

    after = {k: v.tobytes() for k, v in ckpt.params.items()}
    if before != after:
        raise GraphMemError("backbone parameters changed during adaptation")
    if leakage:
        raise GraphMemError(
            f"retrieval returned {leakage} record(s) violating the episode policy"
        )
    return EpisodeResult(
        episode=episode,
        predictions=tuple(preds),
        accuracy=accuracy,
        prompt=best_prompt,
        prompt_losses=losses,
        attention=query_dumps,
        leakage_violations=leakage,
    )
