"""Cross-view pre-training: contrastive alignment plus a compression penalty.

The objective couples the two encoders through an in-batch softmax over
cosine similarities of projected embeddings (each node's structural view is
the positive for its text view), adds a closed-form Gaussian KL penalty on
variational heads over both views, and decays domain tokens with an L2
regularizer.  Per-domain batch means keep domains with different node counts
on equal footing.  All gradients are analytic and validated by grad_check.
"""

from __future__ import annotations

import csv
import logging
from collections import Counter, deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import logsumexp, softmax

from .encoder import (
    AdamState,
    ParamDict,
    adam_step,
    copy_params,
    encode_view,
    encode_view_backward,
    token_key,
)
from .errors import NumericalError, ParameterError, ValidationError

logger = logging.getLogger(__name__)

LOGVAR_CLIP = 10.0


@dataclass
class ViewBundle:
    """Per-graph encoder inputs shared by every batch that samples from it."""

    dataset_id: str
    domain_id: str
    a_hat: sp.spmatrix
    text_x: np.ndarray
    struct_x: np.ndarray

    @property
    def node_count(self) -> int:
        return self.text_x.shape[0]


@dataclass
class BatchSlice:
    bundle: ViewBundle
    rows: np.ndarray


def gaussian_kl(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Per-row KL(N(mu, diag(exp(logvar))) || N(0, I)), in closed form."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return 0.5 * (mu ** 2 + np.exp(logvar) - logvar - 1.0).sum(axis=-1)


def cosine_rows(a: np.ndarray, b: np.ndarray):
    """All-pairs cosine matrix S[i, j] = cos(a_i, b_j) with backward cache."""
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0.0) or np.any(nb == 0.0):
        raise NumericalError("zero-norm embedding row in cosine similarity")
    an = a / na[:, None]
    bn = b / nb[:, None]
    return an @ bn.T, (an, bn, na, nb)


def cosine_rows_backward(cache, ds: np.ndarray):
    an, bn, na, nb = cache
    dan = ds @ bn
    dbn = ds.T @ an
    da = (dan - an * (dan * an).sum(axis=1, keepdims=True)) / na[:, None]
    db = (dbn - bn * (dbn * bn).sum(axis=1, keepdims=True)) / nb[:, None]
    return da, db


def infonce_loss(text_emb: np.ndarray, struct_emb: np.ndarray, tau: float) -> float:
    """Plain in-batch alignment loss, averaged over rows.

    Row v's positive is column v; all other columns are negatives.  The loss
    is non-negative (logsumexp dominates its diagonal term), so the implied
    mutual-information estimate log(batch) - loss never exceeds log(batch).
    A single-row batch gives exactly 0; uniform similarities give log(batch).
    """
    if tau <= 0.0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if text_emb.shape != struct_emb.shape:
        raise ValidationError(
            f"view shapes disagree: {text_emb.shape} vs {struct_emb.shape}"
        )
    s, _ = cosine_rows(text_emb, struct_emb)
    logits = s / tau
    ell = logsumexp(logits, axis=1) - np.diag(logits)
    return float(ell.mean())


def alignment_top1(text_emb: np.ndarray, struct_emb: np.ndarray) -> float:
    """Fraction of rows whose own column is the cosine argmax."""
    s, _ = cosine_rows(text_emb, struct_emb)
    return float((s.argmax(axis=1) == np.arange(s.shape[0])).mean())


def pretrain_loss(
    slices: Sequence[BatchSlice],
    params: ParamDict,
    beta: float,
    gamma: float,
    tau: float,
    align_weight: float = 1.0,
):
    """Full objective on one mixed-domain batch.

    Returns (total, grads, parts).  parts splits the total into its three
    terms: infonce (alignment), compression (KL), token_reg.  Every node is
    weighted by 1 / (batch nodes of its domain), so the alignment and
    compression terms are sums of per-domain batch means.  align_weight
    scales the alignment term; 0 removes cross-view alignment entirely.
    """
    if tau <= 0.0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    if beta < 0.0 or gamma < 0.0 or align_weight < 0.0:
        raise ParameterError("beta, gamma, and align_weight must be >= 0")
    if not slices:
        raise ValidationError("pretrain_loss needs at least one batch slice")

    grads: ParamDict = {k: np.zeros_like(v) for k, v in params.items()}

    encoded = []
    for sl in slices:
        token = params[token_key(sl.bundle.domain_id)]
        ht_full, cache_t = encode_view(
            sl.bundle.a_hat, sl.bundle.text_x, token,
            params["text_w1"], params["text_w2"],
        )
        hs_full, cache_s = encode_view(
            sl.bundle.a_hat, sl.bundle.struct_x, token,
            params["struct_w1"], params["struct_w2"],
        )
        encoded.append((sl, cache_t, cache_s, ht_full, hs_full))

    ht = np.vstack([e[3][e[0].rows] for e in encoded])
    hs = np.vstack([e[4][e[0].rows] for e in encoded])
    row_domains = [
        e[0].bundle.domain_id for e in encoded for _ in range(len(e[0].rows))
    ]
    counts = Counter(row_domains)
    omega = np.array([1.0 / counts[d] for d in row_domains])

    # Alignment term on projected embeddings.
    pt, ps = params["proj_text"], params["proj_struct"]
    at = ht @ pt
    asv = hs @ ps
    s, cos_cache = cosine_rows(at, asv)
    logits = s / tau
    ell = logsumexp(logits, axis=1) - np.diag(logits)
    relevance = align_weight * float(omega @ ell)

    dlogits = omega[:, None] * softmax(logits, axis=1)
    dlogits[np.arange(len(omega)), np.arange(len(omega))] -= omega
    dat, das = cosine_rows_backward(cos_cache, align_weight * dlogits / tau)
    grads["proj_text"] += ht.T @ dat
    grads["proj_struct"] += hs.T @ das
    dht = dat @ pt.T
    dhs = das @ ps.T

    # Compression term: closed-form KL on both views' variational heads.
    compression = 0.0
    for h, dh, mu_key, lv_key in (
        (ht, dht, "vib_mu_text", "vib_logvar_text"),
        (hs, dhs, "vib_mu_struct", "vib_logvar_struct"),
    ):
        mu = h @ params[mu_key]
        lv_raw = h @ params[lv_key]
        lv = np.clip(lv_raw, -LOGVAR_CLIP, LOGVAR_CLIP)
        kl = 0.5 * (mu ** 2 + np.exp(lv) - lv - 1.0).sum(axis=1)
        compression += beta * float(omega @ kl)
        coeff = beta * omega[:, None]
        dmu = coeff * mu
        inside = (lv_raw > -LOGVAR_CLIP) & (lv_raw < LOGVAR_CLIP)
        dlv = coeff * 0.5 * (np.exp(lv) - 1.0) * inside
        grads[mu_key] += h.T @ dmu
        grads[lv_key] += h.T @ dlv
        dh += dmu @ params[mu_key].T + dlv @ params[lv_key].T

    # Token decay over every domain token, present in the batch or not.
    token_reg = 0.0
    for key, value in params.items():
        if key.startswith("token:"):
            token_reg += gamma * float((value ** 2).sum())
            grads[key] += 2.0 * gamma * value

    # Scatter embedding gradients back through each graph's encoders.
    offset = 0
    for sl, cache_t, cache_s, ht_full, hs_full in encoded:
        b = len(sl.rows)
        dfull_t = np.zeros_like(ht_full)
        dfull_t[sl.rows] = dht[offset:offset + b]
        dfull_s = np.zeros_like(hs_full)
        dfull_s[sl.rows] = dhs[offset:offset + b]
        dw1, dw2, _, dtok_t = encode_view_backward(cache_t, dfull_t)
        grads["text_w1"] += dw1
        grads["text_w2"] += dw2
        dw1, dw2, _, dtok_s = encode_view_backward(cache_s, dfull_s)
        grads["struct_w1"] += dw1
        grads["struct_w2"] += dw2
        grads[token_key(sl.bundle.domain_id)] += dtok_t + dtok_s
        offset += b

    total = relevance + compression + token_reg
    if not np.isfinite(total):
        raise NumericalError("pre-training loss is non-finite")
    parts = {
        "total": total,
        "infonce": relevance,
        "compression": compression,
        "token_reg": token_reg,
    }
    return total, grads, parts


def iter_batches(
    node_counts: Sequence[int], batch_size: int, rng: np.random.Generator
) -> list[list[tuple[int, int]]]:
    """Shuffle the pooled (graph, node) pairs and cut into batches.

    Domains mix freely: each batch is a uniform draw from the pooled nodes,
    so a domain's expected share of a batch equals its share of all nodes.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    pool = [(gi, v) for gi, n in enumerate(node_counts) for v in range(n)]
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _slices_for_batch(
    bundles: Sequence[ViewBundle], batch: Sequence[tuple[int, int]]
) -> list[BatchSlice]:
    rows: dict[int, list[int]] = {}
    for gi, v in batch:
        rows.setdefault(gi, []).append(v)
    return [
        BatchSlice(bundle=bundles[gi], rows=np.array(nodes, dtype=int))
        for gi, nodes in sorted(rows.items())
    ]


@dataclass
class PretrainResult:
    params: ParamDict
    trace: list[dict]
    stopped_epoch: Optional[int]
    diverged: bool


def run_pretraining(
    bundles: Sequence[ViewBundle],
    params: ParamDict,
    *,
    beta: float,
    gamma: float,
    tau: float,
    batch_size: int,
    epochs: int,
    patience: Optional[int] = 50,
    lr: float = 0.01,
    weight_decay: float = 0.0,
    seed: int = 0,
    align_weight: float = 1.0,
) -> PretrainResult:
    """Adam over shuffled mixed-domain batches with plateau early stopping.

    Stops when the 10-epoch moving average of the total loss has not improved
    for ``patience`` consecutive epochs.  A non-finite loss or gradient aborts
    the run and restores the last finite epoch's parameters.
    """
    if epochs < 0:
        raise ParameterError(f"epochs must be >= 0, got {epochs}")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr, weight_decay=weight_decay)
    counts = [b.node_count for b in bundles]
    trace: list[dict] = []
    backup = copy_params(params)
    window: deque = deque(maxlen=10)
    best_ma = np.inf
    bad = 0
    stopped_epoch = None
    diverged = False
    for epoch in range(epochs):
        sums = {"total": 0.0, "infonce": 0.0, "compression": 0.0, "token_reg": 0.0}
        n_batches = 0
        try:
            for batch in iter_batches(counts, batch_size, rng):
                slices = _slices_for_batch(bundles, batch)
                _, grads, parts = pretrain_loss(
                    slices, params, beta, gamma, tau, align_weight
                )
                adam_step(params, grads, state)
                for key in sums:
                    sums[key] += parts[key]
                n_batches += 1
        except NumericalError as exc:
            logger.warning("pre-training diverged at epoch %d: %s", epoch, exc)
            for key in params:
                params[key] = backup[key].copy()
            diverged = True
            break
        row = {"epoch": epoch}
        row.update({key: sums[key] / max(1, n_batches) for key in sums})
        trace.append(row)
        backup = copy_params(params)
        window.append(row["total"])
        moving = float(np.mean(window))
        if moving < best_ma - 1e-9:
            best_ma = moving
            bad = 0
        else:
            bad += 1
        if patience is not None and bad >= patience:
            stopped_epoch = epoch
            logger.info("early stop at epoch %d (plateaued moving average)", epoch)
            break
    return PretrainResult(
        params=params, trace=trace, stopped_epoch=stopped_epoch, diverged=diverged
    )


def evaluate_alignment(
    bundles: Sequence[ViewBundle],
    params: ParamDict,
    tau: float,
    batch_size: int,
    seed: int = 0,
) -> dict:
    """Mean in-batch alignment loss and positive-pair top-1 rate.

    Uses the same pooled batch sampling as training, with its own seed, and
    plain (unweighted) means so the numbers are comparable across runs.
    """
    rng = np.random.default_rng(seed)
    counts = [b.node_count for b in bundles]
    projected = []
    for bundle in bundles:
        token = params[token_key(bundle.domain_id)]
        ht, _ = encode_view(
            bundle.a_hat, bundle.text_x, token, params["text_w1"], params["text_w2"]
        )
        hs, _ = encode_view(
            bundle.a_hat, bundle.struct_x, token,
            params["struct_w1"], params["struct_w2"],
        )
        projected.append((ht @ params["proj_text"], hs @ params["proj_struct"]))
    losses, hits, total = [], 0, 0
    for batch in iter_batches(counts, batch_size, rng):
        at = np.vstack([projected[gi][0][v:v + 1] for gi, v in batch])
        asv = np.vstack([projected[gi][1][v:v + 1] for gi, v in batch])
        losses.append(infonce_loss(at, asv, tau))
        s, _ = cosine_rows(at, asv)
        hits += int((s.argmax(axis=1) == np.arange(s.shape[0])).sum())
        total += s.shape[0]
    return {"infonce": float(np.mean(losses)), "top1": hits / max(1, total)}


def write_loss_trace(trace: Sequence[dict], path: str) -> None:
    """CSV with one row per epoch: epoch,total,infonce,compression,token_reg."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "infonce", "compression", "token_reg"])
        for row in trace:
            writer.writerow(
                [row["epoch"], row["total"], row["infonce"],
                 row["compression"], row["token_reg"]]
            )
