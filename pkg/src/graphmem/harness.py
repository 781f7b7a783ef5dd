"""Leave-one-out evaluation: splits, episode sampling, reports, diagnostics.

Splits hold out either one dataset or one whole domain; sources never overlap
the target and retrieval is filtered accordingly, which run_episode re-checks
record by record.  Reports are written as CSV rows per episode plus aggregate
files; a crash mid-run still persists the rows finished so far together with
a failure marker.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .adapt import Episode, EpisodeResult, RetrievalPolicy, run_episode
from .config import RunConfig
from .errors import ConfigError
from .graphs import Graph
from .pipeline import (
    Checkpoint,
    GraphInputs,
    build_stores,
    prepare_graph_inputs,
    pretrain_pipeline,
)
from .pretrain import cosine_rows
from .store import SemanticStore, StructuralStore

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LodoSplit:
    mode: str
    target: str
    source_datasets: tuple[str, ...]
    target_datasets: tuple[str, ...]


def leave_one_out_splits(graphs: Sequence[Graph], mode: str = "both") -> list[LodoSplit]:
    """One split per held-out dataset and/or per held-out domain.

    Degenerate requests fail loudly: explicitly asking for a mode that cannot
    produce a single valid split is an error, while mode="both" drops the
    impossible side with a warning.
    """
    if mode not in ("dataset", "domain", "both"):
        raise ConfigError(f"unknown split mode {mode!r}")
    datasets = [g.dataset_id for g in graphs]
    by_domain: dict[str, list[str]] = {}
    for g in graphs:
        by_domain.setdefault(g.domain_id, []).append(g.dataset_id)
    splits: list[LodoSplit] = []
    if mode in ("dataset", "both"):
        if len(datasets) < 2:
            if mode == "dataset":
                raise ConfigError("dataset-level splits need at least 2 datasets")
            logger.warning("single dataset; skipping dataset-level splits")
        else:
            for ds in datasets:
                splits.append(
                    LodoSplit(
                        mode="dataset",
                        target=ds,
                        source_datasets=tuple(d for d in datasets if d != ds),
                        target_datasets=(ds,),
                    )
                )
    if mode in ("domain", "both"):
        if len(by_domain) < 2:
            if mode == "domain":
                raise ConfigError("domain-level splits need at least 2 domains")
            logger.warning("single domain; skipping domain-level splits")
        else:
            for dom, members in by_domain.items():
                sources = tuple(d for d in datasets if d not in members)
                splits.append(
                    LodoSplit(
                        mode="domain",
                        target=dom,
                        source_datasets=sources,
                        target_datasets=tuple(members),
                    )
                )
    return splits


def split_policy(split: LodoSplit, graphs: Sequence[Graph]) -> RetrievalPolicy:
    """What episodes under this split must never retrieve."""
    if split.mode == "domain":
        return RetrievalPolicy(
            forbidden_datasets=frozenset(split.target_datasets),
            forbidden_domains=frozenset({split.target}),
        )
    domains = frozenset()
    return RetrievalPolicy(
        forbidden_datasets=frozenset(split.target_datasets),
        forbidden_domains=domains,
    )


def sample_episodes(
    graph: Graph,
    shots: int,
    count: int,
    seed: int,
    query_cap: int = 200,
    task: str = "node",
) -> list[Episode]:
    """Seeded m-shot episodes; queries are the non-support nodes, capped.

    Episode e draws from default_rng([seed, e]), so any single episode can be
    regenerated without sampling its predecessors.
    """
    if graph.labels is None:
        raise ConfigError(f"graph {graph.dataset_id} has no labels to sample from")
    if shots < 1:
        raise ConfigError(f"shots must be >= 1, got {shots}")
    if count < 1:
        raise ConfigError(f"episode count must be >= 1, got {count}")
    by_class: dict[int, list[int]] = {}
    for v, c in enumerate(graph.labels):
        by_class.setdefault(c, []).append(v)
    classes = sorted(by_class)
    if len(classes) < 2:
        raise ConfigError(f"graph {graph.dataset_id} has fewer than 2 classes")
    for c in classes:
        if len(by_class[c]) < shots:
            raise ConfigError(
                f"class {c} of {graph.dataset_id} has {len(by_class[c])} nodes, "
                f"fewer than {shots} shots"
            )
    episodes = []
    for e in range(count):
        rng = np.random.default_rng([seed, e])
        support = []
        for c in classes:
            picked = rng.choice(by_class[c], size=shots, replace=False)
            support.extend((int(v), c) for v in sorted(picked))
        taken = {v for v, _ in support}
        queries = [v for v in range(graph.node_count) if v not in taken]
        if not queries:
            raise ConfigError(
                f"no query nodes left on {graph.dataset_id} with {shots} shots"
            )
        if len(queries) > query_cap:
            queries = sorted(
                int(v) for v in rng.choice(queries, size=query_cap, replace=False)
            )
        episodes.append(
            Episode(
                task=task,
                shots=shots,
                support=tuple(support),
                queries=tuple(queries),
                seed=e,
            )
        )
    return episodes


@dataclass
class SplitArtifacts:
    split: LodoSplit
    checkpoint: Checkpoint
    sem_store: SemanticStore
    str_store: StructuralStore
    source_graphs: list[Graph]
    target_graphs: list[Graph]
    trace: list[dict]


def run_split(
    graphs: Sequence[Graph],
    split: LodoSplit,
    cfg: RunConfig,
    align_weight: float = 1.0,
) -> SplitArtifacts:
    """Build stores and pre-train on the split's sources only."""
    sources = [g for g in graphs if g.dataset_id in split.source_datasets]
    targets = [g for g in graphs if g.dataset_id in split.target_datasets]
    if not sources or not targets:
        raise ConfigError(f"split {split.target!r} has no sources or no targets")
    overlap = {g.dataset_id for g in sources} & {g.dataset_id for g in targets}
    if overlap:
        raise ConfigError(f"split {split.target!r} leaks datasets {sorted(overlap)}")
    if split.mode == "domain":
        bad = [g.dataset_id for g in sources if g.domain_id == split.target]
        if bad:
            raise ConfigError(
                f"domain split {split.target!r} leaks same-domain sources {bad}"
            )
    inputs = [prepare_graph_inputs(g, cfg) for g in sources]
    sem_store, str_store = build_stores(inputs, cfg)
    ckpt, result = pretrain_pipeline(
        sources, cfg, inputs=inputs, sem_store=sem_store, align_weight=align_weight
    )
    return SplitArtifacts(
        split=split,
        checkpoint=ckpt,
        sem_store=sem_store,
        str_store=str_store,
        source_graphs=sources,
        target_graphs=targets,
        trace=result.trace,
    )


def evaluate_split(
    artifacts: SplitArtifacts,
    cfg: RunConfig,
    no_text_qa: bool = False,
    no_struct_qa: bool = False,
    attention_dir: Optional[str] = None,
) -> tuple[list[dict], int]:
    """All episodes for one split; returns report rows and leakage count."""
    policy = split_policy(artifacts.split, artifacts.source_graphs)
    rows: list[dict] = []
    leakage = 0
    for graph in artifacts.target_graphs:
        inputs = prepare_graph_inputs(graph, cfg)
        for seed in cfg.eval_seeds:
            episodes = sample_episodes(
                graph, cfg.shots, cfg.episodes, seed, cfg.query_cap, cfg.task
            )
            for idx, episode in enumerate(episodes):
                result = run_episode(
                    graph, episode, artifacts.checkpoint,
                    artifacts.sem_store, artifacts.str_store,
                    cfg, policy, inputs=inputs,
                    no_text_qa=no_text_qa, no_struct_qa=no_struct_qa,
                )
                leakage += result.leakage_violations
                rows.append(
                    {
                        "split_mode": artifacts.split.mode,
                        "target": artifacts.split.target,
                        "task": cfg.task,
                        "m": cfg.shots,
                        "seed": seed,
                        "episode": idx,
                        "accuracy": result.accuracy,
                    }
                )
                if attention_dir is not None:
                    os.makedirs(attention_dir, exist_ok=True)
                    name = f"attention-{graph.dataset_id}-s{seed}-e{idx}.json"
                    with open(
                        os.path.join(attention_dir, name), "w", encoding="utf-8"
                    ) as fh:
                        json.dump(result.attention, fh)
    return rows, leakage


REPORT_COLUMNS = ["split_mode", "target", "task", "m", "seed", "episode", "accuracy"]


def write_report_csv(rows: Sequence[dict], path: str) -> None:
    """Episode rows plus one final aggregate row (mean and std of accuracy)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([row[c] for c in REPORT_COLUMNS])
        if rows:
            accs = np.array([row["accuracy"] for row in rows], dtype=np.float64)
            writer.writerow(
                ["aggregate", "all", rows[0]["task"], rows[0]["m"], "all", "all",
                 f"{accs.mean():.6f}+/-{accs.std():.6f}"]
            )


def _aggregate(rows: Sequence[dict]) -> dict:
    if not rows:
        return {"episodes": 0, "mean_accuracy": float("nan"), "std_accuracy": float("nan")}
    accs = np.array([row["accuracy"] for row in rows], dtype=np.float64)
    return {
        "episodes": int(len(rows)),
        "mean_accuracy": float(accs.mean()),
        "std_accuracy": float(accs.std()),
    }


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            digest.update(block)
    return digest.hexdigest()


def evaluate(graphs: Sequence[Graph], cfg: RunConfig, out_dir: str) -> dict:
    """Full leave-one-out evaluation with optional ablation variants.

    Writes episodes-<variant>.csv, aggregate.csv, report.json, and report.txt
    under out_dir.  On a mid-run crash, rows finished so far are saved next to
    a failure.json marker before the exception propagates.
    """
    os.makedirs(out_dir, exist_ok=True)
    splits = leave_one_out_splits(graphs, cfg.split_mode)
    if not splits:
        raise ConfigError("no valid leave-one-out splits for this bundle")
    variants = ["full"] + list(cfg.ablations)
    all_rows: dict[str, list[dict]] = {v: [] for v in variants}
    leakage_total = 0
    try:
        for split in splits:
            artifacts = run_split(graphs, split, cfg)
            ablated = None
            for variant in variants:
                if variant == "no_align":
                    if ablated is None:
                        ablated = run_split(graphs, split, cfg, align_weight=0.0)
                    use = ablated
                else:
                    use = artifacts
                attention_dir = (
                    os.path.join(out_dir, "attention", variant)
                    if cfg.dump_attention
                    else None
                )
                rows, leakage = evaluate_split(
                    use, cfg,
                    no_text_qa=(variant == "no_text_qa"),
                    no_struct_qa=(variant == "no_struct_qa"),
                    attention_dir=attention_dir,
                )
                all_rows[variant].extend(rows)
                leakage_total += leakage
    except Exception as exc:
        for variant, rows in all_rows.items():
            if rows:
                write_report_csv(
                    rows, os.path.join(out_dir, f"episodes-{variant}.partial.csv")
                )
        with open(os.path.join(out_dir, "failure.json"), "w", encoding="utf-8") as fh:
            json.dump({"error": f"{type(exc).__name__}: {exc}"}, fh)
        raise

    for variant, rows in all_rows.items():
        write_report_csv(rows, os.path.join(out_dir, f"episodes-{variant}.csv"))

    per_variant = {v: _aggregate(rows) for v, rows in all_rows.items()}
    full_mean = per_variant["full"]["mean_accuracy"]
    for variant in variants[1:]:
        per_variant[variant]["delta_vs_full"] = float(
            full_mean - per_variant[variant]["mean_accuracy"]
        )
    per_split = {}
    for split in splits:
        rows = [
            r for r in all_rows["full"]
            if r["target"] == split.target and r["split_mode"] == split.mode
        ]
        per_split[f"{split.mode}:{split.target}"] = _aggregate(rows)

    with open(os.path.join(out_dir, "aggregate.csv"), "w", encoding="utf-8",
              newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["variant", "episodes", "mean_accuracy", "std_accuracy", "delta_vs_full"]
        )
        for variant in variants:
            agg = per_variant[variant]
            writer.writerow(
                [variant, agg["episodes"], agg["mean_accuracy"], agg["std_accuracy"],
                 agg.get("delta_vs_full", "")]
            )

    report = {
        "config": cfg.to_dict(),
        "splits": per_split,
        "variants": per_variant,
        "leakage_violations": leakage_total,
    }
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    lines = ["leave-one-out evaluation", "========================"]
    for key, agg in per_split.items():
        lines.append(
            f"{key}: mean accuracy {agg['mean_accuracy']:.4f} "
            f"(std {agg['std_accuracy']:.4f}, {agg['episodes']} episodes)"
        )
    for variant in variants:
        agg = per_variant[variant]
        extra = (
            f", delta vs full {agg['delta_vs_full']:+.4f}"
            if "delta_vs_full" in agg else ""
        )
        lines.append(
            f"variant {variant}: mean accuracy {agg['mean_accuracy']:.4f}{extra}"
        )
    lines.append(f"leakage violations: {leakage_total}")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return report


def correlation_map(
    graphs: Sequence[Graph],
    ckpt: Checkpoint,
    cfg: RunConfig,
    pairs: int = 200,
    seed: int = 0,
    inputs: Optional[Sequence[GraphInputs]] = None,
) -> tuple[list[str], np.ndarray]:
    """Mean cross-view similarity per dataset pair.

    Cell (i, j) is the mean cosine between dataset i's projected text
    embeddings and dataset j's projected structural embeddings: same-node
    pairs on the diagonal, seeded random node pairs off it.
    """
    rng = np.random.default_rng(seed)
    if inputs is None:
        inputs = [prepare_graph_inputs(g, cfg) for g in graphs]
    names, text_proj, struct_proj = [], [], []
    for gi in inputs:
        g = gi.graph
        names.append(g.dataset_id)
        zt = ckpt.encode_text(gi.a_hat, gi.fused, g.domain_id)
        zs = ckpt.encode_struct(gi.a_hat, gi.signatures, g.domain_id)
        text_proj.append(zt @ ckpt.params["proj_text"])
        struct_proj.append(zs @ ckpt.params["proj_struct"])
    k = len(names)
    grid = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            if i == j:
                sims, _ = cosine_rows(text_proj[i], struct_proj[j])
                grid[i, j] = float(np.diag(sims).mean())
            else:
                vi = rng.integers(0, text_proj[i].shape[0], size=pairs)
                uj = rng.integers(0, struct_proj[j].shape[0], size=pairs)
                sims, _ = cosine_rows(text_proj[i][vi], struct_proj[j][uj])
                grid[i, j] = float(np.diag(sims).mean())
    return names, grid


def write_correlation_map(names: list[str], grid: np.ndarray, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset"] + names)
        for name, row in zip(names, grid):
            writer.writerow([name] + [f"{v:.6f}" for v in row])
