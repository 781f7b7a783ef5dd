"""Command-line entry point.

Every verb reads one JSON config file plus optional ``--set key=value``
overrides, and echoes the effective config into the work directory so a run
can be reproduced from its artifacts alone.

    graphmem synth     config.json              generate a synthetic bundle
    graphmem build-db  config.json              build both retrieval stores
    graphmem pretrain  config.json              pre-train and checkpoint
    graphmem finetune  config.json              episodes on one target graph
    graphmem eval      config.json              full leave-one-out evaluation
    graphmem inspect   config.json              summarize artifacts on disk
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .adapt import RetrievalPolicy, run_episode
from .config import RunConfig, apply_overrides
from .errors import ConfigError, GraphMemError
from .graphs import load_graph_bundle, save_graph_bundle
from .harness import (
    correlation_map,
    evaluate,
    file_sha256,
    sample_episodes,
    write_correlation_map,
    write_report_csv,
)
from .pipeline import (
    build_stores,
    load_checkpoint,
    prepare_graph_inputs,
    pretrain_pipeline,
    save_checkpoint,
)
from .pretrain import write_loss_trace
from .store import SemanticStore, StructuralStore
from .synth import SyntheticSpec, generate_synthetic

logger = logging.getLogger(__name__)

DB_NAME = "db"


def _paths(cfg: RunConfig) -> dict:
    w = cfg.workdir
    return {
        "bundle": cfg.bundle_path,
        "sem": os.path.join(w, f"{DB_NAME}.sem.jsonl"),
        "str": os.path.join(w, f"{DB_NAME}.str.jsonl"),
        "checkpoint": os.path.join(w, "checkpoint.json"),
        "trace": os.path.join(w, "trace.csv"),
        "reports": os.path.join(w, "reports"),
        "finetune": os.path.join(w, "finetune"),
        "correlation": os.path.join(w, "correlation.csv"),
    }


def _echo_config(cfg: RunConfig, verb: str) -> None:
    os.makedirs(cfg.workdir, exist_ok=True)
    cfg.save(os.path.join(cfg.workdir, f"{verb}-config.json"))


def cmd_synth(cfg: RunConfig) -> int:
    if cfg.synth is None:
        raise ConfigError("synth verb needs a 'synth' section in the config")
    spec = SyntheticSpec(
        **{**cfg.synth, "text_templates": tuple(cfg.synth["text_templates"])}
    )
    graphs = generate_synthetic(spec)
    paths = _paths(cfg)
    os.makedirs(os.path.dirname(paths["bundle"]) or ".", exist_ok=True)
    save_graph_bundle(graphs, paths["bundle"])
    print(f"wrote {len(graphs)} graph(s) to {paths['bundle']}")
    return 0


def cmd_build_db(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    graphs = load_graph_bundle(paths["bundle"])
    inputs = [prepare_graph_inputs(g, cfg) for g in graphs]
    sem_store, str_store = build_stores(inputs, cfg)
    sem_store.save(paths["sem"])
    str_store.save(paths["str"])
    print(
        f"semantic store: {len(sem_store)} records -> {paths['sem']}\n"
        f"structural store: {len(str_store)} records -> {paths['str']}"
    )
    return 0


def cmd_pretrain(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    graphs = load_graph_bundle(paths["bundle"])
    ckpt, result = pretrain_pipeline(graphs, cfg)
    save_checkpoint(ckpt, paths["checkpoint"])
    write_loss_trace(result.trace, paths["trace"])
    last = result.trace[-1] if result.trace else None
    status = "diverged (restored last finite epoch)" if result.diverged else "ok"
    print(f"checkpoint -> {paths['checkpoint']}")
    print(f"loss trace ({len(result.trace)} epochs) -> {paths['trace']}")
    if last is not None:
        print(
            f"final total {last['total']:.4f} "
            f"(alignment {last['infonce']:.4f}) [{status}]"
        )
    return 0


def cmd_finetune(cfg: RunConfig) -> int:
    if not cfg.target_dataset:
        raise ConfigError("finetune verb needs target_dataset in the config")
    paths = _paths(cfg)
    graphs = load_graph_bundle(paths["bundle"])
    targets = [g for g in graphs if g.dataset_id == cfg.target_dataset]
    if not targets:
        raise ConfigError(f"target_dataset {cfg.target_dataset!r} not in bundle")
    graph = targets[0]
    ckpt = load_checkpoint(paths["checkpoint"])
    sem_store = SemanticStore.load(paths["sem"])
    str_store = StructuralStore.load(paths["str"])
    policy = RetrievalPolicy(forbidden_datasets=frozenset({graph.dataset_id}))
    out_dir = paths["finetune"]
    os.makedirs(out_dir, exist_ok=True)
    inputs = prepare_graph_inputs(graph, cfg)
    rows, prompts = [], []
    for seed in cfg.eval_seeds:
        episodes = sample_episodes(
            graph, cfg.shots, cfg.episodes, seed, cfg.query_cap, cfg.task
        )
        for idx, episode in enumerate(episodes):
            result = run_episode(
                graph, episode, ckpt, sem_store, str_store, cfg, policy,
                inputs=inputs,
            )
            rows.append(
                {
                    "split_mode": "finetune",
                    "target": graph.dataset_id,
                    "task": cfg.task,
                    "m": cfg.shots,
                    "seed": seed,
                    "episode": idx,
                    "accuracy": result.accuracy,
                }
            )
            prompts.append(
                {
                    "seed": seed,
                    "episode": idx,
                    "prompt": [float(x) for x in result.prompt],
                    "accuracy": result.accuracy,
                }
            )
            with open(
                os.path.join(out_dir, f"attention-s{seed}-e{idx}.json"),
                "w", encoding="utf-8",
            ) as fh:
                json.dump(result.attention, fh)
    write_report_csv(rows, os.path.join(out_dir, "episodes.csv"))
    with open(os.path.join(out_dir, "prompts.json"), "w", encoding="utf-8") as fh:
        json.dump(prompts, fh)
    import numpy as np

    accs = np.array([r["accuracy"] for r in rows])
    print(
        f"{len(rows)} episodes on {graph.dataset_id}: "
        f"mean accuracy {accs.mean():.4f} (std {accs.std():.4f}) -> {out_dir}"
    )
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    graphs = load_graph_bundle(paths["bundle"])
    report = evaluate(graphs, cfg, paths["reports"])
    report["bundle_sha256"] = file_sha256(paths["bundle"])
    with open(
        os.path.join(paths["reports"], "report.json"), "w", encoding="utf-8"
    ) as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    for key, agg in report["splits"].items():
        print(f"{key}: mean accuracy {agg['mean_accuracy']:.4f}")
    print(f"reports -> {paths['reports']}")
    return 0


def cmd_inspect(cfg: RunConfig) -> int:
    paths = _paths(cfg)
    if os.path.exists(paths["bundle"]):
        graphs = load_graph_bundle(paths["bundle"])
        print(f"bundle: {len(graphs)} graph(s) [{paths['bundle']}]")
        for g in graphs:
            print(
                f"  {g.dataset_id} (domain {g.domain_id}): {g.node_count} nodes, "
                f"{len(g.edges)} edges, feature dim {g.feature_dim}, "
                f"texts {'yes' if g.texts else 'no'}, "
                f"labels {'yes' if g.labels else 'no'}"
            )
    else:
        graphs = None
        print("bundle: missing")
    for label, path, cls in (
        ("semantic store", paths["sem"], SemanticStore),
        ("structural store", paths["str"], StructuralStore),
    ):
        if os.path.exists(path):
            store = cls.load(path)
            print(f"{label}: {len(store)} records, dim {store.dim} [{path}]")
        else:
            print(f"{label}: missing")
    if os.path.exists(paths["checkpoint"]):
        ckpt = load_checkpoint(paths["checkpoint"])
        n_params = sum(v.size for v in ckpt.params.values())
        print(
            f"checkpoint: {n_params} parameters, domains {ckpt.domain_ids}, "
            f"embed dim {ckpt.dims.embed_dim} [{paths['checkpoint']}]"
        )
        if graphs:
            names, grid = correlation_map(graphs, ckpt, cfg)
            write_correlation_map(names, grid, paths["correlation"])
            print(f"correlation map -> {paths['correlation']}")
            for name, row in zip(names, grid):
                cells = " ".join(f"{v:+.3f}" for v in row)
                print(f"  {name}: {cells}")
    else:
        print("checkpoint: missing")
    if os.path.exists(paths["trace"]):
        with open(paths["trace"], "r", encoding="utf-8") as fh:
            lines = fh.read().strip().splitlines()
        if len(lines) > 1:
            print(f"loss trace: {len(lines) - 1} epochs, last: {lines[-1]}")
    return 0


_VERBS = {
    "synth": cmd_synth,
    "build-db": cmd_build_db,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="graphmem",
        description="multi-domain graph learning with external retrieval stores",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in _VERBS:
        p = sub.add_parser(verb)
        p.add_argument("config", help="path to the JSON run config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (dotted keys reach nested sections)",
        )
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        cfg = RunConfig.from_json(args.config)
        cfg = apply_overrides(cfg, args.overrides)
        _echo_config(cfg, args.verb)
        return _VERBS[args.verb](cfg)
    except (GraphMemError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
