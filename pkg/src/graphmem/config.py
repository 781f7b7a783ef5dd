"""Run configuration: one JSON file drives every CLI verb.

A config is a flat JSON object mirroring RunConfig, with an optional nested
"synth" object for the generator.  Command-line overrides use
``--set key=value`` with dotted keys reaching into nested objects; values are
parsed as JSON when possible and kept as strings otherwise.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, ParseError


@dataclass
class RunConfig:
    # Paths.  bundle defaults to <workdir>/bundle.json when left empty.
    workdir: str = "run"
    bundle: str = ""

    # Walk signatures.
    damping: float = 0.5
    walk_order: int = 8
    anchors_per_graph: int = 16
    hop_radius: int = 1

    # Text pipeline.
    align_dim: int = 32
    store_dim: int = 128
    embed_seed: int = 17
    external_embeddings: str = ""

    # Encoder widths.
    token_dim: int = 16
    hidden_dim: int = 64
    embed_dim: int = 64
    proj_dim: int = 64

    # Pre-training.
    beta: float = 0.01
    gamma: float = 0.01
    pretrain_tau: float = 0.2
    batch_size: int = 64
    epochs: int = 30
    patience: int = 50
    lr: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0

    # Adaptation.
    lambda_text: float = 0.1
    lambda_struct: float = 0.1
    retrieve_k: int = 5
    adapt_tau: float = 0.5
    adapt_epochs: int = 100
    adapt_patience: int = 10
    adapt_lr: float = 0.05

    # Episodes and evaluation.
    shots: int = 5
    episodes: int = 50
    query_cap: int = 200
    task: str = "node"
    eval_seeds: tuple = (0, 1, 2, 3, 4)
    split_mode: str = "both"
    ablations: tuple = ()
    dump_attention: bool = False
    target_dataset: str = ""

    # Synthetic generator section (see synth.SyntheticSpec fields).
    synth: Optional[dict] = None

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ConfigError(f"task must be 'node' or 'graph', got {self.task!r}")
        if self.split_mode not in ("dataset", "domain", "both"):
            raise ConfigError(
                f"split_mode must be 'dataset', 'domain', or 'both', got {self.split_mode!r}"
            )
        known = {"no_align", "no_text_qa", "no_struct_qa"}
        unknown = set(self.ablations) - known
        if unknown:
            raise ConfigError(f"unknown ablation flags {sorted(unknown)}")
        self.eval_seeds = tuple(int(s) for s in self.eval_seeds)
        self.ablations = tuple(self.ablations)

    @property
    def bundle_path(self) -> str:
        return self.bundle or os.path.join(self.workdir, "bundle.json")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["eval_seeds"] = list(self.eval_seeds)
        out["ablations"] = list(self.ablations)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(
                f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}"
            ) from exc
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply --set key=value pairs; dotted keys descend into nested objects."""
    obj = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        cursor = obj
        for part in parts[:-1]:
            if part not in cursor or not isinstance(cursor[part], dict):
                cursor[part] = {}
            cursor = cursor[part]
        leaf = parts[-1]
        if cursor is obj and leaf not in obj:
            raise ConfigError(f"override names unknown config key {leaf!r}")
        cursor[leaf] = _coerce(raw)
    return RunConfig.from_dict(obj)
