"""Exact-scan retrieval stores for semantic chunks and structural motifs.

Both stores rank by cosine similarity over an explicit scan of every record
(no approximate index), with a fixed total order on ties so results are fully
deterministic: descending score, then ascending (dataset, node, chunk_index).
Files are JSON lines with a mandatory header carrying version, modality, and
vector dim; saves are atomic (write temp, then rename) and loads never leave a
partially populated store behind.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ParameterError, ParseError, ValidationError
from .graphs import EgoSubgraph

logger = logging.getLogger(__name__)

STORE_VERSION = 1

SEMANTIC_META_KEYS = frozenset(
    {"dataset", "node_id", "label", "description", "field_tag", "domain_id"}
)
STRUCTURAL_META_KEYS = frozenset({"dataset", "hop_radius", "anchor_score", "domain_id"})

MetaFilter = Union[None, dict, Callable[[dict], bool]]


@dataclass
class SemanticRecord:
    """One embedded text chunk, keyed by (dataset, node, chunk_index)."""

    dataset: str
    node: int
    chunk_index: int
    vec: np.ndarray
    meta: dict


@dataclass
class StructuralRecord:
    """One anchored motif: the anchor's walk signature plus the ego ball.

    ``vec`` is the anchor's signature (the retrieval key); ``motif_features``
    holds one signature row per motif node, aligned with ``motif.nodes``.
    """

    dataset: str
    node: int
    vec: np.ndarray
    motif: EgoSubgraph
    motif_features: np.ndarray
    meta: dict
    chunk_index: int = 0  # constant; keeps the tie-break key uniform


@dataclass(frozen=True)
class RetrievalResult:
    record: Union[SemanticRecord, StructuralRecord]
    score: float
    rank: int


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(vec)
    return vec / norm if norm > 0.0 else np.zeros_like(vec)


class _ScanStore:
    """Shared machinery: dim control, cosine scan, ordering, persistence."""

    modality = ""
    required_meta: frozenset = frozenset()

    def __init__(self, dim: Optional[int] = None):
        if dim is not None and dim < 1:
            raise ParameterError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self.records: list = []
        self._units: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.records)

    def _coerce_vec(self, vec) -> np.ndarray:
        arr = np.asarray(vec, dtype=np.float64)
        if arr.ndim != 1:
            raise ValidationError(f"{self.modality} vec must be 1-d, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{self.modality} vec contains non-finite values")
        if self.dim is None:
            self.dim = int(arr.shape[0])
        elif arr.shape[0] != self.dim:
            raise ValidationError(
                f"{self.modality} vec has dim {arr.shape[0]}, store dim is {self.dim}"
            )
        return arr

    def _check_meta(self, meta: dict) -> None:
        missing = self.required_meta - set(meta)
        if missing:
            raise ValidationError(
                f"{self.modality} record meta missing keys {sorted(missing)}"
            )

    def _unit_matrix(self) -> np.ndarray:
        if self._units is None:
            if self.records:
                self._units = np.stack([_unit(r.vec) for r in self.records])
            else:
                self._units = np.zeros((0, self.dim or 0))
        return self._units

    @staticmethod
    def _order_key(record) -> tuple:
        return (record.dataset, record.node, record.chunk_index)

    def topk(self, query, k: int, where: MetaFilter = None) -> list[RetrievalResult]:
        """Exact top-k by cosine; returns fewer results if fewer records match."""
        if k < 1:
            raise ParameterError(f"k must be >= 1, got {k}")
        q = np.asarray(query, dtype=np.float64)
        if self.dim is not None and (q.ndim != 1 or q.shape[0] != self.dim):
            raise ValidationError(
                f"query has shape {q.shape}, store dim is {self.dim}"
            )
        qnorm = np.linalg.norm(q)
        if qnorm == 0.0:
            raise ParameterError("query vector has zero norm")
        if not self.records:
            return []
        scores = self._unit_matrix() @ (q / qnorm)
        if where is None:
            candidates = range(len(self.records))
        elif callable(where):
            candidates = [i for i, r in enumerate(self.records) if where(r.meta)]
        else:
            candidates = [
                i
                for i, r in enumerate(self.records)
                if all(r.meta.get(key) == val for key, val in where.items())
            ]
        ordered = sorted(
            candidates,
            key=lambda i: (-scores[i], self._order_key(self.records[i])),
        )[:k]
        return [
            RetrievalResult(record=self.records[i], score=float(scores[i]), rank=r)
            for r, i in enumerate(ordered)
        ]

    # -- persistence ------------------------------------------------------

    def _header(self) -> dict:
        return {
            "version": STORE_VERSION,
            "modality": self.modality,
            "dim": self.dim,
            "count": len(self.records),
        }

    def _record_to_dict(self, record) -> dict:
        raise NotImplementedError

    def _record_from_dict(self, obj: dict):
        raise NotImplementedError

    def save(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self._header()) + "\n")
            for record in self.records:
                fh.write(json.dumps(self._record_to_dict(record)) + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str):
        store = cls()
        with open(path, "r", encoding="utf-8") as fh:
            header_line = fh.readline()
            if not header_line.strip():
                raise ParseError(f"{path}: missing store header")
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}: malformed header: {exc.msg}") from exc
            if header.get("version") != STORE_VERSION:
                raise ParseError(
                    f"{path}: unsupported store version {header.get('version')!r}"
                )
            if header.get("modality") != cls.modality:
                raise ParseError(
                    f"{path}: modality {header.get('modality')!r} does not match "
                    f"{cls.modality!r}"
                )
            records = []
            for lineno, line in enumerate(fh, start=2):
                if not line.strip():
                    continue
                try:
                    records.append(store._record_from_dict(json.loads(line)))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if header.get("count") != len(records):
                raise ParseError(
                    f"{path}: header count {header.get('count')} but "
                    f"{len(records)} records read (truncated or corrupt file)"
                )
        store.dim = header.get("dim")
        for record in records:
            store._register(record)
        return store

    def _register(self, record) -> None:
        raise NotImplementedError


class SemanticStore(_ScanStore):
    """Chunk-level text store.  Re-inserting a chunk key replaces the record."""

    modality = "semantic"
    required_meta = SEMANTIC_META_KEYS

    def __init__(self, dim: Optional[int] = None):
        super().__init__(dim)
        self._by_key: dict[tuple, int] = {}

    def insert(self, record: SemanticRecord) -> int:
        record.vec = self._coerce_vec(record.vec)
        self._check_meta(record.meta)
        key = (record.dataset, record.node, record.chunk_index)
        if key in self._by_key:
            idx = self._by_key[key]
            logger.warning("semantic store: replacing record for %s", key)
            self.records[idx] = record
            self._units = None
            return idx
        self.records.append(record)
        self._by_key[key] = len(self.records) - 1
        self._units = None
        return len(self.records) - 1

    def _record_to_dict(self, record: SemanticRecord) -> dict:
        return {
            "dataset": record.dataset,
            "node": record.node,
            "chunk_index": record.chunk_index,
            "vec": [float(x) for x in record.vec],
            "meta": record.meta,
        }

    def _record_from_dict(self, obj: dict) -> SemanticRecord:
        return SemanticRecord(
            dataset=str(obj["dataset"]),
            node=int(obj["node"]),
            chunk_index=int(obj["chunk_index"]),
            vec=np.asarray(obj["vec"], dtype=np.float64),
            meta=dict(obj["meta"]),
        )

    def _register(self, record: SemanticRecord) -> None:
        record.vec = self._coerce_vec(record.vec)
        self._check_meta(record.meta)
        key = (record.dataset, record.node, record.chunk_index)
        if key in self._by_key:
            raise ParseError(f"duplicate semantic record key {key} in store file")
        self.records.append(record)
        self._by_key[key] = len(self.records) - 1
        self._units = None


class StructuralStore(_ScanStore):
    """Motif store with same-dataset dedup on the motif's node set.

    Two records from one dataset covering the same node set are duplicates;
    the one with the higher anchor_score wins and insert reports Deduped by
    returning None.
    """

    modality = "structural"
    required_meta = STRUCTURAL_META_KEYS

    def __init__(self, dim: Optional[int] = None):
        super().__init__(dim)
        self._by_motif: dict[tuple, int] = {}

    def insert(self, record: StructuralRecord) -> Optional[int]:
        record.vec = self._coerce_vec(record.vec)
        self._check_meta(record.meta)
        feats = np.asarray(record.motif_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != len(record.motif.nodes):
            raise ValidationError(
                f"motif_features shape {feats.shape} does not cover "
                f"{len(record.motif.nodes)} motif nodes"
            )
        record.motif_features = feats
        key = (record.dataset, tuple(sorted(record.motif.nodes)))
        if key in self._by_motif:
            idx = self._by_motif[key]
            incumbent = self.records[idx]
            if record.meta["anchor_score"] > incumbent.meta["anchor_score"]:
                self.records[idx] = record
                self._units = None
            return None
        self.records.append(record)
        self._by_motif[key] = len(self.records) - 1
        self._units = None
        return len(self.records) - 1

    def _record_to_dict(self, record: StructuralRecord) -> dict:
        return {
            "dataset": record.dataset,
            "node": record.node,
            "vec": [float(x) for x in record.vec],
            "motif": {
                "center": record.motif.center,
                "hop_radius": record.motif.hop_radius,
                "nodes": list(record.motif.nodes),
                "edges": [list(e) for e in record.motif.edges],
            },
            "motif_features": [[float(x) for x in row] for row in record.motif_features],
            "meta": record.meta,
        }

    def _record_from_dict(self, obj: dict) -> StructuralRecord:
        motif = obj["motif"]
        return StructuralRecord(
            dataset=str(obj["dataset"]),
            node=int(obj["node"]),
            vec=np.asarray(obj["vec"], dtype=np.float64),
            motif=EgoSubgraph(
                center=int(motif["center"]),
                hop_radius=int(motif["hop_radius"]),
                nodes=tuple(int(v) for v in motif["nodes"]),
                edges=tuple((int(u), int(v)) for u, v in motif["edges"]),
            ),
            motif_features=np.asarray(obj["motif_features"], dtype=np.float64),
            meta=dict(obj["meta"]),
        )

    def _register(self, record: StructuralRecord) -> None:
        outcome = self.insert(record)
        if outcome is None:
            raise ParseError(
                f"duplicate structural motif for dataset {record.dataset} in store file"
            )
