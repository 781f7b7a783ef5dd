"""Text side of the pipeline: prefix documents, chunking, and embeddings.

Node metadata is rendered into a fixed five-line prefix document, split into
retrievable chunks (one per metadata field plus one per node-text sentence),
and embedded either with a seeded feature-hashing embedder or a fixed external
lookup table.  Raw node features are brought to a common width with a PCA
aligner fitted per graph.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import EmbeddingLookupError, ParameterError, ParseError, ValidationError

logger = logging.getLogger(__name__)

PREFIX_FIELDS = ("dataset", "node_id", "label", "description")

# Boundary only at punctuation followed by whitespace, so in-word periods
# ("v1.0") never split and the pieces always concatenate back to the input.
_SENTENCE_BOUNDARY = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class PrefixedDocument:
    """One node's textual view: four metadata fields plus free-form node text."""

    dataset: str
    node_id: str
    label: str
    description: str
    node_text: str


def render_prefix(doc: PrefixedDocument) -> str:
    """Render the canonical five-line document."""
    return (
        f"Dataset: {doc.dataset}\n"
        f"Node ID: {doc.node_id}\n"
        f"Label: {doc.label}\n"
        f"Description: {doc.description}\n"
        f"Node Text: {doc.node_text}"
    )


_FIELD_TITLES = {
    "dataset": "Dataset",
    "node_id": "Node ID",
    "label": "Label",
    "description": "Description",
}


@dataclass(frozen=True)
class Chunk:
    dataset: str
    node_id: str
    chunk_index: int
    field_tag: str
    text: str


def split_sentences(text: str) -> list[str]:
    """Split on sentence punctuation, keeping it; empty pieces are dropped."""
    return [piece.strip() for piece in _SENTENCE_BOUNDARY.split(text) if piece.strip()]


def chunk_document(doc: PrefixedDocument) -> list[Chunk]:
    """Graph-aware chunking: 4 field chunks, then one chunk per sentence.

    Field chunks keep their rendered line ("Label: Neural Networks") so the
    field name stays part of the retrievable text.  Chunk indices are dense
    from 0; concatenating chunks in index order reproduces every field value
    and the full node text.
    """
    chunks = []
    for tag in PREFIX_FIELDS:
        line = f"{_FIELD_TITLES[tag]}: {getattr(doc, tag)}"
        chunks.append(
            Chunk(doc.dataset, doc.node_id, len(chunks), tag, line)
        )
    for sent in split_sentences(doc.node_text):
        chunks.append(Chunk(doc.dataset, doc.node_id, len(chunks), "sentence", sent))
    return chunks


_TOKEN = re.compile(r"[0-9a-z]+")


class HashingEmbedder(BaseEstimator, TransformerMixin):
    """Deterministic feature-hashing text embedder.

    Tokens are lowercased alphanumeric runs; each token is keyed-hashed to a
    bucket and a sign, accumulated, then L2-normalized.  The same (dim, seed)
    gives identical vectors across processes; empty text maps to the zero
    vector.
    """

    def __init__(self, dim: int = 128, seed: int = 0):
        self.dim = dim
        self.seed = seed

    def _key(self) -> bytes:
        return int(self.seed).to_bytes(8, "big", signed=True)

    def _check(self):
        if self.dim < 1:
            raise ParameterError(f"dim must be >= 1, got {self.dim}")

    def fit(self, texts=None, y=None):
        self._check()
        return self

    def embed(self, text: str) -> np.ndarray:
        self._check()
        vec = np.zeros(self.dim, dtype=np.float64)
        key = self._key()
        for token in _TOKEN.findall(text.lower()):
            digest = hashlib.blake2b(
                token.encode("utf-8"), digest_size=8, key=key
            ).digest()
            val = int.from_bytes(digest, "big")
            bucket = val % self.dim
            sign = 1.0 if (val >> 63) & 1 == 0 else -1.0
            vec[bucket] += sign
        norm = np.linalg.norm(vec)
        if norm > 0.0:
            vec /= norm
        return vec

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if len(texts) else np.zeros(
            (0, self.dim)
        )


class ExternalEmbedder:
    """Fixed lookup-table embedder loaded from a JSON-lines file."""

    def __init__(self, table: dict[str, np.ndarray], dim: int):
        self.table = table
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        if text not in self.table:
            head = text if len(text) <= 60 else text[:57] + "..."
            raise EmbeddingLookupError(f"no external embedding for text {head!r}")
        return self.table[text]

    def transform(self, texts: Sequence[str]) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts]) if len(texts) else np.zeros(
            (0, self.dim)
        )


def load_external_embeddings(path: str) -> ExternalEmbedder:
    """Read {"text", "vec"} JSON lines; all vectors must share one width."""
    table: dict[str, np.ndarray] = {}
    dim = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                text, vec = obj["text"], np.asarray(obj["vec"], dtype=np.float64)
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            if vec.ndim != 1:
                raise ValidationError(f"{path}: line {lineno}: vec must be a flat list")
            if dim is None:
                dim = int(vec.shape[0])
            elif vec.shape[0] != dim:
                raise ValidationError(
                    f"{path}: line {lineno}: vec has dim {vec.shape[0]}, expected {dim}"
                )
            if text in table:
                raise ValidationError(f"{path}: line {lineno}: duplicate text entry")
            table[text] = vec
    if dim is None:
        raise ValidationError(f"{path}: no embeddings found")
    return ExternalEmbedder(table, dim)


class PcaAligner(BaseEstimator, TransformerMixin):
    """Per-graph PCA that maps raw features to a shared width.

    Components are eigenvectors of the sample covariance, ordered by
    descending eigenvalue, each flipped so its largest-magnitude coordinate is
    positive.  A zero-variance fit sets ``zero_variance_`` and transforms
    everything to zeros.
    """

    def __init__(self, n_components: int = 32):
        self.n_components = n_components

    def fit(self, x: np.ndarray, y=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValidationError(f"PCA input must be 2-d and non-empty, got {x.shape}")
        k = int(self.n_components)
        if k < 1:
            raise ParameterError(f"n_components must be >= 1, got {k}")
        if k > min(x.shape):
            raise ParameterError(
                f"n_components {k} exceeds min(n_samples, n_features) = {min(x.shape)}"
            )
        self.mean_ = x.mean(axis=0)
        centered = x - self.mean_
        denom = max(1, x.shape[0] - 1)
        cov = centered.T @ centered / denom
        evals, evecs = np.linalg.eigh(cov)
        idx = np.argsort(evals, kind="stable")[::-1][:k]
        comps = evecs[:, idx].T.copy()
        for row in comps:
            j = int(np.argmax(np.abs(row)))
            if row[j] < 0:
                row *= -1.0
        self.components_ = comps
        self.explained_variance_ = np.clip(evals[idx], 0.0, None)
        self.zero_variance_ = bool(np.all(evals < 1e-12))
        if self.zero_variance_:
            logger.warning("PCA fit on zero-variance input; transform returns zeros")
        return self

    def _check_fitted(self):
        if not hasattr(self, "components_"):
            raise ValidationError("PcaAligner is not fitted")

    def transform(self, x: np.ndarray) -> np.ndarray:
        self._check_fitted()
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.mean_.shape[0]:
            raise ValidationError(
                f"PCA transform expects width {self.mean_.shape[0]}, got {x.shape}"
            )
        if self.zero_variance_:
            return np.zeros((x.shape[0], self.components_.shape[0]))
        return (x - self.mean_) @ self.components_.T

    def inverse_transform(self, y: np.ndarray) -> np.ndarray:
        self._check_fitted()
        y = np.asarray(y, dtype=np.float64)
        return y @ self.components_ + self.mean_

    def to_dict(self) -> dict:
        self._check_fitted()
        return {
            "mean": [float(v) for v in self.mean_],
            "components": [[float(v) for v in row] for row in self.components_],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PcaAligner":
        try:
            mean = np.asarray(obj["mean"], dtype=np.float64)
            comps = np.asarray(obj["components"], dtype=np.float64)
        except KeyError as exc:
            raise ParseError(f"PCA model missing field {exc}") from exc
        if comps.ndim != 2 or mean.ndim != 1 or comps.shape[1] != mean.shape[0]:
            raise ValidationError(
                f"PCA model shapes disagree: mean {mean.shape}, components {comps.shape}"
            )
        model = cls(n_components=comps.shape[0])
        model.mean_ = mean
        model.components_ = comps
        model.explained_variance_ = np.full(comps.shape[0], np.nan)
        model.zero_variance_ = False
        return model

    def save(self, path: str) -> None:
        tmp = f"{path}.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "PcaAligner":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: malformed JSON: {exc.msg}") from exc
        return cls.from_dict(obj)


def fuse_features(aligned: np.ndarray, semantic: np.ndarray) -> np.ndarray:
    """Concatenate aligned structural-feature rows with semantic rows."""
    aligned = np.asarray(aligned, dtype=np.float64)
    semantic = np.asarray(semantic, dtype=np.float64)
    if aligned.ndim != 2 or semantic.ndim != 2:
        raise ValidationError("fuse_features expects two 2-d arrays")
    if aligned.shape[0] != semantic.shape[0]:
        raise ValidationError(
            f"row counts disagree: {aligned.shape[0]} vs {semantic.shape[0]}"
        )
    return np.hstack([aligned, semantic])
