import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphmem import (
    EgoSubgraph,
    ParameterError,
    ParseError,
    RetrievalResult,
    SemanticRecord,
    SemanticStore,
    StructuralRecord,
    StructuralStore,
    ValidationError,
)


def _vec(rng, dim):
    return rng.standard_normal(dim)


def _sem(rng, dim, dataset="ds", node=0, chunk=0, **meta):
    base = {"dataset": dataset, "node_id": str(node), "label": "l",
            "description": "d", "field_tag": "sentence", "domain_id": "dom"}
    base.update(meta)
    return SemanticRecord(dataset=dataset, node=node, chunk_index=chunk,
                          vec=_vec(rng, dim), meta=base)


def _str(rng, dim, dataset="ds", node=0, motif=(0, 1), anchor=1.0, domain="dom"):
    ego = EgoSubgraph(center=motif[0], hop_radius=1,
                      nodes=tuple(sorted(motif)), edges=((0, 1),))
    return StructuralRecord(
        dataset=dataset, node=node, vec=_vec(rng, dim),
        motif=ego, motif_features=np.zeros((len(motif), 2)),
        meta={"dataset": dataset, "hop_radius": 1, "anchor_score": anchor,
              "domain_id": domain},
    )


# -- insertion and dimension fixing ---------------------------------------------

def test_dim_fixed_by_first_insert():
    rng = np.random.default_rng(0)
    store = SemanticStore()
    store.insert(_sem(rng, 4))
    assert store.dim == 4
    with pytest.raises(ValidationError, match="dim"):
        store.insert(_sem(rng, 5, node=1))


def test_dim_fixed_at_creation():
    rng = np.random.default_rng(0)
    store = SemanticStore(dim=3)
    with pytest.raises(ValidationError, match="dim"):
        store.insert(_sem(rng, 4))


def test_meta_keys_enforced():
    rng = np.random.default_rng(0)
    rec = _sem(rng, 4)
    rec.meta.pop("label")
    with pytest.raises(ValidationError, match="label"):
        SemanticStore().insert(rec)


def test_non_finite_vec_rejected():
    rec = SemanticRecord(dataset="ds", node=0, chunk_index=0,
                         vec=np.array([1.0, np.nan]),
                         meta={"dataset": "ds", "node_id": "0", "label": "l",
                               "description": "d", "field_tag": "sentence",
                               "domain_id": "dom"})
    with pytest.raises(ValidationError, match="finite"):
        SemanticStore().insert(rec)


def test_semantic_upsert_replaces_with_warning(caplog):
    rng = np.random.default_rng(1)
    store = SemanticStore()
    store.insert(_sem(rng, 4, node=7, chunk=2))
    newer = _sem(rng, 4, node=7, chunk=2)
    with caplog.at_level("WARNING"):
        store.insert(newer)
    assert "replacing" in caplog.text
    assert len(store) == 1
    assert store.records[0].vec.tobytes() == newer.vec.tobytes()


def test_semantic_distinct_chunks_kept():
    rng = np.random.default_rng(1)
    store = SemanticStore()
    store.insert(_sem(rng, 4, node=7, chunk=0))
    store.insert(_sem(rng, 4, node=7, chunk=1))
    store.insert(_sem(rng, 4, node=8, chunk=0))
    assert len(store) == 3


# -- structural dedup -------------------------------------------------------------

def test_structural_dedup_keeps_higher_anchor():
    rng = np.random.default_rng(2)
    store = StructuralStore()
    low = _str(rng, 4, node=0, motif=(0, 1), anchor=0.5)
    high = _str(rng, 4, node=1, motif=(1, 0), anchor=0.9)
    assert store.insert(low) == 0
    assert store.insert(high) is None  # same node set: replaced in place
    assert len(store) == 1
    assert store.records[0].meta["anchor_score"] == 0.9


def test_structural_dedup_keeps_incumbent_on_lower_score():
    rng = np.random.default_rng(2)
    store = StructuralStore()
    high = _str(rng, 4, node=0, motif=(0, 1), anchor=0.9)
    low = _str(rng, 4, node=1, motif=(0, 1), anchor=0.5)
    store.insert(high)
    assert store.insert(low) is None
    assert store.records[0].meta["anchor_score"] == 0.9


def test_structural_same_nodes_other_dataset_kept():
    rng = np.random.default_rng(2)
    store = StructuralStore()
    store.insert(_str(rng, 4, dataset="a", motif=(0, 1)))
    assert store.insert(_str(rng, 4, dataset="b", motif=(0, 1))) == 1
    assert len(store) == 2


def test_structural_motif_feature_rows_validated():
    rng = np.random.default_rng(2)
    rec = _str(rng, 4, motif=(0, 1))
    rec.motif_features = np.zeros((3, 2))  # motif has 2 nodes
    with pytest.raises(ValidationError, match="motif"):
        StructuralStore().insert(rec)


# -- top-k ------------------------------------------------------------------------

def test_topk_hand_oracle():
    store = SemanticStore(dim=2)
    vecs = {0: [1.0, 0.0], 1: [0.0, 1.0], 2: [-1.0, 0.0], 3: [0.7, 0.7]}
    for node, v in vecs.items():
        rec = _sem(np.random.default_rng(node), 2, node=node)
        rec.vec = np.array(v)
        store.insert(rec)
    out = store.topk(np.array([1.0, 0.0]), k=3)
    assert [r.record.node for r in out] == [0, 3, 1]
    assert out[0].score == pytest.approx(1.0)
    assert out[1].score == pytest.approx(np.cos(np.pi / 4))
    assert out[2].score == pytest.approx(0.0)
    assert [r.rank for r in out] == [0, 1, 2]


def test_topk_score_tie_break_is_deterministic():
    store = SemanticStore(dim=2)
    for dataset, node in [("b", 5), ("a", 9), ("a", 3)]:
        rec = _sem(np.random.default_rng(0), 2, dataset=dataset, node=node)
        rec.vec = np.array([2.0, 0.0]) * (node + 1)  # same direction: same cosine
        store.insert(rec)
    out = store.topk(np.array([1.0, 0.0]), k=3)
    assert [(r.record.dataset, r.record.node) for r in out] == [
        ("a", 3), ("a", 9), ("b", 5)]


def test_topk_k_larger_than_store():
    rng = np.random.default_rng(3)
    store = SemanticStore()
    store.insert(_sem(rng, 4, node=0))
    store.insert(_sem(rng, 4, node=1, chunk=1))
    assert len(store.topk(_vec(rng, 4), k=50)) == 2


def test_topk_invalid_inputs():
    rng = np.random.default_rng(3)
    store = SemanticStore()
    store.insert(_sem(rng, 4))
    with pytest.raises(ParameterError, match="k"):
        store.topk(_vec(rng, 4), k=0)
    with pytest.raises(ParameterError, match="norm"):
        store.topk(np.zeros(4), k=1)
    with pytest.raises(ValidationError, match="dim"):
        store.topk(_vec(rng, 5), k=1)


def test_topk_empty_store():
    assert SemanticStore(dim=4).topk(np.ones(4), k=3) == []


def test_topk_dict_filter():
    rng = np.random.default_rng(4)
    store = SemanticStore()
    store.insert(_sem(rng, 4, dataset="a", node=0))
    store.insert(_sem(rng, 4, dataset="b", node=1))
    out = store.topk(_vec(rng, 4), k=5, where={"dataset": "a"})
    assert [r.record.dataset for r in out] == ["a"]


def test_topk_callable_filter():
    rng = np.random.default_rng(5)
    store = SemanticStore()
    for node in range(6):
        store.insert(_sem(rng, 4, node=node))
    out = store.topk(_vec(rng, 4), k=10, where=lambda m: int(m["node_id"]) % 2 == 0)
    assert sorted(r.record.node for r in out) == [0, 2, 4]


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 60), st.sampled_from([1, 3, 17]))
def test_topk_matches_brute_force(seed, size, k):
    """Independent oracle: plain python over cosines, same tie-break rule."""
    rng = np.random.default_rng(seed)
    dim = 8
    store = SemanticStore(dim=dim)
    rows = []
    for i in range(size):
        rec = _sem(rng, dim, dataset=f"d{i % 3}", node=i % 7, chunk=i)
        store.insert(rec)
        rows.append(rec)
    q = _vec(rng, dim)
    qs = q / np.linalg.norm(q)
    scored = []
    for rec in rows:
        v = rec.vec / np.linalg.norm(rec.vec)
        scored.append((-float(np.dot(v, qs)), rec.dataset, rec.node,
                       rec.chunk_index, rec))
    scored.sort(key=lambda t: t[:4])
    expected = [t[4] for t in scored[:k]]
    got = store.topk(q, k=k)
    assert [(r.record.dataset, r.record.node, r.record.chunk_index) for r in got] == [
        (r.dataset, r.node, r.chunk_index) for r in expected]
    for res, (neg, *_rest) in zip(got, scored):
        assert res.score == pytest.approx(-neg, abs=1e-12)


# -- persistence ---------------------------------------------------------------------

def test_semantic_persistence_byte_exact_topk(tmp_path):
    rng = np.random.default_rng(6)
    store = SemanticStore()
    for i in range(40):
        store.insert(_sem(rng, 8, dataset=f"d{i % 2}", node=i, chunk=i % 3))
    path = tmp_path / "db.sem.jsonl"
    store.save(str(path))
    loaded = SemanticStore.load(str(path))
    assert len(loaded) == len(store)
    for trial in range(10):
        q = _vec(np.random.default_rng(100 + trial), 8)
        a = store.topk(q, k=7)
        b = loaded.topk(q, k=7)
        assert [(r.record.dataset, r.record.node, r.record.chunk_index, r.score)
                for r in a] == [
            (r.record.dataset, r.record.node, r.record.chunk_index, r.score)
            for r in b]
    for rec_a, rec_b in zip(store.records, loaded.records):
        assert rec_a.vec.tobytes() == rec_b.vec.tobytes()


def test_structural_persistence_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    store = StructuralStore()
    store.insert(_str(rng, 4, dataset="a", motif=(0, 1), anchor=2.0))
    store.insert(_str(rng, 4, dataset="a", node=2, motif=(2, 3), anchor=1.0))
    path = tmp_path / "db.str.jsonl"
    store.save(str(path))
    loaded = StructuralStore.load(str(path))
    assert len(loaded) == 2
    assert loaded.records[0].motif == store.records[0].motif
    assert loaded.records[0].motif_features.tobytes() == \
        store.records[0].motif_features.tobytes()


def test_load_header_modality_checked(tmp_path):
    rng = np.random.default_rng(8)
    store = SemanticStore()
    store.insert(_sem(rng, 4))
    path = tmp_path / "db.sem.jsonl"
    store.save(str(path))
    with pytest.raises(ParseError, match="modality"):
        StructuralStore.load(str(path))


def test_load_truncated_file_raises(tmp_path):
    rng = np.random.default_rng(9)
    store = SemanticStore()
    for i in range(5):
        store.insert(_sem(rng, 4, node=i))
    path = tmp_path / "db.sem.jsonl"
    store.save(str(path))
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("".join(lines[:-1]))  # drop last record
    with pytest.raises(ParseError, match="count"):
        SemanticStore.load(str(path))


def test_load_malformed_record_line(tmp_path):
    rng = np.random.default_rng(10)
    store = SemanticStore()
    store.insert(_sem(rng, 4))
    path = tmp_path / "db.sem.jsonl"
    store.save(str(path))
    text = path.read_text()
    path.write_text(text + "not json\n")
    with pytest.raises(ParseError):
        SemanticStore.load(str(path))


def test_retrieval_result_is_plain_dataclass():
    rng = np.random.default_rng(11)
    rec = _sem(rng, 4)
    res = RetrievalResult(record=rec, score=0.5, rank=0)
    assert res.record is rec
