import dataclasses

import numpy as np
import pytest

from graphmem import (
    ConfigError,
    Episode,
    GraphMemError,
    NumericalError,
    RetrievalPolicy,
    RunConfig,
    SemanticStore,
    StructuralStore,
    benchmark_spec,
    build_stores,
    domain_gates,
    finetune_loss,
    generate_synthetic,
    grad_check,
    init_prompt,
    nearest_prototype,
    pretrain_pipeline,
    run_episode,
    semantic_augment,
    semantic_query_text,
    structural_augment,
)
from graphmem.graphs import normalize_sparse_adjacency
from graphmem.pipeline import chunk_embedder, prepare_graph_inputs
from tests.conftest import make_graph


def _episode_cfg():
    return RunConfig(
        align_dim=6, store_dim=16, walk_order=4, anchors_per_graph=4,
        token_dim=4, hidden_dim=8, embed_dim=8, proj_dim=4,
        batch_size=32, epochs=8, patience=None or 50,
        adapt_epochs=15, adapt_patience=5, retrieve_k=3,
        shots=2, episodes=2, eval_seeds=(0,), query_cap=20,
    )


@pytest.fixture(scope="module")
def ctx():
    """Pre-trained checkpoint plus stores over a small 2-domain benchmark."""
    cfg = _episode_cfg()
    graphs = generate_synthetic(
        benchmark_spec(domains=2, separable=True, seed=0, classes=2,
                       nodes_per_class=8, feat_dim=8)
    )
    inputs = [prepare_graph_inputs(g, cfg) for g in graphs]
    ckpt, _ = pretrain_pipeline(graphs, cfg, inputs=inputs)
    sem_store, str_store = build_stores(inputs, cfg)
    return {
        "cfg": cfg, "graphs": graphs, "inputs": inputs, "ckpt": ckpt,
        "sem": sem_store, "str": str_store,
    }


def _episode():
    return Episode(task="node", shots=2, support=((0, 0), (1, 0), (8, 1), (9, 1)),
                   queries=(2, 3, 10, 11), seed=0)


# -- domain gates ------------------------------------------------------------------

def test_gates_uniform_for_zero_tokens():
    z = np.array([1.0, 2.0])
    gates = domain_gates(z, [np.zeros(3), np.zeros(3), np.zeros(3)], np.ones((2, 3)))
    assert gates == pytest.approx(np.full(3, 1 / 3))


def test_gates_favor_aligned_token():
    z = np.array([1.0, 0.0])
    gate_proj = np.eye(2)
    tokens = [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]
    gates = domain_gates(z, tokens, gate_proj)
    assert gates[0] > gates[1]
    assert gates.sum() == pytest.approx(1.0)


def test_gates_single_domain_is_one():
    gates = domain_gates(np.ones(2), [np.ones(3)], np.ones((2, 3)))
    assert gates == pytest.approx([1.0])


def test_gates_zero_projection_falls_back_to_uniform():
    gates = domain_gates(np.ones(2), [np.ones(3), np.ones(3)], np.zeros((2, 3)))
    assert gates == pytest.approx([0.5, 0.5])


def test_gates_zero_embedding_raises():
    with pytest.raises(NumericalError, match="zero-norm"):
        domain_gates(np.zeros(2), [np.ones(3)], np.ones((2, 3)))


# -- semantic augmentation -----------------------------------------------------------

def test_semantic_query_text_joins_neighbors():
    g = make_graph([(0, 1), (1, 2)], 3, texts=("a", "b", "c"))
    assert semantic_query_text(g, 1) == "b\na\nc"
    assert semantic_query_text(g, 0) == "a\nb"


def test_semantic_query_text_no_texts():
    g = make_graph([(0, 1)], 2)
    assert semantic_query_text(g, 0) == ""


def test_semantic_augment_lambda_zero_is_identity(ctx):
    z = np.ones(ctx["cfg"].embed_dim)
    out, attention, bad = semantic_augment(
        z, "class-0 topic", ctx["sem"], ctx["ckpt"].chunk_proj,
        k=3, lam=0.0, policy=RetrievalPolicy(), embedder=chunk_embedder(ctx["cfg"]),
    )
    assert np.array_equal(out, z)
    assert len(attention) == 3  # retrieval still runs; only the mix is zeroed
    assert bad == 0


def test_semantic_augment_empty_store_returns_copy(caplog):
    cfg = _episode_cfg()
    z = np.ones(cfg.embed_dim)
    with caplog.at_level("WARNING"):
        out, attention, bad = semantic_augment(
            z, "anything", SemanticStore(dim=cfg.store_dim),
            np.zeros((cfg.store_dim, cfg.embed_dim)), k=3, lam=0.5,
            policy=RetrievalPolicy(), embedder=chunk_embedder(cfg),
        )
    assert np.array_equal(out, z) and out is not z
    assert attention == [] and bad == 0
    assert "empty" in caplog.text


def test_semantic_augment_single_record_oracle(ctx):
    # One admissible record: softmax weight is exactly 1, so the delta is
    # lam * vec @ chunk_proj.
    cfg = ctx["cfg"]
    sem = ctx["sem"]
    rec = sem.records[0]
    policy = RetrievalPolicy()
    z = np.zeros(cfg.embed_dim)
    out, attention, _ = semantic_augment(
        z, "query", sem, ctx["ckpt"].chunk_proj, k=1, lam=0.7,
        policy=policy, embedder=chunk_embedder(cfg),
    )
    qvec = chunk_embedder(cfg).embed("query")
    top = sem.topk(qvec, 1)[0].record
    expected = 0.7 * (top.vec @ ctx["ckpt"].chunk_proj)
    assert out == pytest.approx(expected, abs=1e-12)
    assert attention[0]["w"] == pytest.approx(1.0)
    assert rec is sem.records[0]  # store untouched


def test_semantic_augment_policy_filters_forbidden(ctx):
    cfg = ctx["cfg"]
    target = ctx["graphs"][0].dataset_id
    policy = RetrievalPolicy(forbidden_datasets=frozenset({target}))
    out, attention, bad = semantic_augment(
        np.zeros(cfg.embed_dim), "class-0 topic", ctx["sem"],
        ctx["ckpt"].chunk_proj, k=8, lam=0.5, policy=policy,
        embedder=chunk_embedder(cfg),
    )
    assert bad == 0
    assert all(a["record"]["dataset"] != target for a in attention)


# -- structural augmentation ----------------------------------------------------------

def test_structural_augment_zero_signature_is_identity(ctx):
    cfg = ctx["cfg"]
    z = np.ones(cfg.embed_dim)
    gates = np.full(2, 0.5)
    out, dump, bad = structural_augment(
        z, np.zeros(cfg.walk_order), ctx["str"], ctx["ckpt"], gates,
        lam=0.5, policy=RetrievalPolicy(),
    )
    assert np.array_equal(out, z)
    assert [d["domain"] for d in dump] == ctx["ckpt"].domain_ids
    assert bad == 0


def test_structural_augment_empty_store(ctx, caplog):
    cfg = ctx["cfg"]
    with caplog.at_level("WARNING"):
        out, dump, bad = structural_augment(
            np.ones(cfg.embed_dim), np.ones(cfg.walk_order),
            StructuralStore(dim=cfg.walk_order), ctx["ckpt"],
            np.full(2, 0.5), lam=0.5, policy=RetrievalPolicy(),
        )
    assert np.array_equal(out, np.ones(cfg.embed_dim))
    assert "empty" in caplog.text


def test_structural_augment_matches_manual_mixture(ctx):
    cfg, ckpt, store = ctx["cfg"], ctx["ckpt"], ctx["str"]
    sig = ctx["inputs"][0].signatures[0]
    gates = np.array([0.3, 0.7])
    policy = RetrievalPolicy()
    z = np.zeros(cfg.embed_dim)
    out, dump, _ = structural_augment(z, sig, store, ckpt, gates, 0.5, policy)

    expected = np.zeros(cfg.embed_dim)
    for dom, pi in zip(ckpt.domain_ids, gates):
        results = store.topk(sig, 1, where=lambda m, d=dom: m["domain_id"] == d)
        rec = results[0].record
        a_hat = normalize_sparse_adjacency(rec.motif.local_adjacency())
        pooled = ckpt.encode_struct(a_hat, rec.motif_features, dom).mean(axis=0)
        expected += 0.5 * pi * pooled
    assert out == pytest.approx(expected, abs=1e-12)
    assert all("record" in d for d in dump)


def test_structural_augment_lambda_zero_identity(ctx):
    cfg = ctx["cfg"]
    sig = ctx["inputs"][0].signatures[0]
    z = np.ones(cfg.embed_dim)
    out, _, _ = structural_augment(
        z, sig, ctx["str"], ctx["ckpt"], np.full(2, 0.5), 0.0, RetrievalPolicy())
    assert np.array_equal(out, z)


# -- prompt initialization and fine-tuning ---------------------------------------------

def test_init_prompt_is_gate_mixture(ctx):
    ckpt = ctx["ckpt"]
    gates = np.array([0.25, 0.75])
    prompt = init_prompt(gates, ckpt)
    toks = ckpt.tokens()
    expected = 0.25 * toks[ckpt.domain_ids[0]] + 0.75 * toks[ckpt.domain_ids[1]]
    assert prompt == pytest.approx(expected, abs=1e-15)


def test_finetune_loss_flattens_to_log_classes():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((6, 5))
    labels = [0, 0, 1, 1, 2, 2]
    loss, _ = finetune_loss(feats, labels, rng.standard_normal(3), tau=1e6)
    assert loss == pytest.approx(np.log(3.0), abs=1e-3)


def test_finetune_loss_needs_two_classes():
    with pytest.raises(ConfigError, match="2 classes"):
        finetune_loss(np.ones((2, 3)), [1, 1], np.zeros(2), tau=0.5)


def test_finetune_loss_tau_validated():
    with pytest.raises(Exception, match="tau"):
        finetune_loss(np.ones((2, 3)), [0, 1], np.zeros(2), tau=0.0)


def test_finetune_prompt_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    feats = rng.standard_normal((8, 6))
    labels = [0, 1, 2, 0, 1, 2, 0, 1]

    def loss(p):
        value, dprompt = finetune_loss(feats, labels, p["prompt"], tau=0.7)
        return value, {"prompt": dprompt}

    params = {"prompt": rng.standard_normal(4)}
    assert grad_check(loss, params, eps=1e-5) < 1e-6


def test_finetune_loss_decreases_under_gradient_descent():
    rng = np.random.default_rng(4)
    feats = rng.standard_normal((8, 5))
    labels = [0, 0, 1, 1, 0, 1, 0, 1]
    prompt = rng.standard_normal(3)
    first, _ = finetune_loss(feats, labels, prompt, tau=0.5)
    for _ in range(60):
        _, g = finetune_loss(feats, labels, prompt, tau=0.5)
        prompt -= 0.1 * g
    last, _ = finetune_loss(feats, labels, prompt, tau=0.5)
    assert last < first


# -- nearest prototype ------------------------------------------------------------------

def test_nearest_prototype_hand_oracle():
    support = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]])
    labels = [3, 3, 7, 7]
    queries = np.array([[0.8, 0.05], [0.02, 1.2]])
    preds = nearest_prototype(queries, support, labels, np.zeros(0))
    assert preds == [3, 7]


def test_nearest_prototype_scale_invariant():
    rng = np.random.default_rng(5)
    support = rng.standard_normal((6, 4))
    labels = [0, 1, 2, 0, 1, 2]
    queries = rng.standard_normal((5, 4))
    prompt = rng.standard_normal(2)
    a = nearest_prototype(queries, support, labels, prompt)
    b = nearest_prototype(10.0 * queries, support, labels, prompt)
    assert a == b


# -- full episodes ------------------------------------------------------------------------

def test_run_episode_basic(ctx):
    cfg, graphs = ctx["cfg"], ctx["graphs"]
    target = graphs[0]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({target.dataset_id}))
    result = run_episode(
        target, _episode(), ctx["ckpt"], ctx["sem"], ctx["str"], cfg, policy,
        inputs=ctx["inputs"][0],
    )
    assert len(result.predictions) == 4
    assert 0.0 <= result.accuracy <= 1.0
    assert result.leakage_violations == 0
    assert result.prompt.shape == (cfg.token_dim,)
    assert len(result.prompt_losses) >= 1
    dump = result.attention[0]
    assert dump["query_id"] == f"{target.dataset_id}:2"
    assert {d["domain"] for d in dump["domain_gates"]} == set(ctx["ckpt"].domain_ids)
    # Forbidden dataset never shows up in retrieved attention.
    for entry in result.attention:
        for att in entry["text_attention"]:
            assert att["record"]["dataset"] != target.dataset_id


def test_run_episode_deterministic(ctx):
    cfg, graphs = ctx["cfg"], ctx["graphs"]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({graphs[0].dataset_id}))
    kw = dict(inputs=ctx["inputs"][0])
    a = run_episode(graphs[0], _episode(), ctx["ckpt"], ctx["sem"], ctx["str"],
                    cfg, policy, **kw)
    b = run_episode(graphs[0], _episode(), ctx["ckpt"], ctx["sem"], ctx["str"],
                    cfg, policy, **kw)
    assert a.predictions == b.predictions
    assert a.prompt.tobytes() == b.prompt.tobytes()
    assert a.prompt_losses == b.prompt_losses


def test_run_episode_ablation_flag_equals_lambda_zero(ctx):
    graphs = ctx["graphs"]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({graphs[0].dataset_id}))
    flagged = run_episode(
        graphs[0], _episode(), ctx["ckpt"], ctx["sem"], ctx["str"],
        ctx["cfg"], policy, inputs=ctx["inputs"][0], no_text_qa=True,
    )
    cfg_zero = dataclasses.replace(ctx["cfg"], lambda_text=0.0)
    explicit = run_episode(
        graphs[0], _episode(), ctx["ckpt"], ctx["sem"], ctx["str"],
        cfg_zero, policy, inputs=ctx["inputs"][0],
    )
    assert flagged.predictions == explicit.predictions
    assert flagged.accuracy == explicit.accuracy
    assert flagged.prompt.tobytes() == explicit.prompt.tobytes()


def test_run_episode_requires_labels(ctx):
    g = make_graph([(0, 1), (1, 2)], 3, texts=("a", "b", "c"))
    with pytest.raises(ConfigError, match="labels"):
        run_episode(g, _episode(), ctx["ckpt"], ctx["sem"], ctx["str"],
                    ctx["cfg"], RetrievalPolicy())


def test_run_episode_detects_leaky_store(ctx):
    class LeakyStore(SemanticStore):
        def topk(self, query, k, where=None):
            return super().topk(query, k, where=None)  # ignores the filter

    leaky = LeakyStore(dim=ctx["cfg"].store_dim)
    for rec in ctx["sem"].records:
        leaky.insert(
            type(rec)(dataset=rec.dataset, node=rec.node,
                      chunk_index=rec.chunk_index, vec=rec.vec.copy(),
                      meta=dict(rec.meta))
        )
    target = ctx["graphs"][0]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({target.dataset_id}))
    with pytest.raises(GraphMemError, match="polic"):
        run_episode(target, _episode(), ctx["ckpt"], leaky, ctx["str"],
                    ctx["cfg"], policy, inputs=ctx["inputs"][0])


def test_run_episode_detects_backbone_mutation(ctx):
    ckpt = ctx["ckpt"]

    class MutatingStore(SemanticStore):
        def topk(self, query, k, where=None):
            ckpt.params["text_w1"][0, 0] += 1.0
            try:
                return super().topk(query, k, where=where)
            finally:
                pass

    bad = MutatingStore(dim=ctx["cfg"].store_dim)
    for rec in ctx["sem"].records:
        bad.insert(
            type(rec)(dataset=rec.dataset, node=rec.node,
                      chunk_index=rec.chunk_index, vec=rec.vec.copy(),
                      meta=dict(rec.meta))
        )
    target = ctx["graphs"][0]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({target.dataset_id}))
    original = ckpt.params["text_w1"][0, 0]
    try:
        with pytest.raises(GraphMemError, match="backbone"):
            run_episode(target, _episode(), ckpt, bad, ctx["str"],
                        ctx["cfg"], policy, inputs=ctx["inputs"][0])
    finally:
        ckpt.params["text_w1"][0, 0] = original  # repair the shared fixture


def test_run_episode_separable_beats_chance(ctx):
    # 2 classes, planted signal, full augmentation: mean accuracy over a few
    # hand-rolled episodes should comfortably exceed coin flipping.
    cfg, graphs = ctx["cfg"], ctx["graphs"]
    target = graphs[0]
    policy = RetrievalPolicy(forbidden_datasets=frozenset({target.dataset_id}))
    episodes = [
        Episode(task="node", shots=2, support=((0, 0), (1, 0), (8, 1), (9, 1)),
                queries=tuple(range(2, 8)) + tuple(range(10, 16)), seed=0),
        Episode(task="node", shots=2, support=((2, 0), (3, 0), (10, 1), (11, 1)),
                queries=(0, 1, 4, 5, 8, 9, 12, 13), seed=1),
    ]
    accs = [
        run_episode(target, ep, ctx["ckpt"], ctx["sem"], ctx["str"], cfg,
                    policy, inputs=ctx["inputs"][0]).accuracy
        for ep in episodes
    ]
    assert float(np.mean(accs)) > 0.5
