"""High-level estimator facade over the pipeline.

GraphMemModel follows the fit/transform conventions: construct with
hyperparameters, fit on a list of source graphs (pre-trains the encoders and
builds both retrieval stores), then encode new graphs or run few-shot
adaptation episodes against the frozen backbone.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .adapt import Episode, EpisodeResult, RetrievalPolicy, run_episode
from .config import RunConfig
from .errors import ValidationError
from .graphs import Graph
from .pipeline import build_stores, prepare_graph_inputs, pretrain_pipeline


class GraphMemModel(BaseEstimator):
    """Dual-encoder backbone with external retrieval stores.

    fit(graphs) pre-trains on every graph given; adapt(...) runs one episode
    on a (typically unseen) target graph without touching the backbone.
    """

    def __init__(
        self,
        align_dim: int = 32,
        store_dim: int = 128,
        damping: float = 0.5,
        walk_order: int = 8,
        anchors_per_graph: int = 16,
        hop_radius: int = 1,
        token_dim: int = 16,
        hidden_dim: int = 64,
        embed_dim: int = 64,
        proj_dim: int = 64,
        beta: float = 0.01,
        gamma: float = 0.01,
        pretrain_tau: float = 0.2,
        batch_size: int = 64,
        epochs: int = 30,
        patience: int = 50,
        lr: float = 0.01,
        weight_decay: float = 0.0,
        lambda_text: float = 0.1,
        lambda_struct: float = 0.1,
        retrieve_k: int = 5,
        adapt_tau: float = 0.5,
        adapt_epochs: int = 100,
        adapt_patience: int = 10,
        adapt_lr: float = 0.05,
        seed: int = 0,
        embed_seed: int = 17,
    ):
        self.align_dim = align_dim
        self.store_dim = store_dim
        self.damping = damping
        self.walk_order = walk_order
        self.anchors_per_graph = anchors_per_graph
        self.hop_radius = hop_radius
        self.token_dim = token_dim
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.proj_dim = proj_dim
        self.beta = beta
        self.gamma = gamma
        self.pretrain_tau = pretrain_tau
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.lambda_text = lambda_text
        self.lambda_struct = lambda_struct
        self.retrieve_k = retrieve_k
        self.adapt_tau = adapt_tau
        self.adapt_epochs = adapt_epochs
        self.adapt_patience = adapt_patience
        self.adapt_lr = adapt_lr
        self.seed = seed
        self.embed_seed = embed_seed

    def _config(self) -> RunConfig:
        return RunConfig(
            align_dim=self.align_dim,
            store_dim=self.store_dim,
            damping=self.damping,
            walk_order=self.walk_order,
            anchors_per_graph=self.anchors_per_graph,
            hop_radius=self.hop_radius,
            token_dim=self.token_dim,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            proj_dim=self.proj_dim,
            beta=self.beta,
            gamma=self.gamma,
            pretrain_tau=self.pretrain_tau,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            lr=self.lr,
            weight_decay=self.weight_decay,
            lambda_text=self.lambda_text,
            lambda_struct=self.lambda_struct,
            retrieve_k=self.retrieve_k,
            adapt_tau=self.adapt_tau,
            adapt_epochs=self.adapt_epochs,
            adapt_patience=self.adapt_patience,
            adapt_lr=self.adapt_lr,
            seed=self.seed,
            embed_seed=self.embed_seed,
        )

    def fit(self, graphs: Sequence[Graph], y=None):
        cfg = self._config()
        inputs = [prepare_graph_inputs(g, cfg) for g in graphs]
        sem_store, str_store = build_stores(inputs, cfg)
        ckpt, result = pretrain_pipeline(
            graphs, cfg, inputs=inputs, sem_store=sem_store
        )
        self.config_ = cfg
        self.checkpoint_ = ckpt
        self.sem_store_ = sem_store
        self.str_store_ = str_store
        self.loss_trace_ = result.trace
        return self

    def _check_fitted(self):
        if not hasattr(self, "checkpoint_"):
            raise ValidationError("GraphMemModel is not fitted")

    def encode(self, graph: Graph) -> np.ndarray:
        """Node embeddings under the frozen backbone (mean of the two views)."""
        self._check_fitted()
        gi = prepare_graph_inputs(graph, self.config_)
        domain = (
            graph.domain_id
            if graph.domain_id in self.checkpoint_.domain_ids
            else None
        )
        return self.checkpoint_.encode_instance(gi.a_hat, gi.fused, gi.signatures, domain)

    def adapt(
        self,
        graph: Graph,
        episode: Episode,
        forbidden_datasets: Sequence[str] = (),
        forbidden_domains: Sequence[str] = (),
    ) -> EpisodeResult:
        """Run one few-shot episode; the target's own records are always excluded."""
        self._check_fitted()
        policy = RetrievalPolicy(
            forbidden_datasets=frozenset(forbidden_datasets) | {graph.dataset_id},
            forbidden_domains=frozenset(forbidden_domains),
        )
        return run_episode(
            graph, episode, self.checkpoint_, self.sem_store_, self.str_store_,
            self.config_, policy,
        )
