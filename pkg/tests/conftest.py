import numpy as np
import pytest

from graphmem import Graph, RunConfig

acceptance_verdicts: list = []


def record_verdict(line: str) -> None:
    """Collect release-gate verdict lines for the terminal summary."""
    acceptance_verdicts.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    # Verdicts print after the test lines, outside output capture.
    if acceptance_verdicts:
        terminalreporter.section("acceptance verdicts")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


def make_graph(edges, n, dataset="ds", domain="dom", feat_dim=3, texts=None,
               labels=None, seed=0):
    rng = np.random.default_rng(seed)
    return Graph(
        dataset_id=dataset,
        domain_id=domain,
        node_count=n,
        edges=tuple(edges),
        features=rng.standard_normal((n, feat_dim)),
        texts=texts,
        labels=labels,
    )


def path_graph(n, **kw):
    return make_graph([(i, i + 1) for i in range(n - 1)], n, **kw)


@pytest.fixture
def small_cfg(tmp_path):
    return RunConfig(
        workdir=str(tmp_path / "run"),
        align_dim=6,
        store_dim=16,
        walk_order=4,
        anchors_per_graph=4,
        token_dim=4,
        hidden_dim=8,
        embed_dim=8,
        proj_dim=4,
        batch_size=32,
        epochs=5,
        patience=50,
        adapt_epochs=10,
        adapt_patience=5,
        episodes=2,
        eval_seeds=(0,),
        shots=2,
        query_cap=20,
    )
