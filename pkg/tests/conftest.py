from __future__ import annotations

import random
from pathlib import Path

import pytest

from hiermem.embedding import HashingEmbedder
from hiermem.graphs import InteractionGraph, MemoryStore, Status, Utterance, add_query_node
from hiermem.llm import MockChatProvider, Providers, TokenLedger

FIXTURES = Path(__file__).parent / "fixtures"

WORDS = (
    "put clean cloth egg microwave heat cool fridge apple countertop examine lamp book two pencil drawer "
    "verify claim championship find look under take place sink basin mug shelf"
).split()


def random_text(rng: random.Random, lo: int = 2, hi: int = 7) -> str:
    return " ".join(rng.choice(WORDS) for _ in range(rng.randint(lo, hi)))


def random_interaction(rng: random.Random, max_nodes: int = 6) -> InteractionGraph:
    g = InteractionGraph()
    n = rng.randint(0, max_nodes)
    for i in range(n):
        parents = sorted(rng.sample(range(i), rng.randint(0, min(i, 2)))) if i else []
        epoch = 1 + i // 3
        g.add_utterance(
            Utterance(f"u{i}", f"a{i % 3}", rng.choice(["solver", "critic", "executor"]),
                      random_text(rng), epoch, [f"u{p}" for p in parents])
        )
    return g


def random_store(
    rng: random.Random,
    n_queries: int | None = None,
    n_insights: int | None = None,
    edge_p: float = 0.15,
    dim: int = 64,
) -> MemoryStore:
    """Store with random queries, query edges, insights and hyper-edges."""
    emb = HashingEmbedder(dim)
    store = MemoryStore(dim)
    n = rng.randint(5, 50) if n_queries is None else n_queries
    for _ in range(n):
        text = random_text(rng)
        status = rng.choice([Status.FAILED, Status.RESOLVED])
        add_query_node(store, text, status, random_interaction(rng), emb.embed(text))
    ids = list(store.queries)
    for a in ids:
        for b in ids:
            if a != b and rng.random() < edge_p:
                store.add_query_edge(a, b)
    k = rng.randint(0, 6) if n_insights is None else n_insights
    for _ in range(k):
        if not ids:
            break
        store.add_insight(random_text(rng), rng.sample(ids, rng.randint(1, min(3, len(ids)))))
    ins = list(store.insights)
    for _ in range(rng.randint(0, 4)):
        if len(ins) >= 2:
            a, b = rng.sample(ins, 2)
            store.add_hyper_edge(a, b, rng.choice(ids))
    return store


@pytest.fixture
def embedder() -> HashingEmbedder:
    return HashingEmbedder(64)


@pytest.fixture
def mock() -> MockChatProvider:
    return MockChatProvider()


@pytest.fixture
def providers(mock, embedder) -> Providers:
    return Providers(mock, embedder, TokenLedger())


def linear_graph(contents: list[tuple[str, str]]) -> InteractionGraph:
    g = InteractionGraph()
    for i, (role, text) in enumerate(contents):
        g.add_utterance(Utterance(f"u{i}", role, role, text, 1, [f"u{i - 1}"] if i else []))
    return g


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
