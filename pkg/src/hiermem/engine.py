"""Facade bundling a store, its providers and configuration.

The CLI and the HTTP service are thin mappings onto these methods.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import graphs
from .config import EngineConfig
from .embedding import make_embedder
from .graphs import MemoryStore
from .harness import RunReport, Suite, provider_for_suite, run_suite, solver_critic_executor
from .llm import Providers, TokenLedger, make_chat_provider
from .retrieval import RetrievalResult, retrieve
from .update import CommitSummary, EpisodeRecord, commit_episode

logger = logging.getLogger(__name__)


@dataclass
class BenchResult:
    report: RunReport
    store: MemoryStore
    ledger: TokenLedger


class Engine:
    def __init__(self, config: EngineConfig, store: MemoryStore | None = None, providers: Providers | None = None):
        self.config = config
        self.providers = providers or Providers(make_chat_provider(config.chat), make_embedder(config.embedder))
        self.store = store if store is not None else MemoryStore(config.embedder.dim)

    @classmethod
    def open(cls, config: EngineConfig, providers: Providers | None = None, create: bool = False) -> "Engine":
        path = Path(config.store_path)
        if path.exists():
            store = graphs.load(path)
        elif create:
            store = MemoryStore(config.embedder.dim)
        else:
            raise graphs.NotFoundError(f"store file {str(path)!r} does not exist (run `init` first)")
        engine = cls(config, store, providers)
        if config.recompute_embeddings:
            reembed(engine.store, engine.providers.embedder)
        elif store.dim != config.embedder.dim:
            raise graphs.ConfigurationError(
                f"store dim {store.dim} does not match embedder dim {config.embedder.dim} "
                "(set store.recompute_embeddings to re-embed)"
            )
        return engine

    def save(self) -> None:
        with self.store.lock.read():
            graphs.save(self.store, self.config.store_path)

    def commit(self, episode: EpisodeRecord, persist: bool = True) -> CommitSummary:
        summary = commit_episode(self.store, self.providers, self.config.update, episode, self.config.retrieval)
        if persist:
            self.save()
        return summary

    def retrieve(
        self, query: str, roles: Sequence[tuple[str, str]], overrides: dict[str, Any] | None = None
    ) -> RetrievalResult:
        cfg = self.config.retrieval.with_overrides(overrides)
        return retrieve(self.store, self.providers, cfg, query, roles)

    def stats(self) -> dict[str, int]:
        with self.store.lock.read():
            return self.store.stats()

    def export(self, tier: str, fmt: str = "dot") -> str:
        with self.store.lock.read():
            if fmt == "dot":
                return graphs.export_dot(self.store, tier)
            if fmt == "json":
                return json.dumps(graphs.export_json(self.store, tier), indent=1, sort_keys=True) + "\n"
        raise graphs.ConfigurationError(f"unknown export format {fmt!r}")

    def validate(self) -> None:
        with self.store.lock.read():
            graphs.validate(self.store)


def reembed(store: MemoryStore, embedder) -> None:
    """Recompute every query embedding with ``embedder``, adopting its dimension."""
    with store.lock.write():
        vectors = {q: embedder.embed(node.text) for q, node in store.queries.items()}
        for q, vec in vectors.items():
            store.queries[q] = replace(store.queries[q], embedding=tuple(vec.values))
        store.dim = embedder.dim
        graphs.validate(store)


def format_stats(stats: dict[str, int]) -> str:
    return (
        f"queries: {stats['queries']}, insights: {stats['insights']}, interactions: {stats['interactions']}\n"
        f"query_edges: {stats['query_edges']}, insight_hyper_edges: {stats['insight_hyper_edges']}, "
        f"utterances: {stats['utterances']}"
    )


def run_bench(config: EngineConfig, suite: Suite, use_memory: bool = True, epochs: int = 1) -> BenchResult:
    """Run a suite on a fresh store with the suite's scripted provider."""
    ledger = TokenLedger()
    providers = Providers(provider_for_suite(suite), make_embedder(config.embedder), ledger)
    store = MemoryStore(config.embedder.dim)
    report = run_suite(
        solver_critic_executor(epochs),
        store,
        providers,
        config.retrieval,
        config.update,
        suite.tasks,
        use_memory=use_memory,
    )
    return BenchResult(report, store, ledger)
