"""Hierarchical graph memory for multi-agent LLM systems.

Three tiers are kept in one :class:`MemoryStore`: per-episode interaction
graphs, a query graph linking past tasks, and an insight graph of distilled
lessons. :func:`retrieve` serves role-specific memory before an episode and
:func:`commit_episode` folds the finished episode back into every tier.
"""

from .config import EngineConfig, load_config
from .embedding import EmbedderConfig, EmbeddingVector, HashingEmbedder, cosine, embed, top_k
from .engine import Engine
from .errors import (
    ConfigurationError,
    CorruptStoreError,
    DomainError,
    HierMemError,
    InvariantError,
    NotFoundError,
    SchemaVersionError,
    StageError,
    TemplateError,
    TransportError,
)
from .graphs import (
    InsightNode,
    InteractionGraph,
    MemoryStore,
    QueryNode,
    Status,
    Utterance,
    add_query_node,
    export_dot,
    load,
    neighbors,
    save,
    validate,
)
from .llm import MockChatProvider, MockRule, Providers, TokenLedger, render
from .retrieval import MemoryCue, RetrievalConfig, RetrievalResult, retrieve
from .update import CommitSummary, EpisodeRecord, TraceEntry, UpdateConfig, commit_episode

__version__ = "0.1.0"
