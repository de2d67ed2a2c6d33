"""Write path: record an episode, link it into the query graph, distill and merge insights."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import llm
from .errors import ConfigurationError, HierMemError, InvariantError, StageError, TransportError
from .graphs import (
    InteractionGraph,
    MemoryStore,
    Status,
    Utterance,
    add_query_node,
    sorted_ids,
)
from .llm import ChatProvider, Providers, TokenLedger
from .retrieval import RetrievalConfig, RetrievalResult, render_case

logger = logging.getLogger(__name__)

TRAJECTORY_SEPARATOR = "\n\n"


@dataclass
class TraceEntry:
    agent_id: str
    role_label: str
    epoch: int
    content: str
    parents: list[int] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "role_label": self.role_label,
            "epoch": self.epoch,
            "content": self.content,
            "parents": list(self.parents),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TraceEntry":
        return cls(
            str(d["agent_id"]),
            str(d["role_label"]),
            int(d["epoch"]),
            str(d["content"]),
            [int(p) for p in d.get("parents", [])],
        )


@dataclass
class EpisodeRecord:
    query_text: str
    final_answer: str
    status: Status
    trace: list[TraceEntry] = field(default_factory=list)
    token_usage: int = 0
    retrieval: RetrievalResult = field(default_factory=RetrievalResult)
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "query_text": self.query_text,
            "final_answer": self.final_answer,
            "status": self.status.value,
            "trace": [t.to_dict() for t in self.trace],
            "token_usage": self.token_usage,
            "retrieval": self.retrieval.to_dict(),
        }
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EpisodeRecord":
        return cls(
            query_text=str(d["query_text"]),
            final_answer=str(d.get("final_answer", "")),
            status=Status.parse(d["status"]),
            trace=[TraceEntry.from_dict(t) for t in d.get("trace", [])],
            token_usage=int(d.get("token_usage", 0)),
            retrieval=RetrievalResult.from_dict(d.get("retrieval")),
            error=d.get("error"),
        )


@dataclass
class UpdateConfig:
    insight_cap: int = 20
    merge_target: int = 10
    generate_insights: bool = True

    def __post_init__(self) -> None:
        if self.insight_cap < 1 or self.merge_target < 1:
            raise ConfigurationError("insight_cap and merge_target must be positive")
        if self.merge_target >= self.insight_cap:
            raise ConfigurationError(
                f"merge_target ({self.merge_target}) must be smaller than insight_cap ({self.insight_cap})"
            )


@dataclass
class CommitSummary:
    query_id: str
    insight_id: str | None = None
    merged: bool = False
    tokens: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "insight_id": self.insight_id,
            "merged": self.merged,
            "tokens": self.tokens,
            "flags": list(self.flags),
        }


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def build_interaction_graph(trace: Sequence[TraceEntry]) -> InteractionGraph:
    """One utterance ``u<i>`` per trace entry; parent refs must point to earlier entries."""
    g = InteractionGraph()
    for i, entry in enumerate(trace):
        for p in entry.parents:
            if not 0 <= p < i:
                raise InvariantError(
                    "trace parent_refs point to earlier entries",
                    f"entry {i} references {p}",
                    stage="build_interaction_graph",
                )
        try:
            g.add_utterance(
                Utterance(f"u{i}", entry.agent_id, entry.role_label, entry.content, entry.epoch,
                          [f"u{p}" for p in entry.parents])
            )
        except InvariantError as exc:
            exc.stage = "build_interaction_graph"
            raise
    return g


def connection_set(store: MemoryStore, retrieval: RetrievalResult) -> set[str]:
    """Top-M queries plus the supports of every used insight still in the store."""
    conn = set(retrieval.top_m_queries)
    for iid in retrieval.used_insights:
        ins = store.insights.get(iid)
        if ins is not None:
            conn |= ins.support
    return conn


def update_query_graph(
    store: MemoryStore,
    text: str,
    status: Status | str,
    interaction_graph: InteractionGraph,
    embedding,
    retrieval: RetrievalResult,
) -> str:
    """Insert the new query node and its in-edges from every connected historical query."""
    for q in retrieval.top_m_queries:
        store.query(q)
    conn = connection_set(store, retrieval)
    qid = add_query_node(store, text, status, interaction_graph, embedding)
    conn.discard(qid)
    for src in sorted_ids(conn):
        store.add_query_edge(src, qid)
    return qid


@dataclass
class InsightDraft:
    lines: list[str]
    prompt: str | None
    flags: list[str] = field(default_factory=list)


def _resolved_from(store: MemoryStore, ids: Iterable[str]) -> list[str]:
    return [q for q in ids if q in store.queries and store.queries[q].status is Status.RESOLVED]


def draft_insight(
    chat: ChatProvider,
    store: MemoryStore,
    q_new: str,
    retrieval: RetrievalResult,
    m: int,
    ledger: TokenLedger | None = None,
) -> InsightDraft:
    """Pick the lesson prompt for the new episode and parse the provider's list."""
    node = store.query(q_new)
    new_case = render_case(node, store.interaction(q_new))
    successes = _resolved_from(store, (q for q in retrieval.top_m_queries if q != q_new))
    if node.status is Status.FAILED:
        if not successes:
            return InsightDraft([], None)
        ok = successes[0]
        template = "lessons_compare"
        bindings = {"true_traj": render_case(store.query(ok), store.interaction(ok)), "false_traj": new_case}
    else:
        template = "lessons_all_succ"
        cases = [new_case] + [render_case(store.query(q), store.interaction(q)) for q in successes[: max(0, m - 1)]]
        bindings = {"true_trajs": TRAJECTORY_SEPARATOR.join(cases)}
    reply = None
    for attempt in range(2):
        try:
            reply = llm.complete_template(chat, template, bindings, ledger)
            break
        except TransportError as exc:
            logger.warning("insight generation attempt %d failed: %s", attempt + 1, exc)
    if reply is None:
        return InsightDraft([], template, ["insight_generation_failed"])
    lines = llm.parse_numbered_list(reply.text)
    flags = [] if lines else ["insight_unparsed"]
    return InsightDraft(lines, template, flags)


def generate_insight(
    chat: ChatProvider,
    store: MemoryStore,
    episode: EpisodeRecord,
    q_new: str,
    retrieval: RetrievalResult,
    m: int = 3,
    ledger: TokenLedger | None = None,
    flags: list[str] | None = None,
) -> str | None:
    """Distill the episode into at most one new insight supported by ``{q_new}``."""
    draft = draft_insight(chat, store, q_new, retrieval, m, ledger)
    if flags is not None:
        flags.extend(draft.flags)
    if not draft.lines:
        return None
    return store.add_insight("\n".join(draft.lines), {q_new})


def link_and_support(
    store: MemoryStore,
    new_insight_id: str | None,
    used_insight_ids: Iterable[str],
    q_new: str,
) -> None:
    """Hyper-edges from each used insight to the new one, and ``q_new`` into each used support set."""
    store.query(q_new)
    used = [i for i in sorted_ids(set(used_insight_ids)) if i != new_insight_id]
    if new_insight_id is not None:
        store.insight(new_insight_id)
        for iid in used:
            store.add_hyper_edge(iid, new_insight_id, q_new)
    for iid in used:
        store.insight(iid).support.add(q_new)


def merge_insights(
    chat: ChatProvider,
    store: MemoryStore,
    config: UpdateConfig,
    ledger: TokenLedger | None = None,
    flags: list[str] | None = None,
) -> bool:
    """Consolidate all insights once their count exceeds the cap; returns True if merged.

    Every merged insight inherits the union of all previous supports, so no query
    loses its route to an insight. Old hyper-edges are dropped.
    """
    if len(store.insights) <= config.insight_cap:
        return False
    ordered = sorted_ids(store.insights)
    bindings = {
        "current_rules": llm.format_numbered_list(store.insights[i].content.replace("\n", " ") for i in ordered),
        "limited_number": config.merge_target,
    }
    reply = None
    for attempt in range(2):
        try:
            reply = llm.complete_template(chat, "merge", bindings, ledger)
            break
        except TransportError as exc:
            logger.warning("merge attempt %d failed: %s", attempt + 1, exc)
    if reply is None:
        if flags is not None:
            flags.append("merge_failed")
        return False
    items = llm.parse_numbered_list(reply.text)[: config.merge_target]
    if not items:
        if flags is not None:
            flags.append("merge_unparsed")
        return False
    support: set[str] = set()
    for i in ordered:
        support |= store.insights[i].support
    store.insights.clear()
    store.hyper_edges.clear()
    for item in items:
        store.add_insight(item, support)
    return True


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def commit_episode(
    store: MemoryStore,
    providers: Providers,
    update_config: UpdateConfig,
    episode: EpisodeRecord,
    retrieval_config: RetrievalConfig | None = None,
) -> CommitSummary:
    """Apply one finished episode to every tier.

    Work happens on a private copy while ``commit_lock`` serializes committers;
    the copy is swapped in under the write lock, so readers observe either the
    pre- or the post-state. Failures before insight generation abort the commit.
    """
    m = (retrieval_config or RetrievalConfig()).m
    ledger = providers.ledger.child()
    flags: list[str] = []

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except InvariantError as exc:
            exc.stage = exc.stage or name
            raise
        except HierMemError as exc:
            raise StageError(name, exc) from exc

    with store.commit_lock:
        graph = stage("build_interaction_graph", build_interaction_graph, episode.trace)
        vector = stage("embed", providers.embedder.embed, episode.query_text)
        with store.lock.read():
            work = store.copy()
        qid = stage(
            "update_query_graph",
            update_query_graph,
            work,
            episode.query_text,
            episode.status,
            graph,
            vector,
            episode.retrieval,
        )
        insight_id = None
        merged = False
        if update_config.generate_insights:
            try:
                insight_id = generate_insight(
                    providers.chat, work, episode, qid, episode.retrieval, m, ledger, flags
                )
            except HierMemError as exc:
                logger.warning("insight generation skipped: %s", exc)
                flags.append("insight_generation_failed")
            stale = [i for i in episode.retrieval.used_insights if i not in work.insights]
            if stale:
                flags.append("stale_insights:" + ",".join(stale))
            used = [i for i in episode.retrieval.used_insights if i in work.insights]
            stage("link_and_support", link_and_support, work, insight_id, used, qid)
            try:
                merged = merge_insights(providers.chat, work, update_config, ledger, flags)
            except HierMemError as exc:
                logger.warning("merge skipped: %s", exc)
                flags.append("merge_failed")
            if merged:
                insight_id = None
        with store.lock.write():
            store.adopt(work)
    return CommitSummary(qid, insight_id, merged, ledger.total, flags)
