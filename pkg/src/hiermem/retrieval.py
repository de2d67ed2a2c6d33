"""Read path: similarity retrieval, hop expansion, bi-directional traversal, per-role allocation."""

from __future__ import annotations

import logging
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

from . import llm
from .embedding import cosine, top_k
from .errors import ConfigurationError, HierMemError, StageError, TransportError
from .graphs import (
    InteractionGraph,
    MemoryStore,
    QueryNode,
    Status,
    adjacency,
    id_key,
    sorted_ids,
)
from .llm import ChatProvider, Providers, TokenLedger

logger = logging.getLogger(__name__)

SCORE_MIN, SCORE_MAX = 1, 10

_UTTERANCE_REF_RE = re.compile(r"\bu\d+\b")
_LINE_MARKER_RE = re.compile(r"^\s*(?:\d+[.)]|[-*])\s*")


@dataclass
class RetrievalConfig:
    k: int = 2
    hops: int = 1
    m: int = 3
    concurrent_ratings: bool = False

    def __post_init__(self) -> None:
        if self.k < 1 or self.m < 1 or self.hops < 0:
            raise ConfigurationError(f"invalid retrieval config k={self.k} m={self.m} hops={self.hops}")

    def with_overrides(self, overrides: dict[str, Any] | None) -> "RetrievalConfig":
        if not overrides:
            return self
        values = {
            "k": self.k,
            "hops": self.hops,
            "m": self.m,
            "concurrent_ratings": self.concurrent_ratings,
        }
        unknown = set(overrides) - values.keys()
        if unknown:
            raise ConfigurationError(f"unknown retrieval overrides: {sorted(unknown)}")
        values.update(overrides)
        return RetrievalConfig(
            k=int(values["k"]),
            hops=int(values["hops"]),
            m=int(values["m"]),
            concurrent_ratings=bool(values["concurrent_ratings"]),
        )


@dataclass
class TrajectorySnippet:
    query_id: str
    status: Status
    query_text: str
    text: str

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "status": self.status.value,
            "query_text": self.query_text,
            "text": self.text,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrajectorySnippet":
        return cls(str(d["query_id"]), Status.parse(d["status"]), str(d.get("query_text", "")), str(d["text"]))


@dataclass
class MemoryCue:
    agent_id: str
    personalized_insights: list[str] = field(default_factory=list)
    trajectory_snippets: list[TrajectorySnippet] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not self.personalized_insights and not self.trajectory_snippets

    def render(self) -> str:
        """Text block injected into an agent's prompt."""
        parts: list[str] = []
        if self.personalized_insights:
            parts.append("### Insights")
            parts.append(llm.format_numbered_list(self.personalized_insights))
        if self.trajectory_snippets:
            parts.append("### Trajectories")
            for snip in self.trajectory_snippets:
                parts.append(f"#### Trajectory from {snip.query_id} ({snip.status.value}): {snip.query_text}")
                parts.append(snip.text)
        return "\n".join(parts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "agent_id": self.agent_id,
            "personalized_insights": list(self.personalized_insights),
            "trajectory_snippets": [s.to_dict() for s in self.trajectory_snippets],
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MemoryCue":
        return cls(
            str(d["agent_id"]),
            [str(x) for x in d.get("personalized_insights", [])],
            [TrajectorySnippet.from_dict(s) for s in d.get("trajectory_snippets", [])],
        )


@dataclass
class RetrievalResult:
    sketched: list[str] = field(default_factory=list)
    expanded: list[str] = field(default_factory=list)
    used_insights: list[str] = field(default_factory=list)
    top_m_queries: list[str] = field(default_factory=list)
    scores: dict[str, int] = field(default_factory=dict)
    sparsified_trajectories: dict[str, InteractionGraph] = field(default_factory=dict)
    cues: dict[str, MemoryCue] = field(default_factory=dict)
    llm_token_usage: int = 0
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "sketched": list(self.sketched),
            "expanded": list(self.expanded),
            "used_insights": list(self.used_insights),
            "top_m_queries": list(self.top_m_queries),
            "scores": {q: self.scores[q] for q in sorted_ids(self.scores)},
            "sparsified_trajectories": {
                q: self.sparsified_trajectories[q].to_dict() for q in self.top_m_queries if q in self.sparsified_trajectories
            },
            "cues": {a: c.to_dict() for a, c in self.cues.items()},
            "llm_token_usage": self.llm_token_usage,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "RetrievalResult":
        d = d or {}
        return cls(
            sketched=[str(x) for x in d.get("sketched", [])],
            expanded=[str(x) for x in d.get("expanded", [])],
            used_insights=[str(x) for x in d.get("used_insights", [])],
            top_m_queries=[str(x) for x in d.get("top_m_queries", [])],
            scores={str(k): int(v) for k, v in d.get("scores", {}).items()},
            sparsified_trajectories={
                str(q): InteractionGraph.from_dict(g) for q, g in d.get("sparsified_trajectories", {}).items()
            },
            cues={str(a): MemoryCue.from_dict(c) for a, c in d.get("cues", {}).items()},
            llm_token_usage=int(d.get("llm_token_usage", 0)),
            flags=[str(x) for x in d.get("flags", [])],
        )


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_trajectory(graph: InteractionGraph, with_ids: bool = False) -> str:
    """One ``[role] content`` line per utterance in topological order (ties by id)."""
    lines = []
    for u in graph.topological_order():
        line = f"[{u.role_label}] {u.content}"
        lines.append(f"{u.id} {line}" if with_ids else line)
    return "\n".join(lines)


def render_case(node: QueryNode, graph: InteractionGraph) -> str:
    body = render_trajectory(graph)
    return f"Task: {node.text}\n{body}" if body else f"Task: {node.text}"


# ---------------------------------------------------------------------------
# Coarse retrieval and hop expansion
# ---------------------------------------------------------------------------


def coarse_retrieve(store: MemoryStore, embedder, query_text: str, k: int) -> list[str]:
    """The ``k`` stored queries most cosine-similar to ``query_text``."""
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if not store.queries:
        return []
    vec = embedder.embed(query_text)
    if vec.dim != store.dim:
        raise ConfigurationError(f"embedder dim {vec.dim} does not match store dim {store.dim}")
    return top_k(vec, [(q, n.embedding) for q, n in store.queries.items()], k)


def hop_expand(store: MemoryStore, seed_ids: Iterable[str], hops: int) -> set[str]:
    """Undirected ball of radius ``hops`` around the seeds."""
    seeds = set(seed_ids)
    for q in seeds:
        store.query(q)
    if hops <= 0 or not seeds:
        return seeds
    adj = adjacency(store)
    result = set(seeds)
    frontier = set(seeds)
    for _ in range(hops):
        nxt = set()
        for q in frontier:
            nxt |= adj[q]
        nxt -= result
        if not nxt:
            break
        result |= nxt
        frontier = nxt
    return result


def upward_traverse(store: MemoryStore, expanded_ids: Iterable[str]) -> set[str]:
    """Insights whose support set intersects ``expanded_ids``."""
    expanded = set(expanded_ids)
    for q in expanded:
        store.query(q)
    return {iid for iid, ins in store.insights.items() if ins.support & expanded}


# ---------------------------------------------------------------------------
# Downward traversal
# ---------------------------------------------------------------------------


@dataclass
class Rating:
    score: int
    fallback: bool = False
    degraded: bool = False


def _clamp(score: int) -> int:
    return max(SCORE_MIN, min(SCORE_MAX, score))


def fallback_score(similarity: float) -> int:
    """round-half-up(10 * cosine), clamped into the score range."""
    return _clamp(math.floor(10.0 * similarity + 0.5))


def rate_relevance(
    chat: ChatProvider,
    current_query: str,
    candidate: QueryNode,
    graph: InteractionGraph,
    embedder=None,
    ledger: TokenLedger | None = None,
) -> Rating:
    """Score a historical query for the current one on a 1-10 scale.

    One retry on an unparseable reply; after that (or on transport failure) the
    score falls back to the embedding similarity.
    """
    bindings = {"trajectory": render_case(candidate, graph), "query_scenario": current_query}
    degraded = False
    for _ in range(2):
        try:
            reply = llm.complete_template(chat, "relevance", bindings, ledger)
        except TransportError as exc:
            logger.warning("relevance rating for %s degraded: %s", candidate.id, exc)
            degraded = True
            break
        score = llm.parse_score(reply.text)
        if score is not None:
            return Rating(_clamp(score))
    if embedder is None:
        return Rating(SCORE_MIN, fallback=True, degraded=degraded)
    sim = cosine(embedder.embed(current_query), candidate.embedding)
    return Rating(fallback_score(sim), fallback=True, degraded=degraded)


@dataclass
class SparsifyResult:
    graph: InteractionGraph
    dropped: int = 0
    passthrough: bool = False


def _match_line(line: str, graph: InteractionGraph) -> list[str] | None:
    refs = _UTTERANCE_REF_RE.findall(line)
    if refs:
        hits = [r for r in refs if r in graph]
        return hits or None
    body = _LINE_MARKER_RE.sub("", line).strip()
    for u in graph.nodes:
        if body == u.content.strip() or body == f"[{u.role_label}] {u.content}".strip():
            return [u.id]
    return None


def sparsify(
    chat: ChatProvider,
    interaction_graph: InteractionGraph,
    query_text: str,
    ledger: TokenLedger | None = None,
) -> SparsifyResult:
    """Keep only the utterances the provider names; never adds new ones."""
    if not len(interaction_graph):
        return SparsifyResult(InteractionGraph(interaction_graph.query_id))
    reply = llm.complete_template(
        chat,
        "extract_trajectory",
        {"task": query_text, "trajectory": render_trajectory(interaction_graph, with_ids=True)},
        ledger,
    )
    keep: set[str] = set()
    dropped = 0
    for line in reply.text.splitlines():
        if not line.strip():
            continue
        hits = _match_line(line, interaction_graph)
        if hits is None:
            dropped += 1
        else:
            keep.update(hits)
    if not keep:
        logger.info("sparsifier output unmatchable for %s; passing trajectory through", interaction_graph.query_id)
        return SparsifyResult(interaction_graph.subgraph(u.id for u in interaction_graph.nodes), dropped, True)
    return SparsifyResult(interaction_graph.subgraph(keep), dropped)


@dataclass
class DownwardResult:
    top_m_queries: list[str]
    sparsified: dict[str, InteractionGraph]
    scores: dict[str, int]
    flags: list[str] = field(default_factory=list)


def _rate_and_sparsify(
    candidates: Sequence[tuple[QueryNode, InteractionGraph]],
    providers: Providers,
    query_text: str,
    m: int,
    concurrent: bool,
    ledger: TokenLedger,
) -> DownwardResult:
    def rate(item):
        node, graph = item
        return rate_relevance(providers.chat, query_text, node, graph, providers.embedder, ledger)

    if concurrent and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=min(8, len(candidates))) as pool:
            ratings = list(pool.map(rate, candidates))
    else:
        ratings = [rate(c) for c in candidates]
    flags: list[str] = []
    scores: dict[str, int] = {}
    for (node, _), r in zip(candidates, ratings):
        scores[node.id] = r.score
        if r.fallback:
            flags.append(f"rating_fallback:{node.id}")
        if r.degraded:
            flags.append(f"rating_degraded:{node.id}")
    ranked = sorted(candidates, key=lambda c: (-scores[c[0].id], id_key(c[0].id)))[:m]
    sparsified: dict[str, InteractionGraph] = {}
    top: list[str] = []
    for node, graph in ranked:
        res = sparsify(providers.chat, graph, query_text, ledger)
        top.append(node.id)
        sparsified[node.id] = res.graph
        if res.passthrough:
            flags.append(f"sparsify_passthrough:{node.id}")
        if res.dropped:
            flags.append(f"sparsify_dropped:{node.id}:{res.dropped}")
    return DownwardResult(top, sparsified, scores, flags)


def downward_traverse(
    store: MemoryStore,
    providers: Providers,
    query_text: str,
    expanded_ids: Iterable[str],
    m: int,
    concurrent: bool = False,
    ledger: TokenLedger | None = None,
) -> DownwardResult:
    """Rate every expanded query, keep the top ``m`` by (score desc, id asc), sparsify each."""
    if m < 1:
        raise ConfigurationError(f"m must be >= 1, got {m}")
    candidates = [(store.query(q), store.interaction(q)) for q in sorted_ids(expanded_ids)]
    return _rate_and_sparsify(candidates, providers, query_text, m, concurrent, ledger or providers.ledger)


# ---------------------------------------------------------------------------
# Allocation
# ---------------------------------------------------------------------------


def make_snippets(
    top_m_queries: Sequence[str],
    sparsified: dict[str, InteractionGraph],
    nodes: dict[str, QueryNode],
) -> list[TrajectorySnippet]:
    out = []
    for q in top_m_queries:
        node = nodes[q]
        out.append(TrajectorySnippet(q, node.status, node.text, render_trajectory(sparsified[q])))
    return out


def allocate_memory(
    chat: ChatProvider,
    insights: Sequence[str],
    trajectories: Sequence[TrajectorySnippet],
    roles: Sequence[tuple[str, str]],
    query_text: str,
    ledger: TokenLedger | None = None,
    flags: list[str] | None = None,
) -> dict[str, MemoryCue]:
    """One cue per agent: insights personalized for its role plus the ranked snippets.

    ``query_text`` has no slot in the personalization prompt and is carried only
    for symmetry with the other stages.
    """
    if not roles:
        raise ConfigurationError("allocate_memory needs at least one role")
    snippets = list(trajectories)
    if not insights and not snippets:
        return {agent_id: MemoryCue(agent_id) for agent_id, _ in roles}
    per_role: dict[str, list[str]] = {}
    if insights:
        general = llm.format_numbered_list(insights)
        top_text = snippets[0].text if snippets else ""
        for _, role_label in roles:
            if role_label in per_role:
                continue
            reply = llm.complete_template(
                chat,
                "personalize",
                {"trajectory": top_text, "role": role_label, "insights": general},
                ledger,
            )
            items = llm.parse_numbered_list(reply.text)
            if not items:
                items = list(insights)
                if flags is not None:
                    flags.append(f"personalize_unparsed:{role_label}")
            per_role[role_label] = items
    return {
        agent_id: MemoryCue(agent_id, list(per_role.get(role_label, [])), list(snippets))
        for agent_id, role_label in roles
    }


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------


def retrieve(
    store: MemoryStore,
    providers: Providers,
    config: RetrievalConfig,
    query_text: str,
    roles: Sequence[tuple[str, str]],
) -> RetrievalResult:
    """Full read path for one incoming query.

    Structural stages run under the store's read lock; the snapshot they return
    is immutable under commits (which swap in new objects), so provider calls
    happen without holding any lock.
    """
    ledger = providers.ledger.child()
    result = RetrievalResult()

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except HierMemError as exc:
            raise StageError(name, exc) from exc

    with store.lock.read():
        if not store.queries:
            return result
        sketched = stage("coarse_retrieve", coarse_retrieve, store, providers.embedder, query_text, config.k)
        expanded = stage("hop_expand", hop_expand, store, sketched, config.hops)
        used = stage("upward_traverse", upward_traverse, store, expanded)
        candidates = [(store.queries[q], store.interactions[q]) for q in sorted_ids(expanded)]
        insight_texts = [store.insights[i].content for i in sorted_ids(used)]
        nodes = dict(store.queries)

    result.sketched = sketched
    result.expanded = sorted_ids(expanded)
    result.used_insights = sorted_ids(used)
    down = stage(
        "downward_traverse",
        _rate_and_sparsify,
        candidates,
        providers,
        query_text,
        config.m,
        config.concurrent_ratings,
        ledger,
    )
    result.top_m_queries = down.top_m_queries
    result.scores = down.scores
    result.sparsified_trajectories = down.sparsified
    result.flags.extend(down.flags)
    snippets = make_snippets(down.top_m_queries, down.sparsified, nodes)
    if roles:
        result.cues = stage(
            "allocate_memory", allocate_memory, providers.chat, insight_texts, snippets, roles, query_text, ledger,
            result.flags,
        )
    result.llm_token_usage = ledger.total
    return result
