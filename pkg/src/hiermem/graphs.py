"""The three memory tiers (interaction, query, insight) and the store that owns them.

Every other module mutates memory only through the functions and methods here.
Identifiers are engine-assigned and monotone ("q0", "q1", ... for queries,
"i0", "i1", ... for insights, "u0", ... for utterances inside one episode).
"""

from __future__ import annotations

import enum
import json
import logging
import math
import os
import re
import tempfile
import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Sequence

from .errors import (
    ConfigurationError,
    CorruptStoreError,
    InvariantError,
    NotFoundError,
    SchemaVersionError,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DOT_LABEL_LIMIT = 40

_ID_RE = re.compile(r"^(\D*)(\d+)$")


def id_key(ident: str) -> tuple[str, int, str]:
    """Sort key ordering "q2" before "q10"; non-numeric ids sort lexically."""
    m = _ID_RE.match(ident)
    if m:
        return (m.group(1), int(m.group(2)), "")
    return (ident, -1, ident)


def sorted_ids(ids: Iterable[str]) -> list[str]:
    return sorted(ids, key=id_key)


class Status(str, enum.Enum):
    FAILED = "Failed"
    RESOLVED = "Resolved"

    @classmethod
    def parse(cls, value: "Status | str") -> "Status":
        if isinstance(value, Status):
            return value
        for member in cls:
            if member.value.lower() == str(value).lower():
                return member
        raise InvariantError("status is Failed or Resolved", f"got {value!r}")


# ---------------------------------------------------------------------------
# Interaction tier
# ---------------------------------------------------------------------------


@dataclass
class Utterance:
    id: str
    agent_id: str
    role_label: str
    content: str
    epoch: int
    parents: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "agent_id": self.agent_id,
            "role_label": self.role_label,
            "content": self.content,
            "epoch": self.epoch,
            "parents": list(self.parents),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "Utterance":
        return cls(
            id=str(d["id"]),
            agent_id=str(d["agent_id"]),
            role_label=str(d["role_label"]),
            content=str(d["content"]),
            epoch=int(d["epoch"]),
            parents=[str(p) for p in d.get("parents", [])],
        )


class InteractionGraph:
    """Per-episode DAG of utterances; an edge p -> u means p inspired u."""

    def __init__(self, query_id: str | None = None, nodes: Iterable[Utterance] = ()):
        self.query_id = query_id
        self.nodes: list[Utterance] = []
        self._index: dict[str, Utterance] = {}
        for u in nodes:
            self.add_utterance(u)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, uid: object) -> bool:
        return uid in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InteractionGraph):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"InteractionGraph(query_id={self.query_id!r}, nodes={len(self.nodes)}, edges={self.edge_count})"

    def get(self, uid: str) -> Utterance:
        try:
            return self._index[uid]
        except KeyError:
            raise NotFoundError(f"unknown utterance {uid!r}") from None

    @property
    def edge_count(self) -> int:
        return sum(len(u.parents) for u in self.nodes)

    def edges(self) -> list[tuple[str, str]]:
        return [(p, u.id) for u in self.nodes for p in u.parents]

    def add_utterance(self, u: Utterance) -> None:
        """Insert ``u``; its parents must already be present, which keeps the graph acyclic."""
        if u.epoch < 0:
            raise InvariantError("utterance epoch is non-negative", f"{u.id}: epoch {u.epoch}")
        if u.id in self._index:
            raise InvariantError("utterance ids are unique", f"duplicate {u.id!r}")
        if len(set(u.parents)) != len(u.parents):
            raise InvariantError("no duplicate edges", f"{u.id} lists a parent twice")
        for p in u.parents:
            if p == u.id:
                raise InvariantError("interaction graph is acyclic", f"{u.id} is its own parent")
            parent = self._index.get(p)
            if parent is None:
                raise InvariantError("parents reference existing utterances", f"{u.id} -> unknown parent {p!r}")
            if parent.epoch > u.epoch:
                raise InvariantError(
                    "parent epoch <= child epoch", f"{p} (epoch {parent.epoch}) -> {u.id} (epoch {u.epoch})"
                )
        self.nodes.append(u)
        self._index[u.id] = u

    def _reaches(self, src: str, dst: str) -> bool:
        children: dict[str, list[str]] = {}
        for a, b in self.edges():
            children.setdefault(a, []).append(b)
        seen = {src}
        todo = [src]
        while todo:
            cur = todo.pop()
            if cur == dst:
                return True
            for nxt in children.get(cur, ()):
                if nxt not in seen:
                    seen.add(nxt)
                    todo.append(nxt)
        return False

    def add_edge(self, parent: str, child: str) -> None:
        """Add ``parent -> child``; rejected if it would close a cycle."""
        p, c = self.get(parent), self.get(child)
        if parent in c.parents:
            raise InvariantError("no duplicate edges", f"{parent} -> {child}")
        if parent == child or self._reaches(child, parent):
            raise InvariantError("interaction graph is acyclic", f"{parent} -> {child} closes a cycle")
        if p.epoch > c.epoch:
            raise InvariantError("parent epoch <= child epoch", f"{parent} -> {child}")
        c.parents.append(parent)

    def topological_order(self) -> list[Utterance]:
        """Kahn's algorithm; ready nodes are released in ascending id order."""
        import heapq

        indeg = {u.id: len(u.parents) for u in self.nodes}
        children: dict[str, list[str]] = {u.id: [] for u in self.nodes}
        for a, b in self.edges():
            children[a].append(b)
        heap = [(id_key(uid), uid) for uid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        out: list[Utterance] = []
        while heap:
            _, uid = heapq.heappop(heap)
            out.append(self._index[uid])
            for ch in children[uid]:
                indeg[ch] -= 1
                if indeg[ch] == 0:
                    heapq.heappush(heap, (id_key(ch), ch))
        if len(out) != len(self.nodes):
            raise InvariantError("interaction graph is acyclic", "cycle detected")
        return out

    def subgraph(self, keep: Iterable[str]) -> "InteractionGraph":
        """Induced subgraph on ``keep``; edges to dropped utterances are removed."""
        keep_set = set(keep)
        g = InteractionGraph(self.query_id)
        for u in self.nodes:
            if u.id in keep_set:
                g.add_utterance(
                    Utterance(u.id, u.agent_id, u.role_label, u.content, u.epoch,
                              [p for p in u.parents if p in keep_set])
                )
        return g

    def validate(self) -> None:
        seen: dict[str, Utterance] = {}
        for u in self.nodes:
            if u.id in seen:
                raise InvariantError("utterance ids are unique", f"duplicate {u.id!r}")
            seen[u.id] = u
        for u in self.nodes:
            for p in u.parents:
                if p not in seen:
                    raise InvariantError("every edge endpoint exists", f"{p!r} -> {u.id!r}")
                if seen[p].epoch > u.epoch:
                    raise InvariantError("parent epoch <= child epoch", f"{p} -> {u.id}")
        self.topological_order()

    def to_dict(self) -> dict[str, Any]:
        return {"query_id": self.query_id, "nodes": [u.to_dict() for u in self.nodes]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "InteractionGraph":
        g = cls(d.get("query_id"))
        # Loaded graphs may list a child before its parent; validate as a whole instead.
        for raw in d.get("nodes", []):
            u = Utterance.from_dict(raw)
            g.nodes.append(u)
            g._index[u.id] = u
        g.validate()
        return g


# ---------------------------------------------------------------------------
# Query and insight tiers
# ---------------------------------------------------------------------------


@dataclass
class QueryNode:
    id: str
    text: str
    status: Status
    interaction_ref: str
    embedding: tuple[float, ...]
    created_seq: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "status": self.status.value,
            "interaction_ref": self.interaction_ref,
            "embedding": list(self.embedding),
            "created_seq": self.created_seq,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "QueryNode":
        return cls(
            id=str(d["id"]),
            text=str(d["text"]),
            status=Status.parse(d["status"]),
            interaction_ref=str(d["interaction_ref"]),
            embedding=tuple(float(x) for x in d["embedding"]),
            created_seq=int(d["created_seq"]),
        )


@dataclass
class InsightNode:
    id: str
    content: str
    support: set[str]
    created_seq: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "content": self.content,
            "support": sorted_ids(self.support),
            "created_seq": self.created_seq,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "InsightNode":
        return cls(
            id=str(d["id"]),
            content=str(d["content"]),
            support={str(s) for s in d["support"]},
            created_seq=int(d["created_seq"]),
        )


class RWLock:
    """Many concurrent readers or one writer; writers are preferred once waiting."""

    def __init__(self) -> None:
        self._cond = threading.Condition()
        self._readers = 0
        self._writer = False
        self._writers_waiting = 0

    @contextmanager
    def read(self) -> Iterator[None]:
        with self._cond:
            while self._writer or self._writers_waiting:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self) -> Iterator[None]:
        with self._cond:
            self._writers_waiting += 1
            while self._writer or self._readers:
                self._cond.wait()
            self._writers_waiting -= 1
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


class MemoryStore:
    """Query graph, insight graph and per-query interaction graphs.

    ``lock`` guards readers against partial updates; ``commit_lock`` serializes
    writers for the whole duration of a commit (including provider calls, which
    never run under ``lock``).
    """

    def __init__(self, dim: int = 256):
        if dim <= 0:
            raise ConfigurationError(f"embedding dim must be positive, got {dim}")
        self.dim = dim
        self.schema_version = SCHEMA_VERSION
        self.queries: dict[str, QueryNode] = {}
        self.query_edges: set[tuple[str, str]] = set()
        self.insights: dict[str, InsightNode] = {}
        self.hyper_edges: set[tuple[str, str, str]] = set()
        self.interactions: dict[str, InteractionGraph] = {}
        self.episode_counter = 0
        self.insight_counter = 0
        self.lock = RWLock()
        self.commit_lock = threading.RLock()

    def __repr__(self) -> str:
        return (
            f"MemoryStore(dim={self.dim}, queries={len(self.queries)}, "
            f"insights={len(self.insights)}, episodes={self.episode_counter})"
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, MemoryStore):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    # -- query tier -------------------------------------------------------

    def query(self, qid: str) -> QueryNode:
        try:
            return self.queries[qid]
        except KeyError:
            raise NotFoundError(f"unknown query {qid!r}") from None

    def insight(self, iid: str) -> InsightNode:
        try:
            return self.insights[iid]
        except KeyError:
            raise NotFoundError(f"unknown insight {iid!r}") from None

    def interaction(self, qid: str) -> InteractionGraph:
        try:
            return self.interactions[qid]
        except KeyError:
            raise NotFoundError(f"no interaction graph for query {qid!r}") from None

    def add_query_edge(self, source: str, target: str) -> bool:
        """Add ``source -> target``; returns False if the edge already existed."""
        self.query(source)
        self.query(target)
        if source == target:
            raise InvariantError("no self-edges in the query graph", source)
        if (source, target) in self.query_edges:
            return False
        self.query_edges.add((source, target))
        return True

    # -- insight tier -----------------------------------------------------

    def add_insight(self, content: str, support: Iterable[str]) -> str:
        support = set(support)
        if not support:
            raise InvariantError("insight support is non-empty")
        for q in support:
            self.query(q)
        iid = f"i{self.insight_counter}"
        self.insight_counter += 1
        self.insights[iid] = InsightNode(iid, content, support, self.episode_counter)
        return iid

    def add_hyper_edge(self, src: str, dst: str, qid: str) -> bool:
        self.insight(src)
        self.insight(dst)
        self.query(qid)
        triple = (src, dst, qid)
        if triple in self.hyper_edges:
            return False
        self.hyper_edges.add(triple)
        return True

    # -- whole-store helpers ----------------------------------------------

    def stats(self) -> dict[str, int]:
        return {
            "queries": len(self.queries),
            "insights": len(self.insights),
            "interactions": len(self.interactions),
            "query_edges": len(self.query_edges),
            "insight_hyper_edges": len(self.hyper_edges),
            "utterances": sum(len(g) for g in self.interactions.values()),
        }

    def copy(self) -> "MemoryStore":
        """Deep copy of the structural content (fresh locks)."""
        return MemoryStore.from_dict(self.to_dict())

    def adopt(self, other: "MemoryStore") -> None:
        """Replace this store's content with ``other``'s; callers hold the write lock."""
        self.dim = other.dim
        self.schema_version = other.schema_version
        self.queries = other.queries
        self.query_edges = other.query_edges
        self.insights = other.insights
        self.hyper_edges = other.hyper_edges
        self.interactions = other.interactions
        self.episode_counter = other.episode_counter
        self.insight_counter = other.insight_counter

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "dim": self.dim,
            "episode_counter": self.episode_counter,
            "insight_counter": self.insight_counter,
            "queries": [self.queries[q].to_dict() for q in sorted_ids(self.queries)],
            "query_edges": [list(e) for e in sorted(self.query_edges, key=lambda e: (id_key(e[0]), id_key(e[1])))],
            "insights": [self.insights[i].to_dict() for i in sorted_ids(self.insights)],
            "insight_hyper_edges": [
                list(t)
                for t in sorted(self.hyper_edges, key=lambda t: (id_key(t[0]), id_key(t[1]), id_key(t[2])))
            ],
            "interactions": {q: self.interactions[q].to_dict() for q in sorted_ids(self.interactions)},
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MemoryStore":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(version, SCHEMA_VERSION)
        store = cls(int(d.get("dim", 256)))
        store.episode_counter = int(d["episode_counter"])
        store.insight_counter = int(d.get("insight_counter", 0))
        for raw in d["queries"]:
            node = QueryNode.from_dict(raw)
            store.queries[node.id] = node
        store.query_edges = {(str(a), str(b)) for a, b in d["query_edges"]}
        for raw in d["insights"]:
            ins = InsightNode.from_dict(raw)
            store.insights[ins.id] = ins
        store.hyper_edges = {(str(a), str(b), str(c)) for a, b, c in d["insight_hyper_edges"]}
        for qid, raw in d["interactions"].items():
            store.interactions[qid] = InteractionGraph.from_dict(raw)
        return store


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def _vector_values(embedding: Any) -> tuple[float, ...]:
    values = getattr(embedding, "values", embedding)
    return tuple(float(x) for x in values)


def add_query_node(
    store: MemoryStore,
    text: str,
    status: Status | str,
    interaction_graph: InteractionGraph,
    embedding: Sequence[float] | Any,
) -> str:
    """Insert a query node with a fresh id; edges are left to the update path."""
    values = _vector_values(embedding)
    if len(values) != store.dim:
        raise ConfigurationError(f"embedding has dimension {len(values)}, store is configured for {store.dim}")
    if not all(math.isfinite(x) for x in values):
        raise ConfigurationError("embedding contains non-finite values")
    status = Status.parse(status)
    interaction_graph.validate()
    qid = f"q{store.episode_counter}"
    if qid in store.queries:  # only possible after hand-edited files
        raise InvariantError("query ids are unique", qid)
    interaction_graph.query_id = qid
    store.queries[qid] = QueryNode(qid, text, status, qid, values, store.episode_counter)
    store.interactions[qid] = interaction_graph
    store.episode_counter += 1
    return qid


def neighbors(store: MemoryStore, qid: str) -> set[str]:
    """In- and out-neighbors of ``qid`` in the query graph."""
    store.query(qid)
    out: set[str] = set()
    for a, b in store.query_edges:
        if a == qid:
            out.add(b)
        elif b == qid:
            out.add(a)
    out.discard(qid)
    return out


def adjacency(store: MemoryStore) -> dict[str, set[str]]:
    """Undirected adjacency map of the query graph."""
    adj: dict[str, set[str]] = {q: set() for q in store.queries}
    for a, b in store.query_edges:
        adj[a].add(b)
        adj[b].add(a)
    return adj


def validate(store: MemoryStore) -> None:
    """Walk every tier and raise :class:`InvariantError` on the first violation."""
    if store.schema_version != SCHEMA_VERSION:
        raise SchemaVersionError(store.schema_version, SCHEMA_VERSION)
    for qid, node in store.queries.items():
        if node.id != qid:
            raise InvariantError("query ids match their keys", qid)
        if len(node.embedding) != store.dim:
            raise InvariantError("embedding dimension equals store dim", f"{qid}: {len(node.embedding)}")
        if not isinstance(node.status, Status):
            raise InvariantError("status is Failed or Resolved", qid)
        if node.interaction_ref not in store.interactions:
            raise InvariantError("interaction_ref resolves", f"{qid} -> {node.interaction_ref}")
    for a, b in store.query_edges:
        if a not in store.queries or b not in store.queries:
            raise InvariantError("query edge endpoints exist", f"{a} -> {b}")
        if a == b:
            raise InvariantError("no self-edges in the query graph", a)
    for iid, ins in store.insights.items():
        if ins.id != iid:
            raise InvariantError("insight ids match their keys", iid)
        if not ins.support:
            raise InvariantError("insight support is non-empty", iid)
        missing = ins.support - store.queries.keys()
        if missing:
            raise InvariantError("insight support resolves", f"{iid}: {sorted_ids(missing)}")
    for src, dst, q in store.hyper_edges:
        if src not in store.insights or dst not in store.insights or q not in store.queries:
            raise InvariantError("hyper-edge endpoints exist", f"({src}, {dst}, {q})")
    for qid, g in store.interactions.items():
        g.validate()
    if store.episode_counter < len(store.queries):
        raise InvariantError("episode_counter >= number of query nodes")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def dumps(store: MemoryStore) -> str:
    return json.dumps(store.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"


def save(store: MemoryStore, path: str | os.PathLike) -> None:
    """Write the store atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    data = dumps(store).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def loads(raw: bytes | str) -> MemoryStore:
    if isinstance(raw, bytes):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStoreError("invalid UTF-8", exc.start) from None
    else:
        text = raw
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise CorruptStoreError(f"malformed JSON: {exc.msg}", offset) from None
    if not isinstance(doc, dict):
        raise CorruptStoreError("top-level JSON value is not an object", 0)
    if "schema_version" not in doc:
        raise CorruptStoreError("missing schema_version")
    if doc["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(doc["schema_version"], SCHEMA_VERSION)
    try:
        store = MemoryStore.from_dict(doc)
    except InvariantError as exc:
        raise CorruptStoreError(f"stored graph violates invariant: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptStoreError(f"malformed store document: {type(exc).__name__}: {exc}") from None
    try:
        validate(store)
    except InvariantError as exc:
        raise CorruptStoreError(f"stored graph violates invariant: {exc}") from None
    return store


def load(path: str | os.PathLike) -> MemoryStore:
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"store file {str(path)!r} does not exist")
    return loads(path.read_bytes())


# ---------------------------------------------------------------------------
# DOT export
# ---------------------------------------------------------------------------


def _dot_str(text: str) -> str:
    if len(text) > DOT_LABEL_LIMIT:
        text = text[:DOT_LABEL_LIMIT]
    text = text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", " ")
    return f'"{text}"'


def export_dot(store: MemoryStore, tier: str) -> str:
    """Render one tier as a DOT digraph.

    ``tier`` is ``"query"``, ``"insight"`` or ``"interaction:<query_id>"``.
    """
    lines = ["digraph {"]
    if tier == "query":
        for qid in sorted_ids(store.queries):
            node = store.queries[qid]
            lines.append(f"  {_dot_str(qid)} [label={_dot_str(node.text)}, status={_dot_str(node.status.value)}];")
        for a, b in sorted(store.query_edges, key=lambda e: (id_key(e[0]), id_key(e[1]))):
            lines.append(f"  {_dot_str(a)} -> {_dot_str(b)};")
    elif tier == "insight":
        for iid in sorted_ids(store.insights):
            lines.append(f"  {_dot_str(iid)} [label={_dot_str(store.insights[iid].content)}];")
        for a, b, q in sorted(store.hyper_edges, key=lambda t: (id_key(t[0]), id_key(t[1]), id_key(t[2]))):
            lines.append(f"  {_dot_str(a)} -> {_dot_str(b)} [label={_dot_str(q)}];")
    elif tier.startswith("interaction:"):
        g = store.interaction(tier.split(":", 1)[1])
        for u in g.nodes:
            lines.append(f"  {_dot_str(u.id)} [label={_dot_str(f'[{u.role_label}] {u.content}')}];")
        for a, b in g.edges():
            lines.append(f"  {_dot_str(a)} -> {_dot_str(b)};")
    else:
        raise NotFoundError(f"unknown tier {tier!r}")
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_json(store: MemoryStore, tier: str) -> dict[str, Any]:
    doc = store.to_dict()
    if tier == "query":
        return {"queries": doc["queries"], "query_edges": doc["query_edges"]}
    if tier == "insight":
        return {"insights": doc["insights"], "insight_hyper_edges": doc["insight_hyper_edges"]}
    if tier.startswith("interaction:"):
        return store.interaction(tier.split(":", 1)[1]).to_dict()
    raise NotFoundError(f"unknown tier {tier!r}")
