"""Scripted multi-agent pipeline, toy task suites and the benchmark runner."""

from __future__ import annotations

import csv
import heapq
import io
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import llm
from .errors import ConfigurationError, HierMemError, InvariantError, TransportError
from .graphs import MemoryStore, Status
from .llm import ChatProvider, MockChatProvider, MockRule, Providers
from .retrieval import MemoryCue, RetrievalConfig, RetrievalResult, retrieve
from .update import EpisodeRecord, TraceEntry, UpdateConfig, commit_episode

logger = logging.getLogger(__name__)

SOLVER_SYSTEM = "You are a smart agent designed to solve problems."
CRITIC_SYSTEM = (
    "You are a ground truth agent. Critically evaluate the solver's output and identify potential errors."
)
EXECUTOR_SYSTEM = "You are an executor agent. Translate the validated solution into executable commands."

CSV_HEADER = ["task_index", "family", "status", "tokens", "cumulative_success_rate"]


@dataclass
class AgentSpec:
    agent_id: str
    role_label: str
    system_prompt: str = ""
    base: ChatProvider | None = None  # None: use the session's chat provider
    plugins: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.role_label:
            raise ConfigurationError(f"agent {self.agent_id!r} needs a role label")


@dataclass
class MasTopology:
    agents: list[AgentSpec]
    edges: list[tuple[str, str]] = field(default_factory=list)
    epochs: int = 1
    aggregator: str = "last_agent"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigurationError("epochs must be positive")
        if self.aggregator not in ("last_agent", "majority"):
            raise ConfigurationError(f"unknown aggregator {self.aggregator!r}")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("agent ids must be unique")
        for a, b in self.edges:
            if a not in ids or b not in ids:
                raise ConfigurationError(f"edge ({a}, {b}) references an unknown agent")
        self.order()

    def in_neighbors(self, agent_id: str) -> list[str]:
        return [a for a, b in self.edges if b == agent_id]

    def order(self) -> list[AgentSpec]:
        """Topological order; ties keep the declaration order of ``agents``."""
        pos = {a.agent_id: i for i, a in enumerate(self.agents)}
        indeg = {a.agent_id: 0 for a in self.agents}
        for _, b in self.edges:
            indeg[b] += 1
        heap = [pos[a] for a, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        out = []
        while heap:
            agent = self.agents[heapq.heappop(heap)]
            out.append(agent)
            for a, b in self.edges:
                if a == agent.agent_id:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        heapq.heappush(heap, pos[b])
        if len(out) != len(self.agents):
            raise InvariantError("agent topology is a DAG", "cycle among agent edges")
        return out

    @property
    def roles(self) -> list[tuple[str, str]]:
        return [(a.agent_id, a.role_label) for a in self.agents]


def solver_critic_executor(epochs: int = 1) -> MasTopology:
    """Three-agent chain: solver proposes, critic reviews, executor acts."""
    return MasTopology(
        agents=[
            AgentSpec("solver", "solver", SOLVER_SYSTEM),
            AgentSpec("critic", "critic", CRITIC_SYSTEM),
            AgentSpec("executor", "executor", EXECUTOR_SYSTEM),
        ],
        edges=[("solver", "critic"), ("critic", "executor")],
        epochs=epochs,
    )


# ---------------------------------------------------------------------------
# Toy tasks
# ---------------------------------------------------------------------------


@dataclass
class ToyTask:
    family: str
    instance: int
    text: str
    solution: str
    discoverable: bool = False
    params: dict[str, str] = field(default_factory=dict)

    def success_predicate(self, final_action: str) -> bool:
        return final_action.strip() == self.solution


@dataclass
class Suite:
    tasks: list[ToyTask]
    scripts: dict[str, Any] = field(default_factory=lambda: {"kind": "learning"})

    def by_text(self) -> dict[str, ToyTask]:
        return {t.text: t for t in self.tasks}


DEFAULT_FAMILIES = [
    {
        "name": "clean-then-place",
        "template": "clean some {obj} and put it in {dest}",
        "solution": "take {obj}; go to sinkbasin; clean {obj} with sinkbasin; put {obj} in {dest}",
    },
    {
        "name": "heat-then-place",
        "template": "heat some {obj} and put it in {dest}",
        "solution": "take {obj}; go to microwave; heat {obj} with microwave; put {obj} in {dest}",
    },
    {
        "name": "cool-then-place",
        "template": "cool some {obj} and put it in {dest}",
        "solution": "take {obj}; go to fridge; cool {obj} with fridge; put {obj} in {dest}",
    },
    {
        "name": "examine-under-light",
        "template": "look at {obj} under the {dest}",
        "solution": "take {obj}; go to {dest}; use {dest}; examine {obj}",
    },
    {
        "name": "pick-two-place",
        "template": "find two {obj} and put them in {dest}",
        "solution": "take {obj}; put {obj} in {dest}; take {obj}; put {obj} in {dest}",
    },
]

DEFAULT_PARAMS = {
    "clean-then-place": [("cloth", "countertop"), ("egg", "fridge"), ("plate", "cabinet"), ("mug", "shelf")],
    "heat-then-place": [("apple", "diningtable"), ("potato", "garbagecan"), ("bread", "countertop"), ("cup", "cabinet")],
    "cool-then-place": [("tomato", "microwave"), ("lettuce", "diningtable"), ("wine", "shelf"), ("pan", "stoveburner")],
    "examine-under-light": [("book", "desklamp"), ("alarmclock", "floorlamp"), ("pillow", "desklamp"), ("cd", "floorlamp")],
    "pick-two-place": [("pencil", "drawer"), ("keychain", "safe"), ("soapbar", "toilet"), ("vase", "sidetable")],
}


def default_suite_dict() -> dict[str, Any]:
    """5 families x 4 instances, listed round-robin (every family's first instance first)."""
    instances = []
    for i in range(4):
        for fam in DEFAULT_FAMILIES:
            obj, dest = DEFAULT_PARAMS[fam["name"]][i]
            instances.append({"family": fam["name"], "params": {"obj": obj, "dest": dest}})
    return {"families": DEFAULT_FAMILIES, "instances": instances, "scripts": {"kind": "learning"}}


def suite_from_dict(doc: Mapping[str, Any]) -> Suite:
    families = {f["name"]: f for f in doc["families"]}
    tasks: list[ToyTask] = []
    seen: Counter[str] = Counter()
    for inst in doc["instances"]:
        fam = families.get(inst["family"])
        if fam is None:
            raise ConfigurationError(f"instance references unknown family {inst['family']!r}")
        params = {str(k): str(v) for k, v in inst.get("params", {}).items()}
        try:
            text = fam["template"].format(**params)
            solution = fam["solution"].format(**params)
        except KeyError as exc:
            raise ConfigurationError(f"family {fam['name']!r} needs parameter {exc}") from None
        idx = seen[fam["name"]]
        seen[fam["name"]] += 1
        tasks.append(ToyTask(fam["name"], idx, text, solution, discoverable=idx == 0, params=params))
    if not tasks:
        raise ConfigurationError("suite has no instances")
    return Suite(tasks, dict(doc.get("scripts") or {"kind": "learning"}))


def load_suite(path: str | Path) -> Suite:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"suite file {path} is not valid JSON: {exc}") from None
    return suite_from_dict(doc)


# ---------------------------------------------------------------------------
# Scripted providers
# ---------------------------------------------------------------------------

_TASK_RE = re.compile(r"^## Task\n(.*)$", re.M)
_SNIPPET_RE = re.compile(r"^#### Trajectory from (\S+) \((Resolved|Failed)\): (.*)$", re.M)
_CASE_TASK_RE = re.compile(r"^Task: (.*)$", re.M)
_ONGOING_RE = re.compile(r"Ongoing task:\n(.*)\n", re.M)
_UTTERANCE_LINE_RE = re.compile(r"^(u\d+) \[(\w+)\] ", re.M)
_PLAN_RE = re.compile(r"PLAN: (.*)$", re.M)
_APPROVED_RE = re.compile(r"^\[critic\] APPROVED: (.*)$", re.M)
_LIMIT_RE = re.compile(r"no more than (\d+) refined insights")


def learning_provider(suite: Suite) -> MockChatProvider:
    """Deterministic mock under which memory provably helps.

    The solver answers an instance correctly iff it is its family's first
    (discoverable) instance, or its memory cue carries a Resolved trajectory of
    the same family. Memory-side prompts get equally mechanical replies.
    """
    tasks = suite.by_text()

    def family_of(text: str) -> str | None:
        task = tasks.get(text.strip())
        return task.family if task else None

    def relevance(_s: str, user: str) -> str:
        case = _CASE_TASK_RE.search(user)
        ongoing = _ONGOING_RE.search(user)
        if case and ongoing:
            fam = family_of(ongoing.group(1))
            if fam is not None and family_of(case.group(1)) == fam:
                return "Score: 9"
        return "Score: 2"

    def extract(_s: str, user: str) -> str:
        keep = [uid for uid, role in _UTTERANCE_LINE_RE.findall(user) if role != "critic"]
        return llm.format_numbered_list(keep)

    def lessons(_s: str, user: str) -> str:
        fams = sorted({f for f in (family_of(t) for t in _CASE_TASK_RE.findall(user)) if f})
        plans = list(dict.fromkeys(_PLAN_RE.findall(user)))
        lines = [f"For {f} tasks, follow the proven action order." for f in fams]
        lines += [f"A working plan: {p}" for p in plans[:2]]
        return llm.format_numbered_list(lines)

    def merge(_s: str, user: str) -> str:
        limit = int(_LIMIT_RE.search(user).group(1))
        body = user.split("## Please consolidate")[0]
        items = list(dict.fromkeys(llm.parse_numbered_list(body)))
        return llm.format_numbered_list(items[:limit])

    def personalize(_s: str, user: str) -> str:
        role = user.split("### Agent's Role:\n", 1)[1].split("\n", 1)[0]
        general = user.split("### General Insights:\n", 1)[1].split("\n\n###", 1)[0]
        return llm.format_numbered_list(f"As {role}: {item}" for item in llm.parse_numbered_list(general))

    def solver(_s: str, user: str) -> str:
        m = _TASK_RE.search(user)
        task = tasks.get(m.group(1).strip()) if m else None
        if task is None:
            return "PLAN: look around"
        remembered = {family_of(text) for _, status, text in _SNIPPET_RE.findall(user) if status == "Resolved"}
        if task.discoverable or task.family in remembered:
            return f"PLAN: {task.solution}"
        return "PLAN: look around"

    def critic(_s: str, user: str) -> str:
        plans = _PLAN_RE.findall(user.split("## Memory", 1)[0])
        return f"APPROVED: {plans[-1]}" if plans else "REJECTED: no plan"

    def executor(_s: str, user: str) -> str:
        approved = _APPROVED_RE.findall(user.split("## Memory", 1)[0])
        return approved[-1] if approved else "noop"

    return MockChatProvider(
        [
            MockRule("on a scale of 1-10", relevance),
            MockRule("Strictly follow the original trajectory", extract),
            MockRule("## Failed trajectory", lessons),
            MockRule("## Successful trajectorys", lessons),
            MockRule("## Here are the current insights that need to be merged", merge),
            MockRule("### Agent's Role:", personalize),
            MockRule("## Your role: solver", solver),
            MockRule("## Your role: critic", critic),
            MockRule("## Your role: executor", executor),
        ]
    )


def provider_for_suite(suite: Suite) -> ChatProvider:
    kind = suite.scripts.get("kind", "learning")
    if kind == "learning":
        return learning_provider(suite)
    if kind == "rules":
        return MockChatProvider.from_dict(suite.scripts)
    raise ConfigurationError(f"unknown suite script kind {kind!r}")


# ---------------------------------------------------------------------------
# Episodes and suites
# ---------------------------------------------------------------------------


def agent_prompt(
    agent: AgentSpec,
    task_text: str,
    messages: Sequence[tuple[str, str]],
    previous: str | None,
    cue: MemoryCue | None,
) -> tuple[str, str]:
    parts = [f"## Your role: {agent.role_label}", "## Task", task_text]
    if messages:
        parts.append("## Messages")
        parts.extend(f"[{role}] {content}" for role, content in messages)
    if previous is not None:
        parts.append("## Your previous output")
        parts.append(previous)
    if cue is not None and not cue.is_empty():
        parts.append("## Memory")
        parts.append(cue.render())
    return agent.system_prompt, "\n".join(parts)


def _aggregate(aggregator: str, outputs: Sequence[str]) -> str:
    if not outputs:
        return ""
    if aggregator == "last_agent":
        return outputs[-1]
    counts = Counter(outputs)
    best = max(counts.values())
    return next(o for o in outputs if counts[o] == best)


def run_episode(
    topology: MasTopology,
    store: MemoryStore,
    providers: Providers,
    retrieval_config: RetrievalConfig,
    task: ToyTask,
    use_memory: bool = True,
) -> EpisodeRecord:
    """Retrieve memory once, run ``epochs`` rounds in topological order, judge the answer."""
    ledger = providers.ledger.child()
    scoped = Providers(providers.chat, providers.embedder, ledger)
    retrieval = RetrievalResult()
    order = topology.order()
    trace: list[TraceEntry] = []
    last_index: dict[str, int] = {}
    final_outputs: list[str] = []
    error = None
    try:
        if use_memory:
            retrieval = retrieve(store, scoped, retrieval_config, task.text, topology.roles)
        for epoch in range(1, topology.epochs + 1):
            current: dict[str, int] = {}
            final_outputs = []
            for agent in order:
                parents = [current[a] for a in topology.in_neighbors(agent.agent_id) if a in current]
                messages = [(trace[p].role_label, trace[p].content) for p in parents]
                prev_idx = last_index.get(agent.agent_id)
                previous = trace[prev_idx].content if prev_idx is not None else None
                if prev_idx is not None:
                    parents.append(prev_idx)
                system, user = agent_prompt(agent, task.text, messages, previous, retrieval.cues.get(agent.agent_id))
                reply = llm.complete(agent.base or providers.chat, system, user, ledger, f"agent:{agent.role_label}")
                trace.append(TraceEntry(agent.agent_id, agent.role_label, epoch, reply.text, sorted(parents)))
                current[agent.agent_id] = len(trace) - 1
                final_outputs.append(reply.text)
            last_index.update(current)
    except (TransportError, HierMemError) as exc:
        error = f"{type(exc).__name__}: {exc}"
        logger.warning("episode for %r failed: %s", task.text, error)
    answer = "" if error else _aggregate(topology.aggregator, final_outputs)
    status = Status.RESOLVED if not error and task.success_predicate(answer) else Status.FAILED
    return EpisodeRecord(task.text, answer, status, trace, ledger.total, retrieval, error)


@dataclass
class TaskOutcome:
    task_index: int
    family: str
    query_text: str
    status: Status
    tokens: int
    sketched: int = 0
    expanded: int = 0
    insights: int = 0
    top_m: int = 0
    error: str | None = None


@dataclass
class RunReport:
    outcomes: list[TaskOutcome] = field(default_factory=list)
    success_series: list[float] = field(default_factory=list)
    total_tokens: int = 0

    @property
    def final_success_rate(self) -> float:
        return self.success_series[-1] if self.success_series else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "tasks": [
                {
                    "task_index": o.task_index,
                    "family": o.family,
                    "query_text": o.query_text,
                    "status": o.status.value,
                    "tokens": o.tokens,
                    "sketched": o.sketched,
                    "expanded": o.expanded,
                    "insights": o.insights,
                    "top_m": o.top_m,
                    "error": o.error,
                }
                for o in self.outcomes
            ],
            "success_series": list(self.success_series),
            "total_tokens": self.total_tokens,
        }


def run_suite(
    topology: MasTopology,
    store: MemoryStore,
    providers: Providers,
    retrieval_config: RetrievalConfig,
    update_config: UpdateConfig,
    tasks: Sequence[ToyTask],
    use_memory: bool = True,
) -> RunReport:
    """Run and commit every task in order, tracking the cumulative success rate."""
    if not tasks:
        raise ConfigurationError("run_suite needs at least one task")
    report = RunReport()
    start = providers.ledger.total
    solved = 0
    for i, task in enumerate(tasks):
        before = providers.ledger.total
        episode = run_episode(topology, store, providers, retrieval_config, task, use_memory)
        error = episode.error
        try:
            commit_episode(store, providers, update_config, episode, retrieval_config)
        except HierMemError as exc:
            error = error or f"commit failed: {exc}"
            logger.warning("commit for task %d failed: %s", i, exc)
        solved += episode.status is Status.RESOLVED
        r = episode.retrieval
        report.outcomes.append(
            TaskOutcome(
                i,
                task.family,
                task.text,
                episode.status,
                providers.ledger.total - before,
                len(r.sketched),
                len(r.expanded),
                len(r.used_insights),
                len(r.top_m_queries),
                error,
            )
        )
        report.success_series.append(solved / (i + 1))
    report.total_tokens = providers.ledger.total - start
    return report


def report_to_csv(report: RunReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for o, rate in zip(report.outcomes, report.success_series):
        writer.writerow([o.task_index, o.family, o.status.value, o.tokens, f"{rate:.4f}"])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict[str, Any]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return [
        {
            "task_index": int(r["task_index"]),
            "family": r["family"],
            "status": Status.parse(r["status"]),
            "tokens": int(r["tokens"]),
            "cumulative_success_rate": float(r["cumulative_success_rate"]),
        }
        for r in rows
    ]
