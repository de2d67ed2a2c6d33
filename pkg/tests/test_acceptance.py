"""Acceptance suite: one test per headline criterion.

Each test records a PASS/FAIL line through ``record``; the lines are printed as
they happen and repeated in the terminal summary (see conftest).
"""

import json
import logging
import math
import random
import shutil
import time
from collections import deque

from fastapi.testclient import TestClient

from hiermem import graphs
from hiermem.cli import main
from hiermem.config import load_config
from hiermem.embedding import HashingEmbedder
from hiermem.engine import Engine, run_bench
from hiermem.errors import CorruptStoreError, HierMemError
from hiermem.graphs import MemoryStore, Status, id_key, validate
from hiermem.harness import load_suite, report_to_csv
from hiermem.llm import MockChatProvider, Providers, placeholders, render
from hiermem.prompts import TEMPLATES
from hiermem.retrieval import RetrievalResult, coarse_retrieve, hop_expand, sparsify, upward_traverse
from hiermem.service import create_app
from hiermem.update import EpisodeRecord, TraceEntry, UpdateConfig, commit_episode, link_and_support

from .conftest import FIXTURES, random_interaction, random_store, random_text

logger = logging.getLogger(__name__)

RESULTS: list[str] = []

SUITE = FIXTURES.parents[1] / "bench" / "toy_suite.json"
SCENARIO = FIXTURES / "scenario"
CONFIG = SCENARIO / "hiermem.toml"


def record(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


# -- independent oracles ------------------------------------------------------


def oracle_cosine(a, b):
    dot = math.fsum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(math.fsum(x * x for x in a)) * math.sqrt(math.fsum(y * y for y in b)))


def oracle_top_k(store, qvec, k):
    scored = sorted(
        store.queries,
        key=lambda q: (-round(oracle_cosine(qvec, store.queries[q].embedding), 12), id_key(q)),
    )
    return scored[:k]


def oracle_bfs1(store, seeds):
    out = set(seeds)
    for a, b in store.query_edges:
        if a in seeds:
            out.add(b)
        if b in seeds:
            out.add(a)
    return out


def oracle_upward(store, expanded):
    return {i for i, ins in store.insights.items() if not ins.support.isdisjoint(expanded)}


def is_dag(graph):
    indeg = {u.id: len(u.parents) for u in graph.nodes}
    children = {u.id: [] for u in graph.nodes}
    for u in graph.nodes:
        for p in u.parents:
            if p not in children:
                return False
            children[p].append(u.id)
    queue = deque(i for i, d in indeg.items() if d == 0)
    seen = 0
    while queue:
        n = queue.popleft()
        seen += 1
        for c in children[n]:
            indeg[c] -= 1
            if indeg[c] == 0:
                queue.append(c)
    return seen == len(indeg)


# -- criteria -------------------------------------------------------------------


def test_retrieval_oracle_equivalence():
    rng = random.Random(2024)
    emb = HashingEmbedder(64)
    mismatches = []
    start = time.perf_counter()
    for trial in range(200):
        store = random_store(rng, n_queries=rng.randint(5, 50), edge_p=rng.choice([0.0, 0.03, 0.1, 0.25]))
        query = random_text(rng)
        k = rng.randint(1, 6)
        sketched = coarse_retrieve(store, emb, query, k)
        if sketched != oracle_top_k(store, emb.embed(query).values, k):
            mismatches.append((trial, "coarse"))
        expanded = hop_expand(store, sketched, 1)
        if expanded != oracle_bfs1(store, set(sketched)):
            mismatches.append((trial, "hop"))
        if upward_traverse(store, expanded) != oracle_upward(store, expanded):
            mismatches.append((trial, "upward"))
    elapsed = time.perf_counter() - start
    ok = not mismatches and elapsed < 5.0
    record("retrieval oracle equivalence", ok, f"200 stores, {len(mismatches)} mismatches, {elapsed:.2f}s (< 5s)")
    assert not mismatches, mismatches[:5]
    assert elapsed < 5.0


def _commit_scenario(rng):
    store = random_store(rng, n_queries=rng.randint(2, 20), n_insights=rng.randint(0, 6))
    qs = sorted(store.queries)
    top = rng.sample(qs, rng.randint(0, min(3, len(qs))))
    used = rng.sample(sorted(store.insights), rng.randint(0, len(store.insights)))
    expected_sources = set(top).union(*(store.insights[i].support for i in used)) if used else set(top)
    supports_before = {i: set(x.support) for i, x in store.insights.items()}
    edges_before = set(store.hyper_edges)
    trace = [TraceEntry("a", "solver", 1, "PLAN: x"), TraceEntry("b", "executor", 1, "x", [0])]
    ep = EpisodeRecord(random_text(rng), "x", Status.RESOLVED, trace, 0,
                       RetrievalResult(top_m_queries=top, used_insights=used))
    mock = MockChatProvider([("## Successful trajectorys", "1. keep the order")])
    summary = commit_episode(store, Providers(mock, HashingEmbedder(64)), UpdateConfig(insight_cap=100,
                                                                                       merge_target=10), ep)
    q_new, i_new = summary.query_id, summary.insight_id
    problems = []
    in_edges = {a for a, b in store.query_edges if b == q_new}
    if in_edges != expected_sources:
        problems.append("in-edges")
    for i in used:
        if store.insights[i].support != supports_before[i] | {q_new}:
            problems.append(f"support {i}")
    for i in set(supports_before) - set(used):
        if store.insights[i].support != supports_before[i]:
            problems.append(f"untouched {i}")
    if i_new is None or store.insights[i_new].support != {q_new}:
        problems.append("new insight support")
    if store.hyper_edges - edges_before != {(i, i_new, q_new) for i in used}:
        problems.append("hyper-edges")
    validate(store)
    return problems


def test_commit_structural_postconditions():
    rng = random.Random(7)
    start = time.perf_counter()
    failures = [(n, p) for n in range(50) for p in [_commit_scenario(rng)] if p]
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 2.0
    record("commit structural postconditions", ok, f"50 scenarios, {len(failures)} violations, {elapsed:.2f}s (< 2s)")
    assert not failures, failures[:5]
    assert elapsed < 2.0


def test_sparsifier_containment():
    rng = random.Random(99)
    violations = 0
    for _ in range(1000):
        graph = random_interaction(rng, max_nodes=10)
        real = [u.id for u in graph.nodes]
        lines = []
        for _ in range(rng.randint(0, 8)):
            kind = rng.random()
            if real and kind < 0.4:
                lines.append(rng.choice(real))
            elif kind < 0.6:
                lines.append(f"u{rng.randint(10, 99)}")
            elif real and kind < 0.75:
                u = rng.choice(graph.nodes)
                lines.append(f"{rng.randint(1, 9)}. [{u.role_label}] {u.content}")
            else:
                lines.append(f"{rng.randint(1, 9)}. {random_text(rng)}")
        mock = MockChatProvider([("", "\n".join(lines))])
        out = sparsify(mock, graph, "task").graph
        ids = {u.id for u in out.nodes}
        if not ids <= set(real) or not is_dag(out):
            violations += 1
        try:
            out.validate()
        except HierMemError:
            violations += 1
    record("sparsifier containment", violations == 0, f"1000 fuzz cases, {violations} violations")
    assert violations == 0


def test_determinism_and_idempotence():
    suite = load_suite(SUITE)
    assert len(suite.tasks) == 20
    cfg = load_config(None)
    runs = [run_bench(cfg, suite) for _ in range(2)]
    stores_equal = graphs.dumps(runs[0].store) == graphs.dumps(runs[1].store)
    csv_equal = report_to_csv(runs[0].report) == report_to_csv(runs[1].report)

    store = runs[0].store
    rng = random.Random(5)
    noop = True
    for _ in range(20):
        q = rng.choice(sorted(store.queries))
        used = rng.sample(sorted(store.insights), min(2, len(store.insights)))
        new = rng.choice(sorted(store.insights))
        link_and_support(store, new, used, q)
        once = graphs.dumps(store)
        link_and_support(store, new, used, q)
        noop &= graphs.dumps(store) == once
    ok = stores_equal and csv_equal and noop
    record("determinism and idempotence", ok,
           f"stores identical={stores_equal}, CSV identical={csv_equal}, link_and_support no-op={noop}")
    assert ok


def test_learning_curve():
    suite = load_suite(SUITE)
    cfg = load_config(None)
    start = time.perf_counter()
    on = run_bench(cfg, suite, use_memory=True).report
    off = run_bench(cfg, suite, use_memory=False).report
    elapsed = time.perf_counter() - start
    gap = on.final_success_rate - off.final_success_rate
    ok = gap >= 0.30 and elapsed < 10.0
    record("learning curve", ok,
           f"with memory {on.final_success_rate:.2f}, without {off.final_success_rate:.2f}, "
           f"gap {100 * gap:.0f}pp (>= 30pp), {elapsed:.2f}s (< 10s)")
    assert gap >= 0.30
    assert on.final_success_rate >= 0.80
    assert off.final_success_rate == 0.25
    assert elapsed < 10.0


def test_token_accounting():
    suite = load_suite(SUITE)
    cfg = load_config(None)
    on = run_bench(cfg, suite, use_memory=True)
    off = run_bench(cfg, suite, use_memory=False)
    exact = all(
        r.report.total_tokens == r.ledger.total == sum(c.total for c in r.ledger.log)
        and sum(o.tokens for o in r.report.outcomes) == r.report.total_tokens
        for r in (on, off)
    )
    overhead = on.report.total_tokens - off.report.total_tokens
    logger.info("memory token overhead: %+d tokens", overhead)
    record("token accounting", exact,
           f"report totals equal ledger sums; memory overhead {overhead:+d} tokens "
           f"({on.report.total_tokens} vs {off.report.total_tokens}, x{on.report.total_tokens / off.report.total_tokens:.2f})")
    assert exact


def test_prompt_fidelity():
    bad = []
    for name in sorted(TEMPLATES):
        system, user = render(name, {p: "{" + p + "}" for p in placeholders(name)})
        if system.encode() != (FIXTURES / "prompts" / f"{name}.system.txt").read_bytes():
            bad.append(f"{name}.system")
        if user.encode() != (FIXTURES / "prompts" / f"{name}.user.txt").read_bytes():
            bad.append(f"{name}.user")
    record("prompt fidelity", not bad, f"{len(TEMPLATES)} templates byte-identical, mismatches: {bad or 'none'}")
    assert not bad


def test_persistence(tmp_path):
    rng = random.Random(11)
    mismatches = 0
    for i in range(100):
        store = random_store(rng)
        path = tmp_path / f"s{i}.json"
        graphs.save(store, path)
        loaded = graphs.load(path)
        if loaded != store or graphs.dumps(loaded) != graphs.dumps(store):
            mismatches += 1
    good = graphs.dumps(random_store(rng)).encode()
    corruptions = {
        "empty": b"",
        "truncated": good[: len(good) // 3],
        "garbage": b"\x00\x01not json",
        "bad utf-8": good[:20] + b"\xfe" + good[20:],
        "wrong shape": b"[1, 2, 3]",
        "dangling support": json.dumps({**json.loads(good), "insights": [
            {"id": "i0", "content": "x", "support": ["q999"], "created_seq": 0}]}).encode(),
    }
    crashes = []
    for label, raw in corruptions.items():
        path = tmp_path / "corrupt.json"
        path.write_bytes(raw)
        try:
            graphs.load(path)
            crashes.append(f"{label}: loaded")
        except CorruptStoreError as exc:
            if not str(exc):
                crashes.append(f"{label}: empty diagnostic")
        except Exception as exc:  # anything else is a crash
            crashes.append(f"{label}: {type(exc).__name__}")
    ok = mismatches == 0 and not crashes
    record("persistence", ok, f"100 round trips, {mismatches} mismatches; {len(corruptions)} corrupt files, "
                              f"crashes: {crashes or 'none'}")
    assert ok, crashes


def _episode(i):
    return json.loads((SCENARIO / f"episode_{i}.json").read_text())


def _engine(path, n):
    cfg = load_config(CONFIG)
    cfg.store_path = str(path)
    engine = Engine.open(cfg, create=True)
    for i in range(n):
        engine.commit(EpisodeRecord.from_dict(_episode(i)), persist=False)
    engine.save()
    return engine


def _cli(capsys, *argv):
    code = main(["--config", str(CONFIG), *argv])
    return code, capsys.readouterr().out


def test_interface_parity(tmp_path, capsys):
    roles = [("solver", "solver"), ("critic", "critic"), ("executor", "executor")]
    query = "clean some mug and put it in shelf"
    diffs = []
    for n in (1, 2, 3):
        d = tmp_path / f"s{n}"
        d.mkdir()
        lib = _engine(d / "lib.json", n)
        lib_stats = lib.stats()
        lib_retr = lib.retrieve(query, roles).to_dict()
        if json.loads(_cli(capsys, "--store", str(d / "lib.json"), "stats", "--json")[1]) != lib_stats:
            diffs.append(f"{n}: cli stats")
        out = _cli(capsys, "--store", str(d / "lib.json"), "retrieve", query, "--roles", "solver,critic,executor")[1]
        if json.loads(out) != lib_retr:
            diffs.append(f"{n}: cli retrieve")

        base = _engine(d / "base.json", n - 1)
        shutil.copy(d / "base.json", d / "cli.json")
        expected_summary = base.commit(EpisodeRecord.from_dict(_episode(n - 1))).to_dict()
        out = _cli(capsys, "--store", str(d / "cli.json"), "commit", str(SCENARIO / f"episode_{n - 1}.json"))[1]
        if json.loads(out) != expected_summary or (d / "cli.json").read_bytes() != (d / "base.json").read_bytes():
            diffs.append(f"{n}: cli commit")

        doc = json.loads(SUITE.read_text())
        doc["instances"] = doc["instances"][: 5 * n]
        (d / "suite.json").write_text(json.dumps(doc))
        expected_csv = report_to_csv(run_bench(load_config(CONFIG), load_suite(d / "suite.json")).report)
        if _cli(capsys, "bench", str(d / "suite.json"))[1] != expected_csv:
            diffs.append(f"{n}: cli bench")

        svc = _engine(d / "svc.json", n)
        with TestClient(create_app(svc, persist=False)) as client:
            body = {"query": query, "roles": [{"agent_id": a, "role_label": r} for a, r in roles]}
            if client.post("/retrieve", json=body).json() != lib_retr:
                diffs.append(f"{n}: service retrieve")
        svc = _engine(d / "svc2.json", n - 1)
        with TestClient(create_app(svc, persist=False)) as client:
            if client.post("/episodes", json=_episode(n - 1)).json() != expected_summary:
                diffs.append(f"{n}: service episodes")
        if graphs.dumps(svc.store) != graphs.dumps(base.store):
            diffs.append(f"{n}: service store state")
    record("interface parity", not diffs, f"3 scenarios x 6 surfaces, differences: {diffs or 'none'}")
    assert not diffs
