import json

import pytest

from hiermem.embedding import HashingEmbedder
from hiermem.errors import ConfigurationError, InvariantError, TransportError
from hiermem.graphs import MemoryStore, Status, validate
from hiermem.harness import (
    CSV_HEADER,
    AgentSpec,
    MasTopology,
    RunReport,
    TaskOutcome,
    default_suite_dict,
    load_suite,
    parse_report_csv,
    provider_for_suite,
    report_to_csv,
    run_episode,
    run_suite,
    solver_critic_executor,
    suite_from_dict,
)
from hiermem.llm import ChatProvider, MockChatProvider, Providers
from hiermem.retrieval import RetrievalConfig
from hiermem.update import UpdateConfig, build_interaction_graph


@pytest.fixture
def suite():
    return suite_from_dict(default_suite_dict())


def providers_for(suite):
    return Providers(provider_for_suite(suite), HashingEmbedder(64))


class TestTopology:
    def test_chain_order(self):
        topo = solver_critic_executor()
        assert [a.agent_id for a in topo.order()] == ["solver", "critic", "executor"]
        assert topo.in_neighbors("executor") == ["critic"]

    def test_ties_keep_declaration_order(self):
        topo = MasTopology([AgentSpec("b", "r"), AgentSpec("a", "r"), AgentSpec("c", "r")], [("a", "c")])
        assert [a.agent_id for a in topo.order()] == ["b", "a", "c"]

    def test_cycle_rejected(self):
        with pytest.raises(InvariantError):
            MasTopology([AgentSpec("a", "r"), AgentSpec("b", "r")], [("a", "b"), ("b", "a")])

    @pytest.mark.parametrize(
        "kwargs",
        [{"epochs": 0}, {"aggregator": "vote"}, {"edges": [("a", "zz")]}],
    )
    def test_bad_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            MasTopology([AgentSpec("a", "r")], **kwargs)

    def test_role_required(self):
        with pytest.raises(ConfigurationError):
            AgentSpec("a", "")


class TestSuite:
    def test_default_is_round_robin(self, suite):
        assert len(suite.tasks) == 20
        fams = [t.family for t in suite.tasks]
        assert fams[:5] == fams[5:10] == fams[15:20]
        assert len(set(fams[:5])) == 5
        assert [t.discoverable for t in suite.tasks] == [True] * 5 + [False] * 15

    def test_bundled_file_matches_generator(self):
        from pathlib import Path

        path = Path(__file__).resolve().parents[1] / "bench" / "toy_suite.json"
        assert json.loads(path.read_text()) == default_suite_dict()
        assert [t.text for t in load_suite(path).tasks] == [
            t.text for t in suite_from_dict(default_suite_dict()).tasks
        ]

    def test_predicate_is_exact(self, suite):
        t = suite.tasks[0]
        assert t.success_predicate(t.solution)
        assert t.success_predicate(f"  {t.solution}\n")
        assert not t.success_predicate(t.solution + ";")

    def test_unknown_family(self):
        doc = default_suite_dict()
        doc["instances"].append({"family": "nope", "params": {}})
        with pytest.raises(ConfigurationError):
            suite_from_dict(doc)

    def test_missing_param(self):
        doc = default_suite_dict()
        doc["instances"] = [{"family": "clean-then-place", "params": {"obj": "x"}}]
        with pytest.raises(ConfigurationError, match="dest"):
            suite_from_dict(doc)


class TestEpisode:
    def test_one_epoch_shape(self, suite):
        ep = run_episode(solver_critic_executor(1), MemoryStore(64), providers_for(suite), RetrievalConfig(),
                         suite.tasks[0])
        g = build_interaction_graph(ep.trace)
        assert len(g) == 3 and g.edge_count == 2
        assert ep.status is Status.RESOLVED

    def test_two_epochs_shape(self, suite):
        ep = run_episode(solver_critic_executor(2), MemoryStore(64), providers_for(suite), RetrievalConfig(),
                         suite.tasks[0])
        g = build_interaction_graph(ep.trace)
        # epoch 1: 2 edges; epoch 2: 2 in-topology edges plus 3 self-continuation edges
        assert len(g) == 6 and g.edge_count == 7
        assert [e.epoch for e in ep.trace] == [1, 1, 1, 2, 2, 2]

    def test_undiscoverable_fails_without_memory(self, suite):
        task = suite.tasks[5]
        assert not task.discoverable
        ep = run_episode(solver_critic_executor(), MemoryStore(64), providers_for(suite), RetrievalConfig(), task)
        assert ep.status is Status.FAILED
        assert ep.final_answer != task.solution

    def test_memory_of_same_family_makes_it_solvable(self, suite):
        store = MemoryStore(64)
        providers = providers_for(suite)
        run_suite(solver_critic_executor(), store, providers, RetrievalConfig(), UpdateConfig(), suite.tasks[:1])
        ep = run_episode(solver_critic_executor(), store, providers, RetrievalConfig(), suite.tasks[5])
        assert ep.retrieval.top_m_queries == ["q0"]
        assert ep.status is Status.RESOLVED

    def test_provider_failure_marks_failed(self, suite):
        class Down(ChatProvider):
            def complete(self, system_text, user_text):
                raise TransportError("down")

        ep = run_episode(solver_critic_executor(), MemoryStore(64), Providers(Down(), HashingEmbedder(64)),
                         RetrievalConfig(), suite.tasks[0])
        assert ep.status is Status.FAILED
        assert "down" in ep.error

    def test_majority_aggregator(self, suite):
        agents = [AgentSpec(f"x{i}", "executor") for i in range(3)]
        replies = iter(["b", "a", "a"])
        mock = MockChatProvider([("", lambda s, u: next(replies))])
        ep = run_episode(MasTopology(agents, aggregator="majority"), MemoryStore(64),
                         Providers(mock, HashingEmbedder(64)), RetrievalConfig(), suite.tasks[0], use_memory=False)
        assert ep.final_answer == "a"


class TestRunSuite:
    def test_empty_script_fails_everything(self):
        doc = default_suite_dict()
        doc["scripts"] = {"kind": "rules", "rules": []}
        suite = suite_from_dict(doc)
        store = MemoryStore(64)
        report = run_suite(solver_critic_executor(), store, providers_for(suite), RetrievalConfig(), UpdateConfig(),
                           suite.tasks)
        assert [o.status for o in report.outcomes] == [Status.FAILED] * 20
        assert report.final_success_rate == 0.0
        validate(store)

    def test_per_task_tokens_sum_to_total(self, suite):
        providers = providers_for(suite)
        report = run_suite(solver_critic_executor(), MemoryStore(64), providers, RetrievalConfig(), UpdateConfig(),
                           suite.tasks[:8])
        assert sum(o.tokens for o in report.outcomes) == report.total_tokens == providers.ledger.total

    def test_no_tasks(self, suite):
        with pytest.raises(ConfigurationError):
            run_suite(solver_critic_executor(), MemoryStore(64), providers_for(suite), RetrievalConfig(),
                      UpdateConfig(), [])


class TestCsv:
    def test_empty(self):
        assert report_to_csv(RunReport()) == ",".join(CSV_HEADER) + "\n"
        assert parse_report_csv(report_to_csv(RunReport())) == []

    def test_two_rows(self):
        report = RunReport(
            [TaskOutcome(0, "f", "t0", Status.RESOLVED, 10), TaskOutcome(1, "f", "t1", Status.FAILED, 12)],
            [1.0, 0.5],
            22,
        )
        text = report_to_csv(report)
        assert text.splitlines()[1:] == ["0,f,Resolved,10,1.0000", "1,f,Failed,12,0.5000"]
        rows = parse_report_csv(text)
        assert [r["cumulative_success_rate"] for r in rows] == [1.0, 0.5]
        assert rows[1]["status"] is Status.FAILED

    def test_round_trip_of_real_run(self, suite):
        report = run_suite(solver_critic_executor(), MemoryStore(64), providers_for(suite), RetrievalConfig(),
                           UpdateConfig(), suite.tasks[:6])
        rows = parse_report_csv(report_to_csv(report))
        assert [r["status"] for r in rows] == [o.status for o in report.outcomes]
        assert [r["tokens"] for r in rows] == [o.tokens for o in report.outcomes]
        assert [r["cumulative_success_rate"] for r in rows] == [round(x, 4) for x in report.success_series]
