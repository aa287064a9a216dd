import random

import pytest

from erset.gateway import (
    RETRY_REMINDER,
    DuplicateMember,
    HttpProvider,
    LlmGateway,
    MalformedResponse,
    MissingMember,
    OracleConfig,
    ProviderConfig,
    ProviderUnavailable,
    SimulatedOracle,
    UncoveredRecord,
    UnknownLabel,
    build_prompt,
    parse_batch,
    parse_clustering,
)
from erset.model import Attribute, ClusterNode, CostLedger, Record, RecordSet, SetConfig


def _records(n, prefix="r"):
    return {
        f"{prefix}{i}": Record(
            f"{prefix}{i}",
            (Attribute("name", f"name {i}"), Attribute("city", "springfield")),
        )
        for i in range(n)
    }


def _record_set(records, set_id="s0"):
    return RecordSet(
        set_id, tuple(ClusterNode.singleton(rid) for rid in sorted(records))
    )


class TestBuildPrompt:
    def test_nine_labels(self):
        records = _records(9)
        prompt = build_prompt([_record_set(records)], records)
        for i in range(1, 10):
            assert f"R{i} |" in prompt.user_text
        assert "R10" not in prompt.user_text
        assert "SET" not in prompt.user_text
        assert prompt.orders == (tuple(sorted(records)),)

    def test_batch_sections_restart_labels(self):
        records = _records(4)
        s1 = RecordSet("s1", tuple(ClusterNode.singleton(r) for r in ["r0", "r1"]))
        s2 = RecordSet("s2", tuple(ClusterNode.singleton(r) for r in ["r2", "r3"]))
        prompt = build_prompt([s1, s2], records)
        assert "SET 1" in prompt.user_text and "SET 2" in prompt.user_text
        assert prompt.user_text.count("R1 |") == 2
        assert prompt.user_text.count("R2 |") == 2

    def test_missing_value_omitted(self):
        records = {
            "r0": Record("r0", (Attribute("name", "ada"), Attribute("city", "")))
        }
        prompt = build_prompt([_record_set(records)], records)
        assert "city" not in prompt.user_text
        assert "R1 | name: ada" in prompt.user_text


class TestParseClustering:
    def test_groups(self):
        rs = _record_set(_records(3))
        c = parse_clustering("R1,R2\nR3", rs)
        assert c.groups == ((0, 1), (2,))
        assert c.source == "s0"

    def test_whitespace_and_case_tolerant(self):
        rs = _record_set(_records(3))
        c = parse_clustering("  r1 , R2 \n\n R3 ", rs)
        assert c.groups == ((0, 1), (2,))

    def test_missing_member(self):
        with pytest.raises(MissingMember, match="R3"):
            parse_clustering("R1,R2", _record_set(_records(3)))

    def test_duplicate_member(self):
        with pytest.raises(DuplicateMember, match="R1"):
            parse_clustering("R1,R1,R2,R3", _record_set(_records(3)))

    def test_unknown_label(self):
        with pytest.raises(UnknownLabel, match="R9"):
            parse_clustering("R1,R9\nR2,R3", _record_set(_records(3)))

    def test_malformed(self):
        with pytest.raises(MalformedResponse):
            parse_clustering("sure! here are the clusters", _record_set(_records(2)))
        with pytest.raises(MalformedResponse):
            parse_clustering("", _record_set(_records(2)))

    def test_parse_batch_sections(self):
        records = _records(4)
        s1 = RecordSet("s1", tuple(ClusterNode.singleton(r) for r in ["r0", "r1"]))
        s2 = RecordSet("s2", tuple(ClusterNode.singleton(r) for r in ["r2", "r3"]))
        out = parse_batch("SET 1\nR1,R2\nSET 2\nR1\nR2", [s1, s2])
        assert out[0].groups == ((0, 1),)
        assert out[1].groups == ((0,), (1,))
        with pytest.raises(MalformedResponse):
            parse_batch("SET 1\nR1,R2", [s1, s2])


class TestSimulatedOracle:
    def _truth(self, records, k):
        return {rid: f"e{i % k}" for i, rid in enumerate(sorted(records))}

    def test_noiseless_is_truth_restriction(self):
        records = _records(6)
        truth = self._truth(records, 2)
        oracle = SimulatedOracle(OracleConfig(truth, 0.0, 0))
        groups = oracle.clustering_for(_record_set(records))
        got = sorted(tuple(g) for g in groups)
        assert got == [(0, 2, 4), (1, 3, 5)]

    def test_single_entity_single_group(self):
        records = _records(5)
        truth = {rid: "e0" for rid in records}
        oracle = SimulatedOracle(OracleConfig(truth, 0.0, 0))
        assert oracle.clustering_for(_record_set(records)) == [[0, 1, 2, 3, 4]]

    def test_uncovered_record(self):
        records = _records(2)
        oracle = SimulatedOracle(OracleConfig({"r0": "e0"}, 0.0, 0))
        with pytest.raises(UncoveredRecord):
            oracle.clustering_for(_record_set(records))

    def test_full_noise_deterministic_and_matches_replay(self):
        records = _records(6)
        truth = self._truth(records, 2)
        rs = _record_set(records)
        a = SimulatedOracle(OracleConfig(truth, 1.0, 42)).clustering_for(rs)
        b = SimulatedOracle(OracleConfig(truth, 1.0, 42)).clustering_for(rs)
        assert a == b
        # replay the documented noise model directly against the same stream
        oracle = SimulatedOracle(OracleConfig(truth, 1.0, 42))
        rng = random.Random("42:s0")
        groups = [[0, 2, 4], [1, 3, 5]]
        expected = oracle._perturb([list(g) for g in groups], rng)
        again = SimulatedOracle(OracleConfig(truth, 1.0, 42)).clustering_for(rs)
        assert again == expected

    def test_displacement_frequency(self):
        """Over 10^4 sampled members at p=0.2 the displaced fraction is
        0.2 +- 0.01."""
        n_sets, size, p = 2000, 5, 0.2
        displaced = total = 0
        for s in range(n_sets):
            records = _records(size)
            truth = {rid: "e0" for rid in records}
            rs = RecordSet(
                f"set{s}", tuple(ClusterNode.singleton(r) for r in sorted(records))
            )
            oracle = SimulatedOracle(OracleConfig(truth, p, seed=9))
            groups = oracle.clustering_for(rs)
            big = max(groups, key=len)
            displaced += size - len(big)
            total += size
        assert abs(displaced / total - p) <= 0.01

    def test_streams_independent_of_order(self):
        records = _records(8)
        truth = self._truth(records, 3)
        s1 = RecordSet("a", tuple(ClusterNode.singleton(r) for r in sorted(records)[:4]))
        s2 = RecordSet("b", tuple(ClusterNode.singleton(r) for r in sorted(records)[4:]))
        o1 = SimulatedOracle(OracleConfig(truth, 0.7, 5))
        r1 = (o1.clustering_for(s1), o1.clustering_for(s2))
        o2 = SimulatedOracle(OracleConfig(truth, 0.7, 5))
        r2_b = o2.clustering_for(s2)
        r2_a = o2.clustering_for(s1)
        assert r1 == (r2_a, r2_b)


class _GarbageBackend:
    def __init__(self, texts):
        self.texts = list(texts)
        self.prompts = []

    def complete(self, prompt, record_sets):
        self.prompts.append(prompt)
        return self.texts.pop(0), None


class TestGateway:
    def test_oracle_roundtrip_and_ledger(self):
        records = _records(6)
        truth = {rid: f"e{i % 2}" for i, rid in enumerate(sorted(records))}
        ledger = CostLedger()
        gateway = LlmGateway(
            SimulatedOracle(OracleConfig(truth, 0.0, 0)), records, ledger=ledger
        )
        clustering = gateway.cluster_records(_record_set(records))
        assert sorted(clustering.groups) == [(0, 2, 4), (1, 3, 5)]
        assert ledger.api_calls == 1
        assert ledger.tokens_in > 0 and ledger.tokens_out > 0

    def test_retry_appends_reminder_then_fallback(self):
        records = _records(3)
        backend = _GarbageBackend(["nonsense"] * 4)
        gateway = LlmGateway(backend, records, ledger=CostLedger(), max_retries=3)
        clustering = gateway.cluster_records(_record_set(records))
        assert clustering.groups == ((0,), (1,), (2,))
        assert "fallback-singletons" in clustering.flags
        assert gateway.ledger.api_calls == 4
        assert RETRY_REMINDER not in backend.prompts[0].user_text
        assert all(RETRY_REMINDER in p.user_text for p in backend.prompts[1:])

    def test_recovers_after_one_garbage_reply(self):
        records = _records(2)
        backend = _GarbageBackend(["??", "R1\nR2"])
        gateway = LlmGateway(backend, records, ledger=CostLedger())
        clustering = gateway.cluster_records(_record_set(records))
        assert clustering.groups == ((0,), (1,))
        assert clustering.flags == ()
        assert gateway.ledger.api_calls == 2

    def test_batch_size_enforced(self):
        records = _records(4)
        gateway = LlmGateway(
            _GarbageBackend([]), records, config=SetConfig(batch_size=1)
        )
        s1 = RecordSet("s1", (ClusterNode.singleton("r0"),))
        s2 = RecordSet("s2", (ClusterNode.singleton("r1"),))
        with pytest.raises(ValueError):
            gateway.cluster_batch([s1, s2])

    def test_singleton_batch_prompt_identical_to_plain(self):
        records = _records(3)
        rs = _record_set(records)
        assert build_prompt([rs], records) == build_prompt([rs], records)
        prompt = build_prompt([rs], records)
        assert "SET" not in prompt.user_text


class TestHttpProvider:
    def test_provider_unavailable_after_retries(self, monkeypatch):
        import requests as requests_mod

        calls = {"n": 0}

        def boom(*args, **kwargs):
            calls["n"] += 1
            raise requests_mod.ConnectionError("refused")

        monkeypatch.setattr(requests_mod, "post", boom)
        monkeypatch.setattr("erset.gateway.time.sleep", lambda s: None)
        provider = HttpProvider(
            ProviderConfig(
                endpoint="http://localhost:1/v1/chat",
                model="m",
                max_retries=2,
                requests_per_minute=100000,
            )
        )
        records = _records(2)
        prompt = build_prompt([_record_set(records)], records)
        with pytest.raises(ProviderUnavailable):
            provider.complete(prompt, [_record_set(records)])
        assert calls["n"] == 3

    def test_extracts_choice_and_usage(self, monkeypatch):
        import requests as requests_mod

        class FakeResponse:
            status_code = 200

            def raise_for_status(self):
                pass

            def json(self):
                return {
                    "choices": [{"message": {"content": "R1,R2"}}],
                    "usage": {"prompt_tokens": 11, "completion_tokens": 3},
                }

        monkeypatch.setattr(requests_mod, "post", lambda *a, **k: FakeResponse())
        provider = HttpProvider(
            ProviderConfig(
                endpoint="http://x", model="m", requests_per_minute=100000
            )
        )
        records = _records(2)
        rs = _record_set(records)
        text, usage = provider.complete(build_prompt([rs], records), [rs])
        assert text == "R1,R2"
        assert usage == (11, 3)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            ProviderConfig(endpoint="http://x", model="m", temperature=-1)
        with pytest.raises(ValueError):
            ProviderConfig(endpoint="http://x", model="m", max_retries=-1)
