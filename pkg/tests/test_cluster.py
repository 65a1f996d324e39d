import pytest

from dcaas.cluster import ClusterSpec, InvariantViolation, UserRequest, World
from dcaas.model import LoadDCP, Write
from dcaas.peer import acct_key, write_account
from helpers import FIXED, E, Caller, level, plan, residual, strong, world


class TestSpec:
    def test_quota_on_empty_cloudlet(self):
        with pytest.raises(ValueError):
            World(ClusterSpec({"1": ["a0"], "2": []}, plan(strong("F", {"1": 1, "2": 1}))))

    def test_automated_configure(self):
        w = world({"1": ["a0", "a1"], "2": ["b0"]}, plan(strong("F", {"1": 4, "2": 6})), configure=False)
        w.configure(automated=True)
        w.settle()
        assert len(w.ready_peers()) == 3
        assert w.common_plan() == w.spec.plan
        assert (residual(w, "F", "a0"), residual(w, "F", "a1"), residual(w, "F", "b0")) == (2, 2, 6)
        assert w.conservation_issues() == []


class TestUsers:
    def test_request_pairs_read_and_write(self):
        w = world({"1": ["a0", "a1"], "2": ["b0"]}, plan(strong("F", {"1": 10, "2": 10}), level("x", E)))
        u = w.user("u", "1")
        u.schedule([UserRequest(f"r{i}", 1_000.0 + i, "F") for i in range(4)])
        w.settle()
        assert [c.status for c in u.completed] == ["ok"] * 4
        # round robin over the cloudlet's instances
        assert residual(w, "F", "a0") == residual(w, "F", "a1") == 3
        assert all(c.latency > 0 for c in u.completed)

    def test_rejection_reasons(self):
        w = world({"1": ["a0"], "2": ["b0"]}, plan(strong("F", {"1": 1, "2": 0})))
        u = w.user("u", "1")
        u.schedule([UserRequest("r0", 1_000.0, "F", 5)])
        w.settle()
        assert [(c.status, c.reasons) for c in u.completed] == [("rejected", ("QuotaExhausted",))]

    def test_timeout_when_target_down(self):
        w = world({"1": ["a0"], "2": ["b0"]}, plan(level("x", E)))
        u = w.user("u", "1", timeout_ms=5_000.0)
        w.net.crash("a0")
        u.schedule([UserRequest("r0", w.sim.now + 10.0, "x")])
        w.settle()
        assert [c.status for c in u.completed] == ["timeout"]
        assert u.completed[0].latency == 5_000.0


class TestReplication:
    def test_eventual_values_converge(self):
        w = world({"1": ["a0"], "2": ["b0"]}, plan(level("x", E), level("y", E)), replication_period_ms=1_000.0)
        Caller(w, "1").call("a0", Write, "x", 3)
        Caller(w, "2", "v").call("b0", Write, "y", 4)
        Caller(w, "2", "v").call("b0", Write, "x", 9)
        assert w.converged()
        assert w.eventual_values() == {"1": {"x": 9, "y": 4}, "2": {"x": 9, "y": 4}}

    def test_replication_is_not_request_traffic(self):
        w = world({"1": ["a0"], "2": ["b0"]}, plan(level("x", E)), replication_period_ms=1_000.0)
        Caller(w, "1").call("a0", Write, "x", 3)
        assert w.wan_request_messages() == 0
        assert w.link_counts()["InterCloudlet"] > 0


class TestMonitor:
    def test_strict_raises(self):
        w = world({"1": ["a0"]}, plan(strong("F", {"1": 2})), strict=True)
        with pytest.raises(InvariantViolation):
            w.monitor.consume(w.peer("a0"), "F", 1, 3)

    def test_lenient_records(self):
        w = world({"1": ["a0"]}, plan(strong("F", {"1": 2})))
        w.monitor.consume(w.peer("a0"), "F", 1, 3)
        assert len(w.monitor.violations) == 1
        assert any(r["kind"] == "violation" for r in w.trace.records)

    def test_conservation_detects_leak(self):
        w = world({"1": ["a0"]}, plan(strong("F", {"1": 2})))
        acct = w.account("F", 1, "a0")
        acct["r"] += 1
        store = w.stores["1"]
        store.run("a0", lambda v: write_account(v, acct_key("F", 1, "a0"), acct))
        assert w.conservation_issues() == ["F gen 1: r=3 h=0 c=0 capacity=2"]

    def test_disagreeing_plans(self):
        w = world({"1": ["a0"], "2": ["b0"]}, plan(level("x", E)))
        w.peer("b0").state.dcp = plan(level("x", E), version=5)
        assert w.common_plan() is None
        assert w.conservation_issues() == ["peers disagree on the DCP"]


def test_reload_same_plan_is_harmless():
    w = world({"1": ["a0"]}, plan(strong("F", {"1": 2})), network=FIXED)
    w.user("admin", "1").send("a0", LoadDCP(w.spec.plan, "again"))
    w.settle()
    assert [p.id for p in w.ready_peers()] == ["a0"]
    assert residual(w, "F", "a0") == 2
    assert w.conservation_issues() == []
