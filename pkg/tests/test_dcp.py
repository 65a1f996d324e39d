import random
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from dcaas.dcp import (
    Candidate,
    DcpChangeRequest,
    DcpSelectionStrategy,
    Directive,
    EmptyCandidates,
    NoOpChange,
    allocate_shares,
    apply_level_change,
    derive_scoq,
    dump_plan,
    get_consistency_level,
    load_plan,
    flight_booking_plan,
    plan_from_dict,
    plan_to_dict,
    select_common_dcp,
)
from dcaas.harness import ExperimentConfig, build_plan
from dcaas.model import (
    LEVEL_RANK,
    ConsistencyLevel,
    CustomMethod,
    DataConsistencyPlan,
    DcpValidationError,
    ObjectAccessPattern,
    StabilizationMethod,
)

S, E, SE = ConsistencyLevel.STRONG, ConsistencyLevel.EVENTUAL, ConsistencyLevel.SESSION
FIXTURES = Path(__file__).resolve().parent.parent / "fixtures" / "dcp"


def strong(obj, quota, method=StabilizationMethod.MAX):
    return ObjectAccessPattern(obj, S, method, quota)


class TestLevels:
    @pytest.mark.parametrize("obj,level", [("Flight", S), ("Customer", E), ("Z", E)])
    def test_flight_booking_plan(self, obj, level):
        assert get_consistency_level(flight_booking_plan(), obj) is level

    def test_custom_default_level(self):
        plan = DataConsistencyPlan(default_level=SE)
        assert get_consistency_level(plan, "anything") is SE


class TestScoq:
    def test_even_split(self):
        plan = DataConsistencyPlan.from_patterns([strong("F", {"2": 200})])
        assert [e.instance_quota for e in (derive_scoq(plan, "2", 2, r)[0] for r in range(2))] == [100, 100]

    def test_single_instance_gets_whole_quota(self):
        entry = derive_scoq(flight_booking_plan(), "1", 1)
        assert [(e.object_ref, e.instance_quota) for e in entry] == [("Flight", 50)]

    def test_remainder_to_first(self):
        plan = DataConsistencyPlan.from_patterns([strong("F", {"1": 7})])
        assert [derive_scoq(plan, "1", 2, r)[0].instance_quota for r in range(2)] == [4, 3]

    def test_only_strong_objects(self):
        assert [e.object_ref for e in derive_scoq(flight_booking_plan(), "2", 3)] == ["Flight"]

    def test_cloudlet_without_quota_gets_zero(self):
        assert derive_scoq(flight_booking_plan(), "9", 1)[0].instance_quota == 0

    @pytest.mark.parametrize("n,rank", [(0, 0), (2, 2), (2, -1)])
    def test_bad_arguments(self, n, rank):
        with pytest.raises(ValueError):
            derive_scoq(flight_booking_plan(), "1", n, rank)

    @given(st.integers(0, 10_000), st.integers(1, 12))
    def test_sum_conservation(self, quota, n):
        plan = DataConsistencyPlan.from_patterns([strong("F", {"1": quota})])
        shares = [derive_scoq(plan, "1", n, r)[0].instance_quota for r in range(n)]
        assert sum(shares) == quota
        assert max(shares) - min(shares) <= quota % n if n > 1 else True

    @given(st.integers(0, 10_000), st.sets(st.text("abcxyz", min_size=1, max_size=3), min_size=1, max_size=6))
    def test_allocate_shares_matches_scoq(self, total, members):
        shares = allocate_shares(total, members)
        assert sum(shares.values()) == total
        plan = DataConsistencyPlan.from_patterns([strong("F", {"1": total})])
        for rank, m in enumerate(sorted(members)):
            assert shares[m] == derive_scoq(plan, "1", len(members), rank)[0].instance_quota

    def test_allocate_over_nobody(self):
        with pytest.raises(ValueError):
            allocate_shares(5, [])


class TestLevelChange:
    @pytest.mark.parametrize(
        "start,target,directive",
        [
            (E, S, Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA),
            (SE, S, Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA),
            (S, E, Directive.STOP_QUOTA_CHECKS),
            (SE, E, Directive.FLUSH_CACHE_TO_STORE),
            (S, SE, Directive.CACHE_ONLY),
            (E, SE, Directive.CACHE_ONLY),
        ],
    )
    def test_directives(self, start, target, directive):
        quota = {"1": 5, "2": 5} if start is S else {}
        plan = DataConsistencyPlan.from_patterns([ObjectAccessPattern("x", start, StabilizationMethod.MAX, quota)])
        new, d = apply_level_change(plan, DcpChangeRequest("x", target, {"1": 3, "2": 4}), {"1", "2"})
        assert d is directive
        assert new.version == plan.version + 1
        assert new.pattern("x").level is target
        if target is S:
            assert dict(new.pattern("x").quota_plan) == {"1": 3, "2": 4}
        else:
            assert not new.pattern("x").quota_plan

    def test_flight_upgrade_from_default(self):
        new, d = apply_level_change(flight_booking_plan(), DcpChangeRequest("Hotel", S, {"1": 5, "2": 5}))
        assert d is Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA
        assert new.generation("Hotel") == 2

    def test_noop(self):
        plan = DataConsistencyPlan((ObjectAccessPattern("x", SE),))
        with pytest.raises(NoOpChange):
            apply_level_change(plan, DcpChangeRequest("x", SE))

    def test_strong_without_quota_rejected(self):
        with pytest.raises(DcpValidationError):
            apply_level_change(flight_booking_plan(), DcpChangeRequest("Hotel", S))

    def test_unknown_cloudlet_rejected(self):
        with pytest.raises(DcpValidationError):
            apply_level_change(flight_booking_plan(), DcpChangeRequest("Hotel", S, {"3": 1}), {"1", "2"})

    def test_method_kept_unless_given(self):
        new, _ = apply_level_change(flight_booking_plan(), DcpChangeRequest("Flight", E))
        assert new.pattern("Flight").method is StabilizationMethod.EXACT
        new, _ = apply_level_change(new, DcpChangeRequest("Flight", SE, method=StabilizationMethod.MIN))
        assert new.pattern("Flight").method is StabilizationMethod.MIN

    def test_versions_strictly_increase(self):
        rng = random.Random(5)
        plan = flight_booking_plan()
        versions = [plan.version]
        for _ in range(200):
            obj = rng.choice(["Flight", "Customer", "Hotel"])
            target = rng.choice([S, E, SE])
            try:
                plan, _ = apply_level_change(plan, DcpChangeRequest(obj, target, {"1": 2, "2": 3}), {"1", "2"})
            except NoOpChange:
                continue
            versions.append(plan.version)
        assert all(a < b for a, b in zip(versions, versions[1:]))
        assert len(versions) > 50


def plan_with(version, **levels):
    pats = []
    for obj, lvl in sorted(levels.items()):
        quota = {"1": version} if lvl is S else {}
        pats.append(ObjectAccessPattern(obj, lvl, StabilizationMethod.THOMAS, quota))
    return DataConsistencyPlan.from_patterns(pats, version=version)


class TestSelection:
    def test_most_recent(self):
        cands = [Candidate(plan_with(v, x=E), {"a": "1"}, f"p{v}") for v in (3, 5, 4)]
        plan, _ = select_common_dcp(cands)
        assert plan.version == 5

    def test_most_recent_tie_broken_by_contributor(self):
        a = Candidate(plan_with(2, x=E), {"a": "1"}, "a")
        b = Candidate(plan_with(2, x=S), {"b": "1"}, "b")
        plan, peers = select_common_dcp([b, a])
        assert plan is b.plan and peers == {"b": "1"}

    @pytest.mark.parametrize(
        "strategy,expected",
        [(DcpSelectionStrategy.MOST_RESTRICTIVE, S), (DcpSelectionStrategy.LEAST_RESTRICTIVE, E)],
    )
    def test_restrictive(self, strategy, expected):
        cands = [Candidate(plan_with(1, x=E), {}, "a"), Candidate(plan_with(2, x=S), {}, "b")]
        plan, _ = select_common_dcp(cands, strategy)
        assert plan.pattern("x").level is expected
        assert plan.version == 3

    @pytest.mark.parametrize("strategy", list(DcpSelectionStrategy))
    def test_single_candidate(self, strategy):
        c = Candidate(plan_with(4, x=S, y=SE), {"a": "1"}, "a")
        plan, peers = select_common_dcp([c], strategy)
        assert plan == c.plan and peers == {"a": "1"}

    def test_empty(self):
        with pytest.raises(EmptyCandidates):
            select_common_dcp([])

    @given(st.lists(st.tuples(st.integers(1, 9), st.sampled_from([S, E, SE]), st.sampled_from([S, E, SE])), min_size=1, max_size=5))
    def test_restrictive_oracle_and_idempotence(self, specs):
        cands = [Candidate(plan_with(v, x=a, y=b), {}, f"p{i}") for i, (v, a, b) in enumerate(specs)]
        for strategy, pick in ((DcpSelectionStrategy.MOST_RESTRICTIVE, max), (DcpSelectionStrategy.LEAST_RESTRICTIVE, min)):
            plan, _ = select_common_dcp(cands, strategy)
            for obj in ("x", "y"):
                want = pick(LEVEL_RANK[c.plan.effective(obj).level] for c in cands)
                assert LEVEL_RANK[plan.effective(obj).level] == want
            again, _ = select_common_dcp([Candidate(plan, {}, "z")], strategy)
            assert again == plan


class TestFiles:
    def test_example_fixture(self):
        assert load_plan(FIXTURES / "example_plan.json") == flight_booking_plan()
        assert (FIXTURES / "example_plan.json").read_text() == dump_plan(flight_booking_plan())

    def test_pool_fixture(self):
        cfg = ExperimentConfig(strong_fraction=0.5, objects_per_pool=2, quota_per_cloudlet=10)
        assert load_plan(FIXTURES / "two_cloudlet_pools.json") == build_plan(cfg)

    def test_round_trip_with_custom_method(self):
        plan = DataConsistencyPlan.from_patterns(
            [ObjectAccessPattern("x", E, CustomMethod("clamp")), strong("y", {"1": 2})], version=7
        )
        assert plan_from_dict(plan_to_dict(plan)) == plan

    def test_defaults_when_fields_missing(self, tmp_path):
        path = tmp_path / "p.json"
        path.write_text('{"patterns": [{"object": "F", "level": "Strong", "quota": {"1": 3}}]}')
        plan = load_plan(path)
        assert plan.version == 1
        assert plan.pattern("F").method is StabilizationMethod.THOMAS
        assert plan.generation("F") == 1
