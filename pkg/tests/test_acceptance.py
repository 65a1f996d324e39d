"""Acceptance suite: one PASS/FAIL line per criterion.

Run it alone with ``pytest tests/test_acceptance.py -v`` or as a script with
``python3 tests/test_acceptance.py``; both print the verdict lines. Each check
returns (ok, detail) so the printed line says what was measured.
"""

from __future__ import annotations

import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))

from dcaas.harness import (
    ExperimentConfig,
    # noqa: E402,
    borrow_rate_configs,
    emit_report,
    fault_fuzz_config,
    run_experiment,
    strong_mix_configs,
)
from dcaas.invariants import check_trace  # noqa: E402
from dcaas.model import StabilizationMethod  # noqa: E402
from dcaas.scenarios import convergence_world, idempotence_world, recovery_world, state_digest  # noqa: E402
from dcaas.stabilizers import stabilize_exact, stabilize_filter, stabilize_thomas  # noqa: E402
from oracles import exact_oracle, filter_oracle, random_histories, random_values, thomas_oracle  # noqa: E402

FUZZ_SEEDS = 1000
SCHEDULES = 100
RECOVERY_SEEDS = 50  # per phase, two phases

_tables: dict[str, list] = {}


def tables():
    """Borrow-rate and strong-mix reports, computed once per session."""
    if not _tables:
        base = ExperimentConfig()
        _tables["t1"] = [run_experiment(c).report for c in borrow_rate_configs(base)]
        _tables["t2"] = [run_experiment(c).report for c in strong_mix_configs(base)]
    return _tables["t1"], _tables["t2"]


def crit1():
    bad = []
    runs = 0
    for seed in range(FUZZ_SEEDS):
        art = run_experiment(fault_fuzz_config(seed), strict=False)
        runs += 1
        if not art.report.safe:
            bad.append(seed)
    return not bad, f"{runs} faulty runs, unsafe seeds: {bad[:10] or 'none'}"


def crit2():
    rng = random.Random(20)
    thomas = sum(
        stabilize_thomas(xs).stamp != thomas_oracle(xs).stamp
        for xs in (random_values(rng, rng.randint(1, 8)) for _ in range(10_000))
    )
    exact = checked = 0
    for _ in range(3_000):
        hs = random_histories(rng)
        (want, order), _ = exact_oracle(hs)
        value, merged = stabilize_exact(hs)
        exact += value != want or merged.records != order
        checked += 1
    filters = 0
    methods = [StabilizationMethod.MIN, StabilizationMethod.MAX, StabilizationMethod.AVG, StabilizationMethod.MEDIAN, StabilizationMethod.SUM]
    for _ in range(5_000):
        xs = [rng.randint(-10**9, 10**9) for _ in range(rng.randint(1, 25))]
        for m in methods:
            filters += stabilize_filter(m, xs) != filter_oracle(m, xs)
    ok = thomas == exact == filters == 0
    return ok, f"mismatches thomas={thomas}/10000 exact={exact}/{checked} filters={filters}/25000"


def crit3():
    diff = [s for s in range(SCHEDULES) if state_digest(idempotence_world(s, False)) != state_digest(idempotence_world(s, True))]
    return not diff, f"{SCHEDULES - len(diff)}/{SCHEDULES} schedules identical under duplication"


def crit4():
    ok = sum(convergence_world(s).converged() for s in range(100))
    return ok == 100, f"{ok}/100 runs converged"


def crit5():
    t1, _ = tables()
    lock, d0, d10, d50 = t1
    ordered = d0.avg_ms < d10.avg_ms < d50.avg_ms < lock.avg_ms
    ratio = lock.avg_ms / d0.avg_ms
    ok = ordered and ratio >= 5 and d0.wan_msgs == 0 and all(r.safe for r in t1)
    means = " / ".join(f"{r.avg_ms:.0f}" for r in t1)
    return ok, f"avg ms locking/0%/10%/50% = {means}, ratio {ratio:.1f}, DCaaS-0% WAN msgs {d0.wan_msgs}"


def crit6():
    t1, t2 = tables()
    means = [r.avg_ms for r in t2]
    ok = all(a < b for a, b in zip(means, means[1:])) and means[0] < t1[1].avg_ms and all(r.safe for r in t2)
    return ok, f"avg ms 0%/10%/50%/100% strong = {' / '.join(f'{m:.0f}' for m in means)} vs DCaaS-0% {t1[1].avg_ms:.0f}"


def _recovery_ok(w) -> bool:
    recs = w.trace.records
    crash_t = next(r["t"] for r in recs if r["kind"] == "crash")
    back_t = next(r["t"] for r in recs if r["kind"] == "recover")
    survivor_elected = any(r["kind"] == "elected" and crash_t < r["t"] < back_t and r["peer"] != "a0" for r in recs)
    peer_lists = {tuple(sorted(p.state.peers.items())) for p in w.ready_peers()}
    return (
        survivor_elected
        and w.common_plan() is not None
        and len(peer_lists) == 1
        and len(w.ready_peers()) == 3
        and not w.conservation_issues()
        and not w.monitor.violations
        and not check_trace(recs)
    )


def crit7():
    bad = [
        (phase, s)
        for phase in ("stabilization", "borrow")
        for s in range(RECOVERY_SEEDS)
        if not _recovery_ok(recovery_world(s, phase))
    ]
    n = 2 * RECOVERY_SEEDS
    return not bad, f"{n - len(bad)}/{n} leader-crash runs recovered, failures: {bad[:5] or 'none'}"


def crit8():
    configs = [fault_fuzz_config(s) for s in range(5)]
    configs += [ExperimentConfig(duration_ms=6 * 3_600_000.0, borrow_fraction=0.3), ExperimentConfig(duration_ms=3_600_000.0, mode="locking")]
    same = 0
    for cfg in configs:
        a, b = run_experiment(cfg, strict=False), run_experiment(cfg, strict=False)
        same += a.trace.dump() == b.trace.dump() and emit_report(a.report, "json") == emit_report(b.report, "json")
    return same == len(configs), f"{same}/{len(configs)} config/seed pairs byte-identical"


CRITERIA = [
    (1, "safety under faults", crit1),
    (2, "stabilizer oracles", crit2),
    (3, "idempotence", crit3),
    (4, "convergence", crit4),
    (5, "borrow-rate ordering", crit5),
    (6, "strong-fraction ordering", crit6),
    (7, "leader-crash recovery", crit7),
    (8, "determinism", crit8),
]


def verdict(n, name, fn) -> tuple[bool, str]:
    ok, detail = fn()
    return ok, f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {name}: {detail}"


@pytest.mark.slow
@pytest.mark.parametrize("n,name,fn", CRITERIA, ids=[f"c{n}" for n, _, _ in CRITERIA])
def test_criterion(n, name, fn, capsys):
    ok, line = verdict(n, name, fn)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


if __name__ == "__main__":
    results = [verdict(*c) for c in CRITERIA]
    for _, line in results:
        print(line)
    sys.exit(0 if all(ok for ok, _ in results) else 1)
