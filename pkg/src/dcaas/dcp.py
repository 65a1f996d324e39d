"""DCP lifecycle: lookups, quota division, level changes, post-election merge.

Also the on-disk plan format::

    {
      "version": 1,
      "defaults": {"level": "Eventual", "method": "Thomas"},
      "patterns": [
        {"object": "Flight", "level": "Strong", "method": "Exact",
         "quota": {"c1": 50, "c2": 200}}
      ]
    }
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

from dcaas.model import (
    LEVEL_RANK,
    ConsistencyLevel,
    DataConsistencyPlan,
    DcpError,
    Method,
    ObjectAccessPattern,
    ScoqEntry,
    check_dcp,
    method_from_text,
    method_to_text,
)


class NoOpChange(DcpError):
    """The requested level equals the current effective level."""


class Busy(DcpError):
    """Another change to the same object is still in flight."""


class EmptyCandidates(DcpError):
    pass


class Directive(str, enum.Enum):
    FLUSH_CACHE_TO_STORE = "FlushCacheToStore"
    STABILIZE_THEN_DISTRIBUTE_QUOTA = "StabilizeThenDistributeQuota"
    STOP_QUOTA_CHECKS = "StopQuotaChecks"
    CACHE_ONLY = "CacheOnly"


class DcpSelectionStrategy(str, enum.Enum):
    MOST_RECENT = "MostRecent"
    MOST_RESTRICTIVE = "MostRestrictive"
    LEAST_RESTRICTIVE = "LeastRestrictive"


@dataclass(frozen=True)
class DcpChangeRequest:
    object_ref: str
    target_level: ConsistencyLevel
    quota_plan: Optional[Mapping[str, int]] = None
    method: Optional[Method] = None


def get_consistency_level(plan: DataConsistencyPlan, object_ref: str) -> ConsistencyLevel:
    p = plan.pattern(object_ref)
    return p.level if p is not None else plan.default_level


def allocate_shares(total: int, members: Iterable[str]) -> dict[str, int]:
    """Split ``total`` units over ``members``; the remainder goes to the
    lexicographically first member so the shares sum to ``total`` exactly."""
    ordered = sorted(members)
    if not ordered:
        raise ValueError("cannot divide quota over zero instances")
    base, rem = divmod(total, len(ordered))
    shares = {m: base for m in ordered}
    shares[ordered[0]] += rem
    return shares


def derive_scoq(
    plan: DataConsistencyPlan, cloudlet_id: str, instances_in_cloudlet: int, rank: int = 0
) -> list[ScoqEntry]:
    """SCOQ of the instance at lexicographic ``rank`` among the cloudlet's
    ``instances_in_cloudlet`` instances (rank 0 receives any remainder)."""
    if instances_in_cloudlet < 1:
        raise ValueError("a cloudlet needs at least one instance")
    if not 0 <= rank < instances_in_cloudlet:
        raise ValueError(f"rank {rank} outside 0..{instances_in_cloudlet - 1}")
    out = []
    for p in plan.strong_objects():
        quota = p.quota_plan.get(cloudlet_id, 0)
        base, rem = divmod(quota, instances_in_cloudlet)
        out.append(ScoqEntry(p.object_ref, base + (rem if rank == 0 else 0)))
    return out


_DIRECTIVES = {
    (ConsistencyLevel.SESSION, ConsistencyLevel.EVENTUAL): Directive.FLUSH_CACHE_TO_STORE,
    (ConsistencyLevel.SESSION, ConsistencyLevel.STRONG): Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA,
    (ConsistencyLevel.EVENTUAL, ConsistencyLevel.STRONG): Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA,
    (ConsistencyLevel.STRONG, ConsistencyLevel.EVENTUAL): Directive.STOP_QUOTA_CHECKS,
    (ConsistencyLevel.STRONG, ConsistencyLevel.SESSION): Directive.CACHE_ONLY,
    (ConsistencyLevel.EVENTUAL, ConsistencyLevel.SESSION): Directive.CACHE_ONLY,
}


def apply_level_change(
    plan: DataConsistencyPlan,
    req: DcpChangeRequest,
    known_cloudlets: Optional[Iterable[str]] = None,
    registry=None,
) -> tuple[DataConsistencyPlan, Directive]:
    """Return the next plan version and the side effect the leader must run."""
    current = plan.effective(req.object_ref)
    if current.level is req.target_level:
        raise NoOpChange(f"{req.object_ref} is already {req.target_level.value}")
    method = req.method if req.method is not None else current.method
    if req.target_level is ConsistencyLevel.STRONG:
        quota = dict(req.quota_plan if req.quota_plan is not None else current.quota_plan)
    else:
        quota = {}
    pattern = ObjectAccessPattern(req.object_ref, req.target_level, method, quota)
    new_plan = plan.with_pattern(pattern, plan.version + 1)
    if known_cloudlets is not None:
        check_dcp(new_plan, known_cloudlets, registry)
    elif req.target_level is ConsistencyLevel.STRONG and not quota:
        check_dcp(new_plan, set(), registry)
    return new_plan, _DIRECTIVES[(current.level, req.target_level)]


class Candidate(NamedTuple):
    plan: DataConsistencyPlan
    peers: Mapping[str, str]
    contributor: str = ""


def select_common_dcp(
    candidates: Sequence[Candidate | tuple],
    strategy: DcpSelectionStrategy = DcpSelectionStrategy.MOST_RECENT,
) -> tuple[DataConsistencyPlan, dict[str, str]]:
    """Pick the plan and peer list every instance adopts after an election."""
    if not candidates:
        raise EmptyCandidates("no candidate plans")
    cands = [c if isinstance(c, Candidate) else Candidate(*c) for c in candidates]
    newest = max(cands, key=lambda c: (c.plan.version, c.contributor))
    peers = dict(newest.peers)
    if strategy is DcpSelectionStrategy.MOST_RECENT:
        return newest.plan, peers
    if all(c.plan == newest.plan for c in cands):
        return newest.plan, peers

    pick = max if strategy is DcpSelectionStrategy.MOST_RESTRICTIVE else min
    by_recency = sorted(cands, key=lambda c: (c.plan.version, c.contributor), reverse=True)
    objects = sorted({p.object_ref for c in cands for p in c.plan.patterns})
    version = 1 + newest.plan.version
    patterns = []
    generations = {}
    for obj in objects:
        options = [(c.plan.effective(obj), c.plan) for c in by_recency]
        target = pick(LEVEL_RANK[p.level] for p, _ in options)
        # first option at the target rank is the most recent one
        chosen, source = next((p, pl) for p, pl in options if LEVEL_RANK[p.level] == target)
        if source.pattern(obj) is None:
            continue
        patterns.append(chosen)
        if chosen.level is ConsistencyLevel.STRONG:
            generations[obj] = source.generation(obj)
    plan = DataConsistencyPlan(
        tuple(patterns),
        version,
        newest.plan.default_level,
        newest.plan.default_method,
        generations,
    )
    return plan, peers


# ---------------------------------------------------------------------------
# File format


def plan_to_dict(plan: DataConsistencyPlan) -> dict:
    return {
        "version": plan.version,
        "defaults": {"level": plan.default_level.value, "method": method_to_text(plan.default_method)},
        "patterns": [
            {
                "object": p.object_ref,
                "level": p.level.value,
                "method": method_to_text(p.method),
                "quota": dict(sorted(p.quota_plan.items())),
            }
            for p in plan.patterns
        ],
        "generations": dict(sorted(plan.generations.items())),
    }


def plan_from_dict(data: Mapping) -> DataConsistencyPlan:
    defaults = data.get("defaults", {})
    version = int(data.get("version", 1))
    patterns = tuple(
        ObjectAccessPattern(
            p["object"],
            ConsistencyLevel(p["level"]),
            method_from_text(p.get("method", "Thomas")),
            {str(k): int(v) for k, v in p.get("quota", {}).items()},
        )
        for p in data.get("patterns", [])
    )
    gens = {str(k): int(v) for k, v in data.get("generations", {}).items()}
    for p in patterns:
        if p.level is ConsistencyLevel.STRONG:
            gens.setdefault(p.object_ref, version)
    return DataConsistencyPlan(
        patterns,
        version,
        ConsistencyLevel(defaults.get("level", "Eventual")),
        method_from_text(defaults.get("method", "Thomas")),
        gens,
    )


def load_plan(path: str | Path) -> DataConsistencyPlan:
    return plan_from_dict(json.loads(Path(path).read_text()))


def dump_plan(plan: DataConsistencyPlan, path: str | Path | None = None) -> str:
    text = json.dumps(plan_to_dict(plan), indent=2, sort_keys=False) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def flight_booking_plan() -> DataConsistencyPlan:
    """Flight booking plan: eventual customers, strong flights (50 / 200 seats)."""
    from dcaas.model import StabilizationMethod

    return DataConsistencyPlan.from_patterns(
        [
            ObjectAccessPattern("Customer", ConsistencyLevel.EVENTUAL, StabilizationMethod.THOMAS, {}),
            ObjectAccessPattern("Flight", ConsistencyLevel.STRONG, StabilizationMethod.EXACT, {"1": 50, "2": 200}),
        ]
    )

