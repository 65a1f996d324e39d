"""Canned seeded scenarios used by the test suites.

Each builder returns a settled :class:`World`; the callers decide what to
assert. Keeping them here (rather than in test files) lets the acceptance
runner and the unit tests share exactly the same setups.
"""

from __future__ import annotations

import random
from typing import Optional

from dcaas.cluster import ClusterSpec, UserRequest, World
from dcaas.dcp import flight_booking_plan
from dcaas.model import (
    ConsistencyLevel,
    DataConsistencyPlan,
    ModifyConsistencyLevel,
    ObjectAccessPattern,
    StabilizationMethod,
)
from dcaas.peer import PeerConfig
from dcaas.simnet import FaultPlan

IDEMPOTENT_OPS = frozenset({"JoinRequest", "UpdatePeerList", "StabCom", "ReplicationBatch"})


def state_digest(world: World) -> tuple:
    """Structural view of every peer and store, free of ids and timings."""
    peers = {}
    for pid, p in sorted(world.peers.items()):
        st = p.state
        peers[pid] = (
            st.lifecycle.value,
            st.dcp,
            sorted(st.peers.items()),
            sorted(st.known_instances),
            st.needs_reconcile,
            sorted(st.session_cache.items()),
            sorted(st.scoq.items()),
        )
    stores = {cl: sorted(s.snapshot().items()) for cl, s in sorted(world.stores.items())}
    return peers, stores


def idempotence_world(seed: int, duplicate: bool) -> World:
    """Crash, detection, rejoin, a level change and replication, optionally
    with every JoinRequest, UpdatePeerList, StabCom and replication batch
    delivered twice."""
    rng = random.Random(f"{seed}/idem")
    cl = {"1": ["a0", "a1"], "2": [f"b{i}" for i in range(rng.randint(1, 2))]}
    victim = rng.choice(cl["1"])
    t_crash = rng.uniform(2_000.0, 6_000.0)
    faults = FaultPlan(crashes=[(victim, t_crash)], recovers=[(victim, t_crash + rng.uniform(4_000.0, 8_000.0))])
    world = World(ClusterSpec(
        cl,
        flight_booking_plan(),
        seed=seed,
        faults=faults,
        replication_period_ms=5_000.0,
        peer_config=PeerConfig(heartbeat_ms=400.0),
    ))
    if duplicate:
        world.net.duplicate_ops = IDEMPOTENT_OPS
    world.configure()
    user = world.user("u", "1")
    reqs = []
    for i in range(rng.randint(3, 8)):
        obj = rng.choice(["Flight", "Customer", "Hotel"])
        mode = "add" if obj == "Flight" else "assign"
        reqs.append(UserRequest(f"r{i}", rng.uniform(200.0, 8_000.0), obj, rng.randint(1, 30), mode))
    user.schedule(reqs)
    world.run(until=15_000.0)
    admin = world.user("admin", "2")
    admin.send(cl["2"][0], ModifyConsistencyLevel(
        "Customer", ConsistencyLevel.STRONG, StabilizationMethod.MAX, {"1": 5, "2": 7}, "m1"
    ))
    world.settle()
    return world


def recovery_world(seed: int, phase: str, recover: bool = True) -> World:
    """Crash the leader ``a0`` in the middle of a stabilization or a borrow.

    ``a0`` becomes leader by running a level change. In the ``borrow`` phase
    it then writes more than its own quota, and it crashes shortly after its
    k-th borrow request; in the ``stabilization`` phase it crashes shortly
    after sending the StabReq of a second level change.
    """
    if phase not in ("stabilization", "borrow"):
        raise ValueError(f"unknown phase {phase!r}")
    rng = random.Random(f"{seed}/recovery/{phase}")
    cl = {"1": ["a0", "a1"], "2": ["b0"]}
    plan = DataConsistencyPlan.from_patterns([
        ObjectAccessPattern("Flight", ConsistencyLevel.STRONG, StabilizationMethod.EXACT, {"1": 4, "2": 40}),
        ObjectAccessPattern("Seat", ConsistencyLevel.EVENTUAL, StabilizationMethod.THOMAS, {}),
    ])
    world = World(ClusterSpec(cl, plan, seed=seed, replication_period_ms=5_000.0,
                              peer_config=PeerConfig(heartbeat_ms=400.0)))
    world.configure()
    world.settle()
    admin = world.user("admin", "1")
    admin.send("a0", ModifyConsistencyLevel("Seat", ConsistencyLevel.STRONG, StabilizationMethod.MAX, {"1": 6, "2": 6}, "m1"))
    world.settle()
    a0 = world.peer("a0")
    trigger = "StabReq" if phase == "stabilization" else "QBrwReq"
    kth = rng.randint(1, 2) if phase == "borrow" else 1
    seen = {"n": 0}
    delay = rng.uniform(0.0, 700.0)
    original_send = a0.send

    def send(dst, msg):
        env = original_send(dst, msg)
        if msg.op == trigger:
            seen["n"] += 1
            if seen["n"] == kth:
                world.sim.after(delay, world.net.crash, "a0")
        return env

    a0.send = send
    user = world.user("u", "1")
    if phase == "stabilization":
        admin.send("a0", ModifyConsistencyLevel("Hotel", ConsistencyLevel.STRONG, StabilizationMethod.SUM, {"1": 8, "2": 2}, "m2"))
    else:
        t = world.sim.now + 10.0
        user.schedule([UserRequest(f"w{i}", t + 300.0 * i, "Flight", 3, "add", read=False, target="a0") for i in range(4)])
    world.run(until=world.sim.now + 60_000.0)
    a0.send = original_send
    if recover:
        world.net.recover("a0")
    world.settle()
    return world


def convergence_world(seed: int, strong_fraction: Optional[float] = None) -> World:
    """A mixed Strong and Eventual plan under a short burst of writes, settled so
    that every replication batch has drained."""
    from dcaas.harness import ExperimentConfig, WARMUP_MS, build_world, generate_workload

    rng = random.Random(f"{seed}/converge")
    frac = strong_fraction if strong_fraction is not None else rng.choice([0.0, 0.1, 0.5, 1.0])
    cfg = ExperimentConfig(
        seed=seed,
        duration_ms=120_000.0,
        rate_per_hour=7_200.0,
        strong_fraction=frac,
        borrow_fraction=0.5,
        objects_per_pool=3,
        cloudlets={"c1": ["p1", "p2"], "c2": ["p3"]},
        quota_per_cloudlet=50,
        replication_period_ms=10_000.0,
    )
    world = build_world(cfg)
    world.configure()
    user = world.user("u1", "c1")
    user.schedule(generate_workload(cfg, start_ms=WARMUP_MS))
    world.settle()
    return world
