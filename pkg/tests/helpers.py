"""Small builders shared by the protocol-level tests."""

from __future__ import annotations

from dcaas.cluster import ClusterSpec, World
from dcaas.model import ConsistencyLevel, DataConsistencyPlan, ObjectAccessPattern, StabilizationMethod
from dcaas.peer import PeerConfig
from dcaas.simnet import LatencyModel, NetworkConfig

S, E, SE = ConsistencyLevel.STRONG, ConsistencyLevel.EVENTUAL, ConsistencyLevel.SESSION

FIXED = NetworkConfig(LatencyModel(50.0, 0), LatencyModel(50.0, 0), LatencyModel(250.0, 0))


def plan(*patterns, version: int = 1) -> DataConsistencyPlan:
    return DataConsistencyPlan.from_patterns(patterns, version=version)


def strong(obj, quota, method=StabilizationMethod.THOMAS):
    return ObjectAccessPattern(obj, S, method, quota)


def level(obj, lvl, method=StabilizationMethod.THOMAS):
    return ObjectAccessPattern(obj, lvl, method, {})


def world(cloudlets, dcp, seed=0, configure=True, **kw) -> World:
    kw.setdefault("network", FIXED)
    kw.setdefault("replication_period_ms", 3_600_000.0)
    w = World(ClusterSpec(cloudlets, dcp, seed=seed, **kw))
    if configure:
        w.configure()
        w.settle()
    return w


class Caller:
    """Issues API calls from a user base and collects the replies."""

    def __init__(self, w: World, cloudlet: str, name: str = "t"):
        self.w = w
        self.user = w.user(name, cloudlet)
        self.n = 0

    def send(self, target, msg_cls, *args):
        self.n += 1
        rid = f"c{self.n}"
        self.user.send(target, msg_cls(*args, req_id=rid))
        return rid

    def call(self, target, msg_cls, *args):
        rid = self.send(target, msg_cls, *args)
        self.w.settle()
        return self.user.replies[rid]


class Recorder:
    """Wraps ``net.send`` and keeps every (src, dst, payload)."""

    def __init__(self, w: World):
        self.log = []
        orig = w.net.send

        def send(src, dst, payload, *a, **k):
            env = orig(src, dst, payload, *a, **k)
            self.log.append((src, dst, payload))
            return env

        w.net.send = send
        self.w = w

    def ops(self, op):
        return [(s, d, p) for s, d, p in self.log if p.op == op]

    def wan(self, op=None):
        peers = self.w.peer_map
        return [
            (s, d, p)
            for s, d, p in self.log
            if s in peers and d in peers and peers[s] != peers[d] and (op is None or p.op == op)
        ]

    def clear(self):
        self.log.clear()


def residual(w: World, obj: str, inst: str) -> int:
    gen = w.peer(inst).state.dcp.generation(obj)
    a = w.account(obj, gen, inst)
    return a["r"] if a else 0


def consumed(w: World, obj: str) -> int:
    plan_ = w.common_plan()
    return w.quota_totals(obj, plan_.generation(obj))["c"]
