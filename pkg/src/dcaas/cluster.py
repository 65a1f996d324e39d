"""Builds a simulated deployment: stores, replication, peers and user bases.

:class:`World` is what tests and the experiment harness drive. It also owns
the :class:`Monitor`, which checks the safety properties online while writing
the evidence for the offline checker into the trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

from dcaas.dcp import get_consistency_level
from dcaas.model import (
    ConsistencyLevel,
    DataConsistencyPlan,
    Envelope,
    Read,
    ReplAck,
    ReplicationBatch,
    Reply,
    VersionedValue,
    Write,
)
from dcaas.peer import Lifecycle, Peer, PeerConfig, account_totals, cap_key, read_account
from dcaas.simnet import FaultPlan, Network, NetworkConfig, RunResult, Scheduler, Trace
from dcaas.store import CloudletStore, OutOfOrderBatch, StoreTiming, TxnView


class InvariantViolation(Exception):
    pass


def _stamp(vv: VersionedValue) -> list:
    return [vv.stamp.counter, vv.stamp.instance_id]


class Monitor:
    """Online safety bookkeeping; every observation is also traced."""

    def __init__(self, sim: Scheduler, trace: Trace, strict: bool = False):
        self.sim = sim
        self.trace = trace
        self.strict = strict
        self.capacity_of: dict[tuple[str, int], int] = {}
        self.consumed: dict[tuple[str, int], int] = {}
        self.session_stamps: set[tuple[int, str]] = set()
        self.flushed: set[tuple[int, str]] = set()
        self.last_version: dict[str, int] = {}
        self.violations: list[str] = []
        self.counts: dict[str, int] = {}

    def _violation(self, text: str) -> None:
        self.violations.append(text)
        self.trace.emit(self.sim.now, "violation", detail=text)
        if self.strict:
            raise InvariantViolation(text)

    def admit(self, peer, op, obj, level):
        life = peer.state.lifecycle.value
        self.trace.emit(self.sim.now, "admit", peer=peer.id, op=op, obj=obj, level=level.value, life=life)
        if peer.state.lifecycle is not Lifecycle.READY:
            self._violation(f"{peer.id} served {op} on {obj} while {life}")

    def read(self, peer, obj, level, vv):
        self.trace.emit(self.sim.now, "read", peer=peer.id, obj=obj, level=level.value, stamp=_stamp(vv))
        key = (vv.stamp.counter, vv.stamp.instance_id)
        if key in self.session_stamps and vv.stamp.instance_id != peer.id and key not in self.flushed:
            self._violation(f"{peer.id} read session value {key} of {obj}")

    def session_write(self, peer, obj, stamp):
        self.session_stamps.add((stamp.counter, stamp.instance_id))
        self.trace.emit(self.sim.now, "session_write", peer=peer.id, obj=obj, stamp=[stamp.counter, stamp.instance_id])

    def flush(self, peer, obj, stamp):
        self.flushed.add((stamp.counter, stamp.instance_id))
        self.trace.emit(self.sim.now, "flush", peer=peer.id, obj=obj, stamp=[stamp.counter, stamp.instance_id])

    def store_commit(self, cloudlet, source, writes: dict):
        stamps = [[k, vv.stamp.counter, vv.stamp.instance_id] for k, vv in sorted(writes.items())]
        self.trace.emit(self.sim.now, "commit", cloudlet=cloudlet, src=source, writes=stamps)
        for k, c, i in stamps:
            if (c, i) in self.session_stamps and (c, i) not in self.flushed:
                self._violation(f"session write {(c, i)} reached store {cloudlet} as {k}")

    def consume(self, peer, obj, gen, delta):
        key = (obj, gen)
        self.consumed[key] = self.consumed.get(key, 0) + delta
        self.trace.emit(self.sim.now, "consume", peer=peer.id, obj=obj, gen=gen, delta=delta)
        cap = self.capacity_of.get(key)
        if cap is not None and self.consumed[key] > cap:
            self._violation(f"{obj} gen {gen}: consumed {self.consumed[key]} > capacity {cap}")

    def capacity(self, obj, gen, total=None, delta=None):
        key = (obj, gen)
        if total is not None and key not in self.capacity_of:
            self.capacity_of[key] = total
            self.trace.emit(self.sim.now, "capacity", obj=obj, gen=gen, total=total)
        if delta is not None:
            self.capacity_of[key] = self.capacity_of.get(key, 0) + delta
            self.trace.emit(self.sim.now, "capacity", obj=obj, gen=gen, delta=delta)

    def dcp(self, peer, version):
        last = self.last_version.get(peer.id, 0)
        self.trace.emit(self.sim.now, "dcp", peer=peer.id, version=version)
        if version < last:
            self._violation(f"{peer.id} DCP version went from {last} to {version}")
        self.last_version[peer.id] = max(last, version)

    def event(self, peer, kind, **fields):
        self.counts[kind] = self.counts.get(kind, 0) + 1
        self.trace.emit(self.sim.now, kind, peer=peer.id, **fields)


class Replicator:
    """Ships a store's dirty records to the other stores every period.

    The timer is armed only while there is unsent or unacknowledged data, so
    a quiet deployment reaches an empty event queue.
    """

    is_user = False

    def __init__(self, store: CloudletStore, net: Network, rto_ms: float = 5_000.0):
        self.store = store
        self.net = net
        self.sim = net.sim
        self.node_id = store.node_id
        self.cloudlet = store.cloudlet
        self.rto_ms = rto_ms
        self.others: list[str] = []
        self.pending: dict[tuple[str, int], tuple[ReplicationBatch, float]] = {}
        self._armed = False

    def kick(self) -> None:
        if self._armed:
            return
        self._armed = True
        last = self.store.last_emit
        period = self.store.replication_period_ms
        due = self.sim.now if last is None else max(self.sim.now, last + period)
        self.sim.at(due, self._tick)

    def _tick(self) -> None:
        self._armed = False
        now = self.sim.now
        batch = self.store.emit_replication_batch(now)
        if batch is not None:
            for dst in self.others:
                self.pending[(dst, batch.seq)] = (batch, now)
                self.net.send(self.node_id, dst, batch)
        for (dst, seq), (b, sent) in sorted(self.pending.items()):
            if now - sent >= self.rto_ms:
                self.pending[(dst, seq)] = (b, now)
                self.net.send(self.node_id, dst, b)
        if self.store.dirty:
            self.kick()
        elif self.pending:
            self._armed = True
            self.sim.after(self.rto_ms, self._tick)

    def deliver(self, env: Envelope) -> None:
        msg = env.payload
        if isinstance(msg, ReplicationBatch):
            try:
                self.store.apply_replication_batch(msg)
            except OutOfOrderBatch:
                pass
            upto = self.store.applied_seq.get(msg.source, 0)
            if upto:
                self.net.send(self.node_id, env.src, ReplAck(msg.source, upto))
        elif isinstance(msg, ReplAck):
            for key in [k for k in self.pending if k[0] == env.src and k[1] <= msg.seq]:
                del self.pending[key]
            outstanding = {s for _, s in self.pending}
            done = [s for s in self.store.outbox if s not in outstanding]
            if done:
                self.store.acknowledge(max(done) if not outstanding else min(outstanding) - 1)


@dataclass
class UserRequest:
    req_id: str
    at: float
    obj: str
    value: Any = 1
    mode: str = "add"
    read: bool = True
    borrow: bool = False
    target: Optional[str] = None


@dataclass
class Completed:
    req_id: str
    sent: float
    done: float
    status: str  # ok | rejected | timeout
    reasons: tuple = ()
    borrow: bool = False

    @property
    def latency(self) -> float:
        return self.done - self.sent


class UserBase:
    """A SaaS front end that issues a read and a write per request."""

    is_user = True

    def __init__(self, name: str, cloudlet: str, world: World, timeout_ms: float = 30_000.0):
        self.node_id = f"user:{name}"
        self.name = name
        self.cloudlet = cloudlet
        self.world = world
        self.timeout_ms = timeout_ms
        self.pending: dict[str, dict] = {}
        self.completed: list[Completed] = []
        self.replies: dict[str, Reply] = {}
        self._rr = 0

    def targets(self) -> list[str]:
        return sorted(p.id for p in self.world.peers.values() if p.cloudlet == self.cloudlet)

    def schedule(self, requests) -> None:
        for r in requests:
            self.world.sim.at(r.at, self.issue, r)

    def issue(self, r: UserRequest) -> None:
        sim = self.world.sim
        target = r.target
        if target is None:
            choices = self.targets()
            target = choices[self._rr % len(choices)]
            self._rr += 1
        parts = {}
        if r.read:
            parts[f"{r.req_id}:r"] = None
            self.world.net.send(self.node_id, target, Read(r.obj, f"{r.req_id}:r"))
        parts[f"{r.req_id}:w"] = None
        self.world.net.send(self.node_id, target, Write(r.obj, r.value, r.mode, f"{r.req_id}:w"))
        self.pending[r.req_id] = {"sent": sim.now, "parts": parts, "borrow": r.borrow}
        sim.after(self.timeout_ms, self._timeout, r.req_id)

    def send(self, target: str, msg) -> None:
        """Issue an arbitrary API call; its Reply lands in :attr:`replies`."""
        self.world.net.send(self.node_id, target, msg)

    def deliver(self, env: Envelope) -> None:
        msg = env.payload
        if not isinstance(msg, Reply):
            return
        self.replies[msg.req_id] = msg
        rid, _, _ = msg.req_id.rpartition(":")
        p = self.pending.get(rid)
        if p is None or msg.req_id not in p["parts"]:
            return
        p["parts"][msg.req_id] = msg
        if all(v is not None for v in p["parts"].values()):
            del self.pending[rid]
            reasons = tuple(v.reason for v in p["parts"].values() if v.status != "Committed")
            status = "ok" if not reasons else "rejected"
            self.completed.append(Completed(rid, p["sent"], self.world.sim.now, status, reasons, p["borrow"]))

    def _timeout(self, rid: str) -> None:
        p = self.pending.pop(rid, None)
        if p is not None:
            self.completed.append(Completed(rid, p["sent"], self.world.sim.now, "timeout", (), p["borrow"]))


@dataclass
class ClusterSpec:
    cloudlets: dict[str, list[str]]
    plan: DataConsistencyPlan
    network: NetworkConfig = field(default_factory=NetworkConfig)
    seed: int = 0
    peer_config: PeerConfig = field(default_factory=PeerConfig)
    service_ms: float = 25.0
    replication_period_ms: float = 60_000.0
    faults: Optional[FaultPlan] = None
    trace: bool = True
    strict: bool = False


class World:
    def __init__(self, spec: ClusterSpec):
        self.spec = spec
        self.sim = Scheduler()
        self.trace = Trace(enabled=spec.trace)
        self.net = Network(self.sim, spec.network, spec.seed, spec.faults, self.trace)
        self.monitor = Monitor(self.sim, self.trace, spec.strict)
        for p in spec.plan.strong_objects():
            empty = [cl for cl in p.quota_plan if not spec.cloudlets.get(cl)]
            if empty:
                raise ValueError(f"quota plan of {p.object_ref} names cloudlets without instances: {empty}")
        self.stores: dict[str, CloudletStore] = {}
        self.replicators: dict[str, Replicator] = {}
        self.peers: dict[str, Peer] = {}
        self.users: dict[str, UserBase] = {}
        peer_map = {i: cl for cl, ids in sorted(spec.cloudlets.items()) for i in ids}
        self.peer_map = peer_map
        intra = spec.network.intra
        for cl in sorted(spec.cloudlets):
            timing = StoreTiming(spec.service_ms, lambda: 2 * intra.sample(self.net.rng))
            store = CloudletStore(cl, self.sim, timing, self.trace, spec.replication_period_ms)
            store.peer_down = lambda peer: not self.net.alive(peer)
            rep = Replicator(store, self.net)
            store.on_commit = self._commit_hook(store, rep)
            self.stores[cl] = store
            self.replicators[cl] = rep
            self.net.register(rep)
        for rep in self.replicators.values():
            rep.others = sorted(r.node_id for r in self.replicators.values() if r is not rep)
        for inst, cl in sorted(peer_map.items()):
            peer = Peer(
                inst,
                cl,
                net=self.net,
                store=self.stores[cl],
                config=spec.peer_config,
                monitor=self.monitor,
                seed=spec.seed,
                seed_peers=peer_map,
                service_ms=spec.service_ms,
            )
            self.peers[inst] = peer
            self.net.register(peer)

    def _commit_hook(self, store: CloudletStore, rep: Replicator):
        def hook(source: str, writes: dict) -> None:
            self.monitor.store_commit(store.cloudlet, source, writes)
            if store.dirty:
                rep.kick()

        return hook

    # -- setup ------------------------------------------------------------------

    def configure(self, automated: bool = False) -> None:
        """Load the plan and peer list everywhere and bring peers to Ready."""
        plan = self.spec.plan
        self.trace.emit(self.sim.now, "config", version=plan.version, peers=sorted(self.peer_map))
        for p in plan.strong_objects():
            self.monitor.capacity(p.object_ref, plan.generation(p.object_ref), total=p.capacity)
        if automated:
            first = sorted(self.peers)[0]
            self.peers[first].configure(plan, self.peer_map, push=True)
        else:
            for inst in sorted(self.peers):
                self.peers[inst].configure(plan, self.peer_map)
        self.net.install_faults()

    def user(self, name: str, cloudlet: str, timeout_ms: float = 30_000.0) -> UserBase:
        ub = UserBase(name, cloudlet, self, timeout_ms)
        self.users[name] = ub
        self.net.register(ub)
        return ub

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> RunResult:
        res = self.sim.run(until=until, max_events=max_events)
        self.trace.emit(self.sim.now, "run_end", events=res.events, livelock=res.livelock)
        return res

    def settle(self, horizon_ms: float = 3_600_000.0, max_events: int = 5_000_000) -> RunResult:
        """Run to quiescence, bounded by ``horizon_ms`` past the current time."""
        return self.run(until=self.sim.now + horizon_ms, max_events=max_events)

    # -- inspection -------------------------------------------------------------

    def peer(self, inst: str) -> Peer:
        return self.peers[inst]

    def ready_peers(self) -> list[Peer]:
        return [p for _, p in sorted(self.peers.items()) if p.state.lifecycle is Lifecycle.READY]

    def leaders(self) -> list[str]:
        return sorted(p.id for p in self.ready_peers() if p.state.leader == p.id)

    def account(self, obj: str, gen: int, inst: str) -> Optional[dict]:
        store = self.stores[self.peer_map[inst]]
        view = TxnView(store)
        return read_account(view, f"~quota/{obj}/{gen}/{inst}")

    def quota_totals(self, obj: str, gen: int) -> dict:
        r = h = c = 0
        caps = {}
        for cl, store in sorted(self.stores.items()):
            view = TxnView(store)
            rr, hh, cc = account_totals(view, obj, gen)
            r, h, c = r + rr, h + hh, c + cc
            if cap_key(obj, gen) in store.records:
                caps[cl] = int(store.value(cap_key(obj, gen)))
        return {"r": r, "h": h, "c": c, "caps": caps}

    def common_plan(self) -> Optional[DataConsistencyPlan]:
        plans = [p.state.dcp for p in self.ready_peers()]
        if not plans or any(pl != plans[0] for pl in plans[1:]):
            return None
        return plans[0]

    def conservation_issues(self) -> list[str]:
        """Σ(r + h + c) over every store must equal the declared capacity."""
        plan = self.common_plan()
        if plan is None:
            return ["peers disagree on the DCP"]
        issues = []
        for p in plan.strong_objects():
            gen = plan.generation(p.object_ref)
            cap = self.monitor.capacity_of.get((p.object_ref, gen))
            t = self.quota_totals(p.object_ref, gen)
            if cap is None:
                issues.append(f"{p.object_ref} gen {gen}: capacity never declared")
            elif t["h"] or t["r"] + t["c"] != cap:
                issues.append(f"{p.object_ref} gen {gen}: r={t['r']} h={t['h']} c={t['c']} capacity={cap}")
        return issues

    def replicated_state(self) -> dict[str, dict[str, VersionedValue]]:
        return {cl: s.snapshot(replicated_only=True) for cl, s in sorted(self.stores.items())}

    def converged(self) -> bool:
        snaps = list(self.replicated_state().values())
        return all(s == snaps[0] for s in snaps[1:])

    def eventual_values(self) -> dict[str, dict[str, Any]]:
        plan = self.common_plan() or self.spec.plan
        out = {}
        for cl, snap in self.replicated_state().items():
            out[cl] = {
                k: vv.value
                for k, vv in snap.items()
                if "#" not in k and get_consistency_level(plan, k) is ConsistencyLevel.EVENTUAL
            }
        return out

    def wan_request_messages(self) -> int:
        return self.net.wan_messages(exclude_ops=("ReplicationBatch", "ReplAck"))

    def link_counts(self) -> dict[str, int]:
        return {link.value: n for link, n in self.net.sent.items()}

