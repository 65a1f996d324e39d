"""Deterministic discrete-event kernel and network model.

A single :class:`Scheduler` drives everything. Nodes (peers, stores, user
bases) register with a :class:`Network`, which samples link latency from the
link class, applies the fault plan and records a trace.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Optional, Protocol

from dcaas.model import Envelope, Message, encode_fields


class LinkClass(str, enum.Enum):
    USER = "UserToCloudlet"
    INTRA = "IntraCloudlet"
    INTER = "InterCloudlet"


@dataclass(frozen=True)
class LatencyModel:
    """One-way latency: ``base_ms`` scaled by a uniform ±``jitter`` factor."""

    base_ms: float
    jitter: float = 0.1

    def sample(self, rng: random.Random) -> float:
        if self.jitter == 0:
            return self.base_ms
        return self.base_ms * (1.0 + rng.uniform(-self.jitter, self.jitter))


@dataclass(frozen=True)
class NetworkConfig:
    user: LatencyModel = LatencyModel(50.0)
    intra: LatencyModel = LatencyModel(50.0)
    # WAN figure of 500 ms read as a round trip
    inter: LatencyModel = LatencyModel(250.0)
    drop_rate: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.inter.base_ms > self.intra.base_ms:
            raise ValueError("inter-cloudlet latency must exceed intra-cloudlet latency")

    def model(self, link: LinkClass) -> LatencyModel:
        return {LinkClass.USER: self.user, LinkClass.INTRA: self.intra, LinkClass.INTER: self.inter}[link]

    def expected(self, link: LinkClass) -> float:
        return self.model(link).base_ms


@dataclass(frozen=True)
class Partition:
    """Cuts every link between ``cloudlets`` and the remaining cloudlets."""

    cloudlets: frozenset
    start: float
    end: float

    def blocks(self, a: str, b: str, t: float) -> bool:
        if not self.start <= t < self.end:
            return False
        return (a in self.cloudlets) != (b in self.cloudlets)


@dataclass
class FaultPlan:
    crashes: list[tuple[str, float]] = field(default_factory=list)
    recovers: list[tuple[str, float]] = field(default_factory=list)
    partitions: list[Partition] = field(default_factory=list)
    drop_rate: dict = field(default_factory=dict)

    def __post_init__(self):
        for node, t_rec in self.recovers:
            prior = [t for n, t in self.crashes if n == node and t < t_rec]
            if not prior:
                raise ValueError(f"recover of {node} at {t_rec} has no earlier crash")

    def to_dict(self) -> dict:
        return {
            "crashes": [[n, t] for n, t in self.crashes],
            "recovers": [[n, t] for n, t in self.recovers],
            "partitions": [[sorted(p.cloudlets), p.start, p.end] for p in self.partitions],
            "drop_rate": {str(getattr(k, "value", k)): v for k, v in sorted(self.drop_rate.items(), key=lambda kv: str(kv[0]))},
        }

    @classmethod
    def from_dict(cls, d: dict) -> FaultPlan:
        return cls(
            [(n, float(t)) for n, t in d.get("crashes", [])],
            [(n, float(t)) for n, t in d.get("recovers", [])],
            [Partition(frozenset(c), float(s), float(e)) for c, s, e in d.get("partitions", [])],
            {LinkClass(k): float(v) for k, v in d.get("drop_rate", {}).items()},
        )


class Livelock(Exception):
    """Raised only on request; normally reported through RunResult."""


@dataclass
class RunResult:
    final_time: float
    events: int
    livelock: bool


class Scheduler:
    """Event queue ordered by (time, insertion sequence).

    Events marked ``background`` (heartbeats, periodic probes) do not keep the
    simulation alive on their own.
    """

    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = 0
        self._foreground = 0
        self.processed = 0

    def at(self, time: float, fn: Callable, *args, background: bool = False) -> None:
        if time < self.now:
            raise ValueError(f"cannot schedule in the past ({time} < {self.now})")
        self._seq += 1
        heapq.heappush(self._queue, (time, self._seq, background, fn, args))
        if not background:
            self._foreground += 1

    def after(self, delay: float, fn: Callable, *args, background: bool = False) -> None:
        self.at(self.now + max(0.0, delay), fn, *args, background=background)

    def pending(self) -> int:
        return self._foreground

    def step(self) -> bool:
        if not self._queue:
            return False
        time, _, background, fn, args = heapq.heappop(self._queue)
        if not background:
            self._foreground -= 1
        self.now = time
        self.processed += 1
        fn(*args)
        return True

    def run(self, until: Optional[float] = None, max_events: Optional[int] = None) -> RunResult:
        """Process events until none (foreground) remain or the horizon is hit."""
        count = 0
        while self._queue and self._foreground > 0:
            if until is not None and self._queue[0][0] > until:
                self.now = max(self.now, until)
                return RunResult(self.now, count, True)
            if max_events is not None and count >= max_events:
                return RunResult(self.now, count, True)
            self.step()
            count += 1
        return RunResult(self.now, count, False)


class Node(Protocol):
    node_id: str
    cloudlet: str

    def deliver(self, env: Envelope) -> None: ...


class Trace:
    """Append-only structured event log; one JSON object per line."""

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self.records: list[dict] = []

    def emit(self, t: float, kind: str, **fields: Any) -> None:
        if self.enabled:
            rec = {"t": round(t, 6), "kind": kind}
            rec.update(fields)
            self.records.append(rec)

    def lines(self) -> Iterable[str]:
        for rec in self.records:
            yield json.dumps(rec, sort_keys=True, separators=(",", ":"))

    def dump(self) -> str:
        return "".join(line + "\n" for line in self.lines())

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.lines():
                fh.write(line + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]


def payload_digest(msg: Message) -> str:
    raw = json.dumps(encode_fields(msg), sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.blake2b(raw.encode(), digest_size=6).hexdigest()


class Network:
    """Routes envelopes between registered nodes through the latency model."""

    def __init__(
        self,
        sim: Scheduler,
        config: NetworkConfig = NetworkConfig(),
        seed: int = 0,
        faults: Optional[FaultPlan] = None,
        trace: Optional[Trace] = None,
    ):
        self.sim = sim
        self.config = config
        self.rng = random.Random(f"{seed}/net")
        self.faults = faults or FaultPlan()
        self.trace = trace if trace is not None else Trace()
        self.nodes: dict[str, Node] = {}
        self.crashed: set[str] = set()
        self._next_id = 0
        self.sent = {link: 0 for link in LinkClass}
        self.sent_by_op: dict[tuple[LinkClass, str], int] = {}
        self.dropped = 0
        # ops delivered twice back to back; used by idempotence tests
        self.duplicate_ops: frozenset = frozenset()

    def register(self, node: Node) -> None:
        self.nodes[node.node_id] = node

    def install_faults(self) -> None:
        """Schedule crash and recover events from the fault plan."""
        for node, t in sorted(self.faults.crashes, key=lambda x: (x[1], x[0])):
            self.sim.at(t, self.crash, node)
        for node, t in sorted(self.faults.recovers, key=lambda x: (x[1], x[0])):
            self.sim.at(t, self.recover, node)

    def crash(self, node_id: str) -> None:
        if node_id in self.crashed:
            return
        self.crashed.add(node_id)
        self.trace.emit(self.sim.now, "crash", node=node_id)
        node = self.nodes.get(node_id)
        if node is not None and hasattr(node, "on_crash"):
            node.on_crash()

    def recover(self, node_id: str) -> None:
        if node_id not in self.crashed:
            return
        self.crashed.discard(node_id)
        self.trace.emit(self.sim.now, "recover", node=node_id)
        node = self.nodes.get(node_id)
        if node is not None and hasattr(node, "on_recover"):
            node.on_recover()

    def alive(self, node_id: str) -> bool:
        return node_id not in self.crashed

    def cloudlet_of(self, node_id: str) -> str:
        return self.nodes[node_id].cloudlet

    def link_class(self, src: str, dst: str) -> LinkClass:
        a, b = self.nodes[src], self.nodes[dst]
        if getattr(a, "is_user", False) or getattr(b, "is_user", False):
            return LinkClass.USER
        return LinkClass.INTRA if a.cloudlet == b.cloudlet else LinkClass.INTER

    def partitioned(self, src: str, dst: str, t: float) -> bool:
        if not self.faults.partitions:
            return False
        a, b = self.nodes[src], self.nodes[dst]
        if getattr(a, "is_user", False) or getattr(b, "is_user", False):
            return False
        return any(p.blocks(a.cloudlet, b.cloudlet, t) for p in self.faults.partitions)

    def schedule(self, env: Envelope) -> Optional[Envelope]:
        """Send an already-built envelope (its id is reassigned)."""
        return self.send(env.src, env.dst, env.payload)

    def latency(self, link: LinkClass) -> float:
        return self.config.model(link).sample(self.rng)

    def send(
        self, src: str, dst: str, payload: Message, extra_delay: float = 0.0, background: bool = False
    ) -> Optional[Envelope]:
        """Queue ``payload`` for delivery; returns the envelope, or None if the
        sender is down. Background deliveries do not keep the run alive."""
        if src in self.crashed:
            return None
        self._next_id += 1
        now = self.sim.now
        env = Envelope(self._next_id, src, dst, now, payload)
        link = self.link_class(src, dst)
        self.sent[link] += 1
        key = (link, payload.op)
        self.sent_by_op[key] = self.sent_by_op.get(key, 0) + 1
        delay = self.latency(link) + extra_delay
        rate = self.faults.drop_rate.get(link, 0.0) or self.config.drop_rate.get(link, 0.0)
        dropped = rate > 0 and self.rng.random() < rate
        self.trace.emit(
            now,
            "send",
            id=env.msg_id,
            src=src,
            dst=dst,
            op=payload.op,
            link=link.value,
            digest=payload_digest(payload),
        )
        if dropped or self.partitioned(src, dst, now):
            self.dropped += 1
            self.trace.emit(now, "drop", id=env.msg_id)
            return env
        self.sim.at(now + delay, self._deliver, env, background=background)
        return env

    def _deliver(self, env: Envelope) -> None:
        now = self.sim.now
        if env.dst in self.crashed or self.partitioned(env.src, env.dst, now):
            self.dropped += 1
            self.trace.emit(now, "lost", id=env.msg_id)
            return
        self.trace.emit(now, "recv", id=env.msg_id)
        self.nodes[env.dst].deliver(env)
        if env.payload.op in self.duplicate_ops and env.dst not in self.crashed:
            self.trace.emit(now, "dup", id=env.msg_id)
            # traffic caused by the copy must not shift the main latency stream
            main, self.rng = self.rng, random.Random(f"dup/{env.msg_id}")
            try:
                self.nodes[env.dst].deliver(env)
            finally:
                self.rng = main

    def wan_messages(self, exclude_ops: Iterable[str] = ()) -> int:
        skip = set(exclude_ops)
        return sum(n for (link, op), n in self.sent_by_op.items() if link is LinkClass.INTER and op not in skip)


def run_until_quiescent(sim: Scheduler, horizon: Optional[float] = None, max_events: Optional[int] = None) -> RunResult:
    return sim.run(until=horizon, max_events=max_events)
