"""Experiment orchestration: workloads, the global-locking baseline, reports.

The default configuration mirrors the two-cloudlet setup of the response-time
experiments: one user base at ``c1`` issuing 1000 requests per hour for one
simulated day, each request one read plus one write of the same object.

Borrow-rate control: writes to Strong objects consume one unit. A fraction
``borrow_fraction`` of Strong requests target objects from a *borrow pool*
whose quota at the user's cloudlet is zero, so each such write has to borrow
from a remote cloudlet; the rest target objects with ample local quota.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import random
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import ClassVar, Iterable, Optional

from dcaas.cluster import ClusterSpec, Completed, InvariantViolation, UserBase, UserRequest, World
from dcaas.dcp import DcpSelectionStrategy
from dcaas.model import (
    ConsistencyLevel,
    DataConsistencyPlan,
    Envelope,
    Message,
    ObjectAccessPattern,
    Read,
    Reply,
    StabilizationMethod,
    Write,
)
from dcaas.peer import PeerConfig
from dcaas.simnet import FaultPlan, LatencyModel, Network, NetworkConfig, Scheduler, Trace

DAY_MS = 24 * 3600 * 1000.0

BORROW_RATE_ROWS = (
    "GlobalLocking",
    "DCaaS 0% quota borrow",
    "DCaaS 10% quota borrow",
    "DCaaS 50% quota borrow",
)
STRONG_MIX_ROWS = (
    "0% strong objects",
    "10% strong objects",
    "50% strong objects",
    "100% strong objects",
)


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    mode: str = "dcaas"  # dcaas | locking
    seed: int = 1
    duration_ms: float = DAY_MS
    rate_per_hour: float = 1000.0
    reads_per_request: int = 1
    strong_fraction: float = 1.0
    borrow_fraction: float = 0.0
    objects_per_pool: int = 10
    cloudlets: dict = field(default_factory=lambda: {"c1": ["p1"], "c2": ["p2"]})
    user_cloudlet: str = "c1"
    quota_per_cloudlet: int = 1_000_000
    user_ms: float = 50.0
    intra_ms: float = 50.0
    inter_ms: float = 250.0
    jitter: float = 0.1
    service_ms: float = 25.0
    replication_period_ms: float = 60_000.0
    # lock, remote write and unlock; each is one round trip to every cloudlet
    locking_round_trips: int = 3
    request_timeout_ms: float = 30_000.0
    strategy: str = "MostRecent"
    heartbeat_ms: Optional[float] = None
    faults: Optional[dict] = None
    trace: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.mode not in ("dcaas", "locking"):
            raise ValueError(f"mode must be dcaas or locking, not {self.mode!r}")
        if self.duration_ms <= 0:
            raise ValueError("duration must be positive")
        if self.rate_per_hour < 0:
            raise ValueError("rate must be non-negative")
        for name in ("strong_fraction", "borrow_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.user_cloudlet not in self.cloudlets:
            raise ValueError(f"user cloudlet {self.user_cloudlet!r} is not in the topology")
        if any(not ids for ids in self.cloudlets.values()):
            raise ValueError("every cloudlet needs at least one instance")
        if self.borrow_fraction > 0 and len(self.cloudlets) < 2:
            raise ValueError("borrowing needs a second cloudlet to borrow from")
        if self.objects_per_pool < 1:
            raise ValueError("objects_per_pool must be at least 1")
        if self.locking_round_trips < 2:
            raise ValueError("the locking protocol needs at least lock and unlock round trips")

    def network(self) -> NetworkConfig:
        return NetworkConfig(
            LatencyModel(self.user_ms, self.jitter),
            LatencyModel(self.intra_ms, self.jitter),
            LatencyModel(self.inter_ms, self.jitter),
        )

    def fault_plan(self) -> Optional[FaultPlan]:
        return FaultPlan.from_dict(self.faults) if self.faults else None

    def peer_config(self) -> PeerConfig:
        return PeerConfig(strategy=DcpSelectionStrategy(self.strategy), heartbeat_ms=self.heartbeat_ms)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> ExperimentConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


# ---------------------------------------------------------------------------
# Workload


def pools(cfg: ExperimentConfig) -> dict[str, list[str]]:
    n = cfg.objects_per_pool
    out = {"eventual": [f"e{i}" for i in range(n)], "strong": [f"s{i}" for i in range(n)], "borrow": []}
    if len(cfg.cloudlets) > 1:
        out["borrow"] = [f"b{i}" for i in range(n)]
    return out


def build_plan(cfg: ExperimentConfig) -> DataConsistencyPlan:
    q = cfg.quota_per_cloudlet
    cls = sorted(cfg.cloudlets)
    pats = []
    pl = pools(cfg)
    for obj in pl["eventual"]:
        pats.append(ObjectAccessPattern(obj, ConsistencyLevel.EVENTUAL, StabilizationMethod.THOMAS, {}))
    for obj in pl["strong"]:
        pats.append(ObjectAccessPattern(obj, ConsistencyLevel.STRONG, StabilizationMethod.THOMAS, {c: q for c in cls}))
    for obj in pl["borrow"]:
        quota = {c: (0 if c == cfg.user_cloudlet else q) for c in cls}
        pats.append(ObjectAccessPattern(obj, ConsistencyLevel.STRONG, StabilizationMethod.THOMAS, quota))
    return DataConsistencyPlan.from_patterns(pats)


def generate_workload(cfg: ExperimentConfig, seed: Optional[int] = None, start_ms: float = 0.0) -> list[UserRequest]:
    """Poisson arrivals over ``duration_ms``; see the module docstring for
    how Strong and borrow-forcing requests are chosen."""
    seed = cfg.seed if seed is None else seed
    rng = random.Random(f"{seed}/workload")
    if cfg.rate_per_hour == 0:
        return []
    rate_per_ms = cfg.rate_per_hour / 3_600_000.0
    pl = pools(cfg)
    out = []
    t = 0.0
    n = 0
    while True:
        t += rng.expovariate(rate_per_ms)
        if t >= cfg.duration_ms:
            break
        strong = rng.random() < cfg.strong_fraction
        borrow = strong and rng.random() < cfg.borrow_fraction
        if borrow:
            obj, value, mode = rng.choice(pl["borrow"]), 1, "add"
        elif strong:
            obj, value, mode = rng.choice(pl["strong"]), 1, "add"
        else:
            obj, value, mode = rng.choice(pl["eventual"]), rng.randrange(1_000_000), "assign"
        out.append(UserRequest(f"q{n}", start_ms + t, obj, value, mode, cfg.reads_per_request > 0, borrow))
        n += 1
    return out


# ---------------------------------------------------------------------------
# Reports


@dataclass
class MetricsReport:
    approach: str
    seed: int = 0
    requests: int = 0
    completed: int = 0
    committed: int = 0
    rejected: int = 0
    timeouts: int = 0
    avg_ms: float = 0.0
    min_ms: float = 0.0
    max_ms: float = 0.0
    per_user: dict = field(default_factory=dict)
    wan_msgs: int = 0
    replication_msgs: int = 0
    borrows: int = 0
    borrow_successes: int = 0
    rejects: int = 0
    violations: list = field(default_factory=list)
    conservation: list = field(default_factory=list)
    final_time_ms: float = 0.0
    events: int = 0

    CSV_COLUMNS: ClassVar[tuple] = ("approach", "avg_ms", "min_ms", "max_ms", "wan_msgs", "borrows", "rejects")

    @property
    def safe(self) -> bool:
        return not self.violations and not self.conservation

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["safe"] = self.safe
        return d


def latency_stats(done: Iterable[Completed]) -> tuple[float, float, float]:
    lat = [c.latency for c in done if c.status != "timeout"]
    if not lat:
        return 0.0, 0.0, 0.0
    return statistics.fmean(lat), min(lat), max(lat)


def _fill_latency(rep: MetricsReport, users: dict[str, UserBase], requests: int) -> None:
    done = [c for u in users.values() for c in u.completed]
    rep.requests = requests
    rep.completed = sum(1 for c in done if c.status != "timeout")
    rep.committed = sum(1 for c in done if c.status == "ok")
    rep.rejected = sum(1 for c in done if c.status == "rejected")
    rep.timeouts = sum(1 for c in done if c.status == "timeout")
    rep.rejects = rep.rejected
    rep.avg_ms, rep.min_ms, rep.max_ms = latency_stats(done)
    for name, u in sorted(users.items()):
        avg, lo, hi = latency_stats(u.completed)
        rep.per_user[name] = {"avg_ms": avg, "min_ms": lo, "max_ms": hi, "n": len(u.completed)}


def _round(x: float) -> str:
    return f"{x:.1f}"


def report_csv(reports: Iterable[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsReport.CSV_COLUMNS)
    for r in reports:
        w.writerow([r.approach, _round(r.avg_ms), _round(r.min_ms), _round(r.max_ms), r.wan_msgs, r.borrows, r.rejects])
    return buf.getvalue()


def report_json(reports: Iterable[MetricsReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def emit_report(reports: Iterable[MetricsReport] | MetricsReport, fmt: str = "csv", path: str | Path | None = None) -> str:
    if isinstance(reports, MetricsReport):
        reports = [reports]
    reports = list(reports)
    if fmt == "csv":
        text = report_csv(reports)
    elif fmt == "json":
        text = report_json(reports)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# DCaaS runs


def build_world(cfg: ExperimentConfig, plan: Optional[DataConsistencyPlan] = None) -> World:
    spec = ClusterSpec(
        cloudlets={k: list(v) for k, v in cfg.cloudlets.items()},
        plan=plan or build_plan(cfg),
        network=cfg.network(),
        seed=cfg.seed,
        peer_config=cfg.peer_config(),
        service_ms=cfg.service_ms,
        replication_period_ms=cfg.replication_period_ms,
        faults=cfg.fault_plan(),
        trace=cfg.trace,
    )
    return World(spec)


@dataclass
class RunArtifacts:
    report: MetricsReport
    trace: Trace
    world: object = None


WARMUP_MS = 1_000.0


def run_dcaas(cfg: ExperimentConfig) -> RunArtifacts:
    world = build_world(cfg)
    world.trace.emit(0.0, "header", config=cfg.to_dict())
    world.configure()
    user = world.user("u1", cfg.user_cloudlet, cfg.request_timeout_ms)
    requests = generate_workload(cfg, start_ms=WARMUP_MS)
    user.schedule(requests)
    res = world.run(until=WARMUP_MS + cfg.duration_ms + 3_600_000.0)
    rep = MetricsReport(label(cfg), cfg.seed)
    _fill_latency(rep, world.users, len(requests))
    rep.wan_msgs = world.wan_request_messages()
    rep.replication_msgs = world.net.wan_messages() - rep.wan_msgs
    rep.borrows = world.monitor.counts.get("borrow_start", 0)
    rep.borrow_successes = sum(
        1 for r in world.trace.records if r["kind"] == "borrow_end" and r.get("ok")
    )
    rep.violations = list(world.monitor.violations)
    if res.livelock:
        rep.violations.append("run did not reach quiescence within the horizon")
    rep.conservation = world.conservation_issues()
    rep.final_time_ms = world.sim.now
    rep.events = world.sim.processed
    return RunArtifacts(rep, world.trace, world)


def label(cfg: ExperimentConfig) -> str:
    if cfg.name != "experiment":
        return cfg.name
    if cfg.mode == "locking":
        return "GlobalLocking"
    if cfg.strong_fraction < 1.0:
        return f"{round(cfg.strong_fraction * 100)}% strong objects"
    return f"DCaaS {round(cfg.borrow_fraction * 100)}% quota borrow"


# ---------------------------------------------------------------------------
# Global-locking baseline
#
# The coordinator in the user's cloudlet locks the record at every cloudlet's
# lock manager (one after another, in cloudlet order), executes the read and write, pushes the write to the remote
# cloudlets and unlocks. Each phase is one round trip to every cloudlet; the
# number of phases is ``locking_round_trips``.


@dataclass(frozen=True)
class LockReq(Message):
    op: ClassVar[str] = "LockReq"
    object_ref: str
    txn: str


@dataclass(frozen=True)
class LockGrant(Message):
    op: ClassVar[str] = "LockGrant"
    object_ref: str
    txn: str


@dataclass(frozen=True)
class RemoteWrite(Message):
    op: ClassVar[str] = "RemoteWrite"
    object_ref: str
    txn: str
    phase: int


@dataclass(frozen=True)
class RemoteWriteAck(Message):
    op: ClassVar[str] = "RemoteWriteAck"
    object_ref: str
    txn: str
    phase: int


@dataclass(frozen=True)
class Unlock(Message):
    op: ClassVar[str] = "Unlock"
    object_ref: str
    txn: str


@dataclass(frozen=True)
class UnlockAck(Message):
    op: ClassVar[str] = "UnlockAck"
    object_ref: str
    txn: str


class LockManager:
    """FIFO record locks for one cloudlet."""

    is_user = False

    def __init__(self, cloudlet: str, net: Network, service_ms: float):
        self.node_id = f"locks:{cloudlet}"
        self.cloudlet = cloudlet
        self.net = net
        self.service_ms = service_ms
        self.holder: dict[str, tuple[str, str]] = {}
        self.queue: dict[str, list[tuple[str, str]]] = {}

    def deliver(self, env: Envelope) -> None:
        m = env.payload
        if isinstance(m, LockReq):
            if m.object_ref in self.holder:
                self.queue.setdefault(m.object_ref, []).append((m.txn, env.src))
            else:
                self.holder[m.object_ref] = (m.txn, env.src)
                self.net.send(self.node_id, env.src, LockGrant(m.object_ref, m.txn))
        elif isinstance(m, RemoteWrite):
            self.net.send(self.node_id, env.src, RemoteWriteAck(m.object_ref, m.txn, m.phase), extra_delay=self.service_ms)
        elif isinstance(m, Unlock):
            if self.holder.get(m.object_ref, (None,))[0] == m.txn:
                del self.holder[m.object_ref]
                waiting = self.queue.get(m.object_ref)
                if waiting:
                    txn, src = waiting.pop(0)
                    self.holder[m.object_ref] = (txn, src)
                    self.net.send(self.node_id, src, LockGrant(m.object_ref, txn))
            self.net.send(self.node_id, env.src, UnlockAck(m.object_ref, m.txn))


class LockingCoordinator:
    is_user = False

    def __init__(self, node_id: str, cloudlet: str, net: Network, managers: list[str], cfg: ExperimentConfig):
        self.node_id = node_id
        self.cloudlet = cloudlet
        self.net = net
        self.sim = net.sim
        self.managers = managers
        self.cfg = cfg
        self.txns: dict[str, dict] = {}

    def deliver(self, env: Envelope) -> None:
        m = env.payload
        if isinstance(m, (Read, Write)):
            rid = m.req_id.rpartition(":")[0]
            t = self.txns.setdefault(rid, {"user": env.src, "parts": [], "obj": m.object_ref, "started": False})
            t["parts"].append(m.req_id)
            if not t["started"]:
                t["started"] = True
                t["waiting"] = set()
                t["to_lock"] = list(self.managers)
                self._lock_next(rid)
            return
        t = self.txns.get(m.txn)
        if t is None:
            return
        t["waiting"].discard(env.src)
        if t["waiting"]:
            return
        if isinstance(m, LockGrant) and t["to_lock"]:
            self._lock_next(m.txn)
        elif isinstance(m, LockGrant):
            # both operations run at the local store once every lock is held
            ops = len(t["parts"]) if self.cfg.reads_per_request else 1
            self.sim.after(self.cfg.service_ms * max(ops, 2), self._phase, m.txn, 1)
        elif isinstance(m, RemoteWriteAck):
            self._phase(m.txn, m.phase + 1)
        elif isinstance(m, UnlockAck):
            del self.txns[m.txn]
            for part in t["parts"]:
                self.net.send(self.node_id, t["user"], Reply(part, "Committed", None, ""))

    def _lock_next(self, rid: str) -> None:
        # one manager at a time in a fixed order, so two transactions can
        # never hold each other's locks
        t = self.txns[rid]
        mgr = t["to_lock"].pop(0)
        t["waiting"] = {mgr}
        self.net.send(self.node_id, mgr, LockReq(t["obj"], rid))

    def _phase(self, rid: str, phase: int) -> None:
        t = self.txns[rid]
        t["waiting"] = set(self.managers)
        last = self.cfg.locking_round_trips - 1
        for mgr in self.managers:
            if phase < last:
                self.net.send(self.node_id, mgr, RemoteWrite(t["obj"], rid, phase))
            else:
                self.net.send(self.node_id, mgr, Unlock(t["obj"], rid))


def run_locking_baseline(cfg: ExperimentConfig) -> RunArtifacts:
    cfg = cfg if cfg.mode == "locking" else cfg.replace(mode="locking")
    sim = Scheduler()
    trace = Trace(enabled=cfg.trace)
    trace.emit(0.0, "header", config=cfg.to_dict())
    net = Network(sim, cfg.network(), cfg.seed, None, trace)
    managers = []
    for cl in sorted(cfg.cloudlets):
        lm = LockManager(cl, net, cfg.service_ms)
        net.register(lm)
        managers.append(lm.node_id)
    coord = LockingCoordinator(f"coord:{cfg.user_cloudlet}", cfg.user_cloudlet, net, managers, cfg)
    net.register(coord)

    class _World:
        pass

    shim = _World()
    shim.sim, shim.net, shim.peers = sim, net, {}
    user = UserBase("u1", cfg.user_cloudlet, shim, cfg.request_timeout_ms)
    net.register(user)
    requests = [dataclasses.replace(r, target=coord.node_id) for r in generate_workload(cfg, start_ms=WARMUP_MS)]
    user.schedule(requests)
    res = sim.run(until=WARMUP_MS + cfg.duration_ms + 3_600_000.0)
    trace.emit(sim.now, "run_end", events=res.events, livelock=res.livelock)
    rep = MetricsReport(label(cfg), cfg.seed)
    _fill_latency(rep, {"u1": user}, len(requests))
    rep.wan_msgs = net.wan_messages()
    rep.final_time_ms = sim.now
    rep.events = sim.processed
    if res.livelock:
        rep.violations.append("run did not reach quiescence within the horizon")
    return RunArtifacts(rep, trace, None)


def run_experiment(cfg: ExperimentConfig, strict: bool = True) -> RunArtifacts:
    """Run one configuration and audit its trace.

    With ``strict`` an InvariantViolation is raised when the online monitor,
    the conservation check or the offline trace audit finds a problem.
    """
    from dcaas.invariants import check_trace

    art = run_locking_baseline(cfg) if cfg.mode == "locking" else run_dcaas(cfg)
    if cfg.trace and cfg.mode == "dcaas":
        audit = check_trace(art.trace.records)
        for v in audit:
            if v not in art.report.violations:
                art.report.violations.append(v)
    if strict and not art.report.safe:
        excerpt = "; ".join((art.report.violations + art.report.conservation)[:5])
        raise InvariantViolation(f"{art.report.approach} seed {cfg.seed}: {excerpt}")
    return art


def fault_fuzz_config(seed: int, duration_ms: float = 40_000.0) -> ExperimentConfig:
    """A small randomized run with crashes, recoveries and partitions.

    Quotas are tiny so that exhaustion and borrowing happen often. Every
    crash is followed by a recovery and every partition heals, so the run
    ends in a state where quota conservation is expected to hold again.
    """
    rng = random.Random(f"{seed}/faults")
    n_peers = rng.randint(2, 4)
    ids = [f"p{i + 1}" for i in range(n_peers)]
    cl = {"c1": [ids[0]], "c2": [ids[1]]}
    for pid in ids[2:]:
        cl[rng.choice(["c1", "c2"])].append(pid)
    start = WARMUP_MS
    end = start + duration_ms
    crashes, recovers, parts = [], [], []
    for pid in rng.sample(ids, rng.randint(0, min(2, n_peers))):
        t = rng.uniform(start, end * 0.6)
        crashes.append([pid, round(t, 3)])
        recovers.append([pid, round(t + rng.uniform(500.0, 10_000.0), 3)])
    if rng.random() < 0.5:
        t = rng.uniform(start, end * 0.6)
        parts.append([[rng.choice(["c1", "c2"])], round(t, 3), round(t + rng.uniform(500.0, 15_000.0), 3)])
    drops = {"InterCloudlet": 0.02} if rng.random() < 0.25 else {}
    return ExperimentConfig(
        name=f"fuzz-{seed}",
        seed=seed,
        duration_ms=duration_ms,
        rate_per_hour=rng.choice([3_600.0, 7_200.0]),
        strong_fraction=rng.choice([1.0, 0.8]),
        borrow_fraction=round(rng.uniform(0.0, 0.8), 3),
        objects_per_pool=2,
        cloudlets=cl,
        quota_per_cloudlet=rng.randint(3, 20),
        replication_period_ms=5_000.0,
        request_timeout_ms=20_000.0,
        faults={"crashes": crashes, "recovers": recovers, "partitions": parts, "drop_rate": drops},
    )


def borrow_rate_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    settings = [("locking", 0.0), ("dcaas", 0.0), ("dcaas", 0.1), ("dcaas", 0.5)]
    return [
        base.replace(name=row, mode=mode, strong_fraction=1.0, borrow_fraction=b)
        for row, (mode, b) in zip(BORROW_RATE_ROWS, settings)
    ]


def strong_mix_configs(base: ExperimentConfig) -> list[ExperimentConfig]:
    return [
        base.replace(name=row, mode="dcaas", strong_fraction=f, borrow_fraction=0.5)
        for row, f in zip(STRONG_MIX_ROWS, (0.0, 0.1, 0.5, 1.0))
    ]


def run_table(configs: list[ExperimentConfig], strict: bool = True) -> list[MetricsReport]:
    return [run_experiment(c, strict=strict).report for c in configs]

