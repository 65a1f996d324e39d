"""The DCaaS instance: request handling and the coordination protocols.

One :class:`Peer` runs per DCaaS instance. It talks to users and to other
peers through the :class:`~dcaas.simnet.Network` and keeps all durable state
in its cloudlet's :class:`~dcaas.store.CloudletStore`:

* quota accounts ``~quota/<obj>/<gen>/<instance>`` hold ``r`` (residual),
  ``c`` (consumed) and ``holds`` (units offered to a borrower, not yet acked);
* ``~cap/<obj>/<gen>`` records the cloudlet's declared quota for a generation;
* ``<obj>#<gen>#<instance>`` is the replicated, single-writer consumption
  counter whose sum (plus the base value at ``<obj>``) is a Strong read.

Accounts live in the store rather than in peer memory, so a surviving member
of the cloudlet can reclaim the residual of a failed instance and a crashed
instance finds its balance again on restart.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from dcaas.dcp import (
    Candidate,
    DcpChangeRequest,
    DcpSelectionStrategy,
    Directive,
    NoOpChange,
    allocate_shares,
    apply_level_change,
    get_consistency_level,
    select_common_dcp,
)
from dcaas.model import (
    INITIAL_VALUE,
    ConsistencyLevel,
    DataConsistencyPlan,
    DcpValidationError,
    Envelope,
    Heartbeat,
    JoinAck,
    JoinRequest,
    LamportStamp,
    LeaderAck,
    LeaderReq,
    LoadDCP,
    LoadPeerList,
    Message,
    ModifyCloudletQuota,
    ModifyConsistencyLevel,
    QBrwReq,
    QuotaSnapshot,
    QuotaTrAck,
    QuotaTransfer,
    Read,
    Reply,
    ScoqEntry,
    StabAck,
    StabCom,
    StabReq,
    StabRes,
    Synch,
    SynchAck,
    UpdateAck,
    UpdatePeerList,
    VersionedValue,
    Write,
)
from dcaas.simnet import LinkClass
from dcaas.stabilizers import (
    Add,
    Assign,
    HistoryRecord,
    StabilizationError,
    StabilizerRegistry,
    TransactionHistory,
    default_registry,
    stabilize,
)
from dcaas.store import CloudletStore, CorruptLog, TxnView, WriteAheadLog

STRONG = ConsistencyLevel.STRONG
EVENTUAL = ConsistencyLevel.EVENTUAL
SESSION = ConsistencyLevel.SESSION


class Lifecycle(str, enum.Enum):
    CREATED = "Created"
    READY = "Ready"
    FAILED = "Failed"
    RECOVERING = "Recovering"


@dataclass(frozen=True)
class RequestOutcome:
    """Result of a user request; ``Deferred`` means a Reply follows later."""

    status: str
    value: Any = None
    reason: str = ""
    corr: str = ""

    @classmethod
    def committed(cls, value: Any = None) -> RequestOutcome:
        return cls("Committed", value)

    @classmethod
    def rejected(cls, reason: str) -> RequestOutcome:
        return cls("Rejected", reason=reason)

    @classmethod
    def deferred(cls, corr: str) -> RequestOutcome:
        return cls("Deferred", corr=corr)


# ---------------------------------------------------------------------------
# Store key layout


def acct_key(obj: str, gen: int, instance: str) -> str:
    return f"~quota/{obj}/{gen}/{instance}"


def acct_prefix(obj: str, gen: int) -> str:
    return f"~quota/{obj}/{gen}/"


def cap_key(obj: str, gen: int) -> str:
    return f"~cap/{obj}/{gen}"


def use_key(obj: str, gen: int, instance: str) -> str:
    return f"{obj}#{gen}#{instance}"


def hist_base_key(obj: str, instance: str) -> str:
    return f"~hist/{obj}/{instance}/base"


def hist_prefix(obj: str, instance: str) -> str:
    return f"~hist/{obj}/{instance}/r/"


def meta_key(instance: str) -> str:
    return f"~meta/{instance}"


def read_account(view: TxnView, key: str) -> Optional[dict]:
    v = view.get(key).value
    if not isinstance(v, dict):
        return None
    return {"r": int(v["r"]), "c": int(v["c"]), "holds": dict(v["holds"])}


def write_account(view: TxnView, key: str, acct: dict) -> None:
    view.put(key, VersionedValue({"r": acct["r"], "c": acct["c"], "holds": dict(sorted(acct["holds"].items()))}))


def new_account(r: int = 0) -> dict:
    return {"r": r, "c": 0, "holds": {}}


def strong_value(view: TxnView, obj: str, gen: int) -> int:
    base = view.get(obj).value
    total = base if isinstance(base, int) else 0
    for k in view.keys(f"{obj}#{gen}#"):
        total += int(view.get(k).value)
    return total


def account_totals(view: TxnView, obj: str, gen: int) -> tuple[int, int, int]:
    r = h = c = 0
    for k in view.keys(acct_prefix(obj, gen)):
        a = read_account(view, k)
        if a is not None:
            r += a["r"]
            h += sum(a["holds"].values())
            c += a["c"]
    return r, h, c


# ---------------------------------------------------------------------------
# State


@dataclass
class BorrowState:
    corr: str
    object_ref: str
    generation: int
    delta: int
    remaining: int
    req_id: str
    reply_to: Optional[str]
    attempt: int
    round: str = ""
    round_no: int = 0
    awaiting: set = field(default_factory=set)
    inflight: int = 0
    taken: int = 0


@dataclass
class StabState:
    stab_id: str
    object_ref: str
    plan: DataConsistencyPlan
    req_id: str
    reply_to: Optional[str]
    phase: str = "collect"
    awaiting: set = field(default_factory=set)
    responses: dict = field(default_factory=dict)
    failed: set = field(default_factory=set)
    retries: int = 0
    message: Optional[StabCom] = None
    shares: dict = field(default_factory=dict)
    self_done: bool = False


@dataclass
class ChangeState:
    """Leader side of a plan push that needs no stabilization."""

    change_id: str
    object_ref: str
    plan: DataConsistencyPlan
    req_id: str
    reply_to: Optional[str]
    awaiting: set = field(default_factory=set)
    retries: int = 0


@dataclass
class JoinState:
    change_id: str
    joiner: str
    cloudlet: str
    awaiting: set = field(default_factory=set)
    retries: int = 0


@dataclass
class ElectionState:
    term: int
    expected: set
    reason: str
    attempt: int
    acks: dict = field(default_factory=dict)
    own: Optional[QuotaSnapshot] = None
    concluded: bool = False


@dataclass
class AwaitCommit:
    leader: str
    stab_id: str


@dataclass
class PeerState:
    instance_id: str
    cloudlet_id: str
    lifecycle: Lifecycle = Lifecycle.CREATED
    dcp: Optional[DataConsistencyPlan] = None
    peers: dict = field(default_factory=dict)
    # cached instance quota per Strong object; the store account is authoritative
    scoq: dict = field(default_factory=dict)
    session_cache: dict = field(default_factory=dict)
    session_history: dict = field(default_factory=dict)
    lamport_counter: int = 0
    protocol_state: dict = field(default_factory=dict)
    pending_change_log: dict = field(default_factory=dict)
    leader: Optional[str] = None
    term: int = 0
    promised_term: int = 0
    epoch: int = 0
    frozen_until: float = -1.0
    known_instances: set = field(default_factory=set)
    needs_reconcile: bool = False
    applied: set = field(default_factory=set)

    def scoq_entries(self) -> list[ScoqEntry]:
        return [ScoqEntry(k, v) for k, v in sorted(self.scoq.items())]


@dataclass(frozen=True)
class PeerConfig:
    reserve: int = 0
    strategy: DcpSelectionStrategy = DcpSelectionStrategy.MOST_RECENT
    # expected-path multiplier for every protocol timeout
    timeout_factor: float = 4.0
    max_retries: int = 1
    # consecutive missed responses before a same-cloudlet peer is declared failed
    suspect_after: int = 2
    max_borrow_attempts: int = 3
    election_backoff_ms: float = 1_000.0
    max_election_attempts: int = 30
    reconcile_delay_ms: float = 2_000.0
    heartbeat_ms: Optional[float] = None
    heartbeat_misses: int = 3
    join_attempts: int = 30


class NullMonitor:
    """Observer interface; the cluster installs a recording implementation."""

    def admit(self, peer, op, obj, level): ...
    def read(self, peer, obj, level, vv): ...
    def session_write(self, peer, obj, stamp): ...
    def flush(self, peer, obj, stamp): ...
    def consume(self, peer, obj, gen, delta): ...
    def capacity(self, obj, gen, total=None, delta=None): ...
    def dcp(self, peer, version): ...
    def event(self, peer, kind, **fields): ...


class Peer:
    """A DCaaS instance bound to one cloudlet store."""

    is_user = False

    def __init__(
        self,
        instance_id: str,
        cloudlet: str,
        *,
        net,
        store: CloudletStore,
        config: PeerConfig = PeerConfig(),
        registry: Optional[StabilizerRegistry] = None,
        monitor=None,
        seed: int = 0,
        seed_peers: Optional[dict] = None,
        service_ms: float = 25.0,
    ):
        self.node_id = instance_id
        self.cloudlet = cloudlet
        self.net = net
        self.sim = net.sim
        self.store = store
        self.config = config
        self.registry = registry or default_registry
        self.monitor = monitor or NullMonitor()
        self.rng = random.Random(f"{seed}/peer/{instance_id}")
        self.seed_peers = dict(seed_peers or {})
        self.state = PeerState(instance_id, cloudlet)
        self.incarnation = 0
        self._ids = itertools.count(1)
        self.outcomes: dict[str, RequestOutcome] = {}
        self.last_heard: dict[str, float] = {}
        self.misses: dict[str, int] = {}
        self.holds_meta: dict[str, tuple[str, int]] = {}
        self._reconcile_pending = False
        self._hb_running = False
        nc = net.config
        lock = 2 * nc.expected(LinkClass.INTRA)
        per_hop = service_ms + lock
        f = config.timeout_factor
        self.t_intra = f * (nc.expected(LinkClass.INTRA) + per_hop)
        self.t_inter = f * (nc.expected(LinkClass.INTER) + per_hop)
        self.freeze_ms = 3 * self.t_inter

    # -- plumbing -----------------------------------------------------------

    @property
    def id(self) -> str:
        return self.node_id

    def _new_id(self, tag: str) -> str:
        return f"{self.id}.{self.incarnation}:{tag}{next(self._ids)}"

    def send(self, dst: str, msg: Message) -> Optional[Envelope]:
        return self.net.send(self.id, dst, msg)

    def _timer(self, delay: float, fn: Callable, *args, background: bool = False) -> None:
        self.sim.after(delay, self._fire, self.incarnation, fn, args, background=background)

    def _fire(self, incarnation: int, fn: Callable, args: tuple) -> None:
        if incarnation != self.incarnation or not self.net.alive(self.id):
            return
        fn(*args)

    def _txn(self, body: Callable[[TxnView], Any], locks, on_done: Callable[[Any], None], locked: bool = True) -> None:
        inc = self.incarnation

        def done(result):
            if inc == self.incarnation and self.net.alive(self.id):
                on_done(result)

        self.store.submit(self.id, body, locks, done, locked=locked)

    def _tick(self, *observed: int) -> LamportStamp:
        st = self.state
        st.lamport_counter = max(st.lamport_counter, *observed) + 1 if observed else st.lamport_counter + 1
        return LamportStamp(st.lamport_counter, self.id)

    def _observe(self, stamp: LamportStamp) -> None:
        if stamp.counter > self.state.lamport_counter:
            self.state.lamport_counter = stamp.counter

    def _frozen(self) -> bool:
        return self.sim.now < self.state.frozen_until

    def _timeout_for(self, peer: str) -> float:
        return self.t_intra if self.state.peers.get(peer) == self.cloudlet else self.t_inter

    def _others(self) -> list[str]:
        return sorted(p for p in self.state.peers if p != self.id)

    def _members(self, cloudlet: str, exclude=()) -> list[str]:
        return sorted(p for p, c in self.state.peers.items() if c == cloudlet and p not in exclude)

    def known_cloudlets(self) -> set[str]:
        return set(self.state.peers.values()) | {self.cloudlet}

    def _reply(self, to: Optional[str], req_id: str, outcome: RequestOutcome) -> RequestOutcome:
        if req_id:
            self.outcomes[req_id] = outcome
        if to is not None and outcome.status != "Deferred":
            self.send(to, Reply(req_id, outcome.status, outcome.value, outcome.reason))
        return outcome

    def _reject(self, to, req_id, reason) -> RequestOutcome:
        return self._reply(to, req_id, RequestOutcome.rejected(reason))

    def _emit(self, kind: str, **fields) -> None:
        self.monitor.event(self, kind, **fields)

    # -- message dispatch ---------------------------------------------------

    def deliver(self, env: Envelope) -> None:
        if self.state.lifecycle is Lifecycle.FAILED:
            return
        src = env.src
        if src in self.state.peers or src in self.state.known_instances:
            self.last_heard[src] = self.sim.now
            self.misses.pop(src, None)
        handler = getattr(self, f"_on_{env.payload.op}", None)
        if handler is None:
            raise ValueError(f"peer cannot handle {env.payload.op}")
        handler(env)

    def _stale_sender(self, env: Envelope) -> bool:
        """Tell an instance that was removed from the peer list to rejoin."""
        src = env.src
        st = self.state
        if st.lifecycle is Lifecycle.READY and src not in st.peers and src in st.known_instances:
            self.send(src, UpdatePeerList("remove", src, self.net.cloudlet_of(src), ""))
            return True
        return False

    # -- configuration --------------------------------------------------------

    def configure(self, plan: DataConsistencyPlan, peers: dict, push: bool = False) -> None:
        """Manual configuration; with ``push`` the plan and list are forwarded
        to every other instance (automated mode)."""
        st = self.state
        st.dcp = plan
        st.peers = dict(peers)
        st.known_instances |= set(peers)
        if push:
            for p in self._others():
                self.send(p, LoadDCP(plan, ""))
                self.send(p, LoadPeerList(dict(peers)))
        self._initial_ready()

    def _initial_ready(self) -> None:
        st = self.state
        if st.lifecycle is not Lifecycle.CREATED or st.dcp is None or not st.peers:
            return
        if self.id not in st.peers:
            st.peers[self.id] = self.cloudlet
        plan = st.dcp
        members = self._members(self.cloudlet)
        rank = members.index(self.id)
        strong = plan.strong_objects()

        def body(view):
            out = {}
            for p in strong:
                gen = plan.generation(p.object_ref)
                ck = cap_key(p.object_ref, gen)
                if ck not in view._store.records and ck not in view.writes:
                    view.put(ck, VersionedValue(int(p.quota_plan.get(self.cloudlet, 0))))
                key = acct_key(p.object_ref, gen, self.id)
                acct = read_account(view, key)
                if acct is None:
                    quota = p.quota_plan.get(self.cloudlet, 0)
                    base, rem = divmod(quota, len(members))
                    acct = new_account(base + (rem if rank == 0 else 0))
                    write_account(view, key, acct)
                out[p.object_ref] = acct["r"]
            return out

        def done(scoq):
            st.scoq = scoq
            self._persist_meta()
            self._set_ready()

        self._txn(body, [p.object_ref for p in strong], done)

    def _set_ready(self) -> None:
        st = self.state
        st.lifecycle = Lifecycle.READY
        self.monitor.dcp(self, st.dcp.version)
        self._emit("ready", version=st.dcp.version, peers=sorted(st.peers))
        self._start_heartbeat()
        if st.needs_reconcile:
            self._schedule_election("reconcile")

    def _persist_meta(self) -> None:
        st = self.state
        if st.dcp is None:
            return
        meta = VersionedValue({
            "plan": st.dcp,
            "peers": dict(sorted(st.peers.items())),
            "known": sorted(st.known_instances),
            "reconcile": st.needs_reconcile,
        })
        self.store.run(self.id, lambda view: view.put(meta_key(self.id), meta))

    def _adopt_plan(self, plan: DataConsistencyPlan) -> bool:
        """Install ``plan`` if it is newer; DCP versions never go backwards."""
        st = self.state
        if st.dcp is not None and plan.version < st.dcp.version:
            return False
        if st.dcp == plan:
            return False
        old = st.dcp
        st.dcp = plan
        for obj in list(st.scoq):
            if get_consistency_level(plan, obj) is not STRONG or (old and old.generation(obj) != plan.generation(obj)):
                st.scoq.pop(obj, None)
        self._persist_meta()
        self.monitor.dcp(self, plan.version)
        return True

    def _on_LoadDCP(self, env: Envelope) -> None:
        m: LoadDCP = env.payload
        st = self.state
        st.known_instances.add(env.src)
        if st.lifecycle is Lifecycle.CREATED:
            st.dcp = m.plan
            self._initial_ready()
            return
        # a leader pushing a change also clears any pending stabilization wait
        st.protocol_state.pop(f"await:{m.change_id}", None)
        if m.change_id:
            st.leader = env.src
        old = st.dcp
        if m.change_id in st.applied or old is None or m.plan.version <= old.version:
            self.send(env.src, UpdateAck(self.id, m.change_id))
            return
        self._apply_plan_locally(old, m.plan, lambda: self.send(env.src, UpdateAck(self.id, m.change_id)))
        st.applied.add(m.change_id)

    def _apply_plan_locally(self, old: DataConsistencyPlan, new: DataConsistencyPlan, then: Callable[[], None]) -> None:
        """Follower side effects of a pushed plan: build or drop session caches."""
        st = self.state
        objs = sorted({p.object_ref for p in old.patterns} | {p.object_ref for p in new.patterns})
        to_cache = []
        for obj in objs:
            before, after = get_consistency_level(old, obj), get_consistency_level(new, obj)
            if before is SESSION and after is not SESSION:
                st.session_cache.pop(obj, None)
                st.session_history.pop(obj, None)
            elif after is SESSION and before is not SESSION:
                to_cache.append((obj, before, old.generation(obj)))
        self._adopt_plan(new)
        if not to_cache:
            then()
            return

        def body(view):
            out = {}
            for obj, before, gen in to_cache:
                if before is STRONG:
                    out[obj] = VersionedValue(strong_value(view, obj, gen), view.get(obj).stamp)
                else:
                    out[obj] = view.get(obj)
            return out

        def done(values):
            for obj, vv in values.items():
                st.session_cache[obj] = vv
                st.session_history[obj] = TransactionHistory(int(vv.value) if isinstance(vv.value, int) else 0)
            then()

        self._txn(body, [o for o, _, _ in to_cache], done, locked=False)

    def _on_LoadPeerList(self, env: Envelope) -> None:
        st = self.state
        st.peers = dict(env.payload.peers)
        st.known_instances |= set(st.peers)
        if st.lifecycle is Lifecycle.CREATED:
            self._initial_ready()

    # -- reads and writes ----------------------------------------------------

    def _on_Read(self, env: Envelope) -> None:
        m: Read = env.payload
        self.handle_read(m.object_ref, m.req_id, env.src)

    def _on_Write(self, env: Envelope) -> None:
        m: Write = env.payload
        self.handle_write(m.object_ref, m.value, m.mode, m.req_id, env.src)

    def handle_read(self, obj: str, req_id: str = "", reply_to: Optional[str] = None) -> RequestOutcome:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return self._reject(reply_to, req_id, "NotReady")
        level = get_consistency_level(st.dcp, obj)
        self.monitor.admit(self, "read", obj, level)
        if level is SESSION:
            vv = st.session_cache.get(obj, INITIAL_VALUE)
            self.monitor.read(self, obj, level, vv)
            return self._reply(reply_to, req_id, RequestOutcome.committed(vv.value))
        if level is EVENTUAL:

            def body(view):
                return view.get(obj)

            def done(vv):
                self.monitor.read(self, obj, level, vv)
                self._reply(reply_to, req_id, RequestOutcome.committed(vv.value))

            self._txn(body, [obj], done, locked=False)
            return self._reply(None, req_id, RequestOutcome.deferred(req_id))
        gen = st.dcp.generation(obj)

        def sbody(view):
            return VersionedValue(strong_value(view, obj, gen), view.get(obj).stamp)

        def sdone(vv):
            self.monitor.read(self, obj, level, vv)
            self._reply(reply_to, req_id, RequestOutcome.committed(vv.value))

        self._txn(sbody, [obj], sdone)
        return self._reply(None, req_id, RequestOutcome.deferred(req_id))

    def handle_write(self, obj: str, value: Any, mode: str = "assign", req_id: str = "", reply_to: Optional[str] = None) -> RequestOutcome:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return self._reject(reply_to, req_id, "NotReady")
        if mode not in ("assign", "add"):
            return self._reject(reply_to, req_id, f"UnknownMode:{mode}")
        level = get_consistency_level(st.dcp, obj)
        if level is STRONG:
            if mode != "add":
                return self._reject(reply_to, req_id, "AssignOnStrong")
            if not isinstance(value, int) or isinstance(value, bool) or value < 0:
                return self._reject(reply_to, req_id, "InvalidAmount")
        elif mode == "add" and not isinstance(value, int):
            return self._reject(reply_to, req_id, "InvalidAmount")
        self.monitor.admit(self, "write", obj, level)
        op = Assign(value) if mode == "assign" else Add(value)
        if level is SESSION:
            cur = st.session_cache.get(obj, INITIAL_VALUE)
            stamp = self._tick(cur.stamp.counter)
            new = value if mode == "assign" else int(cur.value or 0) + value
            st.session_cache[obj] = VersionedValue(new, stamp)
            hist = st.session_history.get(obj) or TransactionHistory(int(cur.value) if isinstance(cur.value, int) else 0)
            st.session_history[obj] = hist.append(stamp, op)
            self.monitor.session_write(self, obj, stamp)
            return self._reply(reply_to, req_id, RequestOutcome.committed(new))
        if level is EVENTUAL:

            def body(view):
                cur = view.get(obj)
                stamp = self._tick(cur.stamp.counter)
                new = value if mode == "assign" else int(cur.value or 0) + value
                view.put(obj, VersionedValue(new, stamp))
                view.put(f"{hist_prefix(obj, self.id)}{stamp.counter:012d}", VersionedValue(op, stamp))
                return new

            self._txn(body, [obj], lambda new: self._reply(reply_to, req_id, RequestOutcome.committed(new)), locked=False)
            return self._reply(None, req_id, RequestOutcome.deferred(req_id))
        self._consume(obj, st.dcp.generation(obj), value, req_id, reply_to, 0)
        return self._reply(None, req_id, RequestOutcome.deferred(req_id))

    def _consume_in(self, view: TxnView, obj: str, gen: int, delta: int, acct: dict, key: str) -> int:
        acct["r"] -= delta
        acct["c"] += delta
        write_account(view, key, acct)
        uk = use_key(obj, gen, self.id)
        stamp = self._tick(view.get(uk).stamp.counter)
        view.put(uk, VersionedValue(acct["c"], stamp))
        return strong_value(view, obj, gen)

    def _consume(self, obj, gen, delta, req_id, reply_to, attempt) -> None:
        key = acct_key(obj, gen, self.id)

        def body(view):
            acct = read_account(view, key)
            r = acct["r"] if acct else 0
            if acct is not None and delta <= r:
                value = self._consume_in(view, obj, gen, delta, acct, key)
                return ("ok", acct["r"], value)
            return ("short", delta - r, r)

        def done(res):
            if res[0] == "ok":
                self.state.scoq[obj] = res[1]
                self.monitor.consume(self, obj, gen, delta)
                self._reply(reply_to, req_id, RequestOutcome.committed(res[2]))
            else:
                self.state.scoq[obj] = res[2]
                self._start_borrow(obj, gen, delta, res[1], req_id, reply_to, attempt)

        self._txn(body, [obj], done)

    # -- quota borrowing: requester -------------------------------------------

    def _start_borrow(self, obj, gen, delta, shortfall, req_id, reply_to, attempt) -> None:
        st = self.state
        if self._frozen():
            self._reject(reply_to, req_id, "Synchronizing")
            return
        if attempt >= self.config.max_borrow_attempts:
            self._reject(reply_to, req_id, "QuotaExhausted")
            return
        corr = self._new_id("b")
        bs = BorrowState(corr, obj, gen, delta, shortfall, req_id, reply_to, attempt)
        st.protocol_state[corr] = bs
        self._emit("borrow_start", corr=corr, obj=obj, gen=gen, amount=shortfall)
        local = self._members(self.cloudlet, exclude=(self.id,))
        if local:
            self._borrow_round(bs, "local", local)
        else:
            self._next_round_or_fail(bs)

    def _borrow_round(self, bs: BorrowState, rnd: str, targets: list[str]) -> None:
        bs.round = rnd
        bs.round_no += 1
        bs.awaiting = set(targets)
        for p in targets:
            self.send(p, QBrwReq(bs.object_ref, bs.remaining, bs.corr, self.state.epoch, bs.generation))
        timeout = self.t_intra if rnd == "local" else self.t_inter
        self._timer(timeout, self._borrow_timeout, bs.corr, bs.round_no)

    def _borrow_timeout(self, corr: str, round_no: int) -> None:
        bs = self.state.protocol_state.get(corr)
        if not isinstance(bs, BorrowState) or bs.round_no != round_no:
            return
        for p in sorted(bs.awaiting):
            self._suspect(p)
        bs.awaiting = set()
        self._maybe_finish_round(bs)

    def _maybe_finish_round(self, bs: BorrowState) -> None:
        if bs.remaining == 0 or bs.awaiting or bs.inflight:
            return
        self._next_round_or_fail(bs)

    def _next_round_or_fail(self, bs: BorrowState) -> None:
        remote = sorted(p for p, c in self.state.peers.items() if c != self.cloudlet)
        if bs.round in ("", "local") and remote:
            self._borrow_round(bs, "remote", remote)
            return
        self.state.protocol_state.pop(bs.corr, None)
        self._emit("borrow_end", corr=bs.corr, ok=False, taken=bs.taken)
        self._reject(bs.reply_to, bs.req_id, "QuotaExhausted")

    def _on_QuotaTransfer(self, env: Envelope) -> None:
        m: QuotaTransfer = env.payload
        st = self.state
        bs = st.protocol_state.get(m.corr)
        valid = (
            isinstance(bs, BorrowState)
            and env.src in bs.awaiting
            and m.epoch == st.epoch
            and not self._frozen()
            and st.lifecycle is Lifecycle.READY
        )
        if isinstance(bs, BorrowState) and env.src in bs.awaiting:
            bs.awaiting.discard(env.src)
        take = min(m.amount, bs.remaining) if valid else 0
        if take <= 0:
            if m.amount > 0:
                self.send(env.src, QuotaTrAck(m.object_ref, 0, m.hold_id))
            if isinstance(bs, BorrowState):
                self._maybe_finish_round(bs)
            return
        bs.remaining -= take
        bs.taken += take
        bs.inflight += 1
        final = bs.remaining == 0
        obj, gen, delta = bs.object_ref, bs.generation, bs.delta
        key = acct_key(obj, gen, self.id)
        epoch = st.epoch

        def body(view):
            if self._frozen() or st.epoch != epoch:
                # an election started meanwhile; hand the units back
                return ("fenced", None, None)
            acct = read_account(view, key) or new_account()
            acct["r"] += take
            if final and acct["r"] >= delta:
                value = self._consume_in(view, obj, gen, delta, acct, key)
                return ("ok", acct["r"], value)
            write_account(view, key, acct)
            return ("credited", acct["r"], None)

        def done(res):
            bs.inflight -= 1
            if res[0] == "fenced":
                self.send(env.src, QuotaTrAck(obj, 0, m.hold_id))
                if st.protocol_state.pop(bs.corr, None) is bs:
                    self._emit("borrow_end", corr=bs.corr, ok=False, taken=bs.taken)
                    self._reject(bs.reply_to, bs.req_id, "Synchronizing")
                return
            self.send(env.src, QuotaTrAck(obj, take, m.hold_id))
            st.scoq[obj] = res[1]
            self._emit("quota_in", corr=bs.corr, src=env.src, amount=take)
            if not final:
                self._maybe_finish_round(bs)
                return
            st.protocol_state.pop(bs.corr, None)
            if res[0] == "ok":
                self.monitor.consume(self, obj, gen, delta)
                self._emit("borrow_end", corr=bs.corr, ok=True, taken=bs.taken)
                self._reply(bs.reply_to, bs.req_id, RequestOutcome.committed(res[2]))
            else:
                # a concurrent write spent part of the credit; borrow again
                self._start_borrow(obj, gen, delta, delta - res[1], bs.req_id, bs.reply_to, bs.attempt + 1)

        self._txn(body, [obj], done)

    # -- quota borrowing: lender ----------------------------------------------

    def _on_QBrwReq(self, env: Envelope) -> None:
        m: QBrwReq = env.payload
        st = self.state
        if self._stale_sender(env):
            self.send(env.src, QuotaTransfer(m.object_ref, 0, m.corr, "", st.epoch))
            return
        if m.epoch > st.epoch:
            st.epoch = m.epoch
        usable = (
            st.lifecycle is Lifecycle.READY
            and not self._frozen()
            and m.epoch == st.epoch
            and m.amount > 0
            and get_consistency_level(st.dcp, m.object_ref) is STRONG
            and st.dcp.generation(m.object_ref) == m.generation
        )
        if not usable:
            self.send(env.src, QuotaTransfer(m.object_ref, 0, m.corr, "", st.epoch))
            return
        hold_id = self._new_id("h")
        epoch = st.epoch
        key = acct_key(m.object_ref, m.generation, self.id)
        reserve = self.config.reserve

        def body(view):
            if self._frozen() or self.state.epoch != epoch:
                return (0, None)
            acct = read_account(view, key)
            if acct is None:
                return (0, None)
            offer = max(0, min(m.amount, acct["r"] - reserve))
            if offer:
                acct["r"] -= offer
                acct["holds"][hold_id] = offer
                write_account(view, key, acct)
            return (offer, acct["r"])

        def done(res):
            offer, residual = res
            if residual is not None:
                st.scoq[m.object_ref] = residual
            self.send(env.src, QuotaTransfer(m.object_ref, offer, m.corr, hold_id if offer else "", epoch))
            if offer:
                self.holds_meta[hold_id] = (m.object_ref, m.generation)
                self._timer(2 * self._timeout_for(env.src), self._hold_expired, hold_id)

        self._txn(body, [m.object_ref], done)

    def _on_QuotaTrAck(self, env: Envelope) -> None:
        m: QuotaTrAck = env.payload
        meta = self.holds_meta.pop(m.hold_id, None)
        if meta is None:
            return
        obj, gen = meta
        key = acct_key(obj, gen, self.id)

        def body(view):
            acct = read_account(view, key)
            if acct is None or m.hold_id not in acct["holds"]:
                return None
            offered = acct["holds"].pop(m.hold_id)
            acct["r"] += offered - max(0, min(m.amount, offered))
            write_account(view, key, acct)
            return acct["r"]

        def done(residual):
            if residual is not None:
                self.state.scoq[obj] = residual
                self._emit("quota_out", hold=m.hold_id, amount=m.amount)

        self._txn(body, [obj], done)

    def _hold_expired(self, hold_id: str) -> None:
        meta = self.holds_meta.pop(hold_id, None)
        if meta is None:
            return
        obj, gen = meta
        key = acct_key(obj, gen, self.id)

        def body(view):
            acct = read_account(view, key)
            if acct is None or hold_id not in acct["holds"]:
                return 0
            # the borrower may have credited it, so count it as transferred
            amount = acct["holds"].pop(hold_id)
            write_account(view, key, acct)
            return amount

        def done(amount):
            if amount:
                self._emit("hold_expired", hold=hold_id, amount=amount)
                self._need_reconcile()

        self._txn(body, [obj], done)

    # -- membership ---------------------------------------------------------

    def rebalance(self, then: Optional[Callable[[], None]] = None) -> None:
        """Re-divide this cloudlet's residual pool over the current members.

        Accounts of non-members are zeroed and their holds dropped, so a
        falsely suspected instance cannot keep spending.
        """
        st = self.state
        if st.dcp is None:
            if then:
                then()
            return
        plan = st.dcp
        members = self._members(self.cloudlet)
        strong = plan.strong_objects()
        me = self.id

        def body(view):
            converted = 0
            mine = {}
            if not members:
                return mine, converted
            for p in strong:
                obj = p.object_ref
                gen = plan.generation(obj)
                accounts = {k.rsplit("/", 1)[1]: read_account(view, k) for k in view.keys(acct_prefix(obj, gen))}
                accounts = {i: a for i, a in accounts.items() if a is not None}
                pool = sum(a["r"] for a in accounts.values())
                for inst, a in sorted(accounts.items()):
                    if inst not in members:
                        converted += sum(a["holds"].values())
                        if a["r"] or a["holds"]:
                            a["r"] = 0
                            a["holds"] = {}
                            write_account(view, acct_key(obj, gen, inst), a)
                shares = allocate_shares(pool, members)
                for inst in members:
                    a = accounts.get(inst) or new_account()
                    if a["r"] != shares[inst] or inst not in accounts:
                        a["r"] = shares[inst]
                        write_account(view, acct_key(obj, gen, inst), a)
                    if inst == me:
                        mine[obj] = a["r"]
            return mine, converted

        def done(res):
            mine, converted = res
            st.scoq = mine
            if converted:
                self._emit("holds_converted", amount=converted)
                self._need_reconcile()
            if then:
                then()

        self._txn(body, [p.object_ref for p in strong], done)

    def handle_peer_failure(self, failed: str) -> None:
        """Drop ``failed`` from the peer list and tell everyone else."""
        st = self.state
        if failed not in st.peers or failed == self.id:
            return
        cl = st.peers.pop(failed)
        self._emit("peer_removed", target=failed, cloudlet=cl)
        lost_leader = st.leader == failed
        if lost_leader:
            st.leader = None
        self._persist_meta()
        if cl == self.cloudlet:
            self.rebalance()
        change_id = self._new_id("u")
        for p in self._others():
            self.send(p, UpdatePeerList("remove", failed, cl, change_id))
        if lost_leader and st.lifecycle is Lifecycle.READY:
            self._schedule_election("leader_failed")

    def _suspect(self, peer: str) -> None:
        st = self.state
        if st.peers.get(peer) != self.cloudlet:
            return
        self.misses[peer] = self.misses.get(peer, 0) + 1
        if self.misses[peer] >= self.config.suspect_after:
            self.misses.pop(peer, None)
            self.handle_peer_failure(peer)

    def _on_UpdatePeerList(self, env: Envelope) -> None:
        m: UpdatePeerList = env.payload
        st = self.state
        if m.kind == "remove" and m.instance == self.id:
            if st.lifecycle is Lifecycle.READY:
                self._emit("removed", by=env.src)
                self._start_rejoin()
            return
        changed = False
        if m.kind == "add":
            st.known_instances.add(m.instance)
            if st.peers.get(m.instance) != m.cloudlet:
                st.peers[m.instance] = m.cloudlet
                changed = True
            for msg in st.pending_change_log.pop(m.instance, []):
                self.send(m.instance, msg)
            if st.needs_reconcile and st.lifecycle is Lifecycle.READY:
                self._schedule_election("reconcile")
        elif m.kind == "remove" and m.instance in st.peers:
            del st.peers[m.instance]
            if st.leader == m.instance:
                st.leader = None
            changed = True
        if changed:
            self._persist_meta()
        ack = lambda: self.send(env.src, UpdateAck(self.id, m.change_id)) if m.change_id else None
        if changed and m.cloudlet == self.cloudlet and st.lifecycle is Lifecycle.READY:
            self.rebalance(ack)
        else:
            ack()

    def _on_JoinRequest(self, env: Envelope) -> None:
        m: JoinRequest = env.payload
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return
        for js in st.protocol_state.values():
            if isinstance(js, JoinState) and js.joiner == m.instance:
                return
        if st.peers.get(m.instance) == m.cloudlet:
            self.send(env.src, JoinAck(st.dcp, dict(st.peers), st.leader or ""))
            return
        if st.leader is None:
            st.leader = self.id
        st.peers[m.instance] = m.cloudlet
        st.known_instances.add(m.instance)
        self._persist_meta()
        self._emit("peer_added", target=m.instance, cloudlet=m.cloudlet)
        if st.needs_reconcile:
            self._schedule_election("reconcile")
        js = JoinState(self._new_id("j"), m.instance, m.cloudlet)
        js.awaiting = set(p for p in self._others() if p != m.instance)
        st.protocol_state[js.change_id] = js

        def start():
            for p in sorted(js.awaiting):
                self.send(p, UpdatePeerList("add", m.instance, m.cloudlet, js.change_id))
            if not js.awaiting:
                self._finish_join(js)
            else:
                self._timer(self.t_inter, self._join_timeout, js.change_id)

        if m.cloudlet == self.cloudlet:
            self.rebalance(start)
        else:
            start()

    def _join_timeout(self, change_id: str) -> None:
        js = self.state.protocol_state.get(change_id)
        if not isinstance(js, JoinState):
            return
        if js.retries < self.config.max_retries:
            js.retries += 1
            for p in sorted(js.awaiting):
                self.send(p, UpdatePeerList("add", js.joiner, js.cloudlet, js.change_id))
            self._timer(self.t_inter, self._join_timeout, change_id)
            return
        for p in sorted(js.awaiting):
            self._suspect(p)
        self._finish_join(js)

    def _finish_join(self, js: JoinState) -> None:
        st = self.state
        st.protocol_state.pop(js.change_id, None)
        self.send(js.joiner, JoinAck(st.dcp, dict(st.peers), st.leader or ""))
        for msg in st.pending_change_log.pop(js.joiner, []):
            self.send(js.joiner, msg)

    def _on_UpdateAck(self, env: Envelope) -> None:
        m: UpdateAck = env.payload
        state = self.state.protocol_state.get(m.change_id)
        if isinstance(state, JoinState):
            state.awaiting.discard(env.src)
            if not state.awaiting:
                self._finish_join(state)
        elif isinstance(state, ChangeState):
            state.awaiting.discard(env.src)
            if not state.awaiting:
                self._finish_change(state)

    def _on_JoinAck(self, env: Envelope) -> None:
        m: JoinAck = env.payload
        st = self.state
        if st.lifecycle is not Lifecycle.RECOVERING or st.protocol_state.get("join") is None:
            return
        st.protocol_state.pop("join", None)
        if st.dcp is None or m.plan.version >= st.dcp.version:
            st.dcp = m.plan
        st.peers = dict(m.peers)
        st.peers[self.id] = self.cloudlet
        st.known_instances |= set(st.peers)
        st.leader = m.leader or None
        self._persist_meta()
        self.rebalance(self._set_ready)

    # -- recovery -----------------------------------------------------------

    def on_crash(self) -> None:
        self.incarnation += 1
        self.state.lifecycle = Lifecycle.FAILED
        self.store.abort_peer(self.id)
        self._hb_running = False
        self._reconcile_pending = False
        self.monitor.event(self, "peer_crash")

    def on_recover(self) -> None:
        self.recover()

    def recover(self, wal: WriteAheadLog | bytes | None = None) -> Optional[Envelope]:
        """Restart from durable state and ask to rejoin.

        Volatile state (session cache, protocol sub-states, cached SCOQ) is
        gone. The Lamport counter is rebuilt from the log so stamps never go
        backwards; a corrupt log restarts from an empty local state.
        """
        self.incarnation += 1
        fresh = PeerState(self.id, self.cloudlet, Lifecycle.RECOVERING)
        self.state = fresh
        self.holds_meta = {}
        self.outcomes = {}
        self._hb_running = False
        self._reconcile_pending = False
        raw = wal if wal is not None else self.store.wal
        try:
            log = WriteAheadLog.from_bytes(raw if isinstance(raw, (bytes, bytearray)) else raw.to_bytes())
            committed = log.committed()
        except CorruptLog:
            self._emit("corrupt_log")
            committed = []
        counter = 0
        for rec in committed:
            for _, enc in rec["ops"]:
                stamp = enc.get("stamp") if isinstance(enc, dict) else None
                if isinstance(stamp, dict) and stamp.get("instance_id") == self.id:
                    counter = max(counter, int(stamp["counter"]))
        for rec in self.store.records.values():
            counter = max(counter, rec.current.stamp.counter)
        fresh.lamport_counter = counter
        meta = self.store.get(meta_key(self.id)).value
        if isinstance(meta, dict):
            fresh.dcp = meta["plan"]
            fresh.peers = dict(meta["peers"])
            fresh.known_instances = set(fresh.peers) | set(meta.get("known", ()))
            fresh.needs_reconcile = bool(meta.get("reconcile"))
        self.store.abort_peer(self.id)
        prefix = "~quota/"
        me = self.id

        def body(view):
            dropped = 0
            for k in view.keys(prefix):
                if not k.endswith("/" + me):
                    continue
                a = read_account(view, k)
                if a and a["holds"]:
                    dropped += sum(a["holds"].values())
                    a["holds"] = {}
                    write_account(view, k, a)
            return dropped

        dropped = self.store.run(self.id, body)
        if dropped:
            fresh.needs_reconcile = True
            self._persist_meta()
            self._emit("holds_converted", amount=dropped)
        self._emit("recovering", counter=counter)
        return self._start_rejoin(fresh_state=True)

    def _start_rejoin(self, fresh_state: bool = False) -> Optional[Envelope]:
        st = self.state
        st.lifecycle = Lifecycle.RECOVERING
        st.session_cache.clear()
        st.session_history.clear()
        st.protocol_state["join"] = 0
        return self._send_join()

    def _join_contacts(self) -> list[str]:
        st = self.state
        pool = dict(self.seed_peers)
        pool.update(st.peers)
        pool.pop(self.id, None)
        same = sorted(p for p, c in pool.items() if c == self.cloudlet)
        other = sorted(p for p, c in pool.items() if c != self.cloudlet)
        if st.leader and st.leader in pool:
            return [st.leader] + [p for p in same + other if p != st.leader]
        return same + other

    def _send_join(self) -> Optional[Envelope]:
        st = self.state
        attempt = st.protocol_state.get("join")
        if attempt is None or st.lifecycle is not Lifecycle.RECOVERING:
            return None
        contacts = self._join_contacts()
        if st.dcp is not None and attempt >= max(3, len(contacts)):
            # nobody answered a full round: everyone may be restarting, so
            # resume from the durable plan and peer list
            st.protocol_state.pop("join", None)
            self._emit("cold_start", attempts=attempt)
            self.rebalance(self._set_ready)
            return None
        if not contacts or attempt >= self.config.join_attempts:
            self._emit("join_gave_up")
            return None
        st.protocol_state["join"] = attempt + 1
        env = self.send(contacts[attempt % len(contacts)], JoinRequest(self.id, self.cloudlet))
        self._timer(2 * self.t_inter, self._send_join)
        return env

    # -- level changes (leader side) ------------------------------------------

    def _on_ModifyConsistencyLevel(self, env: Envelope) -> None:
        m: ModifyConsistencyLevel = env.payload
        self.modify_consistency_level(m.object_ref, m.level, m.method, m.quota_plan, m.req_id, env.src)

    def _change_in_flight(self, obj: str) -> bool:
        return any(
            isinstance(s, (StabState, ChangeState)) and s.object_ref == obj
            for s in self.state.protocol_state.values()
        )

    def modify_consistency_level(self, obj, level, method=None, quota_plan=None, req_id="", reply_to=None) -> RequestOutcome:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return self._reject(reply_to, req_id, "NotReady")
        if self._change_in_flight(obj):
            return self._reject(reply_to, req_id, "Busy")
        try:
            plan, directive = apply_level_change(
                st.dcp, DcpChangeRequest(obj, level, quota_plan, method), self.known_cloudlets(), self.registry
            )
        except NoOpChange:
            return self._reject(reply_to, req_id, "NoOpChange")
        except DcpValidationError as e:
            return self._reject(reply_to, req_id, f"InvalidPlan: {e}")
        st.leader = self.id
        self._emit("dcp_change", obj=obj, level=level.value, directive=directive.value, version=plan.version)
        if directive is Directive.STABILIZE_THEN_DISTRIBUTE_QUOTA:
            self.run_stabilization(obj, plan, req_id, reply_to)
        else:
            self._run_plan_push(obj, plan, directive, req_id, reply_to)
        return self._reply(None, req_id, RequestOutcome.deferred(req_id))

    def _run_plan_push(self, obj, plan, directive, req_id, reply_to) -> None:
        st = self.state
        cs = ChangeState(self._new_id("c"), obj, plan, req_id, reply_to)
        st.protocol_state[cs.change_id] = cs
        old = st.dcp
        gen = old.generation(obj)

        def body(view):
            if directive is Directive.FLUSH_CACHE_TO_STORE:
                vv = st.session_cache.get(obj)
                if vv is not None and vv.stamp > view.get(obj).stamp:
                    view.put(obj, vv)
                return vv
            if directive is Directive.STOP_QUOTA_CHECKS:
                cur = view.get(obj)
                vv = VersionedValue(strong_value(view, obj, gen), self._tick(cur.stamp.counter))
                view.put(obj, vv)
                return vv
            if get_consistency_level(old, obj) is STRONG:
                return VersionedValue(strong_value(view, obj, gen), view.get(obj).stamp)
            return view.get(obj)

        def done(vv):
            if directive is Directive.FLUSH_CACHE_TO_STORE:
                st.session_cache.pop(obj, None)
                st.session_history.pop(obj, None)
                if vv is not None:
                    self.monitor.flush(self, obj, vv.stamp)
            elif directive is Directive.CACHE_ONLY:
                st.session_cache[obj] = vv
                st.session_history[obj] = TransactionHistory(int(vv.value) if isinstance(vv.value, int) else 0)
            self._adopt_plan(plan)
            st.applied.add(cs.change_id)
            cs.awaiting = set(self._others())
            msg = LoadDCP(plan, cs.change_id)
            for p in sorted(cs.awaiting):
                self.send(p, msg)
            if not cs.awaiting:
                self._finish_change(cs)
            else:
                self._timer(self.t_inter, self._change_timeout, cs.change_id)

        self._txn(body, [obj], done)

    def _change_timeout(self, change_id: str) -> None:
        cs = self.state.protocol_state.get(change_id)
        if not isinstance(cs, ChangeState):
            return
        msg = LoadDCP(cs.plan, cs.change_id)
        if cs.retries < self.config.max_retries:
            cs.retries += 1
            for p in sorted(cs.awaiting):
                self.send(p, msg)
            self._timer(self.t_inter, self._change_timeout, change_id)
            return
        for p in sorted(cs.awaiting):
            self.state.pending_change_log.setdefault(p, []).append(msg)
            self.handle_peer_failure(p)
        self._finish_change(cs)

    def _finish_change(self, cs: ChangeState) -> None:
        self.state.protocol_state.pop(cs.change_id, None)
        self._reply(cs.reply_to, cs.req_id, RequestOutcome.committed(cs.plan.version))

    def _on_ModifyCloudletQuota(self, env: Envelope) -> None:
        m: ModifyCloudletQuota = env.payload
        self.modify_cloudlet_quota(m.object_ref, m.cloudlet, m.quota, m.req_id, env.src)

    def modify_cloudlet_quota(self, obj, cloudlet, quota, req_id="", reply_to=None) -> RequestOutcome:
        """Change one cloudlet's quota for ``obj`` within the current generation.

        Must run at an instance of that cloudlet: the delta is applied to this
        instance's account, and a decrease needs enough residual to give back.
        """
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return self._reject(reply_to, req_id, "NotReady")
        pattern = st.dcp.pattern(obj)
        if pattern is None or pattern.level is not STRONG:
            return self._reject(reply_to, req_id, "NotStrong")
        if cloudlet != self.cloudlet:
            return self._reject(reply_to, req_id, "WrongCloudlet")
        if not isinstance(quota, int) or quota < 0:
            return self._reject(reply_to, req_id, "InvalidQuota")
        if self._change_in_flight(obj):
            return self._reject(reply_to, req_id, "Busy")
        old = int(pattern.quota_plan.get(cloudlet, 0))
        delta = quota - old
        if delta == 0:
            return self._reject(reply_to, req_id, "NoOpChange")
        gen = st.dcp.generation(obj)
        key = acct_key(obj, gen, self.id)
        ck = cap_key(obj, gen)

        def body(view):
            acct = read_account(view, key) or new_account()
            if acct["r"] + delta < 0:
                return None
            acct["r"] += delta
            write_account(view, key, acct)
            cap = view.get(ck).value if ck in view._store.records else old
            view.put(ck, VersionedValue(int(cap) + delta))
            return acct["r"]

        def done(residual):
            if residual is None:
                self._reject(reply_to, req_id, "InsufficientResidual")
                return
            st.scoq[obj] = residual
            self.monitor.capacity(obj, gen, delta=delta)
            cur = st.dcp
            quota_plan = dict(cur.pattern(obj).quota_plan)
            quota_plan[cloudlet] = quota
            new_plan = cur.with_pattern(dataclasses.replace(cur.pattern(obj), quota_plan=quota_plan), cur.version + 1)
            self._adopt_plan(new_plan)
            st.leader = self.id
            cs = ChangeState(self._new_id("c"), obj, new_plan, req_id, reply_to)
            st.protocol_state[cs.change_id] = cs
            st.applied.add(cs.change_id)
            cs.awaiting = set(self._others())
            for p in sorted(cs.awaiting):
                self.send(p, LoadDCP(new_plan, cs.change_id))
            if not cs.awaiting:
                self._finish_change(cs)
            else:
                self._timer(self.t_inter, self._change_timeout, cs.change_id)

        self._txn(body, [obj], done)
        return self._reply(None, req_id, RequestOutcome.deferred(req_id))

    # -- stabilization --------------------------------------------------------

    def _local_stab_input(self, obj: str, cb: Callable[[VersionedValue, TransactionHistory], None]) -> None:
        st = self.state
        level = get_consistency_level(st.dcp, obj)
        if level is SESSION:
            vv = st.session_cache.get(obj, INITIAL_VALUE)
            hist = st.session_history.get(obj) or TransactionHistory(int(vv.value) if isinstance(vv.value, int) else 0)
            cb(vv, hist)
            return
        gen = st.dcp.generation(obj)
        me = self.id

        def body(view):
            if level is STRONG:
                vv = VersionedValue(strong_value(view, obj, gen), view.get(obj).stamp)
                return vv, TransactionHistory(int(vv.value))
            vv = view.get(obj)
            base = view.get(hist_base_key(obj, me)).value
            since = -1
            base_value = 0
            if isinstance(base, dict):
                base_value, since = int(base["value"]), int(base["since"])
            records = []
            for k in view.keys(hist_prefix(obj, me)):
                rec = view.get(k)
                if rec.stamp.counter > since:
                    records.append(HistoryRecord(rec.stamp, rec.value))
            return vv, TransactionHistory(base_value, tuple(records))

        self._txn(body, [obj], lambda res: cb(*res), locked=False)

    def run_stabilization(self, obj: str, plan: DataConsistencyPlan, req_id: str = "", reply_to: Optional[str] = None) -> str:
        st = self.state
        ss = StabState(self._new_id("s"), obj, plan, req_id, reply_to)
        st.protocol_state[ss.stab_id] = ss
        ss.awaiting = set(self._others())
        for p in sorted(ss.awaiting):
            self.send(p, StabReq(obj, ss.stab_id))
        self._local_stab_input(obj, lambda vv, h: self._stab_collect(ss, self.id, vv, h))
        self._timer(self.t_inter, self._stab_timeout, ss.stab_id, "collect")
        return ss.stab_id

    def _on_StabReq(self, env: Envelope) -> None:
        m: StabReq = env.payload
        st = self.state
        if st.lifecycle is not Lifecycle.READY or self._stale_sender(env):
            return
        st.leader = env.src
        st.protocol_state[f"await:{m.stab_id}"] = AwaitCommit(env.src, m.stab_id)
        self._timer(4 * self.t_inter, self._await_commit_timeout, m.stab_id)
        self._local_stab_input(m.object_ref, lambda vv, h: self.send(env.src, StabRes(m.object_ref, m.stab_id, vv, h)))

    def _await_commit_timeout(self, stab_id: str) -> None:
        wait = self.state.protocol_state.pop(f"await:{stab_id}", None)
        if wait is None:
            return
        self._emit("leader_suspected", leader=wait.leader)
        if self.state.leader == wait.leader:
            self.state.leader = None
        self._schedule_election("leader_suspected")

    def _on_StabRes(self, env: Envelope) -> None:
        m: StabRes = env.payload
        ss = self.state.protocol_state.get(m.stab_id)
        if isinstance(ss, StabState) and ss.phase == "collect" and env.src in ss.awaiting:
            self._stab_collect(ss, env.src, m.value, m.history)

    def _stab_collect(self, ss: StabState, src: str, vv, hist) -> None:
        if ss.phase != "collect" or self.state.protocol_state.get(ss.stab_id) is not ss:
            return
        ss.responses[src] = (vv, hist)
        ss.awaiting.discard(src)
        if not ss.awaiting and self.id in ss.responses:
            self._stab_compute(ss)

    def _stab_timeout(self, stab_id: str, phase: str) -> None:
        st = self.state
        ss = st.protocol_state.get(stab_id)
        if not isinstance(ss, StabState) or ss.phase != phase:
            return
        if ss.retries < self.config.max_retries:
            ss.retries += 1
            for p in sorted(ss.awaiting):
                if phase == "collect":
                    self.send(p, StabReq(ss.object_ref, stab_id))
                else:
                    self.send(p, dataclasses.replace(ss.message, share=ss.shares.get(p)))
            self._timer(self.t_inter, self._stab_timeout, stab_id, phase)
            return
        silent = sorted(ss.awaiting)
        ss.awaiting = set()
        if phase == "collect":
            ss.failed |= set(silent)
            for p in silent:
                self.handle_peer_failure(p)
            if self.id in ss.responses:
                self._stab_compute(ss)
            return
        # their shares may or may not have landed; the next election settles it
        for p in silent:
            st.pending_change_log.setdefault(p, []).append(dataclasses.replace(ss.message, share=None))
            self.handle_peer_failure(p)
        self._need_reconcile()
        self._stab_maybe_finish(ss)

    def _stab_compute(self, ss: StabState) -> None:
        st = self.state
        obj = ss.object_ref
        pattern = ss.plan.effective(obj)
        order = sorted(ss.responses)
        values = [ss.responses[p][0] for p in order]
        histories = [ss.responses[p][1] for p in order]
        try:
            value = stabilize(pattern.method, values, histories, self.registry)
        except StabilizationError as e:
            st.protocol_state.pop(ss.stab_id, None)
            self._emit("stab_abort", stab=ss.stab_id, reason=str(e))
            for p in order:
                if p != self.id:
                    self.send(p, LoadDCP(st.dcp, ss.stab_id))
            self._reject(ss.reply_to, ss.req_id, f"MethodError: {e}")
            return
        for vv in values:
            self._observe(vv.stamp)
        stamp = self._tick()
        common = VersionedValue(value, stamp)
        shares: dict[str, int] = {}
        if pattern.level is STRONG:
            gen = ss.plan.generation(obj)
            self.monitor.capacity(obj, gen, total=pattern.capacity)
            for cl, q in sorted(pattern.quota_plan.items()):
                members = self._members(cl, exclude=ss.failed)
                if members:
                    shares.update(allocate_shares(q, members))
                elif q:
                    self._need_reconcile()
        ss.phase = "commit"
        ss.retries = 0
        ss.shares = shares
        ss.message = StabCom(obj, ss.stab_id, common, ss.plan, None)
        ss.awaiting = set(p for p in self._others() if p not in ss.failed)
        for p in sorted(ss.awaiting):
            self.send(p, dataclasses.replace(ss.message, share=shares.get(p)))

        def self_applied():
            ss.self_done = True
            self._stab_maybe_finish(ss)

        self._apply_stabcom(dataclasses.replace(ss.message, share=shares.get(self.id)), self_applied)
        self._timer(self.t_inter, self._stab_timeout, ss.stab_id, "commit")

    def _stab_maybe_finish(self, ss: StabState) -> None:
        if ss.awaiting or not ss.self_done:
            return
        if self.state.protocol_state.pop(ss.stab_id, None) is None:
            return
        self._emit("stab_done", stab=ss.stab_id, obj=ss.object_ref, version=ss.plan.version)
        self._reply(ss.reply_to, ss.req_id, RequestOutcome.committed(ss.message.value.value))

    def _on_StabAck(self, env: Envelope) -> None:
        m: StabAck = env.payload
        ss = self.state.protocol_state.get(m.stab_id)
        if isinstance(ss, StabState) and ss.phase == "commit":
            ss.awaiting.discard(env.src)
            self._stab_maybe_finish(ss)

    def _on_StabCom(self, env: Envelope) -> None:
        m: StabCom = env.payload
        st = self.state
        st.protocol_state.pop(f"await:{m.stab_id}", None)
        if st.lifecycle not in (Lifecycle.READY, Lifecycle.RECOVERING) or st.dcp is None:
            return
        self._apply_stabcom(m, lambda: self.send(env.src, StabAck(m.object_ref, m.stab_id)))

    def _apply_stabcom(self, m: StabCom, then: Callable[[], None]) -> None:
        """Install the common value and this instance's share; idempotent."""
        st = self.state
        if m.stab_id in st.applied:
            then()
            return
        obj = m.object_ref
        plan = m.plan
        pattern = plan.effective(obj)
        gen = plan.generation(obj)
        self._observe(m.value.stamp)
        me = self.id
        counter = st.lamport_counter

        def body(view):
            if m.value.stamp > view.get(obj).stamp:
                view.put(obj, m.value)
            base = m.value.value if isinstance(m.value.value, int) else 0
            view.put(hist_base_key(obj, me), VersionedValue({"value": base, "since": counter}))
            if pattern.level is not STRONG:
                return None
            ck = cap_key(obj, gen)
            if ck not in view._store.records and ck not in view.writes:
                view.put(ck, VersionedValue(int(pattern.quota_plan.get(self.cloudlet, 0))))
            key = acct_key(obj, gen, me)
            acct = read_account(view, key)
            marker = f"~shared/{obj}/{gen}/{me}"
            if m.share is not None and marker not in view._store.records:
                acct = acct or new_account()
                acct["r"] += m.share
                write_account(view, key, acct)
                view.put(marker, VersionedValue(m.share))
            return acct["r"] if acct else None

        def done(residual):
            if m.stab_id in st.applied:
                then()
                return
            st.applied.add(m.stab_id)
            if st.dcp is not None and plan.version > st.dcp.version:
                self._adopt_plan(plan)
            if get_consistency_level(st.dcp, obj) is not SESSION:
                st.session_cache.pop(obj, None)
                st.session_history.pop(obj, None)
            if residual is not None:
                st.scoq[obj] = residual
            then()

        self._txn(body, [obj], done)

    # -- election -------------------------------------------------------------

    def _need_reconcile(self) -> None:
        if not self.state.needs_reconcile:
            self.state.needs_reconcile = True
            self._persist_meta()
        self._schedule_election("reconcile")

    def _schedule_election(self, reason: str) -> None:
        if self._reconcile_pending:
            return
        if reason == "reconcile":
            # bounded per membership: an absent instance can keep a reconcile
            # from ever completing, and only a join or removal changes that
            members = frozenset(self.state.peers)
            prev = self.state.protocol_state.get("reconcile_tries")
            tries = prev[1] + 1 if prev and prev[0] == members else 1
            self.state.protocol_state["reconcile_tries"] = (members, tries)
            if tries > self.config.max_election_attempts:
                if tries == self.config.max_election_attempts + 1:
                    self._emit("election_gave_up", term=self.state.term)
                return
        self._reconcile_pending = True
        delay = self.config.reconcile_delay_ms + self.rng.uniform(0, self.config.election_backoff_ms)
        self._timer(delay, self._scheduled_election, reason, 0)

    def _scheduled_election(self, reason: str, attempt: int) -> None:
        self._reconcile_pending = False
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            if reason == "reconcile" and st.needs_reconcile and st.lifecycle is Lifecycle.RECOVERING:
                self._schedule_election(reason)
            return
        if reason == "reconcile" and not st.needs_reconcile:
            return
        if reason in ("leader_suspected", "leader_failed") and st.leader is not None:
            return
        self.start_election(reason, attempt)

    def start_election(self, reason: str = "manual", attempt: int = 0) -> int:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return 0
        if isinstance(st.protocol_state.get("election"), ElectionState):
            return st.protocol_state["election"].term
        term = max(st.term, st.promised_term) + 1
        st.promised_term = term
        st.epoch = max(st.epoch, term)
        st.frozen_until = self.sim.now + self.freeze_ms
        expected = (set(st.peers) | st.known_instances) - {self.id}
        es = ElectionState(term, expected, reason, attempt)
        st.protocol_state["election"] = es
        self._emit("election_start", term=term, reason=reason, attempt=attempt)
        for p in sorted(expected):
            self.send(p, LeaderReq(self.id, term))

        def own(snapshot):
            es.own = snapshot
            self._election_maybe_conclude(es)

        self._snapshot(own)
        self._timer(self.t_inter, self._election_timeout, term)
        return term

    def _snapshot(self, cb: Callable[[QuotaSnapshot], None]) -> None:
        plan = self.state.dcp
        strong = plan.strong_objects()

        def body(view):
            entries = []
            for p in strong:
                obj = p.object_ref
                gen = plan.generation(obj)
                r, h, c = account_totals(view, obj, gen)
                ck = cap_key(obj, gen)
                cap = int(view.get(ck).value) if ck in view._store.records else -1
                entries.append((obj, gen, r, h, c, cap))
            return QuotaSnapshot(self.cloudlet, self.sim.now, tuple(entries))

        self._txn(body, [p.object_ref for p in strong], cb)

    def _on_LeaderReq(self, env: Envelope) -> None:
        m: LeaderReq = env.payload
        st = self.state
        stale = self._stale_sender(env)
        if stale or st.lifecycle is not Lifecycle.READY or m.term <= st.promised_term:
            self.send(env.src, LeaderAck(None, {}, m.term, False, None))
            return
        st.promised_term = m.term
        st.epoch = max(st.epoch, m.term)
        st.frozen_until = self.sim.now + self.freeze_ms
        es = st.protocol_state.get("election")
        if isinstance(es, ElectionState) and es.term < m.term:
            st.protocol_state.pop("election", None)
        plan, peers = st.dcp, dict(st.peers)
        self._snapshot(lambda snap: self.send(env.src, LeaderAck(plan, peers, m.term, True, snap)))

    def _on_LeaderAck(self, env: Envelope) -> None:
        m: LeaderAck = env.payload
        es = self.state.protocol_state.get("election")
        if not isinstance(es, ElectionState) or es.term != m.term or es.concluded:
            return
        es.acks[env.src] = m
        self._election_maybe_conclude(es)

    def _election_maybe_conclude(self, es: ElectionState) -> None:
        if es.own is not None and es.expected <= set(es.acks):
            self._election_conclude(es)

    def _election_timeout(self, term: int) -> None:
        es = self.state.protocol_state.get("election")
        if isinstance(es, ElectionState) and es.term == term and not es.concluded:
            if es.own is None:
                self._timer(self.t_intra, self._election_timeout, term)
                return
            for p in sorted(es.expected - set(es.acks)):
                self._suspect(p)
            self._election_conclude(es)

    def _election_conclude(self, es: ElectionState) -> None:
        st = self.state
        es.concluded = True
        st.protocol_state.pop("election", None)
        accepted = {p: a for p, a in es.acks.items() if a.accepted}
        votes = 1 + sum(1 for p in accepted if p in st.peers)
        quorum = len(st.peers) // 2 + 1
        if votes < quorum:
            self._emit("election_lost", term=es.term, votes=votes, quorum=quorum)
            self._election_retry(es)
            return
        cands = [Candidate(st.dcp, dict(st.peers), self.id)]
        cands += [Candidate(a.plan, dict(a.peers), p) for p, a in sorted(accepted.items())]
        plan, peers = select_common_dcp(cands, self.config.strategy)
        peers = dict(peers)
        peers[self.id] = self.cloudlet
        restore = self._restoration(es, accepted, plan)
        st.leader = self.id
        st.term = es.term
        self._emit("elected", term=es.term, votes=votes, restore=sorted(restore.items()) if restore else None)

        def broadcast(reconciled: bool):
            msg = Synch(plan, peers, es.term, self.id, reconciled)
            for p in sorted(set(peers) | set(accepted)):
                if p != self.id:
                    self.send(p, msg)
            self._apply_synch(msg)
            if st.needs_reconcile and not reconciled:
                self._election_retry(es)

        if not restore:
            broadcast(restore is not None)
            return
        me = self.id

        def body(view):
            for obj, lost in sorted(restore.items()):
                gen = plan.generation(obj)
                key = acct_key(obj, gen, me)
                acct = read_account(view, key) or new_account()
                acct["r"] += lost
                write_account(view, key, acct)
            return True

        self._txn(body, sorted(restore), lambda _: broadcast(True))

    def _restoration(self, es: ElectionState, accepted: dict, plan: DataConsistencyPlan) -> Optional[dict]:
        """Units lost per Strong object, or None when it is unsafe to tell.

        Restoring is only safe when every known instance took part, all of
        them run the same plan and no transfer is in flight anywhere.
        """
        st = self.state
        everyone = (set(st.peers) | st.known_instances) - {self.id}
        if any(a.plan != st.dcp for a in accepted.values()) or plan != st.dcp:
            return None
        restore = self._deficits(es, accepted, plan)
        if not everyone <= set(accepted):
            if restore and not st.needs_reconcile:
                # a unit is missing but someone is absent; the bounded retry
                # and the next membership change will try again
                st.needs_reconcile = True
                self._persist_meta()
            return None
        return restore

    def _deficits(self, es: ElectionState, accepted: dict, plan: DataConsistencyPlan) -> Optional[dict]:
        snaps = [es.own] + [a.snapshot for _, a in sorted(accepted.items())]
        latest: dict[str, QuotaSnapshot] = {}
        for s in snaps:
            if s is None:
                return None
            if s.cloudlet not in latest or s.taken_at > latest[s.cloudlet].taken_at:
                latest[s.cloudlet] = s
        restore = {}
        for p in plan.strong_objects():
            obj = p.object_ref
            gen = plan.generation(obj)
            held = total = 0
            caps = {}
            for cl, s in latest.items():
                for e in s.entries:
                    if e[0] == obj and e[1] == gen:
                        total += e[2] + e[3] + e[4]
                        held += e[3]
                        if e[5] >= 0:
                            caps[cl] = e[5]
            if held:
                return None
            if any(cl not in latest for cl in p.quota_plan):
                continue
            capacity = sum(caps.get(cl, q) for cl, q in p.quota_plan.items())
            capacity += sum(v for cl, v in caps.items() if cl not in p.quota_plan)
            lost = capacity - total
            if lost > 0:
                restore[obj] = lost
            elif lost < 0:
                self._emit("conservation_excess", obj=obj, gen=gen, excess=-lost)
        return restore

    def _election_retry(self, es: ElectionState) -> None:
        if es.attempt + 1 >= self.config.max_election_attempts:
            self._emit("election_gave_up", term=es.term)
            return
        backoff = self.config.election_backoff_ms * (1 + self.rng.random()) * min(4, 1 + es.attempt)
        self._timer(backoff, self._retry_election, es.reason, es.attempt + 1)

    def _retry_election(self, reason: str, attempt: int) -> None:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            return
        if reason == "reconcile" and not st.needs_reconcile:
            return
        if reason in ("leader_suspected", "leader_failed") and st.leader is not None:
            return
        self.start_election(reason, attempt)

    def _on_Synch(self, env: Envelope) -> None:
        m: Synch = env.payload
        st = self.state
        if st.lifecycle is not Lifecycle.READY or m.term < st.promised_term:
            return
        self._apply_synch(m)
        self.send(env.src, SynchAck(m.term))

    def _apply_synch(self, m: Synch) -> None:
        st = self.state
        st.promised_term = max(st.promised_term, m.term)
        st.term = m.term
        st.leader = m.leader
        st.frozen_until = self.sim.now
        if m.reconciled:
            st.needs_reconcile = False
        if self.id not in m.peers:
            self._emit("removed", by=m.leader)
            self._start_rejoin()
            return
        before = self._members(self.cloudlet)
        if st.dcp is not None and m.plan != st.dcp and m.plan.version >= st.dcp.version:
            self._apply_plan_locally(st.dcp, m.plan, lambda: None)
        st.peers = dict(m.peers)
        st.known_instances |= set(m.peers)
        self._persist_meta()
        if self._members(self.cloudlet) != before:
            self.rebalance()
        if st.needs_reconcile:
            self._schedule_election("reconcile")

    def _on_SynchAck(self, env: Envelope) -> None:
        pass

    # -- heartbeats -----------------------------------------------------------

    def _start_heartbeat(self) -> None:
        if self.config.heartbeat_ms is None or self._hb_running:
            return
        self._hb_running = True
        now = self.sim.now
        for p in self._members(self.cloudlet, exclude=(self.id,)):
            self.last_heard.setdefault(p, now)
        self._timer(self.config.heartbeat_ms, self._heartbeat_tick, background=True)

    def _heartbeat_tick(self) -> None:
        st = self.state
        if st.lifecycle is not Lifecycle.READY:
            self._hb_running = False
            return
        now = self.sim.now
        limit = self.config.heartbeat_ms * self.config.heartbeat_misses
        for p in self._members(self.cloudlet, exclude=(self.id,)):
            self.net.send(self.id, p, Heartbeat(self.id), background=True)
            if now - self.last_heard.setdefault(p, now) > limit:
                self.handle_peer_failure(p)
        self.sim.after(self.config.heartbeat_ms, self._fire, self.incarnation, self._heartbeat_tick, (), background=True)

    def _on_Heartbeat(self, env: Envelope) -> None:
        self._stale_sender(env)

    def _on_Reply(self, env: Envelope) -> None:
        pass
