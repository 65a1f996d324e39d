"""Per-cloudlet key-value store: locked transactions, WAL, lazy replication.

Keys starting with ``~`` hold cloudlet-local metadata (quota accounts,
transaction histories) and never leave the cloudlet. Every other key is
replicated to the other cloudlet stores and merged with the Thomas rule.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Sequence

from dcaas.model import (
    INITIAL_VALUE,
    ReplicationBatch,
    VersionedValue,
    decode_value,
    encode_value,
)

LOCAL_PREFIX = "~"


class StoreError(Exception):
    pass


class Abort(StoreError):
    """Transaction did not commit (crash injection or explicit abort)."""


class CorruptLog(StoreError):
    pass


class OutOfOrderBatch(StoreError):
    """Batch arrived ahead of a gap; it is buffered until the gap fills."""


class LockConflict(StoreError):
    pass


def is_replicated(key: str) -> bool:
    return not key.startswith(LOCAL_PREFIX)


def key_family(key: str) -> str:
    """Everything up to and including the last ``/`` or ``#`` separator."""
    return key[: max(key.rfind("/"), key.rfind("#")) + 1]


@dataclass
class StoreRecord:
    object_ref: str
    current: VersionedValue = INITIAL_VALUE
    lock: Optional[str] = None
    committed_log_index: int = -1


# ---------------------------------------------------------------------------
# Write-ahead log
#
# Frame: 4-byte big-endian length, 4-byte CRC32 of the body, JSON body.
# Bodies are {"txn", "peer", "ops"} for a write set and {"txn", "commit"} for
# the commit marker; a write set without its marker is rolled back on replay.

_HEADER = struct.Struct(">II")


class WriteAheadLog:
    def __init__(self, records: Optional[list[dict]] = None):
        self.records: list[dict] = list(records or [])

    def append(self, rec: dict) -> int:
        self.records.append(rec)
        return len(self.records) - 1

    def __len__(self) -> int:
        return len(self.records)

    def to_bytes(self) -> bytes:
        out = bytearray()
        for rec in self.records:
            body = json.dumps(rec, sort_keys=True, separators=(",", ":")).encode()
            out += _HEADER.pack(len(body), zlib.crc32(body))
            out += body
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> WriteAheadLog:
        records = []
        pos = 0
        while pos < len(data):
            if pos + _HEADER.size > len(data):
                raise CorruptLog(f"truncated frame header at byte {pos}")
            length, crc = _HEADER.unpack_from(data, pos)
            pos += _HEADER.size
            body = data[pos : pos + length]
            if len(body) != length or zlib.crc32(body) != crc:
                raise CorruptLog(f"checksum mismatch in frame at byte {pos - _HEADER.size}")
            records.append(json.loads(body))
            pos += length
        return cls(records)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> WriteAheadLog:
        return cls.from_bytes(Path(path).read_bytes())

    def committed(self) -> list[dict]:
        """Write sets whose commit marker is present, in commit order."""
        pending: dict[str, dict] = {}
        out = []
        for rec in self.records:
            if "ops" in rec:
                pending[rec["txn"]] = rec
            elif rec.get("commit") and rec["txn"] in pending:
                out.append(pending.pop(rec["txn"]))
            elif rec.get("abort"):
                pending.pop(rec["txn"], None)
        return out


def _encode_ops(writes: dict[str, VersionedValue]) -> list:
    return [[k, encode_value(v)] for k, v in sorted(writes.items())]


def _decode_ops(ops: list) -> dict[str, VersionedValue]:
    return {k: decode_value(v) for k, v in ops}


# ---------------------------------------------------------------------------
# Transactions


class TxnView:
    """What a transaction body sees: committed state plus its own writes."""

    def __init__(self, store: CloudletStore):
        self._store = store
        self.writes: dict[str, VersionedValue] = {}
        self.reads: dict[str, VersionedValue] = {}

    def get(self, key: str) -> VersionedValue:
        if key in self.writes:
            return self.writes[key]
        vv = self._store.get(key)
        self.reads.setdefault(key, vv)
        return vv

    def put(self, key: str, vv: VersionedValue) -> None:
        self.writes[key] = vv

    def keys(self, prefix: str) -> list[str]:
        fam = self._store.families.get(prefix)
        if fam is not None:
            found = set(fam)
        else:
            found = {k for k in self._store.records if k.startswith(prefix)}
        found.update(k for k in self.writes if k.startswith(prefix))
        return sorted(found)


@dataclass
class Txn:
    txn_id: str
    peer: str
    locks: tuple[str, ...]
    state: str = "active"  # active | committed | aborted
    writes: dict = field(default_factory=dict)
    result: Any = None


@dataclass(frozen=True)
class StoreTiming:
    """Service-time model.

    ``service_ms`` is charged per transaction; locked transactions also pay a
    round trip to the cloudlet lock manager, sampled through ``lock_rtt``.
    """

    service_ms: float = 25.0
    lock_rtt: Optional[Callable[[], float]] = None


class CloudletStore:
    """One cloudlet's PaaS data store."""

    def __init__(self, cloudlet: str, sim=None, timing: StoreTiming = StoreTiming(), trace=None, replication_period_ms: float = 60_000.0):
        self.cloudlet = cloudlet
        self.node_id = f"store:{cloudlet}"
        self.sim = sim
        self.timing = timing
        self.trace = trace
        self.records: dict[str, StoreRecord] = {}
        self.families: dict[str, set[str]] = {}
        self.wal = WriteAheadLog()
        self.lock_free_at: dict[str, float] = {}
        self.holders: dict[str, str] = {}
        self.active: dict[str, Txn] = {}
        self._txn_seq = 0
        self.lock_violations = 0
        # set by the world so transactions of crashed peers never start
        self.peer_down: Callable[[str], bool] = lambda peer: False
        # observer for committed replicated writes: (source, {key: value})
        self.on_commit: Optional[Callable[[str, dict], None]] = None
        # replication state
        self.replication_period_ms = replication_period_ms
        self.dirty: dict[str, VersionedValue] = {}
        self.next_seq = 1
        self.last_emit: Optional[float] = None
        self.outbox: dict[int, ReplicationBatch] = {}
        self.applied_seq: dict[str, int] = {}
        self.buffered: dict[str, dict[int, ReplicationBatch]] = {}

    # -- reads ------------------------------------------------------------

    def get(self, key: str) -> VersionedValue:
        rec = self.records.get(key)
        return rec.current if rec is not None else INITIAL_VALUE

    def value(self, key: str) -> Any:
        return self.get(key).value

    def snapshot(self, replicated_only: bool = False) -> dict[str, VersionedValue]:
        """Data state for equality checks; excludes locks and log positions."""
        return {
            k: r.current
            for k, r in sorted(self.records.items())
            if not replicated_only or is_replicated(k)
        }

    # -- transactions -----------------------------------------------------

    def _new_txn_id(self, peer: str) -> str:
        self._txn_seq += 1
        return f"{self.cloudlet}:{self._txn_seq}"

    def begin(self, peer: str, body: Callable[[TxnView], Any], locks: Iterable[str] = ()) -> Txn:
        """Acquire locks in sorted order, run ``body`` and log its write set."""
        txn = Txn(self._new_txn_id(peer), peer, tuple(sorted(set(locks))))
        for name in txn.locks:
            if name in self.holders:
                self.lock_violations += 1
                raise LockConflict(f"lock {name!r} held by {self.holders[name]}")
        for name in txn.locks:
            self.holders[name] = txn.txn_id
        view = TxnView(self)
        try:
            txn.result = body(view)
        except BaseException:
            self._release(txn)
            txn.state = "aborted"
            raise
        txn.writes = view.writes
        if txn.writes:
            self.wal.append({"txn": txn.txn_id, "peer": peer, "ops": _encode_ops(txn.writes)})
        self.active[txn.txn_id] = txn
        return txn

    def commit(self, txn: Txn) -> Any:
        if txn.state != "active":
            raise Abort(f"transaction {txn.txn_id} is {txn.state}")
        if txn.writes:
            idx = self.wal.append({"txn": txn.txn_id, "commit": True})
            for key, vv in txn.writes.items():
                self._apply(key, vv, idx, local=True)
            if self.on_commit is not None:
                shared = {k: v for k, v in txn.writes.items() if is_replicated(k)}
                if shared:
                    self.on_commit(txn.peer, shared)
        txn.state = "committed"
        self.active.pop(txn.txn_id, None)
        self._release(txn)
        return txn.result

    def abort(self, txn: Txn) -> None:
        if txn.state != "active":
            return
        if txn.writes:
            self.wal.append({"txn": txn.txn_id, "abort": True})
        txn.state = "aborted"
        self.active.pop(txn.txn_id, None)
        self._release(txn)

    def abort_peer(self, peer: str) -> int:
        """Roll back every in-flight transaction of a crashed peer."""
        victims = [t for t in self.active.values() if t.peer == peer]
        for t in victims:
            self.abort(t)
        return len(victims)

    def _release(self, txn: Txn) -> None:
        for name in txn.locks:
            if self.holders.get(name) == txn.txn_id:
                del self.holders[name]

    def _apply(self, key: str, vv: VersionedValue, log_index: int, local: bool) -> bool:
        """Thomas-rule install; local-only keys are overwritten unconditionally."""
        rec = self.records.get(key)
        if rec is None:
            rec = self.records[key] = StoreRecord(key)
            self.families.setdefault(key_family(key), set()).add(key)
        elif is_replicated(key) and not vv.stamp > rec.current.stamp:
            return False
        rec.current = vv
        rec.committed_log_index = log_index
        if local and is_replicated(key):
            self.dirty[key] = vv
        return True

    def run(self, peer: str, body: Callable[[TxnView], Any], locks: Iterable[str] = ()) -> Any:
        """Begin and commit immediately (no simulated time)."""
        return self.commit(self.begin(peer, body, locks))

    def txn(self, peer: str, ops: Sequence[tuple], crash_before_commit: bool = False) -> dict[str, VersionedValue]:
        """Execute ``("read", key)`` / ``("write", key, VersionedValue)`` ops.

        Returns the values read. With ``crash_before_commit`` the write set
        reaches the WAL but the commit marker never does, and Abort is raised.
        """
        keys = [op[1] for op in ops]

        def body(view: TxnView):
            out = {}
            for op in ops:
                if op[0] == "read":
                    out[op[1]] = view.get(op[1])
                elif op[0] == "write":
                    view.put(op[1], op[2])
                else:
                    raise ValueError(f"unknown op {op[0]!r}")
            return out

        t = self.begin(peer, body, keys)
        if crash_before_commit:
            self.active.pop(t.txn_id, None)
            self._release(t)
            t.state = "aborted"
            raise Abort(f"crash injected before commit of {t.txn_id}")
        return self.commit(t)

    # -- simulated-time transactions ----------------------------------------

    def submit(
        self,
        peer: str,
        body: Callable[[TxnView], Any],
        locks: Iterable[str],
        on_done: Callable[[Any], None],
        locked: bool = True,
        ops: int = 1,
    ) -> None:
        """Schedule a transaction on the simulation clock.

        Lock reservation happens now, so transactions on a lock run in
        submission order; waiting for the lock accrues to the response time.
        """
        sim = self.sim
        lock_names = tuple(sorted(set(locks)))
        delay = self.timing.lock_rtt() if (locked and self.timing.lock_rtt) else 0.0
        start = sim.now + delay
        for name in lock_names:
            start = max(start, self.lock_free_at.get(name, 0.0))
        done_at = start + self.timing.service_ms * ops
        for name in lock_names:
            self.lock_free_at[name] = done_at
        # the commit is queued now so it precedes any later begin at done_at
        slot: list = []
        sim.at(start, self._sim_begin, peer, body, lock_names, slot)
        sim.at(done_at, self._sim_commit, slot, on_done)

    def _sim_begin(self, peer, body, locks, slot) -> None:
        if self.peer_down(peer):
            return
        slot.append(self.begin(peer, body, locks))

    def _sim_commit(self, slot: list, on_done) -> None:
        if not slot or slot[0].state != "active":
            return
        result = self.commit(slot[0])
        on_done(result)

    # -- replication --------------------------------------------------------

    def emit_replication_batch(self, now: float) -> Optional[ReplicationBatch]:
        """Coalesced deltas since the previous batch, or None when the period
        has not elapsed or nothing changed."""
        if self.last_emit is not None and now - self.last_emit < self.replication_period_ms - 1e-6:
            return None
        if not self.dirty:
            return None
        entries = tuple(sorted(self.dirty.items()))
        batch = ReplicationBatch(self.cloudlet, self.next_seq, entries)
        self.next_seq += 1
        self.dirty = {}
        self.last_emit = now
        self.outbox[batch.seq] = batch
        return batch

    def apply_replication_batch(self, batch: ReplicationBatch) -> int:
        """Thomas-merge ``batch`` and any buffered successors.

        Already-applied batches are ignored; batches beyond a gap are buffered
        and raise OutOfOrderBatch.
        """
        last = self.applied_seq.get(batch.source, 0)
        if batch.seq <= last:
            return 0
        if batch.seq > last + 1:
            self.buffered.setdefault(batch.source, {})[batch.seq] = batch
            raise OutOfOrderBatch(f"{batch.source} batch {batch.seq} waits for {last + 1}")
        applied = self._install_batch(batch)
        pending = self.buffered.get(batch.source, {})
        while self.applied_seq[batch.source] + 1 in pending:
            applied += self._install_batch(pending.pop(self.applied_seq[batch.source] + 1))
        return applied

    def _install_batch(self, batch: ReplicationBatch) -> int:
        txn_id = f"repl:{batch.source}:{batch.seq}"
        winners = {k: vv for k, vv in batch.entries if vv.stamp > self.get(k).stamp}
        self.wal.append({"txn": txn_id, "peer": batch.source, "ops": _encode_ops(winners), "repl": [batch.source, batch.seq]})
        idx = self.wal.append({"txn": txn_id, "commit": True})
        for key, vv in winners.items():
            self._apply(key, vv, idx, local=False)
        if winners and self.on_commit is not None:
            self.on_commit(f"repl:{batch.source}", winners)
        self.applied_seq[batch.source] = batch.seq
        return len(winners)

    def acknowledge(self, upto: int) -> None:
        for seq in [s for s in self.outbox if s <= upto]:
            del self.outbox[seq]


def recover_store(wal: WriteAheadLog | bytes, cloudlet: str = "", **kwargs) -> CloudletStore:
    """Rebuild a store from the committed prefix of its log."""
    if isinstance(wal, (bytes, bytearray)):
        wal = WriteAheadLog.from_bytes(bytes(wal))
    store = CloudletStore(cloudlet, **kwargs)
    committed = wal.committed()
    for i, rec in enumerate(committed):
        for key, vv in _decode_ops(rec["ops"]).items():
            store._apply(key, vv, i, local=False)
        if "repl" in rec:
            src, seq = rec["repl"]
            store.applied_seq[src] = max(store.applied_seq.get(src, 0), seq)
    store.wal = WriteAheadLog(list(wal.records))
    return store
