import random

import pytest

from dcaas.model import LamportStamp, ReplicationBatch, VersionedValue
from dcaas.simnet import Scheduler
from dcaas.store import (
    Abort,
    CloudletStore,
    CorruptLog,
    LockConflict,
    OutOfOrderBatch,
    StoreTiming,
    WriteAheadLog,
    is_replicated,
    key_family,
    recover_store,
)


def vv(value, counter, inst="a"):
    return VersionedValue(value, LamportStamp(counter, inst))


class TestTxn:
    def test_disjoint_keys(self):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv(1, 1))])
        s.txn("b", [("write", "y", vv(2, 1, "b"))])
        assert (s.value("x"), s.value("y")) == (1, 2)

    def test_reads_see_committed_state(self):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv(5, 1))])
        out = s.txn("b", [("read", "x"), ("read", "missing")])
        assert out["x"] == vv(5, 1)
        assert out["missing"].value == 0

    def test_same_key_later_stamp_wins(self):
        rng = random.Random(4)
        for _ in range(200):
            s = CloudletStore("1")
            writes = [vv(rng.randint(0, 99), rng.randint(1, 30), rng.choice("abc")) for _ in range(6)]
            for w in writes:
                s.txn(w.stamp.instance_id, [("write", "x", w)])
            # serial oracle: the first write carrying the highest stamp stays
            top = max(w.stamp for w in writes)
            assert s.get("x") == next(w for w in writes if w.stamp == top)

    def test_local_keys_overwrite_unconditionally(self):
        s = CloudletStore("1")
        s.txn("a", [("write", "~meta/a", vv(2, 9))])
        s.txn("a", [("write", "~meta/a", vv(3, 1))])
        assert s.value("~meta/a") == 3
        assert not is_replicated("~meta/a")
        assert key_family("~quota/F/1/a") == "~quota/F/1/"

    def test_unknown_op(self):
        with pytest.raises(ValueError):
            CloudletStore("1").txn("a", [("delete", "x")])

    def test_lock_conflict(self):
        s = CloudletStore("1")
        t = s.begin("a", lambda v: None, ["x"])
        with pytest.raises(LockConflict):
            s.begin("b", lambda v: None, ["x"])
        s.commit(t)
        s.commit(s.begin("b", lambda v: None, ["x"]))
        assert s.lock_violations == 1

    def test_commit_twice(self):
        s = CloudletStore("1")
        t = s.begin("a", lambda v: v.put("x", vv(1, 1)), ["x"])
        s.commit(t)
        with pytest.raises(Abort):
            s.commit(t)

    def test_body_exception_releases_locks(self):
        s = CloudletStore("1")

        def boom(view):
            raise RuntimeError("x")

        with pytest.raises(RuntimeError):
            s.begin("a", boom, ["x"])
        assert not s.holders

    def test_abort_peer(self):
        s = CloudletStore("1")
        s.begin("a", lambda v: v.put("x", vv(1, 1)), ["x"])
        s.begin("b", lambda v: v.put("y", vv(1, 1)), ["y"])
        assert s.abort_peer("a") == 1
        assert list(s.active.values())[0].peer == "b"
        assert s.value("x") == 0


class TestSimulatedTxn:
    def test_serialized_on_shared_lock(self):
        sim = Scheduler()
        s = CloudletStore("1", sim, StoreTiming(25.0, lambda: 100.0))
        done = []
        for peer in ("a", "b", "c"):
            s.submit(peer, lambda v, p=peer: v.put("x", vv(p, len(done) + 1, p)), ["x"], lambda r, p=peer: done.append((p, sim.now)))
        sim.run()
        assert done == [("a", 125.0), ("b", 150.0), ("c", 175.0)]
        assert s.lock_violations == 0

    def test_disjoint_run_in_parallel(self):
        sim = Scheduler()
        s = CloudletStore("1", sim, StoreTiming(25.0, None))
        done = []
        s.submit("a", lambda v: None, ["x"], lambda r: done.append(sim.now))
        s.submit("b", lambda v: None, ["y"], lambda r: done.append(sim.now))
        sim.run()
        assert done == [25.0, 25.0]

    def test_crashed_peer_never_starts(self):
        sim = Scheduler()
        s = CloudletStore("1", sim)
        s.peer_down = lambda p: p == "a"
        done = []
        s.submit("a", lambda v: v.put("x", vv(1, 1)), ["x"], done.append)
        sim.run()
        assert done == [] and s.value("x") == 0


class TestWal:
    def test_crash_before_commit_rolls_back(self):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv(1, 1))])
        with pytest.raises(Abort):
            s.txn("a", [("write", "x", vv(2, 2)), ("write", "y", vv(3, 2))], crash_before_commit=True)
        r = recover_store(s.wal.to_bytes(), "1")
        assert r.value("x") == 1 and r.value("y") == 0

    def test_serial_oracle(self):
        rng = random.Random(9)
        for _ in range(100):
            s = CloudletStore("1")
            oracle = {}
            for i in range(rng.randint(1, 12)):
                key = rng.choice("xyz")
                w = vv(rng.randint(0, 9), i + 1)
                crash = rng.random() < 0.3
                try:
                    s.txn("a", [("write", key, w)], crash_before_commit=crash)
                except Abort:
                    continue
                oracle[key] = w
            r = recover_store(s.wal, "1")
            assert r.snapshot() == dict(sorted(oracle.items()))
            assert recover_store(s.wal, "1").snapshot() == r.snapshot()

    def test_empty(self):
        assert recover_store(b"", "1").snapshot() == {}

    def test_explicit_abort_is_not_replayed(self):
        s = CloudletStore("1")
        t = s.begin("a", lambda v: v.put("x", vv(1, 1)), ["x"])
        s.abort(t)
        assert recover_store(s.wal, "1").value("x") == 0

    def test_round_trip_bytes(self, tmp_path):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv({"k": [1, 2]}, 1))])
        s.wal.save(tmp_path / "wal")
        assert WriteAheadLog.load(tmp_path / "wal").records == s.wal.records
        assert recover_store(WriteAheadLog.load(tmp_path / "wal")).value("x") == {"k": [1, 2]}

    @pytest.mark.parametrize("cut", [3, 11])
    def test_truncated(self, cut):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv(1, 1))])
        with pytest.raises(CorruptLog):
            WriteAheadLog.from_bytes(s.wal.to_bytes()[:-cut])

    def test_flipped_byte(self):
        s = CloudletStore("1")
        s.txn("a", [("write", "x", vv(1, 1))])
        data = bytearray(s.wal.to_bytes())
        data[12] ^= 0x01
        with pytest.raises(CorruptLog):
            WriteAheadLog.from_bytes(bytes(data))


class TestReplication:
    def test_nothing_to_send(self):
        assert CloudletStore("1").emit_replication_batch(0.0) is None

    def test_coalesced_latest_stamps(self):
        s = CloudletStore("1", replication_period_ms=10.0)
        s.txn("a", [("write", "x", vv(1, 1))])
        s.txn("a", [("write", "x", vv(2, 2))])
        s.txn("a", [("write", "y", vv(3, 3)), ("write", "~meta/a", vv(0, 3))])
        b = s.emit_replication_batch(0.0)
        assert b.entries == (("x", vv(2, 2)), ("y", vv(3, 3)))
        assert s.emit_replication_batch(5.0) is None

    def test_period_respected_and_seq_increases(self):
        s = CloudletStore("1", replication_period_ms=10.0)
        seqs = []
        for t in range(0, 50, 3):
            s.txn("a", [("write", "x", vv(t, t + 1))])
            b = s.emit_replication_batch(float(t))
            if b:
                seqs.append((t, b.seq))
        assert [q for _, q in seqs] == list(range(1, len(seqs) + 1))
        assert all(b - a >= 10 for (a, _), (b, _) in zip(seqs, seqs[1:]))

    def test_thomas_merge(self):
        s = CloudletStore("2")
        s.txn("b", [("write", "x", vv(7, 3, "A"))])
        assert s.apply_replication_batch(ReplicationBatch("1", 1, (("x", vv(9, 5, "B")),))) == 1
        assert s.value("x") == 9
        assert s.apply_replication_batch(ReplicationBatch("1", 2, (("x", vv(1, 4, "Z")),))) == 0
        assert s.value("x") == 9

    def test_idempotent(self):
        s = CloudletStore("2")
        b = ReplicationBatch("1", 1, (("x", vv(9, 5)),))
        s.apply_replication_batch(b)
        before = s.snapshot()
        assert s.apply_replication_batch(b) == 0
        assert s.snapshot() == before

    def test_gap_stalls_then_drains(self):
        s = CloudletStore("2")
        b1 = ReplicationBatch("1", 1, (("x", vv(1, 1)),))
        b2 = ReplicationBatch("1", 2, (("x", vv(2, 2)),))
        b3 = ReplicationBatch("1", 3, (("y", vv(3, 3)),))
        for b in (b3, b2):
            with pytest.raises(OutOfOrderBatch):
                s.apply_replication_batch(b)
        assert s.snapshot() == {}
        assert s.apply_replication_batch(b1) == 3
        assert s.snapshot() == {"x": vv(2, 2), "y": vv(3, 3)}

    def test_recovery_remembers_applied_batches(self):
        s = CloudletStore("2")
        s.apply_replication_batch(ReplicationBatch("1", 1, (("x", vv(1, 1)),)))
        r = recover_store(s.wal, "2")
        assert r.applied_seq == {"1": 1}
        assert r.apply_replication_batch(ReplicationBatch("1", 1, (("x", vv(1, 1)),))) == 0

    def test_acknowledge_trims_outbox(self):
        s = CloudletStore("1", replication_period_ms=0.0)
        for i in range(3):
            s.txn("a", [("write", "x", vv(i, i + 1))])
            s.emit_replication_batch(float(i))
        s.acknowledge(2)
        assert sorted(s.outbox) == [3]

    def test_two_stores_converge(self):
        rng = random.Random(11)
        for _ in range(50):
            a, b = CloudletStore("1", replication_period_ms=0.0), CloudletStore("2", replication_period_ms=0.0)
            for i in range(20):
                st = rng.choice([a, b])
                st.txn(st.cloudlet, [("write", rng.choice("xyz"), vv(rng.randint(0, 9), i + 1, st.cloudlet))])
            batches = {s.cloudlet: [] for s in (a, b)}
            for s in (a, b):
                bt = s.emit_replication_batch(0.0)
                if bt:
                    batches[s.cloudlet].append(bt)
            for bt in batches["1"]:
                b.apply_replication_batch(bt)
            for bt in batches["2"]:
                a.apply_replication_batch(bt)
            assert a.snapshot() == b.snapshot()
