"""Offline audit of a run trace, plus replay-and-diff.

The checker re-derives each safety property from trace records alone, so it
also catches bugs in the online monitor.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional


def check_trace(records: Iterable[dict]) -> list[str]:
    """Return one message per violated invariant; empty means clean."""
    problems: list[str] = []
    capacity: dict[tuple, int] = {}
    consumed: dict[tuple, int] = {}
    session: set[tuple] = set()
    flushed: set[tuple] = set()
    versions: dict[str, int] = {}
    sent_at: dict[int, float] = {}
    for rec in records:
        kind = rec.get("kind")
        t = rec.get("t", 0.0)
        if kind == "send":
            sent_at[rec["id"]] = t
        elif kind == "recv":
            if rec["id"] not in sent_at or sent_at[rec["id"]] > t:
                problems.append(f"t={t}: message {rec['id']} delivered before it was sent")
        elif kind == "capacity":
            key = (rec["obj"], rec["gen"])
            if "total" in rec:
                capacity.setdefault(key, rec["total"])
            else:
                capacity[key] = capacity.get(key, 0) + rec["delta"]
        elif kind == "consume":
            key = (rec["obj"], rec["gen"])
            consumed[key] = consumed.get(key, 0) + rec["delta"]
            if key in capacity and consumed[key] > capacity[key]:
                problems.append(f"t={t}: {key[0]} gen {key[1]} consumed {consumed[key]} > capacity {capacity[key]}")
        elif kind == "admit":
            if rec["life"] != "Ready":
                problems.append(f"t={t}: {rec['peer']} admitted {rec['op']} while {rec['life']}")
        elif kind == "session_write":
            session.add(tuple(rec["stamp"]))
        elif kind == "flush":
            flushed.add(tuple(rec["stamp"]))
        elif kind == "commit":
            for key, counter, inst in rec["writes"]:
                s = (counter, inst)
                if s in session and s not in flushed:
                    problems.append(f"t={t}: session write {s} reached store {rec['cloudlet']} as {key}")
        elif kind == "read":
            s = tuple(rec["stamp"])
            if s in session and s not in flushed and s[1] != rec["peer"]:
                problems.append(f"t={t}: {rec['peer']} observed session write {s}")
        elif kind == "dcp":
            last = versions.get(rec["peer"], 0)
            if rec["version"] < last:
                problems.append(f"t={t}: {rec['peer']} DCP version {last} -> {rec['version']}")
            versions[rec["peer"]] = max(last, rec["version"])
        elif kind == "violation":
            problems.append(f"t={t}: monitor: {rec['detail']}")
    return problems


def read_trace(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def trace_header(records: list[dict]) -> Optional[dict]:
    for rec in records:
        if rec.get("kind") == "header":
            return rec["config"]
    return None


def first_difference(a: list[str], b: list[str]) -> Optional[int]:
    for i, (x, y) in enumerate(zip(a, b)):
        if x != y:
            return i
    if len(a) != len(b):
        return min(len(a), len(b))
    return None


def replay(path: str | Path) -> tuple[Optional[int], list[str], list[str]]:
    """Re-run the configuration recorded in the trace header.

    Returns the index of the first differing line (None when identical) and
    both line lists.
    """
    from dcaas.harness import ExperimentConfig, run_experiment

    original = [line.rstrip("\n") for line in Path(path).read_text().splitlines() if line.strip()]
    cfg_dict = trace_header([json.loads(line) for line in original[:5]])
    if cfg_dict is None:
        raise ValueError(f"{path} has no header record")
    art = run_experiment(ExperimentConfig.from_dict(cfg_dict), strict=False)
    fresh = list(art.trace.lines())
    return first_difference(original, fresh), original, fresh
