"""Stabilization methods: collapse divergent per-instance values into one.

The leader of a stabilization round feeds the responses it collected into one
of these functions. All of them are pure and deterministic.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence, Union

from dcaas.model import (
    CustomMethod,
    LamportStamp,
    Method,
    StabilizationMethod,
    VersionedValue,
)


class StabilizationError(Exception):
    pass


class EmptyInputs(StabilizationError):
    pass


class BaseMismatch(StabilizationError):
    pass


class DuplicateName(StabilizationError):
    pass


class UnknownMethod(StabilizationError):
    pass


@dataclass(frozen=True)
class Assign:
    value: int


@dataclass(frozen=True)
class Add:
    delta: int


Operation = Union[Assign, Add]


@dataclass(frozen=True)
class HistoryRecord:
    stamp: LamportStamp
    op: Operation


@dataclass(frozen=True)
class TransactionHistory:
    """Transactions applied at one instance since the last stable point."""

    base_value: int = 0
    records: tuple[HistoryRecord, ...] = ()

    def __post_init__(self):
        for a, b in zip(self.records, self.records[1:]):
            if not a.stamp < b.stamp:
                raise ValueError("history stamps must strictly increase")

    def append(self, stamp: LamportStamp, op: Operation) -> TransactionHistory:
        return TransactionHistory(self.base_value, self.records + (HistoryRecord(stamp, op),))


def apply_op(value: int, op: Operation) -> int:
    if isinstance(op, Assign):
        return op.value
    return value + op.delta


def replay(base_value: int, records: Iterable[HistoryRecord]) -> int:
    value = base_value
    for rec in records:
        value = apply_op(value, rec.op)
    return value


def stabilize_thomas(inputs: Sequence[VersionedValue]) -> VersionedValue:
    """Last writer wins under the Lamport total order."""
    if not inputs:
        raise EmptyInputs("Thomas rule needs at least one value")
    best = inputs[0]
    for vv in inputs[1:]:
        if vv.stamp > best.stamp:
            best = vv
    return best


def stabilize_filter(method: StabilizationMethod, inputs: Sequence[int]) -> int:
    """Basic uncertainty filters over plain values.

    Avg rounds half away from zero; Median of an even count takes the
    lower-middle element.
    """
    if not inputs:
        raise EmptyInputs(f"{method.value} needs at least one value")
    if method is StabilizationMethod.MIN:
        return min(inputs)
    if method is StabilizationMethod.MAX:
        return max(inputs)
    if method is StabilizationMethod.SUM:
        return sum(inputs)
    if method is StabilizationMethod.AVG:
        total = sum(inputs)
        n = len(inputs)
        # exact integer arithmetic; float division loses precision for big sums
        q, r = divmod(abs(total), n)
        if 2 * r >= n:
            q += 1
        return q if total >= 0 else -q
    if method is StabilizationMethod.MEDIAN:
        ordered = sorted(inputs)
        return ordered[(len(ordered) - 1) // 2]
    raise UnknownMethod(f"{method.value} is not a filter method")


def stabilize_exact(histories: Sequence[TransactionHistory]) -> tuple[int, TransactionHistory]:
    """Merge histories into one Lamport-ordered sequence and replay it."""
    if not histories:
        raise EmptyInputs("Exact method needs at least one history")
    bases = {h.base_value for h in histories}
    if len(bases) != 1:
        raise BaseMismatch(f"histories descend from different stable points: {sorted(bases)}")
    base = histories[0].base_value
    merged = tuple(heapq.merge(*(h.records for h in histories), key=lambda r: r.stamp))
    for a, b in zip(merged, merged[1:]):
        if a.stamp == b.stamp:
            raise StabilizationError(f"duplicate stamp {a.stamp} across histories")
    value = replay(base, merged)
    return value, TransactionHistory(base, merged)


class StabilizerRegistry:
    """Named custom filters; populate before any peer starts."""

    def __init__(self):
        self._filters: dict[str, Callable[[list[int]], int]] = {}

    def register(self, name: str, fn: Callable[[list[int]], int]) -> None:
        if not name.isidentifier():
            raise ValueError(f"filter name must be an identifier: {name!r}")
        if name in self._filters:
            raise DuplicateName(name)
        self._filters[name] = fn

    def has(self, name: str) -> bool:
        return name in self._filters

    def get(self, name: str) -> Callable[[list[int]], int]:
        try:
            return self._filters[name]
        except KeyError:
            raise UnknownMethod(f"custom filter {name!r} is not registered") from None

    def names(self) -> list[str]:
        return sorted(self._filters)


default_registry = StabilizerRegistry()


def register_custom_filter(name: str, fn: Callable[[list[int]], int], registry: StabilizerRegistry | None = None) -> None:
    (registry or default_registry).register(name, fn)


def stabilize(
    method: Method,
    values: Sequence[VersionedValue] = (),
    histories: Sequence[TransactionHistory] = (),
    registry: StabilizerRegistry | None = None,
) -> int | object:
    """Dispatch on ``method`` and return the common object value."""
    registry = registry or default_registry
    if method is StabilizationMethod.EXACT:
        return stabilize_exact(histories)[0]
    if method is StabilizationMethod.THOMAS:
        return stabilize_thomas(values).value
    plain = [int(v.value) for v in values]
    if isinstance(method, CustomMethod):
        if not plain:
            raise EmptyInputs(f"{method} needs at least one value")
        return registry.get(method.name)(plain)
    return stabilize_filter(method, plain)
