"""Domain types, the DCaaS message vocabulary and its wire codec.

Everything in here is a value type. Peers own mutable state elsewhere and
exchange these objects inside :class:`Envelope` records.
"""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Any, ClassVar, Iterable, Mapping, Optional, Union

if TYPE_CHECKING:
    from dcaas.stabilizers import TransactionHistory


class ConsistencyLevel(str, enum.Enum):
    STRONG = "Strong"
    EVENTUAL = "Eventual"
    SESSION = "Session"


# Strong > Eventual > Session, used by the restrictive DCP selection strategies.
LEVEL_RANK = {
    ConsistencyLevel.SESSION: 0,
    ConsistencyLevel.EVENTUAL: 1,
    ConsistencyLevel.STRONG: 2,
}


class StabilizationMethod(str, enum.Enum):
    EXACT = "Exact"
    THOMAS = "Thomas"
    MIN = "Min"
    MAX = "Max"
    AVG = "Avg"
    MEDIAN = "Median"
    SUM = "Sum"


@dataclass(frozen=True)
class CustomMethod:
    """A user supplied uncertainty filter, looked up by name in a registry."""

    name: str

    def __str__(self) -> str:
        return f"Custom:{self.name}"


Method = Union[StabilizationMethod, CustomMethod]

FILTER_METHODS = frozenset(
    {
        StabilizationMethod.MIN,
        StabilizationMethod.MAX,
        StabilizationMethod.AVG,
        StabilizationMethod.MEDIAN,
        StabilizationMethod.SUM,
    }
)


def method_to_text(method: Method) -> str:
    if isinstance(method, CustomMethod):
        return str(method)
    return method.value


def method_from_text(text: str) -> Method:
    if text.startswith("Custom:"):
        name = text[len("Custom:") :]
        if not name.isidentifier():
            raise ValueError(f"custom method name must be an identifier: {name!r}")
        return CustomMethod(name)
    return StabilizationMethod(text)


@dataclass(frozen=True, order=True)
class LamportStamp:
    """Lamport clock value; ``instance_id`` breaks counter ties."""

    counter: int
    instance_id: str

    def __post_init__(self):
        if self.counter < 0:
            raise ValueError("Lamport counter must be non-negative")


ZERO_STAMP = LamportStamp(0, "")


def compare_stamps(a: LamportStamp, b: LamportStamp) -> int:
    """Three-way comparison: -1, 0 or 1 for less, equal, greater."""
    ka = (a.counter, a.instance_id)
    kb = (b.counter, b.instance_id)
    return (ka > kb) - (ka < kb)


@dataclass(frozen=True)
class VersionedValue:
    value: Any
    stamp: LamportStamp = ZERO_STAMP


INITIAL_VALUE = VersionedValue(0, ZERO_STAMP)


@dataclass(frozen=True)
class ObjectAccessPattern:
    """Consistency declaration for one object: level, method, cloudlet quotas."""

    object_ref: str
    level: ConsistencyLevel
    method: Method = StabilizationMethod.THOMAS
    quota_plan: Mapping[str, int] = field(default_factory=dict)

    @property
    def capacity(self) -> int:
        return sum(self.quota_plan.values())


@dataclass(frozen=True)
class DataConsistencyPlan:
    """The set of access patterns for a service plus its defaults.

    ``generations`` maps every Strong object to the plan version at which its
    quota plan was (re)established; quota accounts are keyed by it so an
    object that leaves and re-enters Strong starts from fresh accounts.
    """

    patterns: tuple[ObjectAccessPattern, ...] = ()
    version: int = 1
    default_level: ConsistencyLevel = ConsistencyLevel.EVENTUAL
    default_method: Method = StabilizationMethod.THOMAS
    generations: Mapping[str, int] = field(default_factory=dict)

    @cached_property
    def _index(self) -> dict[str, ObjectAccessPattern]:
        return {p.object_ref: p for p in self.patterns}

    def pattern(self, object_ref: str) -> Optional[ObjectAccessPattern]:
        return self._index.get(object_ref)

    def effective(self, object_ref: str) -> ObjectAccessPattern:
        """The declared pattern, or one synthesized from the defaults."""
        p = self._index.get(object_ref)
        if p is None:
            return ObjectAccessPattern(object_ref, self.default_level, self.default_method)
        return p

    def strong_objects(self) -> list[ObjectAccessPattern]:
        return [p for p in self.patterns if p.level is ConsistencyLevel.STRONG]

    def generation(self, object_ref: str) -> int:
        return self.generations.get(object_ref, self.version)

    def with_pattern(self, pattern: ObjectAccessPattern, version: int) -> DataConsistencyPlan:
        others = [p for p in self.patterns if p.object_ref != pattern.object_ref]
        patterns = tuple(sorted([*others, pattern], key=lambda p: p.object_ref))
        gens = dict(self.generations)
        old = self.pattern(pattern.object_ref)
        if pattern.level is ConsistencyLevel.STRONG:
            if old is None or old.level is not ConsistencyLevel.STRONG:
                gens[pattern.object_ref] = version
        else:
            gens.pop(pattern.object_ref, None)
        return dataclasses.replace(self, patterns=patterns, version=version, generations=gens)

    @classmethod
    def from_patterns(
        cls,
        patterns: Iterable[ObjectAccessPattern],
        version: int = 1,
        default_level: ConsistencyLevel = ConsistencyLevel.EVENTUAL,
        default_method: Method = StabilizationMethod.THOMAS,
    ) -> DataConsistencyPlan:
        pats = tuple(patterns)
        gens = {p.object_ref: version for p in pats if p.level is ConsistencyLevel.STRONG}
        return cls(pats, version, default_level, default_method, gens)


@dataclass(frozen=True)
class ScoqEntry:
    object_ref: str
    instance_quota: int

    def __post_init__(self):
        if self.instance_quota < 0:
            raise ValueError("instance quota cannot be negative")


# ---------------------------------------------------------------------------
# Validation


class DcpError(Exception):
    """Base class for plan related errors."""


@dataclass(frozen=True)
class Issue:
    code: str
    object_ref: str
    detail: str = ""


class DcpValidationError(DcpError):
    def __init__(self, issues: list[Issue]):
        self.issues = issues
        super().__init__("; ".join(f"{i.code}({i.object_ref}): {i.detail}" for i in issues))


def validate_dcp(
    plan: DataConsistencyPlan,
    known_cloudlets: Iterable[str],
    registry=None,
) -> list[Issue]:
    """Return every invariant violation in ``plan``; an empty list means ok.

    ``registry`` is a :class:`dcaas.stabilizers.StabilizerRegistry`; when
    omitted the process-wide default registry is consulted.
    """
    if registry is None:
        from dcaas.stabilizers import default_registry

        registry = default_registry
    cloudlets = set(known_cloudlets)
    issues: list[Issue] = []
    seen: set[str] = set()
    for p in plan.patterns:
        if p.object_ref in seen:
            issues.append(Issue("DuplicatePattern", p.object_ref, "object has more than one pattern"))
        seen.add(p.object_ref)
        if p.level is ConsistencyLevel.STRONG and not p.quota_plan:
            issues.append(Issue("MissingQuotaPlan", p.object_ref, "strong object without quota plan"))
        if p.level is not ConsistencyLevel.STRONG and p.quota_plan:
            issues.append(Issue("UnexpectedQuotaPlan", p.object_ref, "quota plan on non-strong object"))
        for cl, q in sorted(p.quota_plan.items()):
            if cl not in cloudlets:
                issues.append(Issue("UnknownCloudlet", p.object_ref, f"cloudlet {cl!r}"))
            if not isinstance(q, int) or isinstance(q, bool) or q < 0:
                issues.append(Issue("InvalidQuota", p.object_ref, f"{cl}: {q!r}"))
        for m in (p.method,):
            if isinstance(m, CustomMethod) and not registry.has(m.name):
                issues.append(Issue("UnresolvedCustomMethod", p.object_ref, m.name))
    if isinstance(plan.default_method, CustomMethod) and not registry.has(plan.default_method.name):
        issues.append(Issue("UnresolvedCustomMethod", "*", plan.default_method.name))
    return issues


def check_dcp(plan: DataConsistencyPlan, known_cloudlets: Iterable[str], registry=None) -> None:
    issues = validate_dcp(plan, known_cloudlets, registry)
    if issues:
        raise DcpValidationError(issues)


# ---------------------------------------------------------------------------
# Messages
#
# Each class carries an ``op`` name; the names below ``API_OPS`` are the DCaaS
# API surface, the rest are transport-level return paths and PaaS traffic.


@dataclass(frozen=True)
class Message:
    op: ClassVar[str] = ""


@dataclass(frozen=True)
class Read(Message):
    op: ClassVar[str] = "Read"
    object_ref: str
    req_id: str = ""


@dataclass(frozen=True)
class Write(Message):
    """``mode`` is ``assign`` or ``add``; Strong objects only accept ``add``."""

    op: ClassVar[str] = "Write"
    object_ref: str
    value: Any
    mode: str = "assign"
    req_id: str = ""


@dataclass(frozen=True)
class LoadDCP(Message):
    op: ClassVar[str] = "LoadDCP"
    plan: DataConsistencyPlan
    change_id: str = ""


@dataclass(frozen=True)
class ModifyConsistencyLevel(Message):
    op: ClassVar[str] = "ModifyConsistencyLevel"
    object_ref: str
    level: ConsistencyLevel
    method: Optional[Method] = None
    quota_plan: Optional[Mapping[str, int]] = None
    req_id: str = ""


@dataclass(frozen=True)
class ModifyCloudletQuota(Message):
    op: ClassVar[str] = "ModifyCloudletQuota"
    object_ref: str
    cloudlet: str
    quota: int
    req_id: str = ""


@dataclass(frozen=True)
class LoadPeerList(Message):
    op: ClassVar[str] = "LoadPeerList"
    peers: Mapping[str, str]


@dataclass(frozen=True)
class UpdatePeerList(Message):
    op: ClassVar[str] = "UpdatePeerList"
    kind: str  # "add" | "remove"
    instance: str
    cloudlet: str
    change_id: str = ""


@dataclass(frozen=True)
class JoinRequest(Message):
    op: ClassVar[str] = "JoinRequest"
    instance: str
    cloudlet: str


@dataclass(frozen=True)
class UpdateAck(Message):
    op: ClassVar[str] = "UpdateAck"
    instance: str
    change_id: str = ""


@dataclass(frozen=True)
class JoinAck(Message):
    op: ClassVar[str] = "JoinAck"
    plan: DataConsistencyPlan
    peers: Mapping[str, str]
    leader: str = ""


@dataclass(frozen=True)
class StabReq(Message):
    op: ClassVar[str] = "StabReq"
    object_ref: str
    stab_id: str


@dataclass(frozen=True)
class StabRes(Message):
    op: ClassVar[str] = "StabRes"
    object_ref: str
    stab_id: str
    value: Optional[VersionedValue] = None
    history: Optional["TransactionHistory"] = None


@dataclass(frozen=True)
class StabCom(Message):
    """Common value plus the recipient's quota share for the new generation."""

    op: ClassVar[str] = "StabCom"
    object_ref: str
    stab_id: str
    value: VersionedValue
    plan: DataConsistencyPlan
    share: Optional[int] = None


@dataclass(frozen=True)
class StabAck(Message):
    op: ClassVar[str] = "StabAck"
    object_ref: str
    stab_id: str


@dataclass(frozen=True)
class QBrwReq(Message):
    op: ClassVar[str] = "QBrwReq"
    object_ref: str
    amount: int
    corr: str = ""
    epoch: int = 0
    generation: int = 0


@dataclass(frozen=True)
class QuotaTransfer(Message):
    op: ClassVar[str] = "QuotaTransfer"
    object_ref: str
    amount: int
    corr: str = ""
    hold_id: str = ""
    epoch: int = 0


@dataclass(frozen=True)
class QuotaTrAck(Message):
    op: ClassVar[str] = "QuotaTrAck"
    object_ref: str
    amount: int
    hold_id: str = ""


@dataclass(frozen=True)
class LeaderReq(Message):
    op: ClassVar[str] = "LeaderReq"
    instance: str
    term: int = 0


@dataclass(frozen=True)
class QuotaSnapshot:
    """Per-store totals of residual, held and consumed units.

    ``entries`` holds ``(object_ref, generation, residual, held, consumed,
    capacity)``; capacity is -1 when the store has no capacity record.
    """

    cloudlet: str
    taken_at: float
    entries: tuple[tuple[str, int, int, int, int, int], ...] = ()


@dataclass(frozen=True)
class LeaderAck(Message):
    op: ClassVar[str] = "LeaderAck"
    plan: Optional[DataConsistencyPlan]
    peers: Mapping[str, str]
    term: int = 0
    accepted: bool = True
    snapshot: Optional[QuotaSnapshot] = None


@dataclass(frozen=True)
class Synch(Message):
    op: ClassVar[str] = "Synch"
    plan: DataConsistencyPlan
    peers: Mapping[str, str]
    term: int = 0
    leader: str = ""
    reconciled: bool = False


@dataclass(frozen=True)
class SynchAck(Message):
    op: ClassVar[str] = "SynchAck"
    term: int = 0


# Transport-level messages -------------------------------------------------


@dataclass(frozen=True)
class Reply(Message):
    """Return path of Read/Write/Modify* to the calling SaaS instance."""

    op: ClassVar[str] = "Reply"
    req_id: str
    status: str  # Committed | Rejected
    value: Any = None
    reason: str = ""


@dataclass(frozen=True)
class Heartbeat(Message):
    op: ClassVar[str] = "Heartbeat"
    instance: str


@dataclass(frozen=True)
class ReplicationBatch(Message):
    op: ClassVar[str] = "ReplicationBatch"
    source: str
    seq: int
    entries: tuple[tuple[str, VersionedValue], ...] = ()


@dataclass(frozen=True)
class ReplAck(Message):
    op: ClassVar[str] = "ReplAck"
    source: str
    seq: int


API_OPS = (
    Read,
    Write,
    LoadDCP,
    ModifyConsistencyLevel,
    ModifyCloudletQuota,
    LoadPeerList,
    UpdatePeerList,
    JoinRequest,
    UpdateAck,
    JoinAck,
    StabReq,
    StabRes,
    StabCom,
    StabAck,
    QBrwReq,
    QuotaTransfer,
    QuotaTrAck,
    LeaderReq,
    LeaderAck,
    Synch,
    SynchAck,
)
TRANSPORT_OPS = (Reply, Heartbeat, ReplicationBatch, ReplAck)
MESSAGE_TYPES = {cls.op: cls for cls in API_OPS + TRANSPORT_OPS}


@dataclass(frozen=True)
class Envelope:
    msg_id: int
    src: str
    dst: str
    sent_at: float
    payload: Message

    def to_record(self) -> dict:
        return {
            "msg_id": self.msg_id,
            "from": self.src,
            "to": self.dst,
            "sent_at": self.sent_at,
            "op": self.payload.op,
            "args": encode_fields(self.payload),
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> Envelope:
        msg_cls = MESSAGE_TYPES[rec["op"]]
        return cls(rec["msg_id"], rec["from"], rec["to"], rec["sent_at"], decode_fields(msg_cls, rec["args"]))

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> Envelope:
        return cls.from_record(json.loads(text))


# ---------------------------------------------------------------------------
# Codec
#
# Values are tagged only where JSON cannot tell them apart; tuples come back as
# tuples so decoded messages compare equal to the originals.


def _codec_types() -> dict[str, type]:
    from dcaas.stabilizers import Add, Assign, HistoryRecord, TransactionHistory

    return {
        "LamportStamp": LamportStamp,
        "VersionedValue": VersionedValue,
        "ObjectAccessPattern": ObjectAccessPattern,
        "DataConsistencyPlan": DataConsistencyPlan,
        "QuotaSnapshot": QuotaSnapshot,
        "TransactionHistory": TransactionHistory,
        "HistoryRecord": HistoryRecord,
        "Assign": Assign,
        "Add": Add,
    }


_ENUMS = {"ConsistencyLevel": ConsistencyLevel, "StabilizationMethod": StabilizationMethod}


def encode_value(v: Any) -> Any:
    if isinstance(v, enum.Enum):
        return {"$enum": type(v).__name__, "v": v.value}
    if isinstance(v, CustomMethod):
        return {"$custom": v.name}
    if dataclasses.is_dataclass(v) and not isinstance(v, type):
        return {"$type": type(v).__name__, **encode_fields(v)}
    if isinstance(v, tuple):
        return {"$tuple": [encode_value(x) for x in v]}
    if isinstance(v, list):
        return [encode_value(x) for x in v]
    if isinstance(v, Mapping):
        return {"$map": [[encode_value(k), encode_value(x)] for k, x in sorted(v.items(), key=lambda kv: repr(kv[0]))]}
    return v


def decode_value(v: Any) -> Any:
    if isinstance(v, list):
        return [decode_value(x) for x in v]
    if isinstance(v, dict):
        if "$enum" in v:
            return _ENUMS[v["$enum"]](v["v"])
        if "$custom" in v:
            return CustomMethod(v["$custom"])
        if "$tuple" in v:
            return tuple(decode_value(x) for x in v["$tuple"])
        if "$map" in v:
            return {decode_value(k): decode_value(x) for k, x in v["$map"]}
        if "$type" in v:
            cls = _codec_types()[v["$type"]]
            return decode_fields(cls, {k: x for k, x in v.items() if k != "$type"})
        raise ValueError(f"untagged object in wire data: {sorted(v)}")
    return v


def encode_fields(obj: Any) -> dict:
    return {f.name: encode_value(getattr(obj, f.name)) for f in dataclasses.fields(obj)}


def decode_fields(cls: type, data: Mapping) -> Any:
    return cls(**{k: decode_value(x) for k, x in data.items()})
