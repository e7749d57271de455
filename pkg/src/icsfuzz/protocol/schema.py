"""Declarative protocol schema types.

A :class:`ProtocolSpec` describes one message direction of a protocol: a
fixed header, a set of layouts selected by a discriminator field, the value
domain and value classes of every field, and inter-field constraints. All
types here are frozen and safe to share between agents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from types import MappingProxyType
from typing import Iterable, Iterator, Mapping, Optional, Union

Value = Union[int, bytes]


class SpecError(ValueError):
    """A protocol spec is malformed or violates a schema invariant."""


@dataclass(frozen=True)
class ValueSet:
    """Union of closed integer intervals. ``hi=None`` means unbounded."""

    intervals: tuple[tuple[int, Optional[int]], ...]

    @classmethod
    def of(cls, *items: Union[int, tuple[int, Optional[int]]]) -> "ValueSet":
        out = []
        for item in items:
            if isinstance(item, tuple):
                out.append(item)
            else:
                out.append((item, item))
        return cls(tuple(out)).normalized()

    @classmethod
    def interval(cls, lo: int, hi: Optional[int]) -> "ValueSet":
        return cls(((lo, hi),))

    def normalized(self) -> "ValueSet":
        ivs = sorted(self.intervals, key=lambda iv: (iv[0], _hi_key(iv[1])))
        merged: list[tuple[int, Optional[int]]] = []
        for lo, hi in ivs:
            if hi is not None and hi < lo:
                raise SpecError(f"empty interval {lo}..{hi}")
            if merged:
                plo, phi = merged[-1]
                if phi is None or lo <= phi + 1:
                    if phi is not None and (hi is None or hi > phi):
                        merged[-1] = (plo, hi)
                    continue
            merged.append((lo, hi))
        return ValueSet(tuple(merged))

    def __contains__(self, value: object) -> bool:
        if not isinstance(value, int):
            return False
        return any(lo <= value and (hi is None or value <= hi) for lo, hi in self.intervals)

    def __iter__(self) -> Iterator[int]:
        for lo, hi in self.intervals:
            if hi is None:
                raise ValueError("cannot iterate an unbounded value set")
            yield from range(lo, hi + 1)

    def size(self) -> Optional[int]:
        total = 0
        for lo, hi in self.intervals:
            if hi is None:
                return None
            total += hi - lo + 1
        return total

    @property
    def lo(self) -> int:
        return self.intervals[0][0]

    @property
    def hi(self) -> Optional[int]:
        return self.intervals[-1][1]

    def overlaps(self, other: "ValueSet") -> bool:
        for alo, ahi in self.intervals:
            for blo, bhi in other.intervals:
                if (ahi is None or blo <= ahi) and (bhi is None or alo <= bhi):
                    return True
        return False

    def union(self, other: "ValueSet") -> "ValueSet":
        return ValueSet(self.intervals + other.intervals).normalized()

    def __str__(self) -> str:
        parts = []
        for lo, hi in self.intervals:
            if hi is None:
                parts.append(f"{lo}..*")
            elif lo == hi:
                parts.append(str(lo))
            else:
                parts.append(f"{lo}..{hi}")
        return " ".join(parts)


def _hi_key(hi: Optional[int]) -> float:
    return float("inf") if hi is None else hi


@dataclass(frozen=True)
class ValueClass:
    name: str
    members: ValueSet


@dataclass(frozen=True)
class LengthTarget:
    """What a length-of field measures.

    ``kind`` is one of ``field`` (a single field), ``span`` (from ``name``
    inclusive to the end of the frame), ``after`` (everything after
    ``name``) or ``region`` (all fields tagged with region ``name``).
    """

    kind: str
    name: str
    factor: Fraction = Fraction(1)

    def __str__(self) -> str:
        base = {
            "field": self.name,
            "span": f"{self.name}..end",
            "after": f"after {self.name}",
            "region": f"@{self.name}",
        }[self.kind]
        if self.factor == 8:
            base += " unit bits"
        elif self.factor == Fraction(1, 2):
            base += " unit words"
        return base


@dataclass(frozen=True)
class Domain:
    """Allowed values of a field.

    For ``enum`` and ``range`` domains ``allowed`` is the value set; for
    ``length_of`` it is the whole width range; for ``opaque`` it is the set of
    permitted byte lengths.
    """

    kind: str
    allowed: ValueSet
    target: Optional[LengthTarget] = None


@dataclass(frozen=True)
class FieldDescriptor:
    name: str
    width: int
    domain: Domain
    value_classes: tuple[ValueClass, ...]
    mandatory: bool = True
    little_endian: bool = False
    magic: bool = False
    priority: float = 1.0
    region: Optional[str] = None
    offset: Optional[int] = None

    @property
    def opaque(self) -> bool:
        return self.domain.kind == "opaque"

    @property
    def is_length(self) -> bool:
        return self.domain.kind == "length_of"

    @property
    def max_value(self) -> int:
        return (1 << self.width) - 1

    def classify(self, value: Value) -> Optional[str]:
        """Name of the value class ``value`` falls in, or None."""
        key = len(value) if isinstance(value, (bytes, bytearray)) else value
        for vc in self.value_classes:
            if key in vc.members:
                return vc.name
        return None


@dataclass(frozen=True)
class Layout:
    """Fields that follow the header when ``discriminator`` takes a value in ``keys``.

    A layout with ``discriminator=None`` is the default layout.
    """

    discriminator: Optional[str]
    keys: Optional[ValueSet]
    fields: tuple[str, ...]


@dataclass(frozen=True)
class Constraint:
    """Conditional rule on ``target`` that applies when ``when_field`` is in ``when_values``.

    ``kind="range"`` requires ``target`` in ``allowed``; ``kind="equals"``
    requires ``target == op(operand, factor)`` with ``op`` one of ``mul`` or
    ``ceil_div``.
    """

    name: str
    when_field: str
    when_values: ValueSet
    target: str
    kind: str
    allowed: Optional[ValueSet] = None
    op: Optional[str] = None
    operand: Optional[str] = None
    factor: int = 1

    def applies(self, values: Mapping[str, Value]) -> bool:
        return values.get(self.when_field) in self.when_values

    def expected(self, values: Mapping[str, Value]) -> Optional[int]:
        operand = values.get(self.operand) if self.operand else None
        if not isinstance(operand, int):
            return None
        if self.op == "mul":
            return operand * self.factor
        return -(-operand // self.factor)

    def describe(self) -> str:
        if self.kind == "range":
            return f"{self.target} in {self.allowed} when {self.when_field} in {self.when_values}"
        expr = f"{self.operand} * {self.factor}" if self.op == "mul" else f"ceil({self.operand} / {self.factor})"
        return f"{self.target} = {expr} when {self.when_field} in {self.when_values}"


@dataclass(frozen=True)
class Relation:
    """A semantic relation that a semantic mutation can break."""

    rule: str
    kind: str
    field: str


@dataclass(frozen=True)
class ProtocolSpec:
    protocol_id: str
    fields: tuple[FieldDescriptor, ...]
    header: tuple[str, ...]
    layouts: tuple[Layout, ...] = ()
    constraints: tuple[Constraint, ...] = ()
    default_port: int = 0
    canonical: bytes = b""
    splice_points: tuple[str, ...] = ()
    deletable: tuple[str, ...] = ()
    exception: Optional[tuple[str, int]] = None
    response: Optional["ProtocolSpec"] = None
    _index: Mapping[str, int] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        index = {}
        for i, f in enumerate(self.fields):
            if f.name in index:
                raise SpecError(f"{self.protocol_id}: duplicate field {f.name!r}")
            index[f.name] = i
        object.__setattr__(self, "_index", MappingProxyType(index))

    def field(self, name: str) -> FieldDescriptor:
        try:
            return self.fields[self._index[name]]
        except KeyError:
            raise KeyError(f"{self.protocol_id} has no field {name!r}") from None

    def has_field(self, name: str) -> bool:
        return name in self._index

    def field_index(self, name: str) -> int:
        return self._index[name]

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def layout_for(self, values: Mapping[str, Value]) -> Optional[Layout]:
        default = None
        for layout in self.layouts:
            if layout.discriminator is None:
                default = layout
                continue
            if values.get(layout.discriminator) in layout.keys:
                return layout
        return default

    def active_fields(self, values: Mapping[str, Value]) -> Optional[tuple[str, ...]]:
        """Header plus layout field names for ``values``; None if no layout matches."""
        if not self.layouts:
            return self.header
        layout = self.layout_for(values)
        if layout is None:
            return None
        return self.header + layout.fields

    def applicable_constraints(self, values: Mapping[str, Value]) -> list[Constraint]:
        return [c for c in self.constraints if c.applies(values)]

    def is_exception(self, values: Mapping[str, Value]) -> bool:
        if self.exception is None:
            return False
        name, mask = self.exception
        value = values.get(name)
        return isinstance(value, int) and bool(value & mask)


@dataclass(frozen=True)
class Frame:
    """Concrete field values of one message.

    ``pinned`` names length-of fields whose value must be emitted verbatim
    instead of recomputed. ``trailing`` holds bytes left over after the last
    layout field when decoding.
    """

    spec_id: str
    values: Mapping[str, Value]
    raw: Optional[bytes] = None
    pinned: frozenset[str] = frozenset()
    trailing: bytes = b""

    def __post_init__(self) -> None:
        object.__setattr__(self, "values", MappingProxyType(dict(self.values)))
        object.__setattr__(self, "pinned", frozenset(self.pinned))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.spec_id == other.spec_id
            and dict(self.values) == dict(other.values)
            and self.trailing == other.trailing
        )

    def __hash__(self) -> int:
        return hash((self.spec_id, tuple(sorted(self.values.items())), self.trailing))

    def replace(self, **values: Value) -> "Frame":
        merged = dict(self.values)
        merged.update(values)
        return Frame(self.spec_id, merged, None, self.pinned, self.trailing)


class Violation(tuple):
    """``(field, description, rule)``; compares and unpacks like a tuple."""

    __slots__ = ()

    def __new__(cls, field: str, description: str, rule: str) -> "Violation":
        return tuple.__new__(cls, (field, description, rule))

    @property
    def field(self) -> str:
        return self[0]

    @property
    def description(self) -> str:
        return self[1]

    @property
    def rule(self) -> str:
        return self[2]

    def __repr__(self) -> str:
        return f"Violation({self[0]!r}, {self[1]!r}, {self[2]!r})"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def valid(self) -> bool:
        return not self.violations

    @property
    def rules(self) -> tuple[str, ...]:
        return tuple(v.rule for v in self.violations)

    def fields(self) -> tuple[str, ...]:
        return tuple(v.field for v in self.violations)


def iter_classes(spec: ProtocolSpec) -> Iterable[tuple[FieldDescriptor, ValueClass]]:
    for f in spec.fields:
        for vc in f.value_classes:
            yield f, vc
