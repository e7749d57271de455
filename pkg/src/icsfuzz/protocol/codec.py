"""Byte-level encode/decode/validate driven by a :class:`ProtocolSpec`.

Decoding is lenient: it only needs the bytes to be structurally parseable.
Validation is strict and reports every domain and constraint violation in
field declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Optional, Sequence

from .schema import (
    FieldDescriptor,
    Frame,
    LengthTarget,
    ProtocolSpec,
    Relation,
    ValidationReport,
    Value,
    Violation,
)


class FrameError(Exception):
    """Base for codec errors."""


class TooShort(FrameError):
    """Bytes end in the middle of a field."""


class UnknownLayout(FrameError):
    """Bytes are not a parseable frame of this spec."""


class MagicMismatch(UnknownLayout):
    """A magic field carries a value this spec does not allow."""


class MissingField(FrameError):
    """A mandatory field has no value."""


class ValueOutOfWidth(FrameError):
    """A value does not fit its field width (strict mode)."""


TRAILING = "<trailing>"


class _BitReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0  # bits

    @property
    def remaining_bits(self) -> int:
        return len(self.data) * 8 - self.pos

    def read_int(self, width: int, little: bool, name: str) -> int:
        if self.remaining_bits < width:
            raise TooShort(f"frame ends inside field {name!r}")
        if self.pos % 8 == 0 and width % 8 == 0:
            start = self.pos // 8
            chunk = self.data[start : start + width // 8]
            self.pos += width
            return int.from_bytes(chunk, "little" if little else "big")
        value = 0
        for _ in range(width):
            byte = self.data[self.pos // 8]
            bit = (byte >> (7 - self.pos % 8)) & 1
            value = (value << 1) | bit
            self.pos += 1
        return value

    def read_bytes(self, count: Optional[int], name: str) -> bytes:
        if self.pos % 8:
            raise UnknownLayout(f"opaque field {name!r} is not byte aligned")
        start = self.pos // 8
        if count is None:
            count = len(self.data) - start
        if start + count > len(self.data):
            raise TooShort(f"frame ends inside field {name!r}")
        self.pos += count * 8
        return self.data[start : start + count]

    def rest(self) -> bytes:
        if self.pos % 8:
            return b""
        return self.data[self.pos // 8 :]


def _sized_by(spec: ProtocolSpec, names: Sequence[str], index: int) -> Optional[str]:
    """Name of an earlier length-of field that measures exactly ``names[index]``."""
    target = names[index]
    for name in names[:index]:
        f = spec.field(name)
        if f.is_length and f.domain.target.kind == "field" and f.domain.target.name == target:
            return name
    return None


def decode_frame(data: bytes, spec: ProtocolSpec) -> Frame:
    """Parse ``data`` structurally into a :class:`Frame`.

    Raises TooShort when the bytes end inside a field and UnknownLayout when a
    magic field mismatches or no layout matches the discriminator.
    """
    if not data:
        raise TooShort("empty input")
    reader = _BitReader(bytes(data))
    values: dict[str, Value] = {}

    def read(names: Sequence[str]) -> None:
        for i, name in enumerate(names):
            f = spec.field(name)
            if f.opaque:
                if i == len(names) - 1:
                    values[name] = reader.read_bytes(None, name)
                else:
                    sizer = _sized_by(spec, names, i)
                    if sizer is None:
                        raise UnknownLayout(f"opaque field {name!r} has no size")
                    count = Fraction(values[sizer]) / spec.field(sizer).domain.target.factor
                    values[name] = reader.read_bytes(int(count), name)
            else:
                value = reader.read_int(f.width, f.little_endian, name)
                if f.magic and value not in f.domain.allowed:
                    raise MagicMismatch(f"magic field {name}={value:#x} does not match {spec.protocol_id}")
                values[name] = value

    read(spec.header)
    if spec.layouts:
        layout = spec.layout_for(values)
        if layout is None:
            raise UnknownLayout(f"no layout of {spec.protocol_id} matches {values!r}")
        read(layout.fields)
    trailing = reader.rest()
    return Frame(spec.protocol_id, values, raw=bytes(data), trailing=trailing)


@dataclass(frozen=True)
class Encoded:
    """Encoder output. ``fields`` lists emitted segments in order; spliced
    blobs appear as ``"+blob#<n>"``."""

    data: bytes
    truncated: tuple[str, ...] = ()
    fields: tuple[str, ...] = ()


@dataclass
class _Segment:
    name: Optional[str]  # None for inserted blobs
    position: float  # layout index; inserts sit between fields
    width: int  # bits for ints; 0 for bytes
    value: Value
    little: bool = False

    @property
    def bits(self) -> int:
        if isinstance(self.value, (bytes, bytearray)):
            return len(self.value) * 8
        return self.width


def _length_value(target: LengthTarget, segments: Sequence[_Segment], spec: ProtocolSpec, layout: Sequence[str]) -> Fraction:
    if target.kind == "field":
        bits = sum(s.bits for s in segments if s.name == target.name)
    elif target.kind == "region":
        bits = sum(s.bits for s in segments if s.name and spec.field(s.name).region == target.name)
    else:
        start = layout.index(target.name) if target.name in layout else -1
        if target.kind == "span":
            bits = sum(s.bits for s in segments if s.position >= start)
        else:
            bits = sum(s.bits for s in segments if s.position > start)
    return Fraction(bits, 8) * target.factor


def expected_lengths(spec: ProtocolSpec, values: Mapping[str, Value], layout: Sequence[str]) -> dict[str, int]:
    """Consistent value of every length-of field in ``layout`` given the other values."""
    segments = _segments(spec, values, layout, omit=(), inserts={}, lengths_as_zero=True)
    out = {}
    for name in layout:
        f = spec.field(name)
        if f.is_length:
            out[name] = int(_length_value(f.domain.target, segments, spec, layout))
    return out


def _segments(
    spec: ProtocolSpec,
    values: Mapping[str, Value],
    layout: Sequence[str],
    omit: Sequence[str],
    inserts: Mapping[str, Sequence[bytes]],
    lengths_as_zero: bool = False,
) -> list[_Segment]:
    segments: list[_Segment] = []
    for i, name in enumerate(layout):
        f = spec.field(name)
        if name not in omit:
            if f.opaque:
                value = bytes(values.get(name, b""))
            elif f.is_length and (lengths_as_zero or name not in values):
                value = 0
            else:
                value = values[name]
            segments.append(_Segment(name, float(i), f.width, value, f.little_endian))
        for j, blob in enumerate(inserts.get(f"after:{name}", ())):
            segments.append(_Segment(None, i + 0.5 + j * 1e-3, 0, bytes(blob)))
    for j, blob in enumerate(inserts.get("end", ())):
        segments.append(_Segment(None, len(layout) + j * 1e-3, 0, bytes(blob)))
    return segments


def encode_with_flags(
    frame: Frame,
    spec: ProtocolSpec,
    *,
    strict: bool = True,
    omit: Sequence[str] = (),
    inserts: Optional[Mapping[str, Sequence[bytes]]] = None,
    layout: Optional[Sequence[str]] = None,
) -> Encoded:
    """Encode ``frame``; report fields truncated to width when not strict.

    Length-of fields are recomputed unless pinned in ``frame.pinned``.
    ``omit`` drops fields from the byte stream and ``inserts`` splices raw
    blobs at splice points (``"end"`` or ``"after:<field>"``). ``layout``
    forces the field sequence instead of deriving it from the discriminator,
    so a mutated discriminator can travel with its original body.
    """
    values = frame.values
    layout = tuple(layout) if layout is not None else spec.active_fields(values)
    if layout is None:
        raise UnknownLayout(f"no layout of {spec.protocol_id} matches {dict(values)!r}")
    for name in layout:
        f = spec.field(name)
        if name not in values and f.mandatory and not f.is_length and name not in omit:
            raise MissingField(name)
    segments = _segments(spec, values, layout, omit, inserts or {})
    for seg in segments:
        if seg.name is None:
            continue
        f = spec.field(seg.name)
        if f.is_length and seg.name not in frame.pinned:
            seg.value = _length_value(f.domain.target, segments, spec, layout)
    truncated = []
    for seg in segments:
        if seg.name is None or isinstance(seg.value, (bytes, bytearray)):
            continue
        value = seg.value
        if isinstance(value, Fraction):
            value = int(value) if value.denominator == 1 else -(-value.numerator // value.denominator)
        if not isinstance(value, int):
            raise ValueOutOfWidth(f"{seg.name}: non-integer value {value!r}")
        if value < 0 or value >> seg.width:
            if strict:
                raise ValueOutOfWidth(f"{seg.name}={value} does not fit {seg.width} bits")
            truncated.append(seg.name)
            value &= (1 << seg.width) - 1
        seg.value = value
    names = []
    blobs = 0
    for seg in segments:
        if seg.name is None:
            names.append(f"+blob#{blobs}")
            blobs += 1
        else:
            names.append(seg.name)
    return Encoded(_pack(segments), tuple(truncated), tuple(names))


def encode_frame(frame: Frame, spec: ProtocolSpec, *, strict: bool = True) -> bytes:
    return encode_with_flags(frame, spec, strict=strict).data


def _pack(segments: Sequence[_Segment]) -> bytes:
    out = bytearray()
    acc = 0
    nbits = 0
    for seg in segments:
        if isinstance(seg.value, (bytes, bytearray)):
            if nbits % 8:
                raise ValueOutOfWidth("opaque segment is not byte aligned")
            if nbits:
                out += acc.to_bytes(nbits // 8, "big")
                acc, nbits = 0, 0
            out += seg.value
            continue
        if seg.little:
            chunk = seg.value.to_bytes(seg.width // 8, "little")
            acc = (acc << seg.width) | int.from_bytes(chunk, "big")
        else:
            acc = (acc << seg.width) | seg.value
        nbits += seg.width
    if nbits % 8:
        raise ValueOutOfWidth("frame is not a whole number of bytes")
    if nbits:
        out += acc.to_bytes(nbits // 8, "big")
    return bytes(out)


def _domain_violation(f: FieldDescriptor, value: Value) -> Optional[str]:
    if f.opaque:
        if not isinstance(value, (bytes, bytearray)):
            return "expected opaque bytes"
        if len(value) not in f.domain.allowed:
            return f"length {len(value)} outside {f.domain.allowed}"
        return None
    if not isinstance(value, int):
        return "expected integer"
    if value < 0 or value > f.max_value:
        return f"value {value} exceeds {f.width}-bit width"
    if f.domain.kind == "enum" and value not in f.domain.allowed:
        return "not in enumerated domain"
    if f.domain.kind == "range" and value not in f.domain.allowed:
        return f"out of range {f.domain.allowed}"
    return None


def validate_frame(frame: Frame, spec: ProtocolSpec) -> ValidationReport:
    """Report every violated domain and constraint, ordered by field declaration."""
    values = frame.values
    layout = spec.active_fields(values)
    violations: list[Violation] = []
    if layout is None:
        disc = spec.layouts[0].discriminator if spec.layouts else "?"
        return ValidationReport((Violation(disc, "no layout for value", f"layout:{disc}"),))
    active = set(layout)
    lengths: dict[str, int] = {}
    if all(n in values or spec.field(n).is_length for n in layout):
        lengths = expected_lengths(spec, values, layout)
    # bytes past the layout still sit inside a span that runs to the end
    to_end = [n for n in lengths if spec.field(n).domain.target.kind in ("span", "after")]
    for n in to_end:
        f = spec.field(n)
        lengths[n] += int(len(frame.trailing) * f.domain.target.factor)
    for f in spec.fields:
        name = f.name
        present = name in values
        if name not in active:
            if present:
                violations.append(Violation(name, "field not in active layout", f"layout:{name}"))
            continue
        if not present:
            if f.mandatory:
                violations.append(Violation(name, "missing", f"presence:{name}"))
            continue
        value = values[name]
        problem = _domain_violation(f, value)
        if problem:
            violations.append(Violation(name, problem, f"domain:{name}"))
        elif f.is_length and name in lengths and value != lengths[name]:
            violations.append(
                Violation(name, f"length mismatch: declared {value}, actual {lengths[name]}", f"length:{name}")
            )
        for c in spec.constraints:
            if c.target != name or not c.applies(values):
                continue
            if c.kind == "range":
                if isinstance(value, int) and value not in c.allowed:
                    violations.append(Violation(name, f"out of range {c.allowed} for {c.when_field}", f"constraint:{c.name}"))
            else:
                expected = c.expected(values)
                if expected is not None and value != expected:
                    violations.append(
                        Violation(name, f"count mismatch: {value} != {expected}", f"constraint:{c.name}")
                    )
    if frame.trailing and not to_end:
        violations.append(Violation(TRAILING, f"{len(frame.trailing)} unexpected trailing bytes", "trailing"))
    return ValidationReport(tuple(violations))


def enumerate_combos(spec: ProtocolSpec) -> list[tuple[str, str]]:
    """Every (field, value-class) pair, in declaration order."""
    return [(f.name, vc.name) for f in spec.fields for vc in f.value_classes]


def relations(spec: ProtocolSpec, values: Mapping[str, Value]) -> list[Relation]:
    """Semantic relations in force for ``values`` (length-of fields and applicable constraints)."""
    layout = spec.active_fields(values) or ()
    out = [Relation(f"length:{n}", "length", n) for n in layout if spec.field(n).is_length]
    for c in spec.constraints:
        if c.target in layout and c.applies(values):
            out.append(Relation(f"constraint:{c.name}", "count" if c.kind == "equals" else "range", c.target))
    return out


def consistent_frame(spec: ProtocolSpec, values: Mapping[str, Value]) -> Frame:
    """Frame for ``values`` with every length-of field set to its consistent value."""
    layout = spec.active_fields(values)
    if layout is None:
        raise UnknownLayout(f"no layout of {spec.protocol_id} matches {dict(values)!r}")
    merged = {n: values[n] for n in layout if n in values}
    merged.update(expected_lengths(spec, merged, layout))
    return Frame(spec.protocol_id, merged)
