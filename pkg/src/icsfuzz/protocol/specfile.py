"""Parser for the line-oriented ``.spec`` protocol description format.

See ``docs/spec-format.md`` for the grammar. Example::

    protocol modbus_tcp
    port 502
    field function_code u8 enum 1 2 3
      class reads 1 2 3
    header function_code
"""

from __future__ import annotations

import re
from dataclasses import replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Optional, Union

from .schema import (
    Constraint,
    Domain,
    FieldDescriptor,
    Layout,
    LengthTarget,
    ProtocolSpec,
    SpecError,
    ValueClass,
    ValueSet,
)

_TYPE_RE = re.compile(r"^u(\d+)(le)?$")
_UNITS = {"bytes": Fraction(1), "bits": Fraction(8), "words": Fraction(1, 2)}


class SpecParseError(SpecError):
    def __init__(self, message: str, line: int, source: str = "<spec>"):
        super().__init__(f"{source}:{line}: {message}")
        self.line = line


def _int(token: str) -> int:
    return int(token, 0)


def parse_value_set(tokens: list[str]) -> ValueSet:
    items: list[tuple[int, Optional[int]]] = []
    for tok in tokens:
        if ".." in tok:
            lo, hi = tok.split("..", 1)
            items.append((_int(lo), None if hi == "*" else _int(hi)))
        else:
            v = _int(tok)
            items.append((v, v))
    if not items:
        raise SpecError("empty value set")
    return ValueSet(tuple(items)).normalized()


class _Block:
    """Accumulates statements for one message direction."""

    def __init__(self, protocol_id: str):
        self.protocol_id = protocol_id
        self.port = 0
        self.canonical = b""
        self.fields: list[dict] = []
        self.header: list[str] = []
        self.layouts: list[Layout] = []
        self.constraints: list[Constraint] = []
        self.splice: list[str] = []
        self.deletable: list[str] = []
        self.exception: Optional[tuple[str, int]] = None


def _parse_field(tokens: list[str]) -> dict:
    if len(tokens) < 3:
        raise SpecError("field needs a name, a type and a domain")
    name, ftype = tokens[0], tokens[1]
    rest = tokens[2:]
    little = False
    if ftype == "bytes":
        width = 8
    else:
        m = _TYPE_RE.match(ftype)
        if not m:
            raise SpecError(f"unknown field type {ftype!r}")
        width = int(m.group(1))
        little = bool(m.group(2))
        if width <= 0:
            raise SpecError("width must be positive")
        if little and width % 8:
            raise SpecError("little-endian fields must be a whole number of bytes")

    attrs = {"optional": False, "magic": False, "priority": 1.0, "region": None}
    kind = rest[0]
    body = rest[1:]
    domain_tokens: list[str] = []
    for tok in body:
        if tok in ("optional", "magic"):
            attrs[tok] = True
        elif tok.startswith("priority="):
            attrs["priority"] = float(tok.split("=", 1)[1])
        elif tok.startswith("region="):
            attrs["region"] = tok.split("=", 1)[1]
        else:
            domain_tokens.append(tok)

    full = ValueSet.interval(0, (1 << width) - 1)
    if ftype == "bytes":
        if kind != "opaque":
            raise SpecError("bytes fields take the opaque domain")
        allowed = parse_value_set(domain_tokens) if domain_tokens else ValueSet.interval(0, None)
        domain = Domain("opaque", allowed)
    elif kind == "enum":
        domain = Domain("enum", parse_value_set(domain_tokens))
    elif kind == "range":
        if len(domain_tokens) != 1 or ".." not in domain_tokens[0]:
            raise SpecError("range domain takes one lo..hi interval")
        allowed = parse_value_set(domain_tokens)
        if allowed.hi is None:
            raise SpecError("range domain must be bounded")
        domain = Domain("range", allowed)
    elif kind == "length_of":
        domain = Domain("length_of", full, _parse_target(domain_tokens))
    else:
        raise SpecError(f"unknown domain {kind!r}")
    if kind in ("enum", "range") and (domain.allowed.lo < 0 or domain.allowed.hi > full.hi):
        raise SpecError(f"domain of {name} exceeds {width}-bit width")
    return {
        "name": name,
        "width": width,
        "little": little,
        "domain": domain,
        "classes": [],
        **attrs,
    }


def _parse_target(tokens: list[str]) -> LengthTarget:
    factor = Fraction(1)
    if len(tokens) >= 2 and tokens[-2] == "unit":
        if tokens[-1] not in _UNITS:
            raise SpecError(f"unknown length unit {tokens[-1]!r}")
        factor = _UNITS[tokens[-1]]
        tokens = tokens[:-2]
    if len(tokens) == 2 and tokens[0] == "after":
        return LengthTarget("after", tokens[1], factor)
    if len(tokens) != 1:
        raise SpecError("length_of takes one target")
    tok = tokens[0]
    if tok.startswith("@"):
        return LengthTarget("region", tok[1:], factor)
    if tok.endswith("..end"):
        return LengthTarget("span", tok[: -len("..end")], factor)
    return LengthTarget("field", tok, factor)


_CONSTRAINT_EQ = re.compile(r"^(?:ceil\((\w+)/(\d+)\)|(\w+)\*(\d+))$")


def _parse_constraint(tokens: list[str]) -> Constraint:
    # constraint NAME when FIELD in VALUES : TARGET (in RANGE | = EXPR)
    try:
        name = tokens[0]
        if tokens[1] != "when" or tokens[3] != "in":
            raise ValueError
        when_field = tokens[2]
        colon = tokens.index(":")
    except (IndexError, ValueError):
        raise SpecError("constraint syntax: constraint NAME when FIELD in VALUES : TARGET ...") from None
    when_values = parse_value_set(tokens[4:colon])
    target = tokens[colon + 1]
    op_tokens = tokens[colon + 2 :]
    if op_tokens and op_tokens[0] == "in":
        return Constraint(name, when_field, when_values, target, "range", allowed=parse_value_set(op_tokens[1:]))
    if op_tokens and op_tokens[0] == "=":
        m = _CONSTRAINT_EQ.match("".join(op_tokens[1:]))
        if not m:
            raise SpecError("equality constraint takes ceil(FIELD / N) or FIELD * N")
        if m.group(1):
            return Constraint(name, when_field, when_values, target, "equals", op="ceil_div", operand=m.group(1), factor=int(m.group(2)))
        return Constraint(name, when_field, when_values, target, "equals", op="mul", operand=m.group(3), factor=int(m.group(4)))
    raise SpecError("constraint needs 'in' or '='")


def _build(block: _Block) -> ProtocolSpec:
    if not block.header:
        raise SpecError(f"{block.protocol_id}: missing header statement")
    declared = {fd["name"] for fd in block.fields}
    fields = []
    for fd in block.fields:
        classes = tuple(fd["classes"]) or (ValueClass("all", fd["domain"].allowed),)
        fields.append(
            FieldDescriptor(
                name=fd["name"],
                width=fd["width"],
                domain=fd["domain"],
                value_classes=classes,
                mandatory=not fd["optional"],
                little_endian=fd["little"],
                magic=fd["magic"],
                priority=fd["priority"],
                region=fd["region"],
            )
        )
    spec = ProtocolSpec(
        protocol_id=block.protocol_id,
        fields=tuple(fields),
        header=tuple(block.header),
        layouts=tuple(block.layouts),
        constraints=tuple(block.constraints),
        default_port=block.port,
        canonical=block.canonical,
        splice_points=tuple(block.splice),
        deletable=tuple(block.deletable),
        exception=block.exception,
    )
    check_spec(spec, declared)
    return _with_offsets(spec)


def check_spec(spec: ProtocolSpec, declared: Optional[set[str]] = None) -> None:
    """Raise SpecError unless every schema invariant holds."""
    declared = declared if declared is not None else set(spec.field_names)
    pid = spec.protocol_id
    for f in spec.fields:
        if f.width <= 0:
            raise SpecError(f"{pid}: {f.name} has non-positive width")
        _check_partition(pid, f)
        if f.is_length:
            t = f.domain.target
            if t.kind in ("field", "span", "after") and t.name not in declared:
                raise SpecError(f"{pid}: {f.name} measures undeclared field {t.name!r}")
            if t.kind == "region" and not any(g.region == t.name for g in spec.fields):
                raise SpecError(f"{pid}: {f.name} measures empty region {t.name!r}")
    layouts_names = [spec.header + l.fields for l in spec.layouts] or [spec.header]
    for names in layouts_names:
        seen = set()
        for i, name in enumerate(names):
            if name not in declared:
                raise SpecError(f"{pid}: layout references undeclared field {name!r}")
            if name in seen:
                raise SpecError(f"{pid}: field {name!r} appears twice in one layout")
            seen.add(name)
            f = spec.field(name)
            if f.opaque and i != len(names) - 1:
                sized = any(
                    spec.field(p).is_length
                    and spec.field(p).domain.target.kind == "field"
                    and spec.field(p).domain.target.name == name
                    for p in names[:i]
                )
                if not sized:
                    raise SpecError(f"{pid}: opaque field {name!r} is neither last nor sized by an earlier length field")
    used = set(spec.header).union(*(l.fields for l in spec.layouts)) if spec.layouts else set(spec.header)
    for f in spec.fields:
        if f.mandatory and f.name not in used:
            raise SpecError(f"{pid}: mandatory field {f.name!r} is not covered by any layout")
    for layout in spec.layouts:
        if layout.discriminator is not None and layout.discriminator not in spec.header:
            raise SpecError(f"{pid}: layout discriminator {layout.discriminator!r} must be a header field")
    for c in spec.constraints:
        for ref in (c.when_field, c.target, c.operand):
            if ref is not None and ref not in declared:
                raise SpecError(f"{pid}: constraint {c.name} references undeclared field {ref!r}")
    for point in spec.splice_points:
        if point != "end" and (not point.startswith("after:") or point[6:] not in declared):
            raise SpecError(f"{pid}: bad splice point {point!r}")
    for name in spec.deletable:
        if name not in declared:
            raise SpecError(f"{pid}: deletable field {name!r} is not declared")
    if spec.exception and spec.exception[0] not in declared:
        raise SpecError(f"{pid}: exception flag field {spec.exception[0]!r} is not declared")


def _check_partition(pid: str, f: FieldDescriptor) -> None:
    classes = f.value_classes
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise SpecError(f"{pid}: {f.name} has duplicate value-class names")
    for i, a in enumerate(classes):
        for b in classes[i + 1 :]:
            if a.members.overlaps(b.members):
                raise SpecError(f"{pid}: {f.name} value classes {a.name} and {b.name} overlap")
    union = classes[0].members
    for c in classes[1:]:
        union = union.union(c.members)
    if union.normalized() != f.domain.allowed.normalized():
        raise SpecError(f"{pid}: {f.name} value classes do not partition the domain {f.domain.allowed}")


def _with_offsets(spec: ProtocolSpec) -> ProtocolSpec:
    """Fill fixed bit offsets for fields whose position is the same in every layout."""
    positions: dict[str, set[Optional[int]]] = {}
    layouts = [spec.header + l.fields for l in spec.layouts] or [spec.header]
    for names in layouts:
        pos: Optional[int] = 0
        for name in names:
            positions.setdefault(name, set()).add(pos)
            f = spec.field(name)
            pos = None if (pos is None or f.opaque) else pos + f.width
    fields = []
    for f in spec.fields:
        offs = positions.get(f.name, {None})
        fields.append(replace(f, offset=next(iter(offs)) if len(offs) == 1 else None))
    return replace(spec, fields=tuple(fields))


def parse_spec(text: str, source: str = "<spec>") -> ProtocolSpec:
    request: Optional[_Block] = None
    response: Optional[_Block] = None
    current: Optional[_Block] = None
    last_field: Optional[dict] = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        keyword, args = tokens[0], tokens[1:]
        try:
            if keyword == "protocol":
                if request is not None:
                    raise SpecError("only one protocol per document")
                if len(args) != 1:
                    raise SpecError("protocol takes one identifier")
                request = current = _Block(args[0])
                continue
            if current is None:
                raise SpecError("document must start with 'protocol'")
            if keyword == "response":
                if response is not None or current is not request:
                    raise SpecError("one response block per document")
                response = current = _Block(request.protocol_id)
                last_field = None
            elif keyword == "end":
                if current is not response:
                    raise SpecError("'end' outside a response block")
                current = request
                last_field = None
            elif keyword == "port":
                current.port = _int(args[0])
            elif keyword == "canonical":
                current.canonical = bytes.fromhex("".join(args))
            elif keyword == "field":
                last_field = _parse_field(args)
                current.fields.append(last_field)
            elif keyword == "class":
                if last_field is None:
                    raise SpecError("class must follow a field")
                last_field["classes"].append(ValueClass(args[0], parse_value_set(args[1:])))
            elif keyword == "header":
                current.header = list(args)
            elif keyword == "layout":
                current.layouts.append(_parse_layout(args))
            elif keyword == "constraint":
                current.constraints.append(_parse_constraint(args))
            elif keyword == "splice":
                if args == ["end"]:
                    current.splice.append("end")
                elif len(args) == 2 and args[0] == "after":
                    current.splice.append(f"after:{args[1]}")
                else:
                    raise SpecError("splice takes 'end' or 'after FIELD'")
            elif keyword == "deletable":
                current.deletable.extend(args)
            elif keyword == "exception":
                if len(args) != 3 or args[1] != "mask":
                    raise SpecError("exception syntax: exception FIELD mask N")
                current.exception = (args[0], _int(args[2]))
            else:
                raise SpecError(f"unknown statement {keyword!r}")
        except SpecParseError:
            raise
        except (SpecError, ValueError, IndexError) as exc:
            raise SpecParseError(str(exc), lineno, source) from None
    if request is None:
        raise SpecParseError("no protocol statement", 0, source)
    if current is response:
        raise SpecParseError("unterminated response block", 0, source)
    spec = _build(request)
    if response is not None:
        spec = replace(spec, response=_build(response))
    return spec


def _parse_layout(args: list[str]) -> Layout:
    if ":" not in args:
        raise SpecError("layout syntax: layout FIELD VALUES : FIELDS  |  layout default : FIELDS")
    colon = args.index(":")
    head, names = args[:colon], tuple(args[colon + 1 :])
    if head == ["default"]:
        return Layout(None, None, names)
    if len(head) < 2:
        raise SpecError("layout needs a discriminator field and values")
    return Layout(head[0], parse_value_set(head[1:]), names)


def load_spec(path: Union[str, Path]) -> ProtocolSpec:
    path = Path(path)
    return parse_spec(path.read_text(), source=str(path))


BUNDLED = {
    "modbus_tcp": "modbus_tcp.spec",
    "s7comm": "s7comm_min.spec",
    "ethernet_ip": "enip_min.spec",
}


def bundled_spec_path(protocol_id: str) -> Path:
    """Path of a bundled spec, by protocol id or by file stem."""
    name = BUNDLED.get(protocol_id)
    if name is None:
        stems = {Path(v).stem: v for v in BUNDLED.values()}
        if protocol_id not in stems:
            raise SpecError(f"no bundled spec {protocol_id!r}; known: {', '.join(sorted(BUNDLED))}")
        name = stems[protocol_id]
    return Path(str(resources.files("icsfuzz") / "data" / "specs" / name))


def load_bundled(protocol_id: str) -> ProtocolSpec:
    return load_spec(bundled_spec_path(protocol_id))
