"""Seed extraction: captured traffic in, validated seeds out.

Each capture runs through fixed stages and stops at the first failure:

1. identify: pick the protocol spec by destination port, using magic bytes
   to break ties between specs sharing a port;
2. decode: structural parse with :func:`decode_frame`;
3. validate: fields in declaration order, each checked against the rule
   retrieved from the knowledge store and the spec's own validation;
4. assemble: build the :class:`Seed`.

A failed stage yields a :class:`Quarantine` record instead of a seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .capture import RawCapture, ingest_traffic
from .knowledge import KnowledgeStore
from .protocol import (
    FrameError,
    MagicMismatch,
    ProtocolSpec,
    TooShort,
    ValidationReport,
    consistent_frame,
    decode_frame,
    encode_frame,
    validate_frame,
)
from .protocol.codec import TRAILING
from .protocol.schema import FieldDescriptor, Frame, Value, Violation

logger = logging.getLogger(__name__)

STAGES = ("identify", "decode", "validate", "assemble")

# Field names reported in a seed's summary view, keyed by protocol. The
# "length" of a request here is its item count, not the transport length.
SUMMARY_KEYS: dict[str, dict[str, str]] = {
    "modbus_tcp": {"function_code": "function_code", "start_address": "start_address", "length": "quantity"},
    "s7comm": {"function_code": "function", "start_address": "address", "length": "item_length"},
    "ethernet_ip": {"function_code": "cip_service", "start_address": "command", "length": "length"},
}


def fields_to_json(values: Mapping[str, Value]) -> dict[str, Any]:
    """Integers stay integers, byte strings become lowercase hex."""
    return {k: (v.hex() if isinstance(v, (bytes, bytearray)) else v) for k, v in values.items()}


def fields_from_json(doc: Mapping[str, Any], spec: ProtocolSpec) -> dict[str, Value]:
    out: dict[str, Value] = {}
    for name, value in doc.items():
        f = spec.field(name)
        out[name] = bytes.fromhex(value) if f.opaque else int(value)
    return out


def canonical_hash(protocol_id: str, values: Mapping[str, Value]) -> str:
    doc = json.dumps([protocol_id, sorted(fields_to_json(values).items())], separators=(",", ":"))
    return hashlib.sha1(doc.encode()).hexdigest()


@dataclass(frozen=True)
class Seed:
    seed_id: str
    protocol_id: str
    fields: Mapping[str, Value]
    provenance: str
    validation: ValidationReport = ValidationReport()
    trace: tuple[tuple[str, str, str], ...] = ()  # (stage, field, rule id)

    @property
    def summary(self) -> dict[str, Any]:
        keys = SUMMARY_KEYS.get(self.protocol_id, {})
        out: dict[str, Any] = {"protocol": self.protocol_id}
        for key, name in keys.items():
            if name in self.fields:
                out[key] = self.fields[name]
        return out

    def frame(self) -> Frame:
        return Frame(self.protocol_id, self.fields)

    def document(self) -> dict:
        return {
            "event": "seed",
            "data": {
                "seed_id": self.seed_id,
                "protocol_id": self.protocol_id,
                "fields": fields_to_json(self.fields),
                "provenance": self.provenance,
            },
        }

    @classmethod
    def from_document(cls, data: Mapping[str, Any], spec: ProtocolSpec) -> "Seed":
        values = fields_from_json(data["fields"], spec)
        report = validate_frame(Frame(spec.protocol_id, values), spec)
        return cls(data["seed_id"], data["protocol_id"], values, data["provenance"], report)


@dataclass(frozen=True)
class Quarantine:
    stage: str
    reason: str
    capture_ref: str
    payload: bytes
    field: Optional[str] = None
    protocol_id: Optional[str] = None

    def document(self) -> dict:
        doc = {
            "stage": self.stage,
            "reason": self.reason,
            "capture": self.capture_ref,
            "hex": self.payload.hex(),
        }
        if self.field is not None:
            doc["field"] = self.field
        if self.protocol_id is not None:
            doc["protocol_id"] = self.protocol_id
        return doc


class _StageFailure(Exception):
    def __init__(self, stage: str, reason: str, field: Optional[str] = None, protocol_id: Optional[str] = None):
        super().__init__(reason)
        self.stage = stage
        self.reason = reason
        self.field = field
        self.protocol_id = protocol_id


def _discriminators(spec: ProtocolSpec) -> set[str]:
    return {lay.discriminator for lay in spec.layouts if lay.discriminator}


def rule_query(spec: ProtocolSpec, name: str, value: Value) -> str:
    if name in _discriminators(spec) and isinstance(value, int):
        return f"Protocol rules {spec.protocol_id} {name} {value}"
    return f"{spec.protocol_id} field {name}"


def identify(capture: RawCapture, specs: Sequence[ProtocolSpec], ports: Optional[Mapping[int, str]] = None) -> ProtocolSpec:
    port = capture.dst_port
    if ports and port in ports:
        candidates = [s for s in specs if s.protocol_id == ports[port]]
    else:
        candidates = [s for s in specs if s.default_port == port]
    if not candidates:
        raise _StageFailure("identify", f"no protocol spec for port {port}")
    if len(candidates) == 1:
        return candidates[0]
    for spec in candidates:
        try:
            decode_frame(capture.payload, spec)
        except MagicMismatch:
            continue
        except FrameError:
            return spec
        return spec
    raise _StageFailure("identify", f"magic bytes match none of {[s.protocol_id for s in candidates]}")


def extract_seed(
    capture: RawCapture,
    store: Optional[KnowledgeStore],
    specs: Union[ProtocolSpec, Sequence[ProtocolSpec]],
    *,
    ports: Optional[Mapping[int, str]] = None,
    provenance: Optional[str] = None,
) -> Union[Seed, Quarantine]:
    """Run the staged pipeline on one capture."""
    if isinstance(specs, ProtocolSpec):
        specs = [specs]
    spec: Optional[ProtocolSpec] = None
    trace: list[tuple[str, str, str]] = []
    try:
        spec = identify(capture, specs, ports)
        trace.append(("identify", "", spec.protocol_id))
        try:
            frame = decode_frame(capture.payload, spec)
        except FrameError as exc:
            kind = "too short" if isinstance(exc, TooShort) else "unknown layout"
            raise _StageFailure("decode", f"{kind}: {exc}", protocol_id=spec.protocol_id) from None
        trace.append(("decode", "", ""))
        report = validate_frame(frame, spec)
        by_field: dict[str, list[Violation]] = {}
        for v in report.violations:
            by_field.setdefault(v.field, []).append(v)
        for f in spec.fields:
            if f.name not in frame.values:
                if f.name in by_field:
                    _fail_field(spec, f, by_field[f.name], None)
                continue
            rule_id = ""
            if store is not None:
                hits = store.retrieve(rule_query(spec, f.name, frame.values[f.name]), k=1)
                rule_id = hits[0].entry.id if hits else ""
            trace.append(("validate", f.name, rule_id))
            if f.name in by_field:
                _fail_field(spec, f, by_field[f.name], rule_id or None)
        if TRAILING in by_field:
            raise _StageFailure("validate", by_field[TRAILING][0].description, TRAILING, spec.protocol_id)
        values = dict(frame.values)
        seed_id = f"{spec.protocol_id}-{canonical_hash(spec.protocol_id, values)[:12]}"
        trace.append(("assemble", "", seed_id))
        return Seed(seed_id, spec.protocol_id, values, provenance or capture.ref or "capture", report, tuple(trace))
    except _StageFailure as fail:
        return Quarantine(
            fail.stage, fail.reason, capture.ref, capture.payload, fail.field,
            fail.protocol_id or (spec.protocol_id if spec else None),
        )


def _fail_field(spec: ProtocolSpec, f: FieldDescriptor, violations: list[Violation], rule_id: Optional[str]) -> None:
    v = violations[0]
    reason = f"{f.name}: {v.description}"
    if rule_id is None and f.name in _discriminators(spec):
        reason += " (no matching protocol rule)"
    elif rule_id:
        reason += f" (rule {rule_id})"
    raise _StageFailure("validate", reason, f.name, spec.protocol_id)


class SeedCorpus:
    """Campaign-wide seed set deduplicated on the canonical field map."""

    def __init__(self) -> None:
        self._seeds: dict[str, Seed] = {}
        self.duplicates = 0

    def add(self, seed: Seed) -> bool:
        if seed.seed_id in self._seeds:
            self.duplicates += 1
            return False
        self._seeds[seed.seed_id] = seed
        return True

    def __len__(self) -> int:
        return len(self._seeds)

    def __iter__(self):
        return iter(self._seeds.values())

    def __contains__(self, seed_id: str) -> bool:
        return seed_id in self._seeds

    def get(self, seed_id: str) -> Seed:
        return self._seeds[seed_id]

    def seeds(self) -> list[Seed]:
        return list(self._seeds.values())


def emit_seed(seed: Union[Seed, Quarantine], bus: Any, sender: str = "seed-0", quarantine_log: Optional[list] = None) -> bool:
    """Publish a valid seed on topic ``seed``; log quarantined records instead.

    Returns True when a seed message was handed to the bus. While the bus
    transport is down the message waits in the bus buffer.
    """
    if isinstance(seed, Quarantine):
        if quarantine_log is not None:
            quarantine_log.append(seed.document())
        return False
    if not seed.validation.valid:
        raise ValueError(f"seed {seed.seed_id} is not valid and cannot be published")
    doc = seed.document()
    bus.publish("seed", doc["event"], doc["data"], sender)
    return True


class SeedAgent:
    """Sequential ingest, extract, emit loop."""

    def __init__(
        self,
        specs: Sequence[ProtocolSpec],
        store: Optional[KnowledgeStore] = None,
        bus: Any = None,
        agent_id: str = "seed-0",
        ports: Optional[Mapping[int, str]] = None,
        quarantine_path: Optional[Union[str, Path]] = None,
    ):
        self.specs = list(specs)
        self.store = store
        self.bus = bus
        self.agent_id = agent_id
        self.ports = dict(ports or {})
        self.corpus = SeedCorpus()
        self.quarantined: list[dict] = []
        self.quarantine_path = Path(quarantine_path) if quarantine_path else None

    def target_ports(self) -> list[int]:
        return sorted(set(self.ports) | {s.default_port for s in self.specs})

    def process(self, capture: RawCapture, provenance: Optional[str] = None) -> Union[Seed, Quarantine]:
        result = extract_seed(capture, self.store, self.specs, ports=self.ports, provenance=provenance)
        if isinstance(result, Quarantine):
            self._quarantine(result)
            return result
        if self.corpus.add(result) and self.bus is not None:
            emit_seed(result, self.bus, self.agent_id)
        return result

    def _quarantine(self, q: Quarantine) -> None:
        doc = q.document()
        self.quarantined.append(doc)
        if self.quarantine_path is not None:
            with self.quarantine_path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def run(self, source: Union[str, Path]) -> list[Seed]:
        before = len(self.corpus)
        for capture in ingest_traffic(source, self.target_ports()):
            self.process(capture)
        return self.corpus.seeds()[before:]

    def augment(self, spec: ProtocolSpec) -> list[Seed]:
        """Synthesize seeds for (field, class) combos the corpus does not cover yet.

        Synthetic frames go through the same pipeline as captured ones.
        """
        added = []
        for frame in synthesize_frames(spec, [s for s in self.corpus if s.protocol_id == spec.protocol_id]):
            data = encode_frame(frame, spec)
            cap = RawCapture(0.0, "synthetic:0", f"synthetic:{spec.default_port}", data, ref="synthetic")
            result = self.process(cap, provenance="synthetic")
            if isinstance(result, Seed) and result.provenance == "synthetic":
                added.append(result)
        return added


def covered_combos(seeds: Iterable[Seed], spec: ProtocolSpec) -> set[tuple[str, str]]:
    out = set()
    for seed in seeds:
        for name, value in seed.fields.items():
            if spec.has_field(name):
                cls = spec.field(name).classify(value)
                if cls is not None:
                    out.add((name, cls))
    return out


def _candidates(f: FieldDescriptor, cls_name: str) -> list[int]:
    members = next(vc.members for vc in f.value_classes if vc.name == cls_name)
    out: list[int] = []
    for lo, hi in members.intervals:
        if hi is None:
            picks = [lo, lo + 1, 2 * lo or 1, lo + 7, 64, 128]
        else:
            picks = [lo, hi, (lo + hi) // 2, lo + 1]
        for p in picks:
            if p in members and p not in out:
                out.append(p)
    return out


def _filler(size: int) -> bytes:
    return bytes((i * 37 + 11) & 0xFF for i in range(size))


def _default(f: FieldDescriptor) -> Value:
    if f.opaque:
        return b""
    return f.domain.allowed.lo


def _fix(spec: ProtocolSpec, values: dict[str, Value], v: Violation, pinned: str) -> Optional[dict[str, Value]]:
    kind, _, name = v.rule.partition(":")
    if kind == "domain" and v.field != pinned:
        return {v.field: _default(spec.field(v.field))}
    if kind != "constraint":
        return None
    c = next(c for c in spec.constraints if c.name == name)
    if c.kind == "range":
        return None if c.target == pinned else {c.target: c.allowed.lo}
    expected = c.expected(values)
    target = spec.field(c.target)
    if target.is_length and target.domain.target.kind == "field":
        sized = target.domain.target.name
        current = values[c.target]
        # prefer moving the operand so a pinned data size survives
        if c.operand != pinned:
            if c.op == "mul" and current % c.factor == 0:
                return {c.operand: current // c.factor}
            if c.op == "ceil_div":
                return {c.operand: current * c.factor}
        if sized != pinned and expected is not None:
            size = int(expected / target.domain.target.factor)
            return {sized: _filler(size)}
        return None
    if c.target == pinned or expected is None:
        return None
    return {c.target: expected}


def repair(spec: ProtocolSpec, values: Mapping[str, Value], pinned: str, rounds: int = 6) -> Optional[Frame]:
    """Make ``values`` valid without touching ``pinned``; None if impossible."""
    current = dict(values)
    for _ in range(rounds):
        layout = spec.active_fields(current)
        if layout is None:
            return None
        vals = {n: current[n] for n in layout if n in current}
        for n in layout:
            f = spec.field(n)
            if n not in vals and f.mandatory and not f.is_length:
                vals[n] = _default(f)
        try:
            frame = consistent_frame(spec, vals)
            encode_frame(frame, spec)
        except FrameError:
            return None
        report = validate_frame(frame, spec)
        if report.valid:
            return frame
        updates: dict[str, Value] = {}
        for v in report.violations:
            fix = _fix(spec, dict(frame.values), v, pinned)
            if fix is None:
                return None
            updates.update(fix)
        current = dict(frame.values)
        current.update(updates)
    return None


def synthesize_frames(spec: ProtocolSpec, seeds: Sequence[Seed]) -> list[Frame]:
    """One valid frame per uncovered combo that some seed can be bent to reach."""
    covered = covered_combos(seeds, spec)
    frames: list[Frame] = []
    bases = [dict(s.fields) for s in seeds]
    if not bases and spec.canonical:
        bases = [dict(decode_frame(spec.canonical, spec).values)]
    for f in spec.fields:
        if f.is_length and f.domain.target.kind != "field":
            continue  # spans follow from the other fields
        for vc in f.value_classes:
            if (f.name, vc.name) in covered:
                continue
            frame = _reach(spec, bases, f, vc.name)
            if frame is not None:
                frames.append(frame)
                bases.append(dict(frame.values))
                for name, value in frame.values.items():
                    cls = spec.field(name).classify(value)
                    if cls is not None:
                        covered.add((name, cls))
    return frames


def _reach(spec: ProtocolSpec, bases: list[dict[str, Value]], f: FieldDescriptor, cls_name: str) -> Optional[Frame]:
    cands = _candidates(f, cls_name)
    # a length field is reached by resizing the field it measures
    target = f.domain.target if f.is_length else None
    sized = spec.field(target.name) if target is not None else f
    for base in bases:
        for cand in cands:
            values = dict(base)
            if sized.opaque:
                size = cand if target is None else cand / target.factor
                if size != int(size):
                    continue
                values[sized.name] = _filler(int(size))
            else:
                values[f.name] = cand
            layout = spec.active_fields(values)
            if layout is None or f.name not in layout:
                continue
            frame = repair(spec, values, sized.name)
            if frame is not None and spec.field(f.name).classify(frame.values[f.name]) == cls_name:
                return frame
    return None
