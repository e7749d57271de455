"""Test case generation: field, structural and semantic mutation.

Field mutation changes values with modular arithmetic in the field width,
``V' = (V + dV) mod 2**width``. Structural mutation splices byte blobs at the
spec's splice points and drops deletable fields, so the emitted field
multiset is ``(P | F_insert) - F_delete``. Semantic mutation breaks exactly
one declared relation (a length-of field or a conditional constraint) and
keeps the frame decodable.

Mutation density ``rho`` is the fraction of mutable fields touched per
field-mutation case; feedback moves it via :func:`update_density`.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Optional, Protocol, Sequence

from .knowledge import DEFAULT_CONTEXT_BUDGET, TRUNCATION_MARKER, truncate
from .protocol import (
    FrameError,
    ProtocolSpec,
    decode_frame,
    encode_frame,
    encode_with_flags,
    relations,
    validate_frame,
)
from .protocol.schema import Frame, Relation, Value
from .seed import Seed, fields_to_json

logger = logging.getLogger(__name__)

DIRECTIONS = ("field", "structural", "semantic")
DEFAULT_DIRECTIONS = {"field": 0.8, "structural": 0.1, "semantic": 0.1}


class MutationError(Exception):
    pass


class NoMutableFields(MutationError):
    pass


class NoMutableStructure(MutationError):
    pass


class NoSemanticRelations(MutationError):
    pass


class BackendUnavailable(MutationError):
    pass


class ContextBudgetExceeded(MutationError):
    pass


def clamp(value: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, value))


@dataclass(frozen=True)
class MutationStrategy:
    rho0: float = 0.1
    rho: Optional[float] = None
    alpha: float = 1.0
    beta: float = 1.0
    field_priorities: Mapping[str, float] = field(default_factory=dict)
    direction_weights: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DIRECTIONS))
    feedback_score: float = 0.0
    rho_min: float = 0.01

    def __post_init__(self) -> None:
        if self.rho0 <= 0:
            raise ValueError("rho0 must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0 < self.rho_min <= 1:
            raise ValueError("rho_min must be in (0, 1]")
        if not 0 <= self.feedback_score <= 1:
            raise ValueError("feedback_score must be in [0, 1]")
        weights = {k: float(self.direction_weights.get(k, 0.0)) for k in DIRECTIONS}
        if any(w < 0 for w in weights.values()) or sum(weights.values()) <= 0:
            raise ValueError("direction weights must be >= 0 with a positive sum")
        if any(w < 0 for w in self.field_priorities.values()):
            raise ValueError("field priorities must be >= 0")
        rho = self.rho0 if self.rho is None else self.rho
        object.__setattr__(self, "rho", clamp(rho, self.rho_min, 1.0))
        object.__setattr__(self, "direction_weights", weights)
        object.__setattr__(self, "field_priorities", {k: float(v) for k, v in self.field_priorities.items()})

    def priority(self, spec: ProtocolSpec, name: str) -> float:
        return self.field_priorities.get(name, spec.field(name).priority)

    def with_(self, **changes: Any) -> "MutationStrategy":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "rho0": self.rho0,
            "rho": self.rho,
            "alpha": self.alpha,
            "beta": self.beta,
            "field_priorities": dict(sorted(self.field_priorities.items())),
            "direction_weights": dict(self.direction_weights),
            "feedback_score": self.feedback_score,
            "rho_min": self.rho_min,
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MutationStrategy":
        return cls(**{k: doc[k] for k in cls.__dataclass_fields__ if k in doc})

    def message(self) -> dict:
        """Strategy wire data."""
        return {
            "rho": self.rho,
            "field_priorities": dict(sorted(self.field_priorities.items())),
            "direction_weights": dict(self.direction_weights),
            "feedback_score": self.feedback_score,
        }


def update_density(strategy: MutationStrategy, feedback_score: float) -> MutationStrategy:
    """``rho = clamp(rho0 * (1 + alpha * feedback_score), rho_min, 1)``."""
    if not 0 <= feedback_score <= 1:
        raise ValueError("feedback_score must be in [0, 1]")
    rho = strategy.rho0 * (1 + strategy.alpha * feedback_score)
    return strategy.with_(rho=clamp(rho, strategy.rho_min, 1.0), feedback_score=feedback_score)


@dataclass(frozen=True)
class DeltaMixture:
    """Mixture that draws dV: boundary targets, small steps, or uniform."""

    boundary: float = 0.3
    small: float = 0.5
    uniform: float = 0.2
    small_max: int = 16

    def __post_init__(self) -> None:
        if min(self.boundary, self.small, self.uniform) < 0 or self.boundary + self.small + self.uniform <= 0:
            raise ValueError("mixture weights must be >= 0 with a positive sum")
        if self.small_max < 1:
            raise ValueError("small_max must be >= 1")

    def draw(self, rng: random.Random, value: int, width: int) -> int:
        """A non-zero dV (mod 2**width) for ``value``."""
        mod = 1 << width
        top = mod - 1
        total = self.boundary + self.small + self.uniform
        r = rng.random() * total
        if r < self.boundary:
            targets = [t for t in dict.fromkeys((0, 1, top, top - 1)) if 0 <= t != value]
            if targets:
                return (rng.choice(targets) - value) % mod
        elif r < self.boundary + self.small:
            step = rng.randint(1, min(self.small_max, top))
            return step if rng.random() < 0.5 else -step
        return rng.randrange(1, mod)


@dataclass(frozen=True)
class MutationRecord:
    kind: str  # field | structural | semantic (random for the baseline generator)
    detail: Mapping[str, Any]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.detail}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MutationRecord":
        detail = {k: v for k, v in doc.items() if k != "kind"}
        return cls(doc["kind"], detail)


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    case_id: str
    seed_id: str
    protocol_id: str
    mutations: tuple[MutationRecord, ...]
    data: bytes
    strategy_snapshot: MutationStrategy
    kind: str = "field"
    fallback: bool = False

    def __post_init__(self) -> None:
        if not self.mutations:
            raise ValueError("a test case needs at least one mutation")

    @property
    def hex(self) -> str:
        return self.data.hex()

    def message(self) -> dict:
        """Test-case wire data (exact key set)."""
        records = []
        for rec in self.mutations:
            doc = rec.to_dict()
            if self.fallback:
                doc["fallback"] = True
            records.append(doc)
        return {
            "case_id": self.case_id,
            "seed_id": self.seed_id,
            "protocol_id": self.protocol_id,
            "mutations": records,
            "hex": self.data.hex(),
        }

    @classmethod
    def from_message(cls, doc: Mapping[str, Any], strategy: Optional[MutationStrategy] = None) -> "TestCase":
        records = tuple(MutationRecord.from_dict({k: v for k, v in m.items() if k != "fallback"}) for m in doc["mutations"])
        fallback = any(m.get("fallback") for m in doc["mutations"])
        kind = records[0].kind if records else "field"
        return cls(
            doc["case_id"],
            doc["seed_id"],
            doc["protocol_id"],
            records,
            bytes.fromhex(doc["hex"]),
            strategy or MutationStrategy(),
            kind,
            fallback,
        )

    def mutated_fields(self) -> list[str]:
        out = []
        for rec in self.mutations:
            d = rec.detail
            if rec.kind == "field":
                out.append(d["field"])
            elif rec.kind == "structural":
                out.extend(d.get("delete", []))
            elif rec.kind == "semantic":
                out.append(d["field"])
        return list(dict.fromkeys(out))


def _active(spec: ProtocolSpec, seed: Seed) -> tuple[str, ...]:
    layout = spec.active_fields(seed.fields)
    if layout is None:
        raise MutationError(f"seed {seed.seed_id} matches no layout of {spec.protocol_id}")
    return layout


def mutable_fields(spec: ProtocolSpec, seed: Seed) -> list[str]:
    return [n for n in _active(spec, seed) if n in seed.fields and not spec.field(n).opaque]


def weighted_sample(rng: random.Random, items: Sequence[str], weights: Sequence[float], k: int) -> list[str]:
    """``k`` distinct items, each draw proportional to the remaining weights."""
    pool = list(zip(items, weights))
    out = []
    for _ in range(min(k, len(pool))):
        total = sum(w for _, w in pool)
        if total <= 0:
            idx = rng.randrange(len(pool))
        else:
            r = rng.random() * total
            idx = len(pool) - 1
            for i, (_, w) in enumerate(pool):
                r -= w
                if r < 0:
                    idx = i
                    break
        out.append(pool.pop(idx)[0])
    return out


def field_count(rho: float, mutable: int) -> int:
    return max(1, min(mutable, math.ceil(rho * mutable - 1e-9)))


def mutate_field(
    seed: Seed,
    strategy: MutationStrategy,
    rng: random.Random,
    *,
    spec: ProtocolSpec,
    mixture: DeltaMixture = DeltaMixture(),
    case_id: str = "case",
) -> TestCase:
    layout = _active(spec, seed)
    mutable = mutable_fields(spec, seed)
    if not mutable:
        raise NoMutableFields(seed.seed_id)
    k = field_count(strategy.rho, len(mutable))
    chosen = weighted_sample(rng, mutable, [strategy.priority(spec, n) for n in mutable], k)
    values = dict(seed.fields)
    records = []
    pinned = set()
    for name in sorted(chosen, key=layout.index):
        f = spec.field(name)
        v = values[name]
        dv = mixture.draw(rng, v, f.width)
        v2 = (v + dv) % (1 << f.width)
        values[name] = v2
        if f.is_length:
            pinned.add(name)
        records.append(MutationRecord("field", {"field": name, "width": f.width, "V": v, "dV": dv, "V_prime": v2}))
    enc = encode_with_flags(Frame(spec.protocol_id, values, pinned=pinned), spec, strict=False, layout=layout)
    return TestCase(case_id, seed.seed_id, spec.protocol_id, tuple(records), enc.data, strategy, "field")


def apply_structure(
    seed: Seed, spec: ProtocolSpec, inserts: Mapping[str, Sequence[bytes]], deletes: Sequence[str]
) -> tuple[bytes, MutationRecord]:
    """Emit ``seed`` with blobs spliced in and ``deletes`` dropped.

    Length fields are recomputed for pure insertions and keep their seed
    values whenever a field is deleted.
    """
    layout = _active(spec, seed)
    present = [n for n in layout if n in seed.fields]
    pinned = {n for n in present if spec.field(n).is_length} if deletes else set()
    frame = Frame(spec.protocol_id, seed.fields, pinned=pinned)
    enc = encode_with_flags(frame, spec, strict=False, omit=deletes, inserts=inserts, layout=layout)
    inserted = [n for n in enc.fields if n.startswith("+")]
    blobs = []
    names = iter(inserted)
    for point in sorted(inserts, key=lambda p: _splice_order(p, layout)):
        for blob in inserts[point]:
            blobs.append({"name": next(names), "at": point, "hex": bytes(blob).hex()})
    detail = {
        "P": present,
        "insert": [b["name"] for b in blobs],
        "blobs": blobs,
        "delete": list(deletes),
        "P_prime": list(enc.fields),
    }
    return enc.data, MutationRecord("structural", detail)


def _splice_order(point: str, layout: Sequence[str]) -> float:
    if point == "end":
        return len(layout)
    name = point.split(":", 1)[1]
    return layout.index(name) + 0.5 if name in layout else len(layout) + 1


def mutate_structure(
    seed: Seed,
    strategy: MutationStrategy,
    rng: random.Random,
    *,
    spec: ProtocolSpec,
    case_id: str = "case",
    max_blob: int = 8,
) -> TestCase:
    layout = _active(spec, seed)
    points = [p for p in spec.splice_points if p == "end" or p.split(":", 1)[1] in layout]
    deletable = [n for n in layout if n in spec.deletable and n in seed.fields]
    if not points and not deletable:
        raise NoMutableStructure(f"{spec.protocol_id} declares no usable splice points or deletable fields")
    modes = []
    if points:
        modes.append(("insert", 0.45))
    if deletable:
        modes.append(("delete", 0.40))
    if points and deletable:
        modes.append(("both", 0.15))
    mode = weighted_sample(rng, [m for m, _ in modes], [w for _, w in modes], 1)[0]
    inserts: dict[str, list[bytes]] = {}
    deletes: list[str] = []
    if mode in ("insert", "both"):
        point = rng.choice(points)
        inserts[point] = [rng.randbytes(rng.randint(1, max_blob))]
    if mode in ("delete", "both"):
        deletes = [rng.choice(deletable)]
    data, record = apply_structure(seed, spec, inserts, deletes)
    return TestCase(case_id, seed.seed_id, spec.protocol_id, (record,), data, strategy, "structural")


@dataclass(frozen=True)
class _Anomaly:
    values: Mapping[str, Value]
    pinned: frozenset[str]
    description: str


def _nonzero_steps(rng: random.Random, limit: int, count: int = 6) -> list[int]:
    steps = []
    while len(steps) < count:
        s = rng.randint(1, limit) * rng.choice((-1, 1))
        if s not in steps:
            steps.append(s)
    return steps


def _anomalies(spec: ProtocolSpec, values: Mapping[str, Value], rel: Relation, rng: random.Random) -> list[_Anomaly]:
    f = spec.field(rel.field)
    out: list[_Anomaly] = []
    lengths = {n for n in values if spec.field(n).is_length}
    if rel.kind == "length":
        current = values[f.name]
        target = f.domain.target
        if target.kind == "field" and spec.field(target.name).opaque:
            sized = target.name
            data = bytes(values[sized])
            for step in _nonzero_steps(rng, 8):
                size = len(data) + step
                if size < 0:
                    continue
                new = data[:size] if step < 0 else data + rng.randbytes(step)
                desc = f"{f.name} declares {current}, {sized} carries {len(new)} bytes"
                out.append(_Anomaly({**values, sized: new}, frozenset({f.name}), desc))
        for step in _nonzero_steps(rng, 16):
            new = current + step
            if 0 <= new <= f.max_value:
                desc = f"{f.name} declares {new}, actual {current}"
                out.append(_Anomaly({**values, f.name: new}, frozenset({f.name}), desc))
    elif rel.kind == "count":
        c = next(c for c in spec.constraints if f"constraint:{c.name}" == rel.rule)
        operand = spec.field(c.operand)
        cur = values[c.operand]
        for step in _nonzero_steps(rng, 16):
            new = cur + step * (c.factor if c.op == "ceil_div" else 1)
            if 0 <= new <= operand.max_value:
                trial = {**values, c.operand: new}
                desc = f"{c.operand}={new} implies {c.target}={c.expected(trial)}, frame carries {values[c.target]}"
                out.append(_Anomaly(trial, frozenset(lengths & {c.target}), desc))
    elif rel.kind == "range":
        c = next(c for c in spec.constraints if f"constraint:{c.name}" == rel.rule)
        allowed = c.allowed
        picks = []
        if allowed.hi is not None and allowed.hi < f.max_value:
            picks += [allowed.hi + 1, rng.randint(allowed.hi + 1, f.max_value)]
        if allowed.lo > 0:
            picks += [allowed.lo - 1, rng.randint(0, allowed.lo - 1)]
        for v in dict.fromkeys(picks):
            desc = f"{f.name}={v} outside {allowed} for {c.when_field}={values.get(c.when_field)}"
            out.append(_Anomaly({**values, f.name: v}, frozenset(), desc))
    return out


def mutate_semantic(
    seed: Seed,
    strategy: MutationStrategy,
    rng: random.Random,
    *,
    spec: ProtocolSpec,
    case_id: str = "case",
) -> TestCase:
    """Break one relation; the output decodes and fails validation on that relation only."""
    values = dict(seed.fields)
    rels = relations(spec, values)
    if not rels:
        raise NoSemanticRelations(f"{seed.seed_id}: no relations in force")
    order = list(rels)
    rng.shuffle(order)
    layout = _active(spec, seed)
    for rel in order:
        for anomaly in _anomalies(spec, values, rel, rng):
            frame = Frame(spec.protocol_id, anomaly.values, pinned=anomaly.pinned)
            try:
                data = encode_with_flags(frame, spec, strict=True, layout=layout).data
                decoded = decode_frame(data, spec)
            except FrameError:
                continue
            if validate_frame(decoded, spec).rules == (rel.rule,):
                record = MutationRecord(
                    "semantic", {"relation": rel.rule, "field": rel.field, "delta": anomaly.description}
                )
                return TestCase(case_id, seed.seed_id, spec.protocol_id, (record,), data, strategy, "semantic")
    raise NoSemanticRelations(f"{seed.seed_id}: no relation could be broken in isolation")


OPERATORS = {"field": mutate_field, "structural": mutate_structure, "semantic": mutate_semantic}


class GenerationBackend(Protocol):
    name: str

    def generate(
        self, seed: Seed, strategy: MutationStrategy, kinds: Sequence[str], rng: random.Random, case_ids: Sequence[str]
    ) -> list[TestCase]: ...


class DeterministicBackend:
    """In-tree operators; a pure function of its inputs and the rng state."""

    name = "deterministic"

    def __init__(self, spec: ProtocolSpec, mixture: DeltaMixture = DeltaMixture()):
        self.spec = spec
        self.mixture = mixture

    def one(self, seed: Seed, strategy: MutationStrategy, kind: str, rng: random.Random, case_id: str) -> TestCase:
        tried = [kind] + [k for k in DIRECTIONS if k != kind]
        last: Optional[MutationError] = None
        for k in tried:
            try:
                if k == "field":
                    return mutate_field(seed, strategy, rng, spec=self.spec, mixture=self.mixture, case_id=case_id)
                return OPERATORS[k](seed, strategy, rng, spec=self.spec, case_id=case_id)
            except (NoMutableFields, NoMutableStructure, NoSemanticRelations) as exc:
                last = exc
        raise MutationError(f"no operator applies to {seed.seed_id}: {last}")

    def generate(self, seed, strategy, kinds, rng, case_ids):
        return [self.one(seed, strategy, k, rng, cid) for k, cid in zip(kinds, case_ids)]


class RandomBytesBackend:
    """Baseline: uniformly random payloads with no protocol knowledge."""

    name = "random"

    def __init__(self, min_len: int = 4, max_len: int = 32):
        self.min_len = min_len
        self.max_len = max_len

    def generate(self, seed, strategy, kinds, rng, case_ids):
        out = []
        for cid in case_ids:
            n = rng.randint(self.min_len, self.max_len)
            rec = MutationRecord("random", {"size": n})
            out.append(TestCase(cid, seed.seed_id, seed.protocol_id, (rec,), rng.randbytes(n), strategy, "random"))
        return out


PROMPT_TASKS = (
    "Step 1: Perform field mutations. Change selected field values as V' = V + dV modulo the field width.",
    "Step 2: Perform structural mutations. Insert illegal byte blobs at splice points or delete mandatory fields.",
    "Step 3: Perform semantic mutations. Break one relation such as a length or count field versus its payload.",
)


def build_prompt(
    seed: Seed,
    context: str,
    task: str,
    *,
    spec: ProtocolSpec,
    budget: int = DEFAULT_CONTEXT_BUDGET,
    count: int = 1,
) -> str:
    """Generation prompt: context block, three ordered steps, then the seed.

    The context is cut (with a visible marker) so the whole prompt fits in
    ``budget`` characters; ContextBudgetExceeded if even the skeleton does not.
    """
    seed_doc = json.dumps({"summary": seed.summary, "fields": fields_to_json(seed.fields)}, sort_keys=True)
    seed_hex = encode_frame(Frame(spec.protocol_id, seed.fields), spec).hex()
    head = f"Generate {count} fuzzing test case(s) for the {spec.protocol_id} protocol.\n\n### Context\n"
    tail = (
        "\n\n### Task\n"
        + "\n".join(PROMPT_TASKS)
        + f"\nEmphasis: {task} mutations.\n\n### Seed\n{seed_doc}\nhex: {seed_hex}\n\n"
        "### Output\nOne test case per line as lowercase hex, nothing else.\n"
    )
    room = budget - len(head) - len(tail)
    if context and room < len(TRUNCATION_MARKER):
        raise ContextBudgetExceeded(f"prompt skeleton needs {len(head) + len(tail)} of {budget} characters")
    if not context and room < 0:
        raise ContextBudgetExceeded(f"prompt skeleton needs {len(head) + len(tail)} of {budget} characters")
    text, cut = truncate(context, max(room, 0))
    if cut:
        logger.info("context truncated to %d characters for seed %s", room, seed.seed_id)
    return head + text + tail


def diff_records(spec: ProtocolSpec, seed: Seed, values: Mapping[str, Value]) -> list[MutationRecord]:
    out = []
    for name in spec.field_names:
        if name in values and name in seed.fields and values[name] != seed.fields[name]:
            f = spec.field(name)
            if f.opaque:
                continue
            v, v2 = seed.fields[name], values[name]
            out.append(
                MutationRecord("field", {"field": name, "width": f.width, "V": v, "dV": (v2 - v) % (1 << f.width), "V_prime": v2})
            )
    return out


class RemoteBackend:
    """Generation through an HTTP model service (``POST /generate``).

    Returned lines that do not decode under the spec are dropped and counted.
    When the service is unreachable the batch comes from ``fallback`` and
    every such case carries the fallback flag.
    """

    name = "remote"

    def __init__(
        self,
        spec: ProtocolSpec,
        url: str,
        *,
        store: Any = None,
        temperature: float = 0.7,
        top_k: int = 50,
        top_p: float = 0.95,
        max_tokens: int = 1024,
        timeout: float = 10.0,
        retries: int = 2,
        budget: int = DEFAULT_CONTEXT_BUDGET,
        fallback: Optional[DeterministicBackend] = None,
    ):
        self.spec = spec
        self.url = url.rstrip("/")
        self.store = store
        self.params = {"temperature": temperature, "top_k": top_k, "top_p": top_p, "max_tokens": max_tokens}
        self.timeout = timeout
        self.retries = retries
        self.budget = budget
        self.fallback = fallback or DeterministicBackend(spec)
        self.dropped = 0
        self.fallbacks = 0

    def _post(self, prompt: str) -> str:
        from urllib import error, request

        body = json.dumps({"prompt": prompt, **self.params}).encode()
        req = request.Request(self.url + "/generate", data=body, headers={"Content-Type": "application/json"})
        last: Optional[Exception] = None
        for _ in range(self.retries + 1):
            try:
                with request.urlopen(req, timeout=self.timeout) as resp:
                    return str(json.loads(resp.read())["text"])
            except (error.URLError, OSError, ValueError, KeyError) as exc:
                last = exc
        raise BackendUnavailable(f"{self.url}: {last}")

    def _context(self, seed: Seed) -> str:
        if self.store is None:
            return ""
        from .knowledge import format_context

        disc = [lay.discriminator for lay in self.spec.layouts if lay.discriminator]
        query = f"Protocol rules {self.spec.protocol_id}"
        if disc and disc[0] in seed.fields:
            query += f" {disc[0]} {seed.fields[disc[0]]}"
        text, _ = format_context(self.store.retrieve(query, k=3), self.budget)
        return text

    def generate(self, seed, strategy, kinds, rng, case_ids):
        kinds = list(kinds)
        task = Counter(kinds).most_common(1)[0][0] if kinds else "field"
        out: list[TestCase] = []
        try:
            prompt = build_prompt(seed, self._context(seed), task, spec=self.spec, budget=self.budget, count=len(kinds))
            text = self._post(prompt)
        except BackendUnavailable as exc:
            logger.warning("remote backend unavailable, using fallback: %s", exc)
            text = None
        if text is not None:
            for line in text.splitlines():
                if len(out) == len(case_ids):
                    break
                case = self._parse(line.strip(), seed, strategy, case_ids[len(out)])
                if case is not None:
                    out.append(case)
        missing = len(case_ids) - len(out)
        if missing:
            self.fallbacks += missing
            filled = self.fallback.generate(seed, strategy, kinds[len(out):], rng, case_ids[len(out):])
            out += [replace(c, fallback=True) for c in filled]
        return out

    def _parse(self, line: str, seed: Seed, strategy: MutationStrategy, case_id: str) -> Optional[TestCase]:
        if not line:
            return None
        try:
            data = bytes.fromhex(line)
            frame = decode_frame(data, self.spec)
        except (ValueError, FrameError):
            self.dropped += 1
            return None
        records = diff_records(self.spec, seed, frame.values)
        if records:
            return TestCase(case_id, seed.seed_id, self.spec.protocol_id, tuple(records), data, strategy, "field")
        report = validate_frame(frame, self.spec)
        if report.valid:
            self.dropped += 1  # identical to the seed, not a mutation
            return None
        v = report.violations[0]
        rec = MutationRecord("semantic", {"relation": v.rule, "field": v.field, "delta": v.description})
        return TestCase(case_id, seed.seed_id, self.spec.protocol_id, (rec,), data, strategy, "semantic")


def pick_kinds(strategy: MutationStrategy, n: int, rng: random.Random) -> list[str]:
    names = [k for k in DIRECTIONS if strategy.direction_weights[k] > 0]
    weights = [strategy.direction_weights[k] for k in names]
    return rng.choices(names, weights=weights, k=n)


def generate_batch(
    seed: Seed,
    strategy: MutationStrategy,
    n: int,
    backend: GenerationBackend,
    rng: random.Random,
    *,
    bus: Any = None,
    sender: str = "mutation-0",
    case_ids: Optional[Sequence[str]] = None,
) -> list[TestCase]:
    """``n`` cases with operator kinds drawn from the direction weights."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ids = list(case_ids) if case_ids is not None else [f"{seed.seed_id}-{i:04d}" for i in range(n)]
    if len(ids) != n:
        raise ValueError("need exactly n case ids")
    kinds = pick_kinds(strategy, n, rng)
    cases = backend.generate(seed, strategy, kinds, rng, ids)
    if bus is not None:
        for case in cases:
            bus.publish("test_case", "test_case", case.message(), sender)
    return cases


def field_set_holds(record: MutationRecord) -> bool:
    """Check the emitted multiset against ``(P | F_insert) - F_delete``."""
    d = record.detail
    expected = Counter(d["P"]) + Counter(d["insert"])
    expected.subtract(Counter(d["delete"]))
    return +expected == Counter(d["P_prime"])
