"""Campaign ledger and evaluation metrics.

The ledger is an append-only JSONL file; every metric is a pure function of
its records:

* TCPR: cases whose observation carries a decodable protocol reply (normal
  or exception replies alike) over all generated cases.
* ETN: crash events (liveness going down) opened in a cycle.
* Coverage: distinct (field, value class) pairs in the seed corpus over all
  combos the spec declares.
* Entropy: Shannon entropy, in bits, of the values field mutations wrote
  into each field; reported per field plus the macro average.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence, Union

from .feedback import Observation
from .harness import crash_ledger
from .protocol import ProtocolSpec, enumerate_combos
from .seed import Seed, covered_combos, fields_from_json

RECORD_TYPES = ("header", "cycle", "seed", "case", "observation", "strategy", "restart")


class MetricsError(Exception):
    pass


class EmptyCampaign(MetricsError):
    pass


class UnknownCycle(MetricsError):
    pass


class NoObservations(MetricsError):
    pass


class Ledger:
    """Append-only record list, mirrored line by line to ``path`` when given."""

    def __init__(self, path: Optional[Union[str, Path]] = None, records: Iterable[dict] = ()):
        self.records: list[dict] = list(records)
        self.path = Path(path) if path is not None else None
        self._fh = None
        if self.path is not None:
            self._fh = self.path.open("a", encoding="utf-8")

    def append(self, record: Mapping[str, Any]) -> dict:
        if record.get("type") not in RECORD_TYPES:
            raise MetricsError(f"unknown ledger record type {record.get('type')!r}")
        doc = dict(record)
        self.records.append(doc)
        if self._fh is not None:
            self._fh.write(json.dumps(doc, sort_keys=True) + "\n")
        return doc

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None

    def __iter__(self) -> Iterator[dict]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of(self, kind: str) -> list[dict]:
        return [r for r in self.records if r["type"] == kind]

    @property
    def header(self) -> dict:
        heads = self.of("header")
        return heads[0] if heads else {}

    @property
    def cycles(self) -> list[int]:
        return sorted({r["cycle"] for r in self.of("cycle")})


def load_ledger(path: Union[str, Path]) -> Ledger:
    records = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except ValueError as exc:
                raise MetricsError(f"{path}:{lineno}: {exc}") from None
    return Ledger(records=records)


# -- metrics ------------------------------------------------------------------


def tcpr_fraction(ledger: Ledger) -> Fraction:
    total = len(ledger.of("case"))
    if total == 0:
        raise EmptyCampaign("ledger holds no generated cases")
    passed = sum(1 for r in ledger.of("observation") if r.get("decoded"))
    return Fraction(passed, total)


def tcpr(ledger: Ledger) -> float:
    return float(tcpr_fraction(ledger))


def observations(ledger: Ledger) -> list[Observation]:
    out = []
    for r in ledger.of("observation"):
        out.append(Observation(r["case_id"], r["outcome"], r["response_time"], r["liveness_after"]))
    return out


def crash_cycles(ledger: Ledger) -> list[int]:
    """Cycle of the opening observation of every crash event, in order."""
    obs = ledger.of("observation")
    events = crash_ledger(observations(ledger))
    return [obs[e.index]["cycle"] for e in events]


def etn(ledger: Ledger, cycle: int) -> int:
    if cycle not in ledger.cycles:
        raise UnknownCycle(f"cycle {cycle} is not in the ledger")
    return sum(1 for c in crash_cycles(ledger) if c == cycle)


def ledger_seeds(ledger: Ledger, spec: ProtocolSpec) -> list[Seed]:
    out = []
    for r in ledger.of("seed"):
        if r["protocol_id"] != spec.protocol_id:
            continue
        out.append(Seed(r["seed_id"], r["protocol_id"], fields_from_json(r["fields"], spec), r.get("provenance", "")))
    return out


def coverage_fraction(ledger: Ledger, spec: ProtocolSpec) -> Fraction:
    combos = enumerate_combos(spec)
    if not combos:
        raise MetricsError(f"{spec.protocol_id} declares no value classes")
    covered = covered_combos(ledger_seeds(ledger, spec), spec) & set(combos)
    return Fraction(len(covered), len(combos))


def coverage(ledger: Ledger, spec: ProtocolSpec) -> float:
    return float(coverage_fraction(ledger, spec))


def mutated_values(ledger: Ledger) -> dict[str, list[Any]]:
    """Values written by field mutations, per field, in ledger order."""
    out: dict[str, list[Any]] = defaultdict(list)
    for r in ledger.of("case"):
        for m in r["mutations"]:
            if m.get("kind") == "field":
                out[m["field"]].append(m["V_prime"])
    return dict(out)


def shannon(values: Sequence[Any]) -> float:
    if not values:
        raise NoObservations("no values")
    n = len(values)
    h = -sum((c / n) * math.log2(c / n) for c in Counter(values).values())
    return h + 0.0  # normalise -0.0


def entropy(ledger: Ledger, field_name: str) -> float:
    values = mutated_values(ledger).get(field_name, [])
    if not values:
        raise NoObservations(f"no mutated case touches {field_name}")
    return shannon(values)


def entropy_per_field(ledger: Ledger) -> dict[str, float]:
    return {name: shannon(vals) for name, vals in sorted(mutated_values(ledger).items())}


# -- report -------------------------------------------------------------------


@dataclass(frozen=True)
class MetricReport:
    tcpr: float
    etn_per_cycle: tuple[int, ...]
    coverage: Optional[float]
    entropy_per_field: Mapping[str, float]
    totals: Mapping[str, int]
    protocol_id: str = ""
    critical: Mapping[str, int] = field(default_factory=dict)

    @property
    def entropy_average(self) -> Optional[float]:
        if not self.entropy_per_field:
            return None
        return sum(self.entropy_per_field.values()) / len(self.entropy_per_field)

    def to_dict(self) -> dict:
        doc: dict[str, Any] = {
            "protocol_id": self.protocol_id,
            "tcpr": self.tcpr,
            "etn_per_cycle": list(self.etn_per_cycle),
            "totals": dict(sorted(self.totals.items())),
        }
        if self.coverage is not None:
            doc["coverage"] = self.coverage
        if self.entropy_per_field:
            doc["entropy_per_field"] = dict(sorted(self.entropy_per_field.items()))
            doc["entropy_average"] = self.entropy_average
        if self.critical:
            doc["critical"] = dict(sorted(self.critical.items()))
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "MetricReport":
        return cls(
            tcpr=doc["tcpr"],
            etn_per_cycle=tuple(doc["etn_per_cycle"]),
            coverage=doc.get("coverage"),
            entropy_per_field=dict(doc.get("entropy_per_field", {})),
            totals=dict(doc["totals"]),
            protocol_id=doc.get("protocol_id", ""),
            critical=dict(doc.get("critical", {})),
        )


def compute_report(ledger: Ledger, spec: Optional[ProtocolSpec] = None) -> MetricReport:
    cases = ledger.of("case")
    obs = ledger.of("observation")
    rate = tcpr(ledger)
    crashes = crash_cycles(ledger)
    etns = tuple(sum(1 for c in crashes if c == cycle) for cycle in ledger.cycles)
    critical = Counter(r["reason"] for r in obs if r.get("class") == "critical")
    totals = {
        "generated": len(cases),
        "observed": len(obs),
        "passed": sum(1 for r in obs if r.get("decoded")),
        "errors": sum(1 for r in obs if r.get("class") != "normal"),
        "seeds": len(ledger.of("seed")),
        "crash_events": len(crashes),
        "restarts": len(ledger.of("restart")),
    }
    return MetricReport(
        tcpr=rate,
        etn_per_cycle=etns,
        coverage=coverage(ledger, spec) if spec is not None else None,
        entropy_per_field=entropy_per_field(ledger),
        totals=totals,
        protocol_id=spec.protocol_id if spec is not None else ledger.header.get("protocol_id", ""),
        critical=dict(critical),
    )


def render_report(report: MetricReport, fmt: str = "text") -> str:
    if fmt in ("structured", "json"):
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt != "text":
        raise ValueError(f"unknown report format {fmt!r}")
    lines = []
    if report.protocol_id:
        lines.append(f"Protocol: {report.protocol_id}")
    lines.append(f"TCPR: {report.tcpr * 100:.2f}%")
    lines.append(f"ETN per cycle: {', '.join(str(n) for n in report.etn_per_cycle) or '-'} (total {sum(report.etn_per_cycle)})")
    if report.coverage is not None:
        lines.append(f"Coverage: {report.coverage * 100:.2f}%")
    if report.entropy_per_field:
        lines.append(f"Entropy (average): {report.entropy_average:.4f} bits")
        for name, h in sorted(report.entropy_per_field.items()):
            lines.append(f"  {name}: {h:.4f} bits")
    if report.critical:
        lines.append("Critical observations: " + ", ".join(f"{k}={v}" for k, v in sorted(report.critical.items())))
    lines.append("Totals: " + ", ".join(f"{k}={v}" for k, v in sorted(report.totals.items())))
    return "\n".join(lines) + "\n"
