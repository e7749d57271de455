"""Response classification, severity scoring and strategy adjustment.

Severity is ``S = w1*E + w2*T + w3*R`` where E scores the anomaly type, T the
response time band and R the resource signal. Weights and scores are decimal
fixed point with two fractional digits; S is their exact sum. The mutation density is then
``rho = rho0 * (1 + beta * S / s_max)``, damped when anomalies are frequent
and the target is unstable.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .knowledge import KnowledgeStore, RuleEntry
from .mutation import MutationStrategy, TestCase, clamp
from .protocol import FrameError, ProtocolSpec, decode_frame, validate_frame

logger = logging.getLogger(__name__)

OUTCOMES = ("reply", "timeout", "connection-reset", "connection-refused")
LIVENESS = ("alive", "degraded", "down")
CLASSES = ("normal", "abnormal", "critical")

CENT = Decimal("0.01")

ANOMALY_SCORES: dict[str, Decimal] = {
    "crash": Decimal(10),
    "timeout": Decimal(8),
    "connection-refused": Decimal(10),
    "connection-reset": Decimal(6),
    "degraded": Decimal(5),
    "exception code": Decimal(4),
    "malformed": Decimal(4),
    "invalid reply": Decimal(4),
    "delay": Decimal(3),
    "normal": Decimal(0),
}
TIME_SCORES: dict[str, Decimal] = {"timeout": Decimal(8), "delay": Decimal(3), "nominal": Decimal(0)}
RESOURCE_MAX = Decimal(10)
DEFAULT_DELAY_MS = 500.0
DEFAULT_WEIGHTS = (Decimal(1), Decimal(1), Decimal(1))


def fixed(value: Union[int, float, str, Decimal]) -> Decimal:
    """Two-digit decimal fixed point; floats go through ``str`` to avoid binary noise."""
    if isinstance(value, float):
        value = repr(value)
    return Decimal(value).quantize(CENT, rounding=ROUND_HALF_EVEN)


@dataclass(frozen=True)
class Observation:
    case_id: str
    outcome: str
    response_time: float
    liveness_after: str
    reply: Optional[bytes] = None
    resource_signal: float = 0.0

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.liveness_after not in LIVENESS:
            raise ValueError(f"unknown liveness {self.liveness_after!r}")
        if self.response_time < 0:
            raise ValueError("response_time must be >= 0")
        if self.resource_signal < 0:
            raise ValueError("resource_signal must be >= 0")
        if self.outcome == "reply" and self.reply is None:
            object.__setattr__(self, "reply", b"")
        if self.outcome != "reply" and self.reply:
            raise ValueError(f"{self.outcome} observation cannot carry reply bytes")

    def message(self) -> dict:
        """Response wire data."""
        return {
            "case_id": self.case_id,
            "outcome": self.outcome,
            "response_time": self.response_time,
            "liveness_after": self.liveness_after,
            "reply": self.reply.hex() if self.reply is not None else None,
            "resource_signal": self.resource_signal,
        }

    @classmethod
    def from_message(cls, doc: Mapping[str, Any]) -> "Observation":
        reply = doc.get("reply")
        return cls(
            case_id=str(doc["case_id"]),
            outcome=str(doc["outcome"]),
            response_time=float(doc["response_time"]),
            liveness_after=str(doc["liveness_after"]),
            reply=bytes.fromhex(reply) if reply is not None else None,
            resource_signal=float(doc.get("resource_signal", 0.0)),
        )


@dataclass(frozen=True)
class ResponseClass:
    cls: str
    reason: str

    def __post_init__(self) -> None:
        if self.cls not in CLASSES:
            raise ValueError(f"unknown class {self.cls!r}")

    @property
    def anomalous(self) -> bool:
        return self.cls != "normal"


def classify_response(obs: Observation, spec: ProtocolSpec, *, delay_ms: float = DEFAULT_DELAY_MS) -> ResponseClass:
    """Map an observation to exactly one class; pure and deterministic."""
    if obs.liveness_after == "down":
        return ResponseClass("critical", "crash")
    if obs.outcome != "reply":
        return ResponseClass("critical", obs.outcome)
    if obs.liveness_after == "degraded":
        return ResponseClass("critical", "degraded")
    rspec = spec.response or spec
    try:
        frame = decode_frame(obs.reply or b"", rspec)
    except FrameError:
        return ResponseClass("abnormal", "malformed")
    if rspec.is_exception(frame.values):
        return ResponseClass("abnormal", "exception code")
    if not validate_frame(frame, rspec).valid:
        return ResponseClass("abnormal", "invalid reply")
    if obs.response_time > delay_ms:
        return ResponseClass("abnormal", "delay")
    return ResponseClass("normal", "normal")


@dataclass(frozen=True)
class SeverityScore:
    E: Decimal
    T: Decimal
    R: Decimal
    S: Decimal
    weights: tuple[Decimal, Decimal, Decimal]

    def to_dict(self) -> dict:
        return {
            "E": str(self.E),
            "T": str(self.T),
            "R": str(self.R),
            "S": _text(self.S),
            "weights": [str(w) for w in self.weights],
        }


def _text(value: Decimal) -> str:
    """Two digits when that is exact, otherwise every digit."""
    cents = value.quantize(CENT)
    return str(cents if cents == value else value)


def _weights(weights: Sequence[Union[int, float, str, Decimal]]) -> tuple[Decimal, Decimal, Decimal]:
    if len(weights) != 3:
        raise ValueError("exactly three weights are required")
    out = tuple(fixed(w) for w in weights)
    if any(w < 0 for w in out):
        raise ValueError("weights must be >= 0")
    return out  # type: ignore[return-value]


def score(E: Any, T: Any, R: Any, weights: Sequence[Any] = DEFAULT_WEIGHTS) -> SeverityScore:
    w = _weights(weights)
    e, t, r = fixed(E), fixed(T), fixed(R)
    # products of two-digit operands are exact in Decimal, so S carries up to four digits
    s = w[0] * e + w[1] * t + w[2] * r
    return SeverityScore(e, t, r, s, w)


def severity(
    obs: Observation,
    cls: ResponseClass,
    weights: Sequence[Any] = DEFAULT_WEIGHTS,
    *,
    delay_ms: float = DEFAULT_DELAY_MS,
    anomaly_scores: Mapping[str, Decimal] = ANOMALY_SCORES,
) -> SeverityScore:
    if obs.outcome == "timeout":
        t = TIME_SCORES["timeout"]
    elif obs.response_time > delay_ms:
        t = TIME_SCORES["delay"]
    else:
        t = TIME_SCORES["nominal"]
    e = anomaly_scores.get(cls.reason, Decimal(0)) if cls.anomalous else Decimal(0)
    r = min(RESOURCE_MAX, fixed(obs.resource_signal))
    return score(e, t, r, weights)


def s_max(weights: Sequence[Any] = DEFAULT_WEIGHTS, anomaly_scores: Mapping[str, Decimal] = ANOMALY_SCORES) -> Decimal:
    """Largest attainable S: the worst anomaly, a timeout and a saturated resource."""
    w = _weights(weights)
    top = max(w[0] * max(anomaly_scores.values()) + w[1] * TIME_SCORES["timeout"] + w[2] * RESOURCE_MAX, Decimal(0))
    return top if top > 0 else Decimal(1)


@dataclass
class AnomalyHistory:
    """Sliding window of (anomalous, target alive) pairs."""

    window: int = 200
    _items: deque = field(default_factory=deque, repr=False)

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        self._items = deque(self._items, maxlen=self.window)

    def add(self, anomalous: bool, alive: bool) -> None:
        self._items.append((bool(anomalous), bool(alive)))

    def observe(self, obs: Observation, cls: ResponseClass) -> None:
        self.add(cls.anomalous, obs.liveness_after == "alive")

    def __len__(self) -> int:
        return len(self._items)

    @property
    def frequency(self) -> float:
        if not self._items:
            return 0.0
        return sum(a for a, _ in self._items) / len(self._items)

    @property
    def stability(self) -> float:
        if not self._items:
            return 1.0
        return sum(s for _, s in self._items) / len(self._items)


@dataclass(frozen=True)
class FuzzyRule:
    high_frequency: float = 0.5
    low_stability: float = 0.5
    damping: float = 0.5

    def fires(self, history: AnomalyHistory) -> bool:
        return history.frequency > self.high_frequency and history.stability < self.low_stability


def boost_priorities(
    strategy: MutationStrategy,
    fields: Iterable[str],
    *,
    spec: Optional[ProtocolSpec] = None,
    factor: float = 2.0,
    cap: Union[float, Mapping[str, float]] = 16.0,
) -> dict[str, float]:
    """Multiply each field's priority by ``factor`` up to ``cap`` (a number or a per-field map)."""
    prio = dict(strategy.field_priorities)
    for name in dict.fromkeys(fields):
        ceiling = cap.get(name, 16.0) if isinstance(cap, Mapping) else cap
        if spec is not None and name in spec.field_names:
            base = strategy.priority(spec, name)
        else:
            base = prio.get(name, 1.0)
        prio[name] = max(base, min(ceiling, base * factor))
    return prio


def adjust_strategy(
    strategy: MutationStrategy,
    score: SeverityScore,
    s_max: Decimal,
    history: AnomalyHistory,
    *,
    implicated: Iterable[str] = (),
    spec: Optional[ProtocolSpec] = None,
    rule: FuzzyRule = FuzzyRule(),
    boost: float = 2.0,
    cap: Union[float, Mapping[str, float]] = 16.0,
    bus: Any = None,
    sender: str = "feedback-0",
) -> MutationStrategy:
    """New working strategy after one severity reading.

    ``rho = clamp(rho0 * (1 + beta * S/s_max), rho_min, 1)``, implicated fields
    get their priority boosted, then the fuzzy rule may damp rho. Publishes
    one strategy message when anything changed.
    """
    if s_max <= 0:
        raise ValueError("s_max must be > 0")
    ratio = min(Decimal(1), score.S / Decimal(s_max))
    rho = clamp(strategy.rho0 * (1 + strategy.beta * float(ratio)), strategy.rho_min, 1.0)
    if rule.fires(history):
        rho = clamp(rho * rule.damping, strategy.rho_min, 1.0)
    implicated = list(implicated)
    prio = boost_priorities(strategy, implicated, spec=spec, factor=boost, cap=cap) if implicated else dict(strategy.field_priorities)
    new = strategy.with_(rho=rho, field_priorities=prio, feedback_score=float(ratio))
    if bus is not None and new != strategy:
        bus.publish("strategy", "strategy", new.message(), sender)
    return new


def mean_score(scores: Sequence[SeverityScore]) -> SeverityScore:
    """Component-wise mean of a batch, kept exact in fixed point."""
    if not scores:
        raise ValueError("no scores to average")
    n = Decimal(len(scores))
    w = scores[0].weights
    E = (sum((s.E for s in scores), Decimal(0)) / n).quantize(CENT)
    T = (sum((s.T for s in scores), Decimal(0)) / n).quantize(CENT)
    R = (sum((s.R for s in scores), Decimal(0)) / n).quantize(CENT)
    return score(E, T, R, w)


def record_anomaly(
    score: SeverityScore,
    case: TestCase,
    store: KnowledgeStore,
    cls: ResponseClass,
    *,
    obs: Optional[Observation] = None,
) -> Optional[RuleEntry]:
    """Append an anomaly record for an abnormal or critical case; None for normal."""
    if not cls.anomalous:
        return None
    fields = case.mutated_fields()
    kinds = sorted({m.kind for m in case.mutations})
    reason_terms = cls.reason.replace("-", " ").split()
    keywords = list(dict.fromkeys(reason_terms + [case.protocol_id, *fields, "anomaly", cls.cls]))
    outcome = f" outcome {obs.outcome}, liveness {obs.liveness_after}," if obs is not None else ""
    body = (
        f"{cls.cls} {cls.reason} from case {case.case_id} (seed {case.seed_id});{outcome} "
        f"{'/'.join(kinds)} mutation of {', '.join(fields) or 'payload'}; "
        f"severity S={score.S} (E={score.E}, T={score.T}, R={score.R}); frame {case.hex}"
    )
    entry = RuleEntry(
        id=store.next_id("anomaly-"),
        protocol_id=case.protocol_id,
        kind="anomaly-record",
        title=f"{cls.reason} on {case.protocol_id} {' '.join(fields)}".strip(),
        body=body,
        keywords=tuple(keywords),
        source=case.case_id,
    )
    return store.append(entry)


def record_strategy(strategy: MutationStrategy, store: KnowledgeStore, protocol_id: str, cycle: int) -> RuleEntry:
    top = sorted(strategy.field_priorities.items(), key=lambda kv: (-kv[1], kv[0]))[:5]
    body = (
        f"cycle {cycle}: rho={strategy.rho:.4f} feedback_score={strategy.feedback_score:.4f} "
        f"directions={dict(strategy.direction_weights)} top priorities={dict(top)}"
    )
    entry = RuleEntry(
        id=store.next_id("strategy-"),
        protocol_id=protocol_id,
        kind="strategy-record",
        title=f"Mutation strategy after cycle {cycle}",
        body=body,
        keywords=("strategy", protocol_id, *[k for k, _ in top]),
        source=f"cycle-{cycle}",
    )
    return store.append(entry)
