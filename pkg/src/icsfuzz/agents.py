"""Bus-connected agents.

Every agent owns its subscriptions and does a bounded amount of work per
``step()``; the orchestrator (or a process loop) calls ``step`` repeatedly.
Agents never call each other directly.
"""

from __future__ import annotations

import logging
import random
from collections import deque
from decimal import Decimal
from typing import Any, Callable, Optional

from .bus import Heartbeater, Task
from .feedback import (
    AnomalyHistory,
    FuzzyRule,
    Observation,
    SeverityScore,
    adjust_strategy,
    classify_response,
    mean_score,
    record_anomaly,
    record_strategy,
    s_max,
    severity,
)
from .harness import TargetEndpoint, Watchdog, inject
from .knowledge import KnowledgeStore
from .mutation import GenerationBackend, MutationStrategy, TestCase, generate_batch, update_density
from .protocol import FrameError, ProtocolSpec, decode_frame
from .seed import Seed

logger = logging.getLogger(__name__)


class Agent:
    role = ""

    def __init__(self, agent_id: str, bus: Any, heartbeat: float = 5.0):
        self.agent_id = agent_id
        self.bus = bus
        self.heartbeater = Heartbeater(bus, agent_id, heartbeat)
        self.control = bus.subscribe("control", agent_id)
        self.stopped = False

    def beat(self) -> None:
        self.heartbeater.tick()

    def _control_messages(self) -> list:
        """Drain control; a ``stop`` event ends the agent's loop."""
        msgs = self.control.drain()
        if any(m.event == "stop" for m in msgs):
            self.stopped = True
        return msgs

    def step(self) -> int:  # pragma: no cover - interface
        raise NotImplementedError


class MutationAgent(Agent):
    """Turns assigned tasks ``{seed_id, n}`` into published test cases."""

    role = "mutation"

    def __init__(
        self,
        agent_id: str,
        bus: Any,
        spec: ProtocolSpec,
        backend: GenerationBackend,
        rng: random.Random,
        strategy: MutationStrategy,
        *,
        heartbeat: float = 5.0,
        tasks_per_step: int = 1,
    ):
        super().__init__(agent_id, bus, heartbeat)
        self.spec = spec
        self.backend = backend
        self.rng = rng
        self.strategy = strategy
        self.tasks_per_step = tasks_per_step
        self.seeds: dict[str, Seed] = {}
        self.queue: deque[Task] = deque()
        self.done: list[str] = []
        self._seed_sub = bus.subscribe("seed", agent_id)
        self._strategy_sub = bus.subscribe("strategy", agent_id)

    def _absorb(self) -> None:
        for msg in self._seed_sub.drain():
            if msg.data["protocol_id"] == self.spec.protocol_id:
                seed = Seed.from_document(msg.data, self.spec)
                self.seeds[seed.seed_id] = seed
        for msg in self._strategy_sub.drain():
            self.apply_strategy(msg.data)
        for msg in self._control_messages():
            if msg.event == "assign" and msg.data["agent_id"] == self.agent_id:
                self.queue.append(Task.from_dict(msg.data["task"]))

    def apply_strategy(self, data: dict) -> None:
        """Adopt published priorities and directions; rho is the smaller of the two density rules."""
        score = float(data["feedback_score"])
        density = update_density(self.strategy, score).rho
        self.strategy = self.strategy.with_(
            rho=min(density, float(data["rho"])),
            field_priorities=data["field_priorities"],
            direction_weights=data["direction_weights"],
            feedback_score=score,
        )

    def step(self) -> int:
        self._absorb()
        produced = 0
        for _ in range(self.tasks_per_step):
            if not self.queue:
                break
            task = self.queue.popleft()
            seed = self.seeds.get(task.payload["seed_id"])
            if seed is None:
                self.queue.appendleft(task)  # seed not delivered yet
                break
            n = int(task.payload["n"])
            ids = [f"{task.task_id}-{i:03d}" for i in range(n)]
            cases = generate_batch(seed, self.strategy, n, self.backend, self.rng, bus=self.bus, sender=self.agent_id, case_ids=ids)
            produced += len(cases)
            self.bus.publish("control", "complete", {"agent_id": self.agent_id, "task_id": task.task_id}, self.agent_id)
            self.done.append(task.task_id)
        return produced


class HarnessAgent(Agent):
    """Injects every published test case and publishes the observation."""

    role = "harness"

    def __init__(
        self,
        agent_id: str,
        bus: Any,
        spec: ProtocolSpec,
        endpoint: TargetEndpoint,
        *,
        heartbeat: float = 5.0,
        watchdog: Optional[Watchdog] = None,
        on_restart: Optional[Callable[[str], None]] = None,
        delay_ms: float = 500.0,
    ):
        super().__init__(agent_id, bus, heartbeat)
        self.spec = spec
        self.endpoint = endpoint
        self.watchdog = watchdog
        self.on_restart = on_restart
        self.delay_ms = delay_ms
        self.injected = 0
        self._cases = bus.subscribe("test_case", agent_id)

    def step(self) -> int:
        self._control_messages()
        count = 0
        for msg in self._cases.drain():
            case = TestCase.from_message(msg.data)
            obs = inject(case, self.endpoint, self.spec, bus=self.bus, sender=self.agent_id)
            count += 1
            if self.watchdog is not None:
                cls = classify_response(obs, self.spec, delay_ms=self.delay_ms)
                if self.watchdog.observe(obs, cls) and self.on_restart is not None:
                    self.on_restart(case.case_id)
        self.injected += count
        return count


class FeedbackAgent(Agent):
    """Classifies observations, scores them and steers the mutation strategy."""

    role = "feedback"

    def __init__(
        self,
        agent_id: str,
        bus: Any,
        spec: ProtocolSpec,
        strategy: MutationStrategy,
        *,
        store: Optional[KnowledgeStore] = None,
        heartbeat: float = 5.0,
        weights: tuple = (Decimal(1), Decimal(1), Decimal(1)),
        batch: int = 32,
        window: int = 200,
        rule: FuzzyRule = FuzzyRule(),
        boost: float = 2.0,
        boost_cap: float = 8.0,
        delay_ms: float = 500.0,
    ):
        super().__init__(agent_id, bus, heartbeat)
        self.spec = spec
        self.strategy = strategy
        self.store = store
        self.weights = weights
        self.s_max = s_max(weights)
        self.batch = batch
        self.history = AnomalyHistory(window)
        self.rule = rule
        self.boost = boost
        self.boost_cap = boost_cap
        self.delay_ms = delay_ms
        self.cases: dict[str, TestCase] = {}
        self.pending: list[SeverityScore] = []
        self.implicated: list[str] = []
        self.processed = 0
        self.anomalies = 0
        self._responses = bus.subscribe("response", agent_id)
        self._case_sub = bus.subscribe("test_case", agent_id)

    def decoded(self, obs: Observation) -> bool:
        if obs.outcome != "reply" or not obs.reply:
            return False
        try:
            decode_frame(obs.reply, self.spec.response or self.spec)
        except FrameError:
            return False
        return True

    def step(self) -> int:
        self._control_messages()
        for msg in self._case_sub.drain():
            self.cases[msg.data["case_id"]] = TestCase.from_message(msg.data)
        count = 0
        for msg in self._responses.drain():
            if msg.event != "response":
                continue
            self.handle(Observation.from_message(msg.data))
            count += 1
        return count

    def handle(self, obs: Observation) -> None:
        cls = classify_response(obs, self.spec, delay_ms=self.delay_ms)
        score = severity(obs, cls, self.weights, delay_ms=self.delay_ms)
        case = self.cases.pop(obs.case_id, None)
        self.history.observe(obs, cls)
        self.processed += 1
        if cls.anomalous:
            self.anomalies += 1
            if case is not None:
                self.implicated.extend(case.mutated_fields())
        if cls.cls == "critical" and case is not None and self.store is not None:
            record_anomaly(score, case, self.store, cls, obs=obs)
        self.bus.publish(
            "response",
            "classified",
            {
                "case_id": obs.case_id,
                "class": cls.cls,
                "reason": cls.reason,
                "severity": score.to_dict(),
                "decoded": self.decoded(obs),
                "outcome": obs.outcome,
                "response_time": obs.response_time,
                "liveness_after": obs.liveness_after,
                "resource_signal": obs.resource_signal,
            },
            self.agent_id,
        )
        self.pending.append(score)
        if len(self.pending) >= self.batch:
            self.adjust()

    def adjust(self) -> Optional[MutationStrategy]:
        if not self.pending:
            return None
        score = mean_score(self.pending)
        implicated = list(dict.fromkeys(self.implicated))
        self.pending, self.implicated = [], []
        caps = {n: self.boost_cap * self.spec.field(n).priority for n in implicated if self.spec.has_field(n)}
        new = adjust_strategy(
            self.strategy,
            score,
            self.s_max,
            self.history,
            implicated=[n for n in implicated if n in caps],
            spec=self.spec,
            rule=self.rule,
            boost=self.boost,
            cap=caps,
            bus=self.bus,
            sender=self.agent_id,
        )
        self.strategy = new
        return new

    def end_cycle(self, cycle: int) -> None:
        self.adjust()
        if self.store is not None:
            record_strategy(self.strategy, self.store, self.spec.protocol_id, cycle)
