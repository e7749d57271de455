"""Campaign configuration and orchestration.

A campaign runs ``cycles`` rounds of ingest, generate, inject and feedback
against one target. The orchestrator doubles as the monitor: it owns the
agent registry, hands out generation tasks, watches heartbeats and moves the
tasks of silent agents to their peers.

Agents run cooperatively on a virtual clock (one virtual second per round),
which keeps a campaign a deterministic function of its configuration.
"""

from __future__ import annotations

import hashlib
import logging
import math
import random
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from decimal import Decimal
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .agents import FeedbackAgent, HarnessAgent, MutationAgent
from .bus import Bus, Heartbeater, NoCandidateAgents, Registry, Task, VirtualClock
from .feedback import FuzzyRule
from .harness import TargetEndpoint, Watchdog
from .knowledge import KnowledgeStore, load_store
from .metrics import Ledger, MetricReport, compute_report, render_report
from .mutation import DeltaMixture, DeterministicBackend, MutationStrategy, RandomBytesBackend, RemoteBackend
from .protocol import ProtocolSpec, enumerate_combos, load_bundled, load_spec
from .seed import SeedAgent
from .simulator import BUGS, SimulatorConfig, SimulatorProcess

logger = logging.getLogger(__name__)

BUNDLED = "bundled:"
EXIT_OK, EXIT_ABORTED, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    pass


class CampaignAborted(Exception):
    pass


# -- configuration -------------------------------------------------------------


@dataclass
class SimulatorSection:
    bugs: list[str] = field(default_factory=lambda: list(BUGS))
    session_limit: int = 16
    resource_channel: bool = True
    tick_ms: float = 20.0


@dataclass
class TargetSection:
    host: str = "127.0.0.1"
    port: int = 0
    simulator: Optional[SimulatorSection] = field(default_factory=SimulatorSection)
    connect_timeout_ms: float = 1000.0
    response_timeout_ms: float = 200.0
    max_retries: int = 2
    backoff_ms: float = 10.0
    restart_after_critical: int = 3


@dataclass
class BudgetSection:
    mode: str = "cases"  # cases | seconds
    cases: int = 3000
    seconds: float = 60.0


@dataclass
class StrategySection:
    rho0: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    rho_min: float = 0.01
    direction_weights: dict = field(default_factory=lambda: {"field": 0.8, "structural": 0.1, "semantic": 0.1})


@dataclass
class MixtureSection:
    boundary: float = 0.3
    small: float = 0.5
    uniform: float = 0.2
    small_max: int = 16


@dataclass
class FeedbackSection:
    weights: list = field(default_factory=lambda: [1, 1, 1])
    window: int = 200
    high_frequency: float = 0.5
    low_stability: float = 0.5
    damping: float = 0.5
    priority_boost: float = 2.0
    boost_cap: float = 8.0
    delay_ms: float = 500.0
    batch: int = 32


@dataclass
class BackendSection:
    kind: str = "deterministic"  # deterministic | remote | random
    url: Optional[str] = None
    temperature: float = 0.7
    top_k: int = 50
    top_p: float = 0.95
    max_tokens: int = 1024


@dataclass
class RetrievalSection:
    threshold: float = 0.85
    context_budget: int = 2048


@dataclass
class AgentsSection:
    mutation: int = 2
    heartbeat: float = 5.0
    failure_timeout: float = 15.0
    max_rounds: int = 100000
    transport: str = "inproc"  # inproc | tcp (mutation agents as processes)


@dataclass
class BusSection:
    host: str = "127.0.0.1"
    ports: dict = field(default_factory=lambda: {"seed": 5555, "test_case": 5556, "response": 5557})
    capacity: int = 1000


@dataclass
class FaultsSection:
    kill: list = field(default_factory=list)  # [{agent: mutation-1, round: 20}]


@dataclass
class CampaignConfig:
    protocol_id: str = "modbus_tcp"
    spec: str = f"{BUNDLED}modbus_tcp"
    knowledge: str = f"{BUNDLED}ics_rules.jsonl"
    capture: str = f"{BUNDLED}modbus_50.pcap"
    augment: bool = True
    target: TargetSection = field(default_factory=TargetSection)
    cycles: int = 3
    budget: BudgetSection = field(default_factory=BudgetSection)
    batch_size: int = 32
    strategy: StrategySection = field(default_factory=StrategySection)
    mixture: MixtureSection = field(default_factory=MixtureSection)
    feedback: FeedbackSection = field(default_factory=FeedbackSection)
    backend: BackendSection = field(default_factory=BackendSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    agents: AgentsSection = field(default_factory=AgentsSection)
    bus: BusSection = field(default_factory=BusSection)
    faults: FaultsSection = field(default_factory=FaultsSection)
    seed: int = 1
    output: str = "runs/campaign"
    base_dir: str = field(default=".", metadata={"internal": True})

    def to_dict(self) -> dict:
        doc = _to_plain(self)
        doc.pop("base_dir", None)
        return doc

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def resolve(self, ref: str) -> Path:
        if ref.startswith(BUNDLED):
            return bundled_path(ref[len(BUNDLED):])
        path = Path(ref)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def portable_dict(self) -> dict:
        """``to_dict`` with file references made absolute (bundled ones kept)."""
        doc = self.to_dict()
        for key in ("spec", "knowledge", "capture"):
            if not doc[key].startswith(BUNDLED):
                doc[key] = str(self.resolve(doc[key]).resolve())
        return doc


def _to_plain(obj: Any) -> Any:
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls: type, doc: Any, where: str) -> Any:
    if doc is None:
        return None
    if not isinstance(doc, Mapping):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {', '.join(sorted(unknown))}")
    kwargs = {}
    hints = {"target": TargetSection, "simulator": SimulatorSection, "budget": BudgetSection,
             "strategy": StrategySection, "mixture": MixtureSection, "feedback": FeedbackSection,
             "backend": BackendSection, "retrieval": RetrievalSection, "agents": AgentsSection,
             "bus": BusSection, "faults": FaultsSection}
    for key, value in doc.items():
        sub = hints.get(key)
        if sub is not None and (value is None or isinstance(value, Mapping)):
            kwargs[key] = _build(sub, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def bundled_path(name: str) -> Path:
    root = Path(str(resources.files("icsfuzz") / "data"))
    for sub in ("", "specs", "knowledge", "captures", "configs"):
        for candidate in (root / sub / name, root / sub / f"{name}.spec"):
            if candidate.is_file():
                return candidate
    raise ConfigError(f"no bundled file named {name!r}")


def config_from_dict(doc: Mapping[str, Any], base_dir: Union[str, Path] = ".") -> CampaignConfig:
    cfg = _build(CampaignConfig, dict(doc), "config")
    cfg.base_dir = str(base_dir)
    validate_config(cfg)
    return cfg


def load_config(path: Union[str, Path]) -> CampaignConfig:
    path = Path(path)
    if path.as_posix().startswith(BUNDLED):
        path = bundled_path(path.as_posix()[len(BUNDLED):])
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(doc, path.parent)


def validate_config(cfg: CampaignConfig) -> None:
    if cfg.cycles < 1:
        raise ConfigError("cycles must be >= 1")
    if cfg.budget.mode not in ("cases", "seconds"):
        raise ConfigError("budget.mode must be 'cases' or 'seconds'")
    if (cfg.budget.mode == "cases" and cfg.budget.cases <= 0) or (cfg.budget.mode == "seconds" and cfg.budget.seconds <= 0):
        raise ConfigError("budget must be > 0")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if cfg.backend.kind not in ("deterministic", "remote", "random"):
        raise ConfigError(f"unknown backend {cfg.backend.kind!r}")
    if cfg.backend.kind == "remote" and not cfg.backend.url:
        raise ConfigError("backend.url is required for the remote backend")
    if cfg.agents.mutation < 1:
        raise ConfigError("agents.mutation must be >= 1")
    if cfg.agents.failure_timeout <= cfg.agents.heartbeat:
        raise ConfigError("agents.failure_timeout must exceed agents.heartbeat")
    if cfg.agents.transport not in ("inproc", "tcp"):
        raise ConfigError(f"unknown agents.transport {cfg.agents.transport!r}")
    if cfg.agents.transport == "tcp" and cfg.budget.mode != "cases":
        raise ConfigError("the tcp transport supports the case-count budget only")
    if cfg.target.simulator is not None:
        unknown = set(cfg.target.simulator.bugs) - set(BUGS)
        if unknown:
            raise ConfigError(f"unknown simulator bugs: {', '.join(sorted(unknown))}")
    elif not cfg.target.port:
        raise ConfigError("target.port is required without a simulator")
    for label, ref in (("spec", cfg.spec), ("knowledge", cfg.knowledge), ("capture", cfg.capture)):
        try:
            path = cfg.resolve(ref)
        except ConfigError as exc:
            raise ConfigError(f"{label}: {exc}") from None
        if not path.exists():
            raise ConfigError(f"{label} path does not exist: {path}")
    try:
        MutationStrategy(
            rho0=cfg.strategy.rho0, alpha=cfg.strategy.alpha, beta=cfg.strategy.beta,
            rho_min=cfg.strategy.rho_min, direction_weights=cfg.strategy.direction_weights,
        )
        DeltaMixture(**asdict(cfg.mixture))
        FuzzyRule(cfg.feedback.high_frequency, cfg.feedback.low_stability, cfg.feedback.damping)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def agent_rng(master: int, role: str, index: int) -> random.Random:
    digest = hashlib.sha256(f"{master}:{role}:{index}".encode()).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def build_backend(cfg: CampaignConfig, spec: ProtocolSpec, store: Optional[KnowledgeStore] = None):
    b = cfg.backend
    det = DeterministicBackend(spec, DeltaMixture(**asdict(cfg.mixture)))
    if b.kind == "random":
        return RandomBytesBackend()
    if b.kind == "remote":
        return RemoteBackend(
            spec, b.url, store=store, temperature=b.temperature, top_k=b.top_k, top_p=b.top_p,
            max_tokens=b.max_tokens, budget=cfg.retrieval.context_budget, fallback=det,
        )
    return det


def initial_strategy(cfg: CampaignConfig) -> MutationStrategy:
    s = cfg.strategy
    return MutationStrategy(rho0=s.rho0, alpha=s.alpha, beta=s.beta, rho_min=s.rho_min, direction_weights=s.direction_weights)


def load_campaign_spec(cfg: CampaignConfig) -> ProtocolSpec:
    if cfg.spec.startswith(BUNDLED):
        spec = load_bundled(cfg.spec[len(BUNDLED):].removesuffix(".spec"))
    else:
        spec = load_spec(cfg.resolve(cfg.spec))
    if spec.protocol_id != cfg.protocol_id:
        raise ConfigError(f"spec describes {spec.protocol_id}, config asks for {cfg.protocol_id}")
    return spec


# -- orchestration --------------------------------------------------------------


@dataclass
class CampaignHandle:
    state: str = "preparing"  # preparing | running | stopping | done
    cycle: int = 0
    round: int = 0
    registry: Optional[Registry] = None

    _ORDER = ("preparing", "running", "stopping", "done")

    def advance(self, state: str) -> None:
        if self._ORDER.index(state) < self._ORDER.index(self.state):
            raise ValueError(f"cannot go from {self.state} to {state}")
        self.state = state


@dataclass
class CampaignResult:
    report: Optional[MetricReport]
    ledger_path: Path
    output: Path
    exit_code: int
    handle: CampaignHandle
    ledger: Ledger
    reassignments: list[dict] = field(default_factory=list)
    error: Optional[str] = None


class Campaign:
    def __init__(self, cfg: CampaignConfig, *, output: Optional[Union[str, Path]] = None):
        validate_config(cfg)
        self.cfg = cfg
        self.spec = load_campaign_spec(cfg)
        self.output = Path(output) if output is not None else cfg.resolve(cfg.output)
        self.handle = CampaignHandle()
        self.clock = VirtualClock()
        self.bus = Bus(self.clock, cfg.bus.capacity)
        self.registry = Registry(self.clock, cfg.agents.failure_timeout, self.bus)
        self.handle.registry = self.registry
        self.reassignments: list[dict] = []
        self.server: Optional[SimulatorProcess] = None
        self.ledger: Optional[Ledger] = None
        self.cycle = 0
        self.killed: set[str] = set()

    # setup

    def _prepare_output(self) -> None:
        self.output.mkdir(parents=True, exist_ok=True)
        for name in ("ledger.jsonl", "report.txt", "report.json", "quarantine.jsonl", "simulator_events.jsonl", "knowledge.jsonl"):
            (self.output / name).unlink(missing_ok=True)
        shutil.copyfile(self.cfg.resolve(self.cfg.knowledge), self.output / "knowledge.jsonl")
        self.store: KnowledgeStore = load_store(self.output / "knowledge.jsonl", self.cfg.retrieval.threshold)
        self.ledger = Ledger(self.output / "ledger.jsonl")

    def _start_target(self) -> TargetEndpoint:
        t = self.cfg.target
        port = t.port
        if t.simulator is not None:
            sim = SimulatorConfig(
                bugs_enabled=frozenset(t.simulator.bugs),
                session_limit=t.simulator.session_limit,
                resource_channel=t.simulator.resource_channel,
                tick_ms=t.simulator.tick_ms,
            )
            self.server = SimulatorProcess(sim, t.host, t.port, event_log=self.output / "simulator_events.jsonl").start()
            port = self.server.port
        return TargetEndpoint(
            t.host, port, self.spec.protocol_id, t.connect_timeout_ms, t.response_timeout_ms, t.max_retries, t.backoff_ms
        )

    def _strategy(self) -> MutationStrategy:
        return initial_strategy(self.cfg)

    def _build_agents(self, endpoint: TargetEndpoint, *, mutators: bool = True) -> None:
        cfg = self.cfg
        hb = cfg.agents.heartbeat
        self.seed_agent = SeedAgent(
            [self.spec], self.store, self.bus, "seed-0", quarantine_path=self.output / "quarantine.jsonl"
        )
        self.mutators = []
        if mutators:
            backend = build_backend(cfg, self.spec, self.store)
            self.mutators = [
                MutationAgent(f"mutation-{i}", self.bus, self.spec, backend, agent_rng(cfg.seed, "mutation", i), self._strategy(), heartbeat=hb)
                for i in range(cfg.agents.mutation)
            ]
        watchdog = Watchdog(self.server, cfg.target.restart_after_critical) if self.server is not None else None
        self.harness = HarnessAgent(
            "harness-0", self.bus, self.spec, endpoint, heartbeat=hb, watchdog=watchdog,
            on_restart=self._on_restart, delay_ms=cfg.feedback.delay_ms,
        )
        fb = cfg.feedback
        self.feedback = FeedbackAgent(
            "feedback-0", self.bus, self.spec, self._strategy(), store=self.store, heartbeat=hb,
            weights=tuple(Decimal(str(w)) for w in fb.weights), batch=fb.batch, window=fb.window,
            rule=FuzzyRule(fb.high_frequency, fb.low_stability, fb.damping), boost=fb.priority_boost,
            boost_cap=fb.boost_cap, delay_ms=fb.delay_ms,
        )
        self.steppers = [*self.mutators, self.harness, self.feedback]
        for agent in [*self.steppers]:
            self.registry.register(agent.agent_id, agent.role)
        self.registry.register("seed-0", "seed")
        self.seed_beat = Heartbeater(self.bus, "seed-0", hb)
        self._heartbeats = self.bus.subscribe("heartbeat", "monitor")
        self._control = self.bus.subscribe("control", "monitor")
        self._attach_ledger()

    def _setup(self, endpoint: TargetEndpoint) -> None:
        self._build_agents(endpoint)
        self._write_header(endpoint)

    def _teardown(self) -> None:
        pass

    def _attach_ledger(self) -> None:
        self.bus.tap(self._record)

    def _write_header(self, endpoint: TargetEndpoint) -> None:
        assert self.ledger is not None
        self.ledger.append({
            "type": "header",
            "protocol_id": self.spec.protocol_id,
            "spec": self.cfg.spec if self.cfg.spec.startswith(BUNDLED) else str(self.cfg.resolve(self.cfg.spec).resolve()),
            "combos": len(enumerate_combos(self.spec)),
            "target": {"host": endpoint.host, "port": endpoint.port},
            "config": self.cfg.portable_dict(),
        })

    # ledger

    def _record(self, msg) -> None:
        assert self.ledger is not None
        d = msg.data
        if msg.topic == "seed":
            self.ledger.append({"type": "seed", "cycle": self.cycle, **d})
        elif msg.topic == "test_case":
            kind = d["mutations"][0]["kind"] if d["mutations"] else "field"
            self.ledger.append({"type": "case", "cycle": self.cycle, "kind": kind, **d})
        elif msg.topic == "response" and msg.event == "classified":
            self.ledger.append({"type": "observation", "cycle": self.cycle, **d})
        elif msg.topic == "strategy":
            self.ledger.append({"type": "strategy", "cycle": self.cycle, **d})
        elif msg.topic == "control" and msg.event == "redistribute":
            self.reassignments.append({"round": self.handle.round, "at": msg.sent_at, **d})

    def _on_restart(self, case_id: str) -> None:
        assert self.ledger is not None
        self.ledger.append({"type": "restart", "cycle": self.cycle, "case_id": case_id})

    # loop

    def _plan(self, cycle: int, seeds: list[str], start: int) -> list[Task]:
        n_cases = self.cfg.budget.cases if self.cfg.budget.mode == "cases" else self.cfg.batch_size * 1000
        count = math.ceil(n_cases / self.cfg.batch_size)
        tasks = []
        for k in range(count):
            n = min(self.cfg.batch_size, n_cases - k * self.cfg.batch_size)
            seed_id = seeds[(start + k) % len(seeds)]
            tasks.append(Task(f"c{cycle}t{k:04d}", "mutation", {"seed_id": seed_id, "n": n, "cycle": cycle}))
        return tasks

    def _monitor(self) -> None:
        for msg in self._heartbeats.drain():
            self.registry.on_message(msg)
        for msg in self._control.drain():
            if msg.event == "complete":
                self.registry.complete(msg.data["agent_id"], msg.data["task_id"])
                self._completed.add(msg.data["task_id"])
        for failed in self.registry.detect_failures():
            logger.warning("agent %s missed heartbeats; redistributing its tasks", failed)
            try:
                self.registry.redistribute(failed)
            except NoCandidateAgents as exc:
                if self.registry.agents[failed].role == "mutation":
                    raise CampaignAborted(str(exc)) from None
                logger.warning("%s", exc)

    def _round(self) -> None:
        self.handle.round += 1
        self.clock.advance(1.0)
        for spec in self.cfg.faults.kill:
            if int(spec["round"]) == self.handle.round and spec["agent"] not in self.killed:
                self.killed.add(spec["agent"])
                logger.warning("fault injection: stopping %s at round %d", spec["agent"], self.handle.round)
        if "seed-0" not in self.killed:
            self.seed_beat.tick()
        for agent in self.steppers:
            if agent.agent_id in self.killed:
                continue
            agent.beat()
            agent.step()
        self._monitor()
        if self.handle.round >= self.cfg.agents.max_rounds:
            raise CampaignAborted(f"round limit {self.cfg.agents.max_rounds} reached")

    def _settled(self) -> bool:
        """Every injected case has been through feedback."""
        return self.feedback.processed >= self.harness.injected

    def _run_cycle(self, cycle: int, seed_ids: list[str], start: int) -> int:
        assert self.ledger is not None
        self.cycle = cycle
        self.handle.cycle = cycle
        self.ledger.append({"type": "cycle", "cycle": cycle, "event": "start", "round": self.handle.round})
        self.seed_agent.run(self.cfg.resolve(self.cfg.capture))
        if self.cfg.augment:
            self.seed_agent.augment(self.spec)
        if not seed_ids:
            seed_ids.extend(s.seed_id for s in self.seed_agent.corpus if s.protocol_id == self.spec.protocol_id)
            if not seed_ids:
                raise CampaignAborted("no valid seeds could be extracted from the capture source")
        else:
            known = set(seed_ids)
            seed_ids.extend(s.seed_id for s in self.seed_agent.corpus if s.seed_id not in known)
        tasks = self._plan(cycle, seed_ids, start)
        self._completed: set[str] = set()
        wanted = {t.task_id for t in tasks}
        timed = self.cfg.budget.mode == "seconds"
        deadline = time.monotonic() + self.cfg.budget.seconds if timed else None
        queue = list(tasks)
        if not timed:
            for task in queue:
                self.registry.assign(task)
            queue = []
        issued: set[str] = set() if timed else set(wanted)
        while True:
            if timed:
                # keep roughly one task per mutation agent in flight until time runs out
                while queue and time.monotonic() < deadline and len(issued - self._completed) < len(self.mutators):
                    task = queue.pop(0)
                    issued.add(task.task_id)
                    self.registry.assign(task)
            self._round()
            done = issued <= self._completed and self._settled()
            if done and (not timed or not queue or time.monotonic() >= deadline):
                break
        self.feedback.end_cycle(cycle)
        self.ledger.append({"type": "cycle", "cycle": cycle, "event": "end", "round": self.handle.round})
        self.ledger.flush()
        return start + len(issued)

    def run(self) -> CampaignResult:
        exit_code, error = EXIT_OK, None
        self._prepare_output()
        assert self.ledger is not None
        try:
            endpoint = self._start_target()
            self._setup(endpoint)
            self.handle.advance("running")
            seed_ids: list[str] = []
            start = 0
            for cycle in range(1, self.cfg.cycles + 1):
                start = self._run_cycle(cycle, seed_ids, start)
        except (CampaignAborted, KeyboardInterrupt) as exc:
            exit_code, error = EXIT_ABORTED, str(exc) or type(exc).__name__
            logger.error("campaign aborted: %s", error)
        finally:
            self.handle.advance("stopping")
            self._teardown()
            if self.server is not None:
                self.server.stop()
            self.ledger.close()
        report = None
        try:
            report = compute_report(self.ledger, self.spec)
            (self.output / "report.txt").write_text(render_report(report, "text"), encoding="utf-8")
            (self.output / "report.json").write_text(render_report(report, "structured"), encoding="utf-8")
        except Exception as exc:  # an aborted campaign may not have enough data for a report
            logger.error("no report: %s", exc)
            if exit_code == EXIT_OK:
                exit_code, error = EXIT_ABORTED, str(exc)
        self.handle.advance("done")
        return CampaignResult(
            report, self.output / "ledger.jsonl", self.output, exit_code, self.handle, self.ledger, self.reassignments, error
        )


def run_campaign(cfg: CampaignConfig, *, output: Optional[Union[str, Path]] = None) -> CampaignResult:
    if cfg.agents.transport == "tcp":
        from .distributed import ProcessCampaign

        return ProcessCampaign(cfg, output=output).run()
    return Campaign(cfg, output=output).run()


def demo_config(**overrides: Any) -> CampaignConfig:
    cfg = load_config(bundled_path("demo.yaml"))
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg
