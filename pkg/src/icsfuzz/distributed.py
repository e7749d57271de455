"""Campaigns whose mutation agents run as separate processes.

The orchestrator starts a :class:`TcpBroker`, spawns one ``fuzz agent``
process per mutation agent and keeps the seed, harness and feedback roles
(plus the simulator and the monitor) in its own process, so the watchdog can
still restart the simulator. Time is wall-clock time; a ``faults.kill`` round
is read as seconds after the agents came up. Case order across agents is not
deterministic in this mode.
"""

from __future__ import annotations

import json
import logging
import subprocess
import sys
import time
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import yaml

from .agents import MutationAgent
from .bus import Clock, TcpBroker, TcpBus
from .campaign import (
    Campaign,
    CampaignAborted,
    CampaignConfig,
    agent_rng,
    build_backend,
    initial_strategy,
    load_campaign_spec,
)
from .harness import TargetEndpoint
from .knowledge import load_store

logger = logging.getLogger(__name__)

POLL = 0.002  # seconds between orchestrator rounds when idle
STARTUP_TIMEOUT = 30.0
STALL_TIMEOUT = 60.0
LEDGER_TOPICS = ("seed", "test_case", "response", "strategy", "control")


class ProcessCampaign(Campaign):
    def __init__(self, cfg: CampaignConfig, *, output: Optional[Union[str, Path]] = None):
        super().__init__(cfg, output=output)
        self.clock = Clock()
        self.registry.clock = self.clock
        self.broker: Optional[TcpBroker] = None
        self.procs: dict[str, subprocess.Popen] = {}
        self.observed: set[str] = set()
        self._expected: set[str] = set()
        self._started = 0.0
        self._progress = 0.0

    # setup

    def _setup(self, endpoint: TargetEndpoint) -> None:
        cfg = self.cfg
        self.broker = TcpBroker(cfg.bus.host, {k: int(v) for k, v in cfg.bus.ports.items()}).start()
        self.bus = TcpBus(cfg.bus.host, self.broker.ports, cfg.bus.capacity, clock=self.clock)
        self.registry.bus = self.bus
        self._ledger_subs = [self.bus.subscribe(t, "ledger") for t in LEDGER_TOPICS]
        self._build_agents(endpoint, mutators=False)
        self._write_header(endpoint)
        config_path = self.output / "agent_config.yaml"
        config_path.write_text(yaml.safe_dump(cfg.portable_dict(), sort_keys=False), encoding="utf-8")
        for i in range(cfg.agents.mutation):
            agent_id = f"mutation-{i}"
            cmd = [
                sys.executable, "-m", "icsfuzz.cli", "agent",
                "--config", str(config_path), "--index", str(i),
                "--bus-host", cfg.bus.host, "--bus-ports", json.dumps(self.broker.ports),
            ]
            self.procs[agent_id] = subprocess.Popen(cmd)
        self._await_agents()

    def _attach_ledger(self) -> None:
        pass  # the ledger subscribes to the broker instead of tapping a local bus

    def _await_agents(self) -> None:
        waiting = set(self.procs)
        deadline = time.monotonic() + STARTUP_TIMEOUT
        while waiting:
            for msg in self._heartbeats.drain():
                agent_id = msg.data["agent_id"]
                if agent_id in waiting:
                    waiting.discard(agent_id)
                    self.registry.register(agent_id, "mutation")
            for agent_id, proc in self.procs.items():
                if agent_id in waiting and proc.poll() is not None:
                    raise CampaignAborted(f"{agent_id} exited during startup (code {proc.returncode})")
            if time.monotonic() > deadline:
                raise CampaignAborted(f"agents did not come up: {', '.join(sorted(waiting))}")
            time.sleep(0.01)
        self._started = self._progress = time.monotonic()

    def _teardown(self) -> None:
        if self.broker is None:
            return
        try:
            self.bus.publish("control", "stop", {"reason": "campaign finished"}, "monitor")
        except Exception as exc:  # the broker may already be gone
            logger.warning("could not broadcast stop: %s", exc)
        deadline = time.monotonic() + 5.0
        for proc in self.procs.values():
            try:
                proc.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()
        self._drain_ledger()
        self.bus.close()
        self.broker.close()
        self.broker = None

    # loop

    def _drain_ledger(self) -> int:
        n = 0
        for sub in self._ledger_subs:
            for msg in sub.drain():
                self._record(msg)
                if msg.topic == "response" and msg.event == "classified":
                    self.observed.add(msg.data["case_id"])
                n += 1
        return n

    def _plan(self, cycle: int, seeds: list[str], start: int):
        tasks = super()._plan(cycle, seeds, start)
        self._expected = {f"{t.task_id}-{i:03d}" for t in tasks for i in range(int(t.payload["n"]))}
        return tasks

    def _settled(self) -> bool:
        return self._expected <= self.observed and self.feedback.processed >= self.harness.injected

    def _round(self) -> None:
        self.handle.round += 1
        elapsed = time.monotonic() - self._started
        for spec in self.cfg.faults.kill:
            agent_id = spec["agent"]
            if elapsed >= float(spec["round"]) and agent_id not in self.killed and agent_id in self.procs:
                self.killed.add(agent_id)
                logger.warning("fault injection: killing %s after %.1f s", agent_id, elapsed)
                self.procs[agent_id].kill()
        self.seed_beat.tick()
        busy = self.harness.step() + self.feedback.step()
        self.harness.beat()
        self.feedback.beat()
        busy += self._drain_ledger()
        self._monitor()
        now = time.monotonic()
        if busy:
            self._progress = now
        else:
            time.sleep(POLL)
        if now - self._progress > max(STALL_TIMEOUT, 2 * self.cfg.agents.failure_timeout):
            raise CampaignAborted("no progress on the bus")

    def _monitor(self) -> None:
        # heartbeats are stamped on arrival: agent clocks are not shared
        for msg in self._heartbeats.drain():
            self.registry.heartbeat(msg.data["agent_id"])
        # local roles share this thread, so they are alive whenever it runs
        for agent_id in ("seed-0", self.harness.agent_id, self.feedback.agent_id):
            self.registry.heartbeat(agent_id)
        super()._monitor()


def agent_main(cfg: CampaignConfig, index: int, host: str, ports: Mapping[str, int]) -> int:
    """Loop of one mutation agent process until the monitor broadcasts ``stop``."""
    spec = load_campaign_spec(cfg)
    store = load_store(cfg.resolve(cfg.knowledge), cfg.retrieval.threshold)
    bus = TcpBus(host, ports, cfg.bus.capacity)
    agent = MutationAgent(
        f"mutation-{index}", bus, spec, build_backend(cfg, spec, store), agent_rng(cfg.seed, "mutation", index),
        initial_strategy(cfg), heartbeat=cfg.agents.heartbeat,
    )
    try:
        while not agent.stopped:
            agent.beat()
            if not agent.step():
                time.sleep(POLL)
    except KeyboardInterrupt:
        pass
    finally:
        bus.close()
    return 0


def parse_ports(text: str) -> dict[str, Any]:
    doc = json.loads(text)
    return {str(k): int(v) for k, v in doc.items()}
