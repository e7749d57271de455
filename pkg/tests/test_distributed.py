from __future__ import annotations

import os
from pathlib import Path

import pytest

from icsfuzz.campaign import EXIT_OK, demo_config, run_campaign
from icsfuzz.metrics import load_ledger

pytestmark = pytest.mark.slow


def _cfg(cases: int, kill=None):
    cfg = demo_config(cycles=1)
    cfg.budget.cases = cases
    cfg.agents.transport = "tcp"
    cfg.bus.ports = {"seed": 0, "test_case": 0, "response": 0}
    cfg.agents.heartbeat, cfg.agents.failure_timeout = 0.5, 2.0
    cfg.faults.kill = kill or []
    return cfg


def test_process_campaign_completes(tmp_path):
    res = run_campaign(_cfg(320), output=tmp_path)
    assert res.exit_code == EXIT_OK
    ids = [r["case_id"] for r in load_ledger(tmp_path / "ledger.jsonl").of("case")]
    assert len(set(ids)) == 320
    assert _children() == []


def _children() -> list[int]:
    """Live child processes of this test process, read from /proc."""
    me, out = os.getpid(), []
    for stat in Path("/proc").glob("[0-9]*/stat"):
        try:
            fields = stat.read_text().rsplit(")", 1)[1].split()
        except OSError:
            continue
        if int(fields[1]) == me and fields[0] != "Z":
            out.append(int(stat.parent.name))
    return out


def test_process_kill_redistributes(tmp_path):
    # kill in the first round after assignment: generation outruns any fixed delay,
    # so a later kill can find the agent with no tasks left to move
    cfg = _cfg(3200, kill=[{"agent": "mutation-1", "round": 0}])
    res = run_campaign(cfg, output=tmp_path)
    assert res.exit_code == EXIT_OK, res.error
    (moved,) = res.reassignments
    assert moved["failed"] == "mutation-1" and moved["assignments"]
    assert set(moved["assignments"].values()) == {"mutation-0"}
    failed_at = dict(res.handle.registry.failures)["mutation-1"]
    assert moved["at"] - failed_at <= 2 * cfg.agents.failure_timeout
    led = load_ledger(tmp_path / "ledger.jsonl")
    observed = {r["case_id"] for r in led.of("observation")}
    # every planned case was generated and observed at least once despite the kill
    planned = {f"c1t{k:04d}-{i:03d}" for k in range(100) for i in range(32)}
    assert planned <= observed
    assert _children() == []
