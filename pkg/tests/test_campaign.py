from __future__ import annotations

import json

import pytest
import yaml

from icsfuzz.campaign import (
    EXIT_ABORTED,
    EXIT_OK,
    Campaign,
    CampaignHandle,
    ConfigError,
    agent_rng,
    bundled_path,
    config_from_dict,
    demo_config,
    load_config,
    run_campaign,
)
from icsfuzz.metrics import load_ledger


def _small(cases: int = 160, cycles: int = 1, **kw):
    cfg = demo_config(cycles=cycles, **kw)
    cfg.budget.cases = cases
    return cfg


# -- configuration --------------------------------------------------------------


def test_demo_config_round_trip(tmp_path):
    path = bundled_path("demo.yaml")
    cfg = load_config(path)
    assert cfg.to_dict() == yaml.safe_load(path.read_text())
    out = tmp_path / "again.yaml"
    out.write_text(cfg.to_yaml())
    assert load_config(out).to_dict() == cfg.to_dict()


def test_missing_spec_names_path(tmp_path):
    doc = demo_config().to_dict()
    doc["spec"] = "specs/nowhere.spec"
    with pytest.raises(ConfigError, match="nowhere.spec"):
        config_from_dict(doc, tmp_path)


@pytest.mark.parametrize(
    "key, value",
    [
        ("cycles", 0),
        ("budget", {"mode": "cases", "cases": 0}),
        ("budget", {"mode": "hours"}),
        ("backend", {"kind": "remote"}),
        ("agents", {"heartbeat": 5, "failure_timeout": 5}),
        ("target", {"simulator": {"bugs": ["gremlins"]}}),
        ("mixture", {"boundary": -0.1}),
        ("colour", "blue"),
    ],
)
def test_invalid_configs(key, value):
    doc = demo_config().to_dict()
    doc[key] = value
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_unreadable_config(tmp_path):
    with pytest.raises(ConfigError, match="missing.yaml"):
        load_config(tmp_path / "missing.yaml")
    bad = tmp_path / "bad.yaml"
    bad.write_text("cycles: [1\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_agent_rng_streams():
    a, b = agent_rng(1, "mutation", 0), agent_rng(1, "mutation", 0)
    assert [a.random() for _ in range(3)] == [b.random() for _ in range(3)]
    assert agent_rng(1, "mutation", 0).random() != agent_rng(1, "mutation", 1).random()


def test_handle_states_monotone():
    h = CampaignHandle()
    h.advance("running")
    h.advance("done")
    with pytest.raises(ValueError):
        h.advance("running")


# -- runs -----------------------------------------------------------------------


def test_small_campaign_outputs(tmp_path):
    res = run_campaign(_small(cycles=2), output=tmp_path)
    assert res.exit_code == EXIT_OK and res.handle.state == "done"
    for name in ("ledger.jsonl", "report.txt", "report.json", "simulator_events.jsonl", "knowledge.jsonl"):
        assert (tmp_path / name).is_file()
    led = load_ledger(tmp_path / "ledger.jsonl")
    assert led.cycles == [1, 2]
    cases, obs = led.of("case"), led.of("observation")
    assert len(cases) == 320
    # every observation references a case generated earlier
    seen = set()
    for r in led:
        if r["type"] == "case":
            seen.add(r["case_id"])
        elif r["type"] == "observation":
            assert r["case_id"] in seen
    assert {r["case_id"] for r in obs} == {r["case_id"] for r in cases}
    rep = res.report
    assert rep.coverage is not None and rep.entropy_per_field and len(rep.etn_per_cycle) == 2
    assert json.loads((tmp_path / "report.json").read_text())["totals"]["generated"] == 320


def test_reproducible(tmp_path):
    a = run_campaign(_small(), output=tmp_path / "a")
    b = run_campaign(_small(), output=tmp_path / "b")
    hexes = [[r["hex"] for r in load_ledger(p / "ledger.jsonl").of("case")] for p in (a.output, b.output)]
    assert hexes[0] == hexes[1]
    assert (a.output / "report.json").read_bytes() == (b.output / "report.json").read_bytes()
    c = run_campaign(_small(seed=7), output=tmp_path / "c")
    assert [r["hex"] for r in load_ledger(c.output / "ledger.jsonl").of("case")] != hexes[0]


def test_interrupt_keeps_partial_ledger(tmp_path, monkeypatch):
    original = Campaign._round
    calls = {"n": 0}

    def interrupted(self):
        calls["n"] += 1
        if calls["n"] == 4:
            raise KeyboardInterrupt
        original(self)

    monkeypatch.setattr(Campaign, "_round", interrupted)
    res = run_campaign(_small(cases=640), output=tmp_path)
    assert res.exit_code == EXIT_ABORTED and res.handle.state == "done"
    led = load_ledger(tmp_path / "ledger.jsonl")
    assert 0 < len(led.of("case")) < 640
    assert res.report is not None and res.report.totals["generated"] == len(led.of("case"))
    assert (tmp_path / "report.txt").read_text().startswith("Protocol: modbus_tcp")


def test_killed_agent_tasks_reassigned(tmp_path):
    cfg = _small(cases=320)
    cfg.faults.kill = [{"agent": "mutation-1", "round": 3}]
    res = run_campaign(cfg, output=tmp_path)
    assert res.exit_code == EXIT_OK
    (moved,) = res.reassignments
    assert moved["failed"] == "mutation-1" and moved["assignments"]
    assert moved["at"] - 3 <= 2 * cfg.agents.failure_timeout
    assert set(moved["assignments"].values()) == {"mutation-0"}
    # each task has one live owner at a time: a second assignment only follows a failure
    history = res.handle.registry.assignments
    owners: dict[str, list[str]] = {}
    for task, agent in history:
        owners.setdefault(task, []).append(agent)
    for task, who in owners.items():
        assert who in ([who[0]], ["mutation-1", "mutation-0"])
        assert (len(who) == 2) == (task in moved["assignments"])
    ids = [r["case_id"] for r in load_ledger(tmp_path / "ledger.jsonl").of("case")]
    assert len(ids) == len(set(ids)) == 320


def test_only_mutation_agent_killed_aborts(tmp_path):
    cfg = _small(cases=640)
    cfg.agents.mutation = 1
    cfg.faults.kill = [{"agent": "mutation-0", "round": 2}]
    res = run_campaign(cfg, output=tmp_path)
    assert res.exit_code == EXIT_ABORTED and "no alive mutation agent" in res.error
    assert (tmp_path / "ledger.jsonl").is_file()
