from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FC03, free_port, scapy_response
from icsfuzz.bus import Bus
from icsfuzz.feedback import Observation, ResponseClass, classify_response
from icsfuzz.harness import (
    CrashEvent,
    TargetEndpoint,
    Watchdog,
    crash_ledger,
    frame_extent,
    inject,
    modbus_frame,
    probe_liveness,
)
from icsfuzz.mutation import MutationRecord, MutationStrategy, TestCase
from icsfuzz.simulator import SimulatorConfig, SimulatorServer


def _case(data: bytes, cid: str = "c0t0000-000") -> TestCase:
    return TestCase(cid, "modbus_tcp-x", "modbus_tcp", (MutationRecord("field", {"field": "quantity"}),), data, MutationStrategy())


def _ep(port: int, **kw) -> TargetEndpoint:
    kw.setdefault("response_timeout", 150.0)
    return TargetEndpoint("127.0.0.1", port, "modbus_tcp", **kw)


def _obs(cid: str, live: str) -> Observation:
    return Observation(cid, "reply" if live != "down" else "timeout", 1.0, live)


# -- types ----------------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"connect_timeout": 0}, {"response_timeout": -1}, {"max_retries": -1}])
def test_endpoint_invariants(kw):
    with pytest.raises(ValueError):
        TargetEndpoint("127.0.0.1", 502, "modbus_tcp", **kw)


def test_modbus_frame_matches_canonical(modbus):
    assert modbus_frame(1, 3, bytes.fromhex("0000 000a")) == FC03
    assert modbus_frame(1, 3, bytes.fromhex("0000 0001")) == modbus.canonical
    assert modbus_frame(1, 3, b"", length=9)[4:6] == b"\x00\x09"


@pytest.mark.parametrize("n", [0, 3, 5, 6, 7, 12, 20])
def test_frame_extent(modbus, n):
    # MBAP length counts from the unit id onward: 6 header bytes precede it
    assert frame_extent(FC03[:n], modbus) == (None if n < 6 else 12)


# -- inject and probe -----------------------------------------------------------


@pytest.fixture
def healthy():
    with SimulatorServer(SimulatorConfig()) as server:
        yield server


def test_valid_fc03_reply(healthy, modbus):
    bus = Bus()
    sub = bus.subscribe("response", "t")
    obs = inject(_case(FC03), _ep(healthy.port), modbus, bus=bus)
    assert obs.outcome == "reply" and obs.liveness_after == "alive"
    pdu = scapy_response(obs.reply)
    assert (pdu.funcCode, pdu.byteCount) == (3, 20)
    assert obs.resource_signal > 0
    (msg,) = sub.drain()
    assert Observation.from_message(msg.data) == obs
    assert classify_response(obs, modbus).cls == "normal"


def test_probe_alive_then_slow_is_degraded(healthy, modbus):
    assert probe_liveness(_ep(healthy.port), modbus).state == "alive"
    rep = probe_liveness(_ep(healthy.port), modbus, slow_ms=0.0)
    assert rep.state == "degraded" and "slow" in rep.detail


def test_closed_port_refused(modbus):
    bus = Bus()
    sub = bus.subscribe("response", "t")
    obs = inject(_case(FC03), _ep(free_port(), max_retries=1, backoff_base=1.0), modbus, bus=bus)
    assert obs.outcome == "connection-refused" and obs.liveness_after == "down"
    assert len(sub.drain()) == 1
    assert probe_liveness(_ep(free_port()), modbus).state == "down"


def test_overflow_case_times_out_and_target_down(modbus):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"length_overflow_crash"}))
    with SimulatorServer(cfg) as server:
        ep = _ep(server.port)
        before = inject(_case(FC03, "a"), ep, modbus)
        bad = inject(_case(modbus_frame(2, 3, bytes.fromhex("0000 000a"), length=9), "b"), ep, modbus)
        still = inject(_case(FC03, "c"), ep, modbus)
        server.restart()
        again = inject(_case(FC03, "d"), ep, modbus)
    assert (bad.outcome, bad.liveness_after) == ("timeout", "down")
    assert classify_response(bad, modbus) == ResponseClass("critical", "crash")
    assert still.outcome == "connection-refused"
    assert crash_ledger([before, bad, still, again]) == [CrashEvent("b", "d", 1)]


def test_malformed_fc16_exception_still_alive(modbus):
    with SimulatorServer(SimulatorConfig.all_bugs()) as server:
        data = modbus_frame(1, 0x10, bytes.fromhex("0000 0002 04") + bytes(6))
        obs = inject(_case(data), _ep(server.port), modbus)
    assert obs.reply == modbus_frame(1, 0x90, b"\x03")
    assert obs.liveness_after == "alive"
    assert classify_response(obs, modbus) == ResponseClass("abnormal", "exception code")


def test_burst_halt_seen_as_timeout(modbus):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"io_halt_on_burst"}), tick_ms=10.0)
    with SimulatorServer(cfg) as server:
        ep = _ep(server.port)
        out = [inject(_case(modbus_frame(i, 0x10, bytes.fromhex("0000 0002 04") + bytes(6)), f"w{i}"), ep, modbus, probe=False)
               for i in range(6)]
        assert server.halted
    assert [o.outcome for o in out] == ["reply"] * 4 + ["timeout"] * 2


def test_one_observation_per_case(healthy, modbus):
    bus = Bus()
    sub = bus.subscribe("response", "t")
    cases = [_case(FC03, f"k{i}") for i in range(5)] + [_case(b"\x00", "junk")]
    for c in cases:
        inject(c, _ep(healthy.port), modbus, bus=bus, probe=False)
    assert [m.data["case_id"] for m in sub.drain()] == [c.case_id for c in cases]


# -- crash ledger ---------------------------------------------------------------


def _seq(states: str) -> list[Observation]:
    names = {"a": "alive", "d": "down", "g": "degraded"}
    return [_obs(f"o{i}", names[c]) for i, c in enumerate(states)]


@pytest.mark.parametrize("states, n", [("addda", 1), ("adadda", 2), ("aggga", 0), ("", 0), ("ad", 1), ("add", 1)])
def test_crash_ledger_examples(states, n):
    assert len(crash_ledger(_seq(states))) == n


def test_open_event_has_no_close():
    (ev,) = crash_ledger(_seq("aadd"))
    assert (ev.opened, ev.closed, ev.index) == ("o2", None, 2)


@settings(max_examples=300)
@given(states=st.text(alphabet="adg", max_size=40))
def test_crash_ledger_oracle(states):
    events = crash_ledger(_seq(states))
    # oracle: an event starts at each down run; it closes at the next alive
    starts = [i for i, c in enumerate(states) if c == "d" and (i == 0 or states[i - 1] != "d")]
    merged = []
    for i in starts:
        if merged and "a" not in states[merged[-1] : i]:
            continue
        merged.append(i)
    assert [e.index for e in events] == merged
    transitions = sum(1 for i, c in enumerate(states) if c == "d" and (i == 0 or states[i - 1] != "d"))
    assert len(events) <= transitions


# -- watchdog -------------------------------------------------------------------


def test_watchdog_without_server():
    dog = Watchdog(None)
    crit = ResponseClass("critical", "timeout")
    assert not any(dog.observe(_obs("x", "alive"), crit) for _ in range(5))
    assert dog.streak == 5


def test_watchdog_restarts_on_down_and_streak(modbus):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"length_overflow_crash"}))
    with SimulatorServer(cfg) as server:
        dog = Watchdog(server, consecutive_critical=3)
        crit, ok = ResponseClass("critical", "timeout"), ResponseClass("normal", "normal")
        assert dog.observe(_obs("a", "down"), crit) and dog.restarts == 1
        assert not dog.observe(_obs("b", "alive"), crit)
        assert not dog.observe(_obs("c", "alive"), ok)
        assert not dog.observe(_obs("d", "alive"), crit)
        assert not dog.observe(_obs("e", "alive"), crit)
        assert dog.observe(_obs("f", "alive"), crit) and dog.restarts == 2
        assert server.restarts == 2
        assert probe_liveness(_ep(server.port), modbus).state == "alive"
