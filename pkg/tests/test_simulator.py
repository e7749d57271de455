from __future__ import annotations

import json
import socket
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FC03, free_port, scapy_response
from icsfuzz.harness import TargetEndpoint, modbus_frame, probe_liveness
from icsfuzz.simulator import (
    EventLog,
    PortInUse,
    SimulatorConfig,
    SimulatorCore,
    SimulatorProcess,
    SimulatorServer,
    resource_trailer,
    strip_resource_trailer,
)


def _core(*bugs: str, **kw) -> SimulatorCore:
    kw.setdefault("resource_channel", False)
    kw.setdefault("tick_ms", 10.0)
    return SimulatorCore(SimulatorConfig(bugs_enabled=frozenset(bugs), **kw))


def _ask(core: SimulatorCore, data: bytes, conn: int = 0):
    assert core.connect(conn)
    res = core.receive(conn, data)
    if conn in core.buffers:
        core.disconnect(conn)
    return res


def _reply(core: SimulatorCore, data: bytes) -> bytes:
    (r,) = _ask(core, data).replies
    return r


def _bad_fc16(tid: int) -> bytes:
    # byte_count 4 but quantity 2 with 6 payload bytes
    return modbus_frame(tid, 0x10, bytes.fromhex("0000 0002 04") + bytes(6))


def _short(tid: int, deficit: int) -> bytes:
    full = modbus_frame(tid, 0x03, bytes.fromhex("0000 000a"))
    return full[: len(full) - deficit]


# -- configuration --------------------------------------------------------------


def test_config_invariants():
    with pytest.raises(ValueError):
        SimulatorConfig(session_limit=0)
    with pytest.raises(ValueError):
        SimulatorConfig(bugs_enabled=frozenset({"meltdown"}))
    cfg = SimulatorConfig.all_bugs(session_limit=3)
    assert all(cfg.enabled(b) for b in ("session_exhaustion", "length_overflow_crash", "io_halt_on_burst"))


@settings(max_examples=200)
@given(frame=st.binary(min_size=7, max_size=40), value=st.floats(0, 10))
def test_resource_trailer_round_trip(frame, value):
    frame = frame[:4] + struct.pack(">H", len(frame) - 6) + frame[6:]
    got, res = strip_resource_trailer(frame + resource_trailer(value))
    assert got == frame and res == round(value * 100) / 100
    assert strip_resource_trailer(frame) == (frame, 0.0)


# -- protocol semantics ---------------------------------------------------------


def test_fc03_reply_matches_scapy():
    r = _reply(_core(), FC03)
    assert r == bytes.fromhex("0001 0000 0017 01 03 14") + bytes(20)
    pdu = scapy_response(r)
    assert (pdu.funcCode, pdu.byteCount, pdu.registerVal) == (3, 20, [0] * 10)


def test_write_then_read_registers():
    core = _core()
    assert _reply(core, modbus_frame(1, 0x06, bytes.fromhex("0005 beef"))) == modbus_frame(1, 0x06, bytes.fromhex("0005 beef"))
    w = _reply(core, modbus_frame(2, 0x10, bytes.fromhex("0006 0002 04 1234 5678")))
    assert (scapy_response(w).startAddr, scapy_response(w).quantityRegisters) == (6, 2)
    r = _reply(core, modbus_frame(3, 0x03, bytes.fromhex("0004 0004")))
    assert scapy_response(r).registerVal == [0, 0xBEEF, 0x1234, 0x5678]


def test_coils_round_trip():
    core = _core()
    _reply(core, modbus_frame(1, 0x05, bytes.fromhex("0001 ff00")))
    _reply(core, modbus_frame(2, 0x0F, bytes.fromhex("0008 000a 02 ff 01")))
    r = _reply(core, modbus_frame(3, 0x01, bytes.fromhex("0000 0012")))
    # coil 1 set, coils 8..16 set, coil 17 cleared
    assert scapy_response(r).coilStatus == [0x02, 0xFF, 0x01]


@pytest.mark.parametrize(
    "fc, body, code",
    [
        (0x5C, b"", 1),
        (0x03, bytes.fromhex("0000 0000"), 3),
        (0x03, bytes.fromhex("0000 007e"), 3),
        (0x03, bytes.fromhex("ffff 0002"), 2),
        (0x05, bytes.fromhex("0000 1234"), 3),
        (0x10, bytes.fromhex("0000 0002 04") + bytes(6), 3),
    ],
)
def test_exception_replies(fc, body, code):
    r = _reply(_core(), modbus_frame(9, fc, body))
    assert r == modbus_frame(9, (fc | 0x80) & 0xFF, bytes([code]))


@settings(max_examples=100)
@given(ops=st.lists(st.tuples(st.integers(0, 31), st.integers(0, 0xFFFF)), max_size=20))
def test_register_model_oracle(ops):
    core, model = _core(), [0] * 32
    for tid, (addr, value) in enumerate(ops):
        _reply(core, modbus_frame(tid, 0x06, struct.pack(">HH", addr, value)))
        model[addr] = value
    assert scapy_response(_reply(core, modbus_frame(99, 0x03, struct.pack(">HH", 0, 32)))).registerVal == model


def test_pipelined_frames_in_one_read():
    core = _core()
    res = _ask(core, modbus_frame(1, 0x03, bytes.fromhex("0000 0001")) + modbus_frame(2, 0x03, bytes.fromhex("0000 0001")))
    assert [struct.unpack(">H", r[:2])[0] for r in res.replies] == [1, 2]


# -- seeded bugs (core, simulated clock) ----------------------------------------


def test_length_overflow_crashes():
    core = _core("length_overflow_crash")
    assert _ask(core, _short(1, 3)).action is None
    assert core.crashed and not core.connect(5)
    assert core.log.of("bug")[0]["bug"] == "length_overflow_crash"


def test_overflow_margin_is_strict():
    core = _core("length_overflow_crash")
    _ask(core, _short(1, 2))
    assert not core.crashed


def test_overflow_disabled_is_harmless():
    core = _core()
    _ask(core, _short(1, 5))
    assert not core.crashed and _reply(core, FC03)


def test_session_exhaustion_refuses_after_limit():
    core = _core("session_exhaustion", session_limit=64)
    for i in range(64):
        assert core.connect(i)
        core.receive(i, _short(i, 1 + i % 2))
        core.disconnect(i)
    assert core.sessions == 64 and core.resource == 10.0
    assert not core.connect(64)
    assert core.log.of("bug")[-1].get("refusing") is True


def test_clean_disconnects_do_not_leak():
    core = _core("session_exhaustion", session_limit=4)
    for i in range(20):
        _ask(core, FC03, conn=i)
    assert core.sessions == 0 and core.connect(99)


def test_single_malformed_fc16_is_exception():
    core = _core("io_halt_on_burst")
    assert _reply(core, _bad_fc16(1)) == modbus_frame(1, 0x90, b"\x03")
    assert not core.halted


def test_burst_halts_write_path():
    core = _core("io_halt_on_burst", tick_ms=100.0)
    for i in range(4):
        assert _ask(core, _bad_fc16(i)).replies
    assert _ask(core, _bad_fc16(4), conn=4).action == "hang"
    assert core.halted
    assert _ask(core, modbus_frame(5, 0x06, bytes(4)), conn=5).action == "hang"
    assert _reply(core, FC03)  # reads still served


def test_slow_malformed_writes_do_not_halt():
    # 300 ms apart: never five inside one second
    core = _core("io_halt_on_burst", tick_ms=300.0)
    for i in range(30):
        assert _ask(core, _bad_fc16(i), conn=i).replies
    assert not core.halted


@settings(max_examples=60)
@given(gaps=st.lists(st.integers(1, 6), min_size=5, max_size=12))
def test_burst_trigger_deterministic(gaps):
    """Halt happens exactly when five malformed writes fall within one second."""
    core = _core("io_halt_on_burst", tick_ms=100.0)
    times, halted_at = [], None
    for i, gap in enumerate(gaps):
        for _ in range(gap - 1):  # valid reads just advance the clock
            _ask(core, FC03, conn=1000 + i)
        _ask(core, _bad_fc16(i), conn=i)
        times.append(round(core.now(), 6))
        if halted_at is None and len(times) >= 5 and times[-1] - times[-5] <= 1.0 + 1e-9:
            halted_at = i
        assert core.halted == (halted_at is not None)


def test_reset_clears_state():
    core = _core("session_exhaustion", "length_overflow_crash", session_limit=1)
    _ask(core, _short(1, 1))
    _ask(core, _short(2, 4), conn=1) if core.connect(1) else None
    core.reset()
    assert not core.crashed and core.sessions == 0 and core.connect(7)


# -- server ---------------------------------------------------------------------


def _endpoint(server: SimulatorServer, **kw) -> TargetEndpoint:
    return TargetEndpoint("127.0.0.1", server.port, "modbus_tcp", **kw)


def _raw(port: int, data: bytes, timeout: float = 0.5) -> bytes:
    with socket.create_connection(("127.0.0.1", port), timeout=timeout) as s:
        s.sendall(data)
        s.shutdown(socket.SHUT_WR)
        out = b""
        try:
            while chunk := s.recv(4096):
                out += chunk
        except socket.timeout:
            pass
        return out


def test_server_serves_fc03_with_trailer():
    with SimulatorServer(SimulatorConfig()) as server:
        raw = _raw(server.port, FC03)
    frame, res = strip_resource_trailer(raw)
    assert frame == bytes.fromhex("0001 0000 0017 01 03 14") + bytes(20)
    # the open connection itself holds one of 64 sessions
    assert res == round(10 / 64, 2) and raw[-4:] == resource_trailer(10 / 64)


def test_port_in_use():
    with SimulatorServer(SimulatorConfig()) as a:
        with pytest.raises(PortInUse):
            SimulatorServer(SimulatorConfig(), port=a.port).start()


def test_server_exhaustion_65th_refused(modbus):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"session_exhaustion"}), session_limit=64)
    with SimulatorServer(cfg) as server:
        ep = _endpoint(server)
        states = []
        for i in range(64):
            _raw(server.port, _short(i, 1), timeout=0.2)
            if i in (10, 50):
                states.append(probe_liveness(ep, modbus).state)
        assert server.core.sessions == 64
        with pytest.raises(OSError):
            socket.create_connection(("127.0.0.1", server.port), timeout=0.5).close()
        states.append(probe_liveness(ep, modbus).state)
    assert states == ["alive", "degraded", "down"]


def test_server_restart_after_crash(modbus):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"length_overflow_crash"}))
    with SimulatorServer(cfg) as server:
        _raw(server.port, _short(1, 4), timeout=0.2)
        assert server.crashed
        assert probe_liveness(_endpoint(server), modbus).state == "down"
        server.restart()
        assert not server.crashed and server.core.sessions == 0
        assert probe_liveness(_endpoint(server), modbus).state == "alive"
        assert server.restarts == 1


def test_event_log_jsonl(tmp_path):
    path = tmp_path / "events.jsonl"
    with SimulatorServer(SimulatorConfig(), event_log=path) as server:
        for tid in range(3):
            _raw(server.port, modbus_frame(tid, 0x03, bytes.fromhex("0000 0001")))
    records = [json.loads(line) for line in path.read_text().splitlines()]
    requests = [r for r in records if r["event"] == "request"]
    assert [r["hex"][:4] for r in requests] == ["0000", "0001", "0002"]
    assert all(r["action"] == "reply" for r in requests)
    assert records[0]["event"] == "start"


def test_event_log_in_memory_filter():
    log = EventLog()
    log.write({"event": "a"})
    log.write({"event": "b"})
    assert log.of("b") == [{"event": "b"}]


def test_fixed_port():
    port = free_port()
    with SimulatorServer(SimulatorConfig(), port=port) as server:
        assert server.port == port


# -- child process --------------------------------------------------------------


def test_process_serves_restarts_and_stops(modbus, tmp_path):
    cfg = SimulatorConfig(bugs_enabled=frozenset({"length_overflow_crash"}), tick_ms=10.0)
    sim = SimulatorProcess(cfg, event_log=tmp_path / "ev.jsonl").start()
    try:
        ep = _endpoint(sim)
        assert probe_liveness(ep, modbus).state == "alive"
        _raw(sim.port, _short(1, 4), timeout=0.2)
        assert probe_liveness(ep, modbus).state == "down"
        sim.restart()
        assert probe_liveness(ep, modbus).state == "alive" and sim.restarts == 1
    finally:
        proc = sim._proc
        sim.stop()
    assert proc.returncode == 0
    events = [json.loads(line)["event"] for line in (tmp_path / "ev.jsonl").read_text().splitlines()]
    assert events[0] == "start" and "bug" in events and "restart" in events


def test_process_port_in_use():
    with SimulatorServer(SimulatorConfig()) as taken:
        with pytest.raises(PortInUse):
            SimulatorProcess(SimulatorConfig(), port=taken.port).start()
