"""A Modbus/TCP server with optional seeded defects.

The request semantics follow the public Modbus application protocol for
function codes 01-06, 0F and 10. Three defects can be switched on:

``session_exhaustion``
    A peer that disconnects while a frame is one or two bytes short leaves
    its session allocated. Once ``session_limit`` such sessions pile up the
    listener closes and new connections are refused.
``length_overflow_crash``
    A frame whose MBAP length exceeds the bytes actually delivered by more
    than two bytes stops the server: no more replies, listener closed.
``io_halt_on_burst``
    Five or more malformed FC 0x10 writes within one second halt the write
    path. Write requests (05, 06, 0F, 10) then get no reply.

With ``resource_channel`` on, every reply carries a four byte trailer
``fe ed`` + u16 hundredths of a 0-10 resource figure (allocated sessions
over the limit). :func:`strip_resource_trailer` removes it.

:class:`SimulatorCore` holds the protocol state and is driven by plain
method calls; :class:`SimulatorServer` puts it behind a socket and
:class:`SimulatorProcess` runs such a server in a child process.
"""

from __future__ import annotations

import json
import logging
import selectors
import socket
import struct
import subprocess
import sys
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Union

logger = logging.getLogger(__name__)

BUGS = ("session_exhaustion", "length_overflow_crash", "io_halt_on_burst")
WRITE_FCS = frozenset({5, 6, 15, 16})
TRAILER_MAGIC = b"\xfe\xed"
TRAILER_LEN = 4
MBAP_LEN = 7

ILLEGAL_FUNCTION = 1
ILLEGAL_ADDRESS = 2
ILLEGAL_VALUE = 3


class SimulatorError(Exception):
    pass


class PortInUse(SimulatorError):
    pass


@dataclass(frozen=True)
class SimulatorConfig:
    bugs_enabled: frozenset[str] = frozenset()
    session_limit: int = 64
    resource_channel: bool = True
    tick_ms: Optional[float] = None  # fixed sim time per request; None means wall clock
    burst_count: int = 5
    burst_window: float = 1.0
    overflow_margin: int = 2

    def __post_init__(self) -> None:
        bugs = frozenset(self.bugs_enabled)
        unknown = bugs - set(BUGS)
        if unknown:
            raise ValueError(f"unknown bugs: {', '.join(sorted(unknown))}")
        if self.session_limit < 1:
            raise ValueError("session_limit must be >= 1")
        if self.tick_ms is not None and self.tick_ms <= 0:
            raise ValueError("tick_ms must be > 0")
        object.__setattr__(self, "bugs_enabled", bugs)

    def enabled(self, bug: str) -> bool:
        return bug in self.bugs_enabled

    @classmethod
    def all_bugs(cls, **kw: Any) -> "SimulatorConfig":
        return cls(bugs_enabled=frozenset(BUGS), **kw)


@dataclass
class Result:
    replies: list[bytes] = field(default_factory=list)
    action: Optional[str] = None  # close | hang | crash (connection level)


def resource_trailer(value: float) -> bytes:
    return TRAILER_MAGIC + struct.pack(">H", max(0, min(1000, round(value * 100))))


def strip_resource_trailer(data: bytes) -> tuple[bytes, float]:
    """Split a reply into the frame and its resource figure (0.0 without trailer)."""
    if len(data) >= MBAP_LEN + TRAILER_LEN and data[-TRAILER_LEN:-2] == TRAILER_MAGIC:
        declared = struct.unpack(">H", data[4:6])[0]
        if len(data) - TRAILER_LEN == 6 + declared:
            return data[:-TRAILER_LEN], struct.unpack(">H", data[-2:])[0] / 100
    return data, 0.0


class EventLog:
    """One record per request plus bug and lifecycle records; optionally mirrored to JSONL."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        self._fh = self.path.open("a", encoding="utf-8") if self.path is not None else None
        self._lock = threading.Lock()

    def write(self, record: dict) -> None:
        with self._lock:
            self.records.append(record)
            if self._fh is not None:
                self._fh.write(json.dumps(record, sort_keys=True) + "\n")
                self._fh.flush()

    def of(self, event: str) -> list[dict]:
        with self._lock:
            return [r for r in self.records if r["event"] == event]

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


class SimulatorCore:
    """Protocol state: register and coil memory, sessions and defect state."""

    def __init__(self, config: SimulatorConfig, log: Optional[EventLog] = None, clock: Callable[[], float] = time.monotonic):
        self.config = config
        self.log = log if log is not None else EventLog()
        self._wall = clock
        self.reset()

    def reset(self) -> None:
        self.coils = bytearray(65536)
        self.registers = [0] * 65536
        self.buffers: dict[int, bytearray] = {}
        self.leaked = 0
        self.crashed = False
        self.halted = False
        self.accepting = True
        self.sim_time = 0.0
        self.requests = 0
        self._bad_writes: deque[float] = deque()

    # clock

    def now(self) -> float:
        return self.sim_time if self.config.tick_ms is not None else self._wall()

    def _tick(self) -> None:
        self.requests += 1
        if self.config.tick_ms is not None:
            # derived from the count so the clock does not drift
            self.sim_time = self.requests * self.config.tick_ms / 1000

    # sessions

    @property
    def sessions(self) -> int:
        return self.leaked + len(self.buffers)

    @property
    def resource(self) -> float:
        return min(10.0, 10.0 * self.sessions / self.config.session_limit)

    def connect(self, conn: int) -> bool:
        if self.crashed or not self.accepting:
            return False
        self.buffers[conn] = bytearray()
        return True

    def disconnect(self, conn: int) -> Result:
        """Peer closed its sending side; decide what happens to leftover bytes."""
        buf = self.buffers.pop(conn, None)
        if buf is None or self.crashed:
            return Result(action="close")
        if not buf:
            return Result(action="close")
        self._tick()
        record = {"event": "request", "conn": conn, "t": self.now(), "hex": bytes(buf).hex(), "complete": False}
        if len(buf) < 6:
            self.log.write({**record, "action": "close"})
            return Result(action="close")
        declared = struct.unpack(">H", buf[4:6])[0]
        deficit = 6 + declared - len(buf)
        record["deficit"] = deficit
        if deficit > self.config.overflow_margin and self.config.enabled("length_overflow_crash"):
            self.log.write({**record, "action": "crash"})
            self._crash(conn, f"length {declared} exceeds payload by {deficit}")
            return Result(action="crash")
        if 1 <= deficit <= self.config.overflow_margin and self.config.enabled("session_exhaustion"):
            self.leaked += 1
            self.log.write({**record, "action": "leak"})
            self.log.write({"event": "bug", "bug": "session_exhaustion", "t": self.now(), "leaked": self.leaked})
            if self.leaked >= self.config.session_limit and self.accepting:
                self.accepting = False
                self.log.write({"event": "bug", "bug": "session_exhaustion", "t": self.now(), "refusing": True})
            return Result(action="close")
        self.log.write({**record, "action": "close"})
        return Result(action="close")

    def _crash(self, conn: int, detail: str) -> None:
        self.crashed = True
        self.accepting = False
        self.log.write({"event": "bug", "bug": "length_overflow_crash", "t": self.now(), "conn": conn, "detail": detail})

    # data path

    def receive(self, conn: int, data: bytes) -> Result:
        out = Result()
        if self.crashed or conn not in self.buffers:
            out.action = "hang"
            return out
        buf = self.buffers[conn]
        buf += data
        while len(buf) >= 6:
            tid, pid, length = struct.unpack(">HHH", buf[:6])
            if pid != 0 or length == 0:
                self._tick()
                self.log.write({"event": "request", "conn": conn, "t": self.now(), "hex": bytes(buf).hex(), "action": "close", "complete": True})
                self.buffers.pop(conn, None)
                out.action = "close"
                return out
            if len(buf) < 6 + length:
                break
            frame = bytes(buf[: 6 + length])
            del buf[: 6 + length]
            self._tick()
            reply = self._handle(frame)
            self.log.write({
                "event": "request",
                "conn": conn,
                "t": self.now(),
                "hex": frame.hex(),
                "complete": True,
                "action": "reply" if reply is not None else "hang",
                "reply": reply.hex() if reply is not None else None,
            })
            if reply is None:
                out.action = "hang"
                return out
            if self.config.resource_channel:
                reply += resource_trailer(self.resource)
            out.replies.append(reply)
        return out

    def _handle(self, frame: bytes) -> Optional[bytes]:
        tid, _, _, unit = struct.unpack(">HHHB", frame[:MBAP_LEN])
        pdu = frame[MBAP_LEN:]

        def reply(body: bytes) -> bytes:
            return struct.pack(">HHHB", tid, 0, len(body) + 1, unit) + body

        if not pdu:
            return reply(bytes([0x80, ILLEGAL_FUNCTION]))
        fc = pdu[0]
        if self.halted and fc in WRITE_FCS:
            return None
        body, error = self._execute(fc, pdu[1:])
        if error is not None:
            if fc == 16 and self._malformed_write():
                return None
            return reply(bytes([(fc | 0x80) & 0xFF, error]))
        return reply(bytes([fc]) + body)

    def _malformed_write(self) -> bool:
        """Count a malformed FC 0x10; True when this one halts the write path."""
        if not self.config.enabled("io_halt_on_burst"):
            return False
        now = self.now()
        self._bad_writes.append(now)
        while self._bad_writes and now - self._bad_writes[0] > self.config.burst_window + 1e-9:
            self._bad_writes.popleft()
        if len(self._bad_writes) >= self.config.burst_count:
            self.halted = True
            self.log.write({"event": "bug", "bug": "io_halt_on_burst", "t": now, "burst": len(self._bad_writes)})
            return True
        return False

    def _execute(self, fc: int, data: bytes) -> tuple[bytes, Optional[int]]:
        if fc in (1, 2, 3, 4):
            if len(data) != 4:
                return b"", ILLEGAL_VALUE
            addr, qty = struct.unpack(">HH", data)
            limit = 2000 if fc in (1, 2) else 125
            if not 1 <= qty <= limit:
                return b"", ILLEGAL_VALUE
            if addr + qty > 65536:
                return b"", ILLEGAL_ADDRESS
            if fc in (1, 2):
                bits = self.coils[addr : addr + qty]
                packed = bytearray((qty + 7) // 8)
                for i, b in enumerate(bits):
                    if b:
                        packed[i // 8] |= 1 << (i % 8)
                return bytes([len(packed)]) + bytes(packed), None
            regs = self.registers[addr : addr + qty]
            return bytes([2 * qty]) + struct.pack(f">{qty}H", *regs), None
        if fc == 5:
            if len(data) != 4:
                return b"", ILLEGAL_VALUE
            addr, value = struct.unpack(">HH", data)
            if value not in (0x0000, 0xFF00):
                return b"", ILLEGAL_VALUE
            self.coils[addr] = 1 if value else 0
            return data, None
        if fc == 6:
            if len(data) != 4:
                return b"", ILLEGAL_VALUE
            addr, value = struct.unpack(">HH", data)
            self.registers[addr] = value
            return data, None
        if fc in (15, 16):
            if len(data) < 5:
                return b"", ILLEGAL_VALUE
            addr, qty, count = struct.unpack(">HHB", data[:5])
            payload = data[5:]
            limit, need = (1968, (qty + 7) // 8) if fc == 15 else (123, 2 * qty)
            if not 1 <= qty <= limit or count != need or len(payload) != count:
                return b"", ILLEGAL_VALUE
            if addr + qty > 65536:
                return b"", ILLEGAL_ADDRESS
            if fc == 15:
                for i in range(qty):
                    self.coils[addr + i] = (payload[i // 8] >> (i % 8)) & 1
            else:
                self.registers[addr : addr + qty] = struct.unpack(f">{qty}H", payload)
            return struct.pack(">HH", addr, qty), None
        return b"", ILLEGAL_FUNCTION


class SimulatorServer:
    """Serves a :class:`SimulatorCore` on TCP from one selector thread."""

    def __init__(
        self,
        config: SimulatorConfig = SimulatorConfig(),
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        event_log: Optional[Union[str, Path, EventLog]] = None,
    ):
        self.config = config
        self.host = host
        self._requested_port = port
        self.log = event_log if isinstance(event_log, EventLog) else EventLog(event_log)
        self.core = SimulatorCore(config, self.log)
        self.port = 0
        self.restarts = 0
        self._sel = selectors.DefaultSelector()
        self._listener: Optional[socket.socket] = None
        self._conns: dict[int, socket.socket] = {}
        self._hung: set[int] = set()
        self._next_conn = 0
        self._lock = threading.RLock()
        self._commands: deque[tuple[str, threading.Event]] = deque()
        self._wake_r, self._wake_w = socket.socketpair()
        self._wake_r.setblocking(False)
        self._sel.register(self._wake_r, selectors.EVENT_READ, ("wake", None))
        self._thread: Optional[threading.Thread] = None
        self._stopping = False

    # lifecycle

    def _bind(self) -> None:
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port or self._requested_port))
        except OSError as exc:
            sock.close()
            raise PortInUse(f"{self.host}:{self.port or self._requested_port}: {exc.strerror or exc}") from None
        sock.listen(128)
        sock.setblocking(False)
        self.port = sock.getsockname()[1]
        self._listener = sock
        self._sel.register(sock, selectors.EVENT_READ, ("listen", None))

    def start(self) -> "SimulatorServer":
        self._bind()
        self._thread = threading.Thread(target=self._serve, name=f"simulator-{self.port}", daemon=True)
        self._thread.start()
        self.log.write({"event": "start", "port": self.port, "bugs": sorted(self.config.bugs_enabled)})
        return self

    def __enter__(self) -> "SimulatorServer":
        return self.start() if self._thread is None else self

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    def _command(self, name: str, timeout: float = 5.0) -> None:
        if self._thread is None or not self._thread.is_alive():
            return
        done = threading.Event()
        self._commands.append((name, done))
        self._wake_w.send(b"x")
        if not done.wait(timeout):
            raise SimulatorError(f"simulator did not complete {name}")

    def restart(self) -> None:
        """Clear all state and reopen the listener."""
        self._command("restart")

    def stop(self) -> None:
        if self._thread is None:
            return
        self._command("stop")
        self._thread.join(5)
        self._thread = None
        self._wake_r.close()
        self._wake_w.close()
        self._sel.close()
        self.log.close()

    @property
    def crashed(self) -> bool:
        return self.core.crashed

    @property
    def halted(self) -> bool:
        return self.core.halted

    # selector loop

    def _serve(self) -> None:
        while not self._stopping:
            for key, mask in self._sel.select(timeout=0.5):
                kind, conn = key.data
                if kind == "wake":
                    self._drain_commands()
                elif kind == "listen":
                    if key.fileobj is self._listener:  # may have closed earlier in this batch
                        self._accept()
                else:
                    self._readable(conn)

    def _drain_commands(self) -> None:
        try:
            self._wake_r.recv(4096)
        except BlockingIOError:
            pass
        while self._commands:
            name, done = self._commands.popleft()
            if name == "restart":
                self._do_restart()
            elif name == "stop":
                self._close_all()
                self._close_listener()
                self._stopping = True
            done.set()

    def _do_restart(self) -> None:
        self._close_all()
        self._close_listener()
        self.core.reset()
        self.restarts += 1
        self._bind()
        self.log.write({"event": "restart", "port": self.port, "restarts": self.restarts})

    def _close_listener(self) -> None:
        if self._listener is not None:
            self._sel.unregister(self._listener)
            self._listener.close()
            self._listener = None

    def _close_all(self) -> None:
        for conn in list(self._conns):
            self._drop(conn)
        self._hung.clear()

    def _drop(self, conn: int) -> None:
        sock = self._conns.pop(conn, None)
        self.core.buffers.pop(conn, None)
        if sock is None:
            self._hung.discard(conn)
            return
        if conn not in self._hung:
            try:
                self._sel.unregister(sock)
            except (KeyError, ValueError):
                pass
        self._hung.discard(conn)
        sock.close()

    def _hang(self, conn: int) -> None:
        # an unresponsive target keeps the socket open and reads nothing more
        self._hung.add(conn)
        try:
            self._sel.unregister(self._conns[conn])
        except (KeyError, ValueError):
            pass

    def _accept(self) -> None:
        assert self._listener is not None
        try:
            sock, _ = self._listener.accept()
        except (BlockingIOError, ConnectionAbortedError):
            return
        conn = self._next_conn
        self._next_conn += 1
        if not self.core.connect(conn):
            sock.close()
            return
        sock.setblocking(True)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conns[conn] = sock
        self._sel.register(sock, selectors.EVENT_READ, ("conn", conn))

    def _readable(self, conn: int) -> None:
        sock = self._conns.get(conn)
        if sock is None:
            return
        try:
            data = sock.recv(65536)
        except OSError:
            data = b""
        result = self.core.receive(conn, data) if data else self.core.disconnect(conn)
        for reply in result.replies:
            try:
                sock.sendall(reply)
            except OSError:
                break
        # stop listening before the peer can see this connection end
        if self.core.crashed or not self.core.accepting:
            self._close_listener()
        if result.action == "close":
            self._drop(conn)
        elif result.action in ("hang", "crash"):
            self._hang(conn)


def run_simulator(
    config: SimulatorConfig = SimulatorConfig(),
    port: int = 5020,
    host: str = "127.0.0.1",
    event_log: Optional[Union[str, Path, EventLog]] = None,
) -> SimulatorServer:
    """Start a simulator in a background thread and return its handle."""
    return SimulatorServer(config, host, port, event_log=event_log).start()


class SimulatorProcess:
    """A :class:`SimulatorServer` in a child process, driven over its stdin.

    Pauses in the calling process (garbage collection, a busy orchestrator)
    then cannot delay the target's replies.
    """

    def __init__(
        self,
        config: SimulatorConfig = SimulatorConfig(),
        host: str = "127.0.0.1",
        port: int = 0,
        *,
        event_log: Optional[Union[str, Path]] = None,
    ):
        self.config = config
        self.host = host
        self.port = port
        self.event_log = None if event_log is None else str(Path(event_log).resolve())
        self.restarts = 0
        self._proc: Optional[subprocess.Popen] = None

    def start(self) -> "SimulatorProcess":
        doc = {
            "bugs": sorted(self.config.bugs_enabled),
            "session_limit": self.config.session_limit,
            "resource_channel": self.config.resource_channel,
            "tick_ms": self.config.tick_ms,
            "host": self.host,
            "port": self.port,
            "event_log": self.event_log,
        }
        self._proc = subprocess.Popen(
            [sys.executable, "-m", "icsfuzz.simulator", json.dumps(doc)],
            stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1,
        )
        self.port = int(self._reply("ready"))
        return self

    def __enter__(self) -> "SimulatorProcess":
        return self.start() if self._proc is None else self

    def __exit__(self, *exc: Any) -> None:
        self.stop()

    def _reply(self, expect: str) -> str:
        assert self._proc is not None and self._proc.stdout is not None
        line = self._proc.stdout.readline().strip()
        word, _, rest = line.partition(" ")
        if word == expect:
            return rest
        self._proc.wait(5)
        if rest.startswith("PortInUse"):
            raise PortInUse(rest.partition(" ")[2])
        raise SimulatorError(f"simulator process: {line or 'exited'}")

    def restart(self) -> None:
        assert self._proc is not None and self._proc.stdin is not None
        self._proc.stdin.write("restart\n")
        self._proc.stdin.flush()
        self.port = int(self._reply("ok"))
        self.restarts += 1

    def stop(self) -> None:
        if self._proc is None:
            return
        proc, self._proc = self._proc, None
        try:
            proc.stdin.close()  # EOF asks the child to stop
            proc.wait(5)
        except (OSError, subprocess.TimeoutExpired):
            proc.kill()
            proc.wait()
        proc.stdout.close()


def _child_main(argv: list[str]) -> int:
    doc = json.loads(argv[0])
    config = SimulatorConfig(
        bugs_enabled=frozenset(doc["bugs"]),
        session_limit=doc["session_limit"],
        resource_channel=doc["resource_channel"],
        tick_ms=doc["tick_ms"],
    )
    try:
        server = SimulatorServer(config, doc["host"], doc["port"], event_log=doc["event_log"]).start()
    except PortInUse as exc:
        print(f"error PortInUse {exc}", flush=True)
        return 1
    print(f"ready {server.port}", flush=True)
    try:
        for line in sys.stdin:
            if line.strip() == "restart":
                server.restart()
                print(f"ok {server.port}", flush=True)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


if __name__ == "__main__":
    sys.exit(_child_main(sys.argv[1:]))
