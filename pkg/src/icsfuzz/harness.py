"""Test case injection over TCP, liveness probing and crash bookkeeping.

Each case goes out on its own connection. After the bytes are written the
sending side is shut down so a target waiting on a short frame sees EOF. The
reply is read until the response frame is complete, the peer closes, or the
response timeout expires. A liveness probe on a fresh connection follows.
"""

from __future__ import annotations

import logging
import socket
import struct
import time
from dataclasses import dataclass
from typing import Any, Iterable, Optional, Union

from .feedback import Observation, ResponseClass
from .mutation import TestCase
from .protocol import FrameError, ProtocolSpec, decode_frame, validate_frame
from .simulator import SimulatorProcess, SimulatorServer, strip_resource_trailer

logger = logging.getLogger(__name__)

DEGRADED_RESOURCE = 7.5


class EndpointUnreachable(Exception):
    pass


@dataclass(frozen=True)
class TargetEndpoint:
    host: str
    port: int
    protocol_id: str
    connect_timeout: float = 1000.0  # ms
    response_timeout: float = 200.0  # ms
    max_retries: int = 2
    backoff_base: float = 10.0  # ms

    def __post_init__(self) -> None:
        if self.connect_timeout <= 0 or self.response_timeout <= 0:
            raise ValueError("timeouts must be > 0")
        if self.max_retries < 0 or self.backoff_base < 0:
            raise ValueError("reconnect policy values must be >= 0")


@dataclass(frozen=True)
class LivenessReport:
    state: str  # alive | degraded | down
    probe_latency: float
    detail: str = ""


def frame_extent(buf: bytes, spec: ProtocolSpec) -> Optional[int]:
    """Total frame size announced by a header length field, once readable.

    Needs a byte-aligned fixed-width header containing a ``X..end`` or
    ``after X`` length field; None when the size cannot be known (yet).
    """
    offsets: dict[str, int] = {}
    pos = 0
    for name in spec.header:
        f = spec.field(name)
        if f.opaque or f.width % 8:
            return None
        offsets[name] = pos
        pos += f.width // 8
    for name in spec.header:
        f = spec.field(name)
        target = f.domain.target
        if not f.is_length or target.kind not in ("span", "after") or target.factor != 1 or target.name not in offsets:
            continue
        at, size = offsets[name], f.width // 8
        if len(buf) < at + size:
            return None
        value = int.from_bytes(buf[at : at + size], "little" if f.little_endian else "big")
        begin = offsets[target.name]
        if target.kind == "after":
            begin += spec.field(target.name).width // 8
        return begin + value
    return None


def _connect(endpoint: TargetEndpoint) -> socket.socket:
    last: Optional[OSError] = None
    for attempt in range(endpoint.max_retries + 1):
        try:
            sock = socket.create_connection((endpoint.host, endpoint.port), timeout=endpoint.connect_timeout / 1000)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            last = exc
            if attempt < endpoint.max_retries:
                time.sleep(endpoint.backoff_base * (2**attempt) / 1000)
    raise EndpointUnreachable(f"{endpoint.host}:{endpoint.port}: {last}")


def exchange(sock: socket.socket, data: bytes, spec: ProtocolSpec, timeout_ms: float) -> tuple[str, bytes, float]:
    """Send ``data``, half-close, read one reply. Returns (outcome, bytes, ms)."""
    start = time.perf_counter()
    try:
        sock.sendall(data)
        sock.shutdown(socket.SHUT_WR)
    except OSError:
        return "connection-reset", b"", (time.perf_counter() - start) * 1000
    deadline = start + timeout_ms / 1000
    buf = b""
    while True:
        # past the deadline one non-blocking read still runs, so a reply that
        # arrived while this process was paused is not taken for a timeout
        sock.settimeout(max(0.0, deadline - time.perf_counter()))
        try:
            chunk = sock.recv(65536)
        except (socket.timeout, BlockingIOError):
            return ("reply" if buf else "timeout"), buf, timeout_ms
        except OSError:
            return ("reply" if buf else "connection-reset"), buf, (time.perf_counter() - start) * 1000
        if not chunk:
            return ("reply" if buf else "connection-reset"), buf, (time.perf_counter() - start) * 1000
        buf += chunk
        extent = frame_extent(buf, spec)
        if extent is not None and len(buf) >= extent:
            return "reply", buf, (time.perf_counter() - start) * 1000


def _send_once(endpoint: TargetEndpoint, data: bytes, spec: ProtocolSpec) -> tuple[str, bytes, float]:
    start = time.perf_counter()
    try:
        sock = _connect(endpoint)
    except EndpointUnreachable:
        return "connection-refused", b"", (time.perf_counter() - start) * 1000
    with sock:
        return exchange(sock, data, spec.response or spec, endpoint.response_timeout)


def probe_liveness(
    endpoint: TargetEndpoint,
    spec: ProtocolSpec,
    *,
    slow_ms: Optional[float] = None,
    degraded_resource: float = DEGRADED_RESOURCE,
) -> LivenessReport:
    """Send the spec's canonical request on a fresh connection and grade the answer."""
    quick = TargetEndpoint(
        endpoint.host, endpoint.port, endpoint.protocol_id, endpoint.connect_timeout, endpoint.response_timeout, 0, 0
    )
    outcome, raw, ms = _send_once(quick, spec.canonical, spec)
    if outcome != "reply":
        return LivenessReport("down", ms, outcome)
    frame_bytes, resource = strip_resource_trailer(raw)
    rspec = spec.response or spec
    try:
        frame = decode_frame(frame_bytes, rspec)
        ok = not rspec.is_exception(frame.values) and validate_frame(frame, rspec).valid
    except FrameError:
        ok = False
    if not ok:
        return LivenessReport("degraded", ms, "malformed probe reply")
    limit = slow_ms if slow_ms is not None else endpoint.response_timeout / 2
    if ms > limit:
        return LivenessReport("degraded", ms, f"slow probe reply ({ms:.1f} ms)")
    if resource >= degraded_resource:
        return LivenessReport("degraded", ms, f"resource {resource:.2f}")
    return LivenessReport("alive", ms, "")


def inject(
    case: TestCase,
    endpoint: TargetEndpoint,
    spec: ProtocolSpec,
    *,
    probe: bool = True,
    bus: Any = None,
    sender: str = "harness-0",
) -> Observation:
    """Deliver one case and observe the target; always yields an Observation."""
    outcome, raw, ms = _send_once(endpoint, case.data, spec)
    reply, resource = strip_resource_trailer(raw) if outcome == "reply" else (None, 0.0)
    liveness = probe_liveness(endpoint, spec).state if probe else "alive"
    obs = Observation(
        case_id=case.case_id,
        outcome=outcome,
        response_time=round(ms, 3),
        liveness_after=liveness,
        reply=reply,
        resource_signal=resource,
    )
    if bus is not None:
        bus.publish("response", "response", obs.message(), sender)
    return obs


@dataclass(frozen=True)
class CrashEvent:
    opened: str  # case id of the observation that went down
    closed: Optional[str]  # first case id alive again, None if still down
    index: int  # position of the opening observation in the stream


def crash_ledger(observations: Iterable[Observation]) -> list[CrashEvent]:
    """Crash events: open on a transition into ``down``, close at the next ``alive``."""
    events: list[CrashEvent] = []
    open_at: Optional[tuple[str, int]] = None
    for i, obs in enumerate(observations):
        if obs.liveness_after == "down":
            if open_at is None:
                open_at = (obs.case_id, i)
        elif obs.liveness_after == "alive" and open_at is not None:
            events.append(CrashEvent(open_at[0], obs.case_id, open_at[1]))
            open_at = None
    if open_at is not None:
        events.append(CrashEvent(open_at[0], None, open_at[1]))
    return events


class Watchdog:
    """Restarts a bundled simulator when it is down or keeps timing out."""

    def __init__(self, server: Optional[Union[SimulatorServer, SimulatorProcess]], consecutive_critical: int = 3):
        self.server = server
        self.limit = consecutive_critical
        self.streak = 0
        self.restarts = 0

    def observe(self, obs: Observation, cls: ResponseClass) -> bool:
        # only unanswered frames hint at a stuck target; resets and degraded
        # replies are left alone so slow failures such as leaks can build up
        if cls.cls != "critical":
            self.streak = 0
        elif cls.reason == "timeout":
            self.streak += 1
        if self.server is None:
            return False
        if obs.liveness_after == "down" or self.streak >= self.limit:
            self.server.restart()
            self.restarts += 1
            self.streak = 0
            logger.info("simulator restarted after case %s (%s)", obs.case_id, obs.liveness_after)
            return True
        return False


def modbus_frame(tid: int, fc: int, body: bytes, unit: int = 1, length: Optional[int] = None) -> bytes:
    """Raw Modbus/TCP request; ``length`` overrides the MBAP length field."""
    pdu = bytes([fc]) + body
    return struct.pack(">HHHB", tid, 0, len(pdu) + 1 if length is None else length, unit) + pdu
