"""Topic publish/subscribe bus, agent registry and task redistribution.

Two transports share one contract. :class:`Bus` is in-process and can run on
a :class:`VirtualClock` so heartbeat and failure scenarios replay exactly.
:class:`TcpBroker` / :class:`TcpBus` carry the same documents between
processes as 4-byte big-endian length-prefixed JSON frames.

Delivery is at most once per subscriber: a subscription only sees messages
published after it was created, in per-sender order.
"""

from __future__ import annotations

import json
import logging
import selectors
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Mapping, Optional

logger = logging.getLogger(__name__)

TOPICS = ("seed", "test_case", "response", "strategy", "heartbeat", "control")

# exact key sets carried in ``data`` for the schema-checked topics
SCHEMAS: dict[str, frozenset[str]] = {
    "seed": frozenset({"seed_id", "protocol_id", "fields", "provenance"}),
    "test_case": frozenset({"case_id", "seed_id", "protocol_id", "mutations", "hex"}),
    "strategy": frozenset({"rho", "field_priorities", "direction_weights", "feedback_score"}),
    "heartbeat": frozenset({"agent_id", "status"}),
}
REQUIRED: dict[str, frozenset[str]] = {
    "response": frozenset({"case_id", "outcome", "response_time", "liveness_after"}),
}

DEFAULT_PORTS = {"seed": 5555, "test_case": 5556, "response": 5557}
DEFAULT_BUFFER = 1000
DEFAULT_HEARTBEAT = 5.0


class BusError(Exception):
    pass


class SchemaViolation(BusError):
    pass


class UnknownTopic(BusError):
    pass


class BusUnavailable(BusError):
    pass


class NoCandidateAgents(BusError):
    pass


class Clock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        time.sleep(seconds)


class VirtualClock(Clock):
    """Manually advanced clock for deterministic tests."""

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def advance(self, seconds: float) -> float:
        if seconds < 0:
            raise ValueError("cannot go back in time")
        self._now += seconds
        return self._now

    def sleep(self, seconds: float) -> None:
        self.advance(seconds)


@dataclass(frozen=True)
class BusMessage:
    topic: str
    event: str
    data: Mapping[str, Any]
    sender: str
    seq: int
    sent_at: float

    def document(self) -> dict:
        """The wire document: ``{"event", "data"}`` plus routing metadata."""
        return {
            "topic": self.topic,
            "event": self.event,
            "data": self.data,
            "sender": self.sender,
            "seq": self.seq,
            "sent_at": self.sent_at,
        }

    def payload(self) -> dict:
        return {"event": self.event, "data": self.data}

    @classmethod
    def from_document(cls, doc: Mapping[str, Any]) -> "BusMessage":
        return cls(doc["topic"], doc["event"], doc["data"], doc["sender"], int(doc["seq"]), float(doc["sent_at"]))


def check_schema(topic: str, event: str, data: Mapping[str, Any]) -> None:
    if topic not in TOPICS:
        raise UnknownTopic(topic)
    if not isinstance(data, Mapping):
        raise SchemaViolation(f"{topic}: data must be a mapping")
    exact = SCHEMAS.get(topic)
    if exact is not None and event == topic and set(data) != exact:
        extra = sorted(set(data) - exact)
        missing = sorted(exact - set(data))
        raise SchemaViolation(f"{topic}: missing {missing}, unexpected {extra}")
    required = REQUIRED.get(topic)
    if required is not None and not required <= set(data):
        raise SchemaViolation(f"{topic}: missing {sorted(required - set(data))}")


class Subscription:
    """Ordered stream of messages for one consumer."""

    def __init__(self, topic: str, agent_id: str):
        self.topic = topic
        self.agent_id = agent_id
        self._queue: deque[BusMessage] = deque()
        self._cond = threading.Condition()
        self.closed = False

    def _put(self, msg: BusMessage) -> None:
        with self._cond:
            self._queue.append(msg)
            self._cond.notify()

    def get(self, timeout: Optional[float] = 0.0) -> Optional[BusMessage]:
        """Next message, or None. ``timeout=None`` blocks until one arrives."""
        with self._cond:
            if not self._queue and timeout != 0.0:
                self._cond.wait_for(lambda: self._queue or self.closed, timeout)
            return self._queue.popleft() if self._queue else None

    def drain(self) -> list[BusMessage]:
        with self._cond:
            out = list(self._queue)
            self._queue.clear()
            return out

    def __len__(self) -> int:
        return len(self._queue)

    def __iter__(self) -> Iterator[BusMessage]:
        while True:
            msg = self.get()
            if msg is None:
                return
            yield msg

    def close(self) -> None:
        with self._cond:
            self.closed = True
            self._cond.notify_all()


@dataclass
class BusStats:
    sent: int = 0
    delivered: int = 0
    dropped: int = 0

    def as_dict(self) -> dict:
        return {"sent": self.sent, "delivered": self.delivered, "dropped": self.dropped}


class Bus:
    """In-process transport.

    ``connected=False`` models a transport outage: publishes are buffered
    (oldest dropped past ``capacity``) and flushed in order by
    :meth:`reconnect`.
    """

    def __init__(self, clock: Optional[Clock] = None, capacity: int = DEFAULT_BUFFER):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.clock = clock or Clock()
        self.capacity = capacity
        self.connected = True
        self.stats = BusStats()
        self._subs: dict[str, list[Subscription]] = {t: [] for t in TOPICS}
        self._seq: dict[tuple[str, str], int] = {}
        self._buffer: deque[BusMessage] = deque()
        self._lock = threading.RLock()
        self._taps: list[Callable[[BusMessage], None]] = []

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    def subscribe(self, topic: str, agent_id: str) -> Subscription:
        if topic not in TOPICS:
            raise UnknownTopic(topic)
        sub = Subscription(topic, agent_id)
        with self._lock:
            self._subs[topic].append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs[sub.topic]:
                self._subs[sub.topic].remove(sub)
        sub.close()

    def tap(self, fn: Callable[[BusMessage], None]) -> None:
        """Call ``fn`` synchronously for every delivered message (ledger writer hook)."""
        self._taps.append(fn)

    def publish(self, topic: str, event: str, data: Mapping[str, Any], sender: str) -> BusMessage:
        check_schema(topic, event, data)
        with self._lock:
            key = (sender, topic)
            seq = self._seq.get(key, 0) + 1
            self._seq[key] = seq
            msg = BusMessage(topic, event, data, sender, seq, self.clock.now())
            self.stats.sent += 1
            if self.connected:
                self._deliver(msg)
            else:
                if len(self._buffer) >= self.capacity:
                    self._buffer.popleft()
                    self.stats.dropped += 1
                    logger.warning("bus buffer full, dropped oldest message")
                self._buffer.append(msg)
        return msg

    def _deliver(self, msg: BusMessage) -> None:
        self.stats.delivered += 1
        for sub in list(self._subs[msg.topic]):
            sub._put(msg)
        for fn in self._taps:
            fn(msg)

    def disconnect(self) -> None:
        with self._lock:
            self.connected = False

    def reconnect(self) -> int:
        """Restore the transport and flush the buffer; returns messages flushed."""
        with self._lock:
            self.connected = True
            n = 0
            while self._buffer:
                self._deliver(self._buffer.popleft())
                n += 1
            return n

    def close(self) -> None:
        with self._lock:
            for subs in self._subs.values():
                for sub in subs:
                    sub.close()


def heartbeat_payload(agent_id: str, status: str = "alive") -> dict:
    return {"agent_id": agent_id, "status": status}


class Heartbeater:
    """Publishes a heartbeat whenever ``interval`` has elapsed on the bus clock."""

    def __init__(self, bus: Any, agent_id: str, interval: float = DEFAULT_HEARTBEAT):
        if interval <= 0:
            raise ValueError("interval must be > 0")
        self.bus = bus
        self.agent_id = agent_id
        self.interval = interval
        self._next: Optional[float] = None

    def tick(self, status: str = "alive") -> bool:
        now = self.bus.clock.now()
        if self._next is None or now >= self._next:
            self.bus.publish("heartbeat", "heartbeat", heartbeat_payload(self.agent_id, status), self.agent_id)
            self._next = (now if self._next is None else self._next) + self.interval
            while self._next <= now:
                self._next += self.interval
            return True
        return False


def heartbeat_loop(bus: Any, agent_id: str, interval: float = DEFAULT_HEARTBEAT, stop: Optional[threading.Event] = None) -> None:
    """Blocking heartbeat sender for threaded or process agents."""
    stop = stop or threading.Event()
    beat = Heartbeater(bus, agent_id, interval)
    while not stop.is_set():
        try:
            beat.tick()
        except BusError as exc:
            logger.warning("heartbeat from %s failed: %s", agent_id, exc)
        stop.wait(max(0.0, min(interval, (beat._next or 0) - bus.clock.now())))


# -- registry ---------------------------------------------------------------

ROLES = ("seed", "mutation", "feedback", "harness")


@dataclass(frozen=True)
class Task:
    task_id: str
    role: str
    payload: Mapping[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "role": self.role, "payload": dict(self.payload)}

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "Task":
        return cls(doc["task_id"], doc["role"], doc.get("payload", {}))


@dataclass
class AgentRecord:
    agent_id: str
    role: str
    last_heartbeat: float
    assigned_tasks: list[Task] = field(default_factory=list)
    status: str = "alive"


class Registry:
    """Agent liveness and task ownership, maintained by the monitor.

    Every assignment is announced on the ``control`` topic as an ``assign``
    message; redistribution additionally emits one ``redistribute`` summary.
    """

    def __init__(self, clock: Clock, timeout: float = 3 * DEFAULT_HEARTBEAT, bus: Any = None, name: str = "monitor"):
        self.clock = clock
        self.timeout = timeout
        self.bus = bus
        self.name = name
        self.agents: dict[str, AgentRecord] = {}
        self.parked: dict[str, list[Task]] = {}
        self.assignments: list[tuple[str, str]] = []  # (task_id, agent_id) history
        self.failures: list[tuple[str, float]] = []

    def register(self, agent_id: str, role: str) -> AgentRecord:
        if role not in ROLES:
            raise ValueError(f"unknown role {role!r}")
        rec = self.agents.get(agent_id)
        if rec is None or rec.status == "failed":
            rec = AgentRecord(agent_id, role, self.clock.now())
            self.agents[agent_id] = rec
        parked = self.parked.pop(role, [])
        for task in parked:
            self._give(task, rec)
        return rec

    def heartbeat(self, agent_id: str, at: Optional[float] = None) -> None:
        rec = self.agents.get(agent_id)
        if rec is None or rec.status == "failed":
            return
        rec.last_heartbeat = self.clock.now() if at is None else at
        rec.status = "alive"

    def on_message(self, msg: BusMessage) -> None:
        if msg.topic == "heartbeat":
            self.heartbeat(msg.data["agent_id"], msg.sent_at)

    def alive(self, role: str) -> list[AgentRecord]:
        return sorted(
            (r for r in self.agents.values() if r.role == role and r.status != "failed"), key=lambda r: r.agent_id
        )

    def _give(self, task: Task, rec: AgentRecord) -> None:
        rec.assigned_tasks.append(task)
        self.assignments.append((task.task_id, rec.agent_id))
        if self.bus is not None:
            self.bus.publish("control", "assign", {"agent_id": rec.agent_id, "task": task.to_dict()}, self.name)

    def _least_loaded(self, role: str) -> Optional[AgentRecord]:
        peers = self.alive(role)
        if not peers:
            return None
        return min(peers, key=lambda r: (len(r.assigned_tasks), r.agent_id))

    def assign(self, task: Task) -> Optional[str]:
        """Give ``task`` to the least-loaded alive agent of its role, or park it."""
        rec = self._least_loaded(task.role)
        if rec is None:
            self.parked.setdefault(task.role, []).append(task)
            return None
        self._give(task, rec)
        return rec.agent_id

    def complete(self, agent_id: str, task_id: str) -> bool:
        rec = self.agents.get(agent_id)
        if rec is None:
            return False
        for i, task in enumerate(rec.assigned_tasks):
            if task.task_id == task_id:
                del rec.assigned_tasks[i]
                return True
        return False

    def detect_failures(self, now: Optional[float] = None, timeout: Optional[float] = None) -> list[str]:
        """Mark agents silent for longer than ``timeout`` as failed; returns newly failed ids."""
        now = self.clock.now() if now is None else now
        timeout = self.timeout if timeout is None else timeout
        failed = []
        for rec in sorted(self.agents.values(), key=lambda r: r.agent_id):
            if rec.status == "failed":
                continue
            silent = now - rec.last_heartbeat
            if silent > timeout:
                rec.status = "failed"
                failed.append(rec.agent_id)
                self.failures.append((rec.agent_id, now))
            elif silent > timeout / 3:
                rec.status = "suspect"
        return failed

    def redistribute(self, failed: str) -> dict[str, str]:
        """Move every task of ``failed`` to alive peers, least loaded first.

        Raises NoCandidateAgents (after parking the tasks) if no peer exists.
        """
        rec = self.agents[failed]
        if rec.status != "failed":
            raise ValueError(f"{failed} is not marked failed")
        tasks, rec.assigned_tasks = rec.assigned_tasks, []
        mapping: dict[str, str] = {}
        if not self.alive(rec.role):
            self.parked.setdefault(rec.role, []).extend(tasks)
            self._announce(failed, mapping, [t.task_id for t in tasks])
            raise NoCandidateAgents(f"no alive {rec.role} agent to take {len(tasks)} tasks from {failed}")
        for task in tasks:
            target = self._least_loaded(rec.role)
            self._give(task, target)
            mapping[task.task_id] = target.agent_id
        self._announce(failed, mapping, [])
        return mapping

    def _announce(self, failed: str, mapping: dict[str, str], parked: list[str]) -> None:
        if self.bus is not None:
            self.bus.publish(
                "control", "redistribute", {"failed": failed, "assignments": dict(mapping), "parked": parked}, self.name
            )


def least_loaded_plan(loads: Mapping[str, int], tasks: Iterable[str]) -> dict[str, str]:
    """Reference least-loaded-first assignment used by tests and planners."""
    loads = dict(loads)
    out = {}
    for task in tasks:
        agent = min(loads, key=lambda a: (loads[a], a))
        out[task] = agent
        loads[agent] += 1
    return out


# -- TCP transport ----------------------------------------------------------

_LEN = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024


def encode_frame(doc: Mapping[str, Any]) -> bytes:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _LEN.pack(len(body)) + body


class FrameReader:
    """Incremental decoder for length-prefixed frames."""

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[dict]:
        self._buf += data
        out = []
        while len(self._buf) >= 4:
            (n,) = _LEN.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise BusError(f"frame of {n} bytes exceeds limit")
            if len(self._buf) < 4 + n:
                break
            out.append(json.loads(self._buf[4 : 4 + n].decode("utf-8")))
            del self._buf[: 4 + n]
        return out


def topic_port(topic: str, ports: Mapping[str, int]) -> int:
    # heartbeat, strategy and control ride on the response port
    return ports.get(topic, ports["response"])


class TcpBroker:
    """Fan-out broker listening on one port per topic group.

    Clients send ``{"op": "sub", "topic": ...}`` to subscribe and plain
    message documents to publish.
    """

    def __init__(self, host: str = "127.0.0.1", ports: Optional[Mapping[str, int]] = None):
        self.host = host
        self.ports = dict(ports or DEFAULT_PORTS)
        self._sel = selectors.DefaultSelector()
        self._listeners: list[socket.socket] = []
        self._clients: dict[socket.socket, tuple[FrameReader, set[str]]] = {}
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        self.routed = 0

    def start(self) -> "TcpBroker":
        bound = {}
        for name, port in self.ports.items():
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                srv.bind((self.host, port))
            except OSError as exc:
                srv.close()
                self.close()
                raise BusUnavailable(f"cannot bind {self.host}:{port}: {exc}") from None
            srv.listen(64)
            srv.setblocking(False)
            self._sel.register(srv, selectors.EVENT_READ, "listen")
            self._listeners.append(srv)
            bound[name] = srv.getsockname()[1]
        self.ports = bound
        self._thread = threading.Thread(target=self._run, name="bus-broker", daemon=True)
        self._thread.start()
        return self

    def _run(self) -> None:
        while not self._stop.is_set():
            for key, _ in self._sel.select(timeout=0.1):
                sock = key.fileobj
                if key.data == "listen":
                    try:
                        conn, _ = sock.accept()
                    except OSError:
                        continue
                    conn.setblocking(True)
                    self._clients[conn] = (FrameReader(), set())
                    self._sel.register(conn, selectors.EVENT_READ, "client")
                    continue
                try:
                    data = sock.recv(65536)
                except OSError:
                    data = b""
                if not data:
                    self._drop(sock)
                    continue
                reader, topics = self._clients[sock]
                try:
                    docs = reader.feed(data)
                except (BusError, ValueError):
                    self._drop(sock)
                    continue
                for doc in docs:
                    if doc.get("op") == "sub":
                        topics.add(doc["topic"])
                        try:
                            sock.sendall(encode_frame({"op": "ack", "topic": doc["topic"]}))
                        except OSError:
                            self._drop(sock)
                    elif "topic" in doc:
                        self._route(doc)

    def _route(self, doc: dict) -> None:
        frame = encode_frame(doc)
        self.routed += 1
        for conn, (_, topics) in list(self._clients.items()):
            if doc["topic"] in topics:
                try:
                    conn.sendall(frame)
                except OSError:
                    self._drop(conn)

    def _drop(self, sock: socket.socket) -> None:
        self._clients.pop(sock, None)
        try:
            self._sel.unregister(sock)
        except (KeyError, ValueError):
            pass
        sock.close()

    def close(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        for sock in list(self._clients):
            self._drop(sock)
        for srv in self._listeners:
            try:
                self._sel.unregister(srv)
            except (KeyError, ValueError):
                pass
            srv.close()
        self._listeners = []


class TcpBus:
    """Client side of :class:`TcpBroker` with the :class:`Bus` interface.

    Publishes made while the broker is unreachable are buffered (bounded,
    oldest dropped) and flushed on the next successful publish or
    :meth:`reconnect`.
    """

    def __init__(
        self,
        host: str = "127.0.0.1",
        ports: Optional[Mapping[str, int]] = None,
        capacity: int = DEFAULT_BUFFER,
        clock: Optional[Clock] = None,
        connect_timeout: float = 2.0,
    ):
        self.host = host
        self.ports = dict(ports or DEFAULT_PORTS)
        self.capacity = capacity
        self.clock = clock or Clock()
        self.connect_timeout = connect_timeout
        self.stats = BusStats()
        self._seq: dict[tuple[str, str], int] = {}
        self._buffer: deque[BusMessage] = deque()
        self._pub: dict[int, socket.socket] = {}
        self._subs: list[tuple[Subscription, socket.socket, threading.Thread]] = []
        self._lock = threading.Lock()

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    def _conn(self, port: int) -> socket.socket:
        sock = self._pub.get(port)
        if sock is None:
            try:
                sock = socket.create_connection((self.host, port), timeout=self.connect_timeout)
            except OSError as exc:
                raise BusUnavailable(f"{self.host}:{port}: {exc}") from None
            sock.settimeout(None)
            self._pub[port] = sock
        return sock

    def _send(self, msg: BusMessage) -> None:
        port = topic_port(msg.topic, self.ports)
        try:
            self._conn(port).sendall(encode_frame(msg.document()))
        except OSError as exc:
            sock = self._pub.pop(port, None)
            if sock is not None:
                sock.close()
            raise BusUnavailable(str(exc)) from None
        self.stats.delivered += 1

    def publish(self, topic: str, event: str, data: Mapping[str, Any], sender: str) -> BusMessage:
        check_schema(topic, event, data)
        with self._lock:
            key = (sender, topic)
            seq = self._seq.get(key, 0) + 1
            self._seq[key] = seq
            msg = BusMessage(topic, event, dict(data), sender, seq, self.clock.now())
            self.stats.sent += 1
            try:
                self._flush()
                self._send(msg)
            except BusUnavailable:
                if len(self._buffer) >= self.capacity:
                    self._buffer.popleft()
                    self.stats.dropped += 1
                self._buffer.append(msg)
        return msg

    def _flush(self) -> int:
        n = 0
        while self._buffer:
            self._send(self._buffer[0])
            self._buffer.popleft()
            n += 1
        return n

    def reconnect(self) -> int:
        with self._lock:
            try:
                return self._flush()
            except BusUnavailable:
                return 0

    def subscribe(self, topic: str, agent_id: str) -> Subscription:
        if topic not in TOPICS:
            raise UnknownTopic(topic)
        port = topic_port(topic, self.ports)
        try:
            sock = socket.create_connection((self.host, port), timeout=self.connect_timeout)
        except OSError as exc:
            raise BusUnavailable(f"{self.host}:{port}: {exc}") from None
        reader = FrameReader()
        try:
            sock.sendall(encode_frame({"op": "sub", "topic": topic}))
            pending: list[dict] = []
            while not any(d.get("op") == "ack" for d in pending):
                data = sock.recv(65536)
                if not data:
                    raise OSError("broker closed the connection")
                pending += reader.feed(data)
        except OSError as exc:
            sock.close()
            raise BusUnavailable(f"subscribe {topic}: {exc}") from None
        sock.settimeout(None)
        sub = Subscription(topic, agent_id)
        for doc in pending:
            if "op" not in doc:
                sub._put(BusMessage.from_document(doc))
        thread = threading.Thread(target=self._pump, args=(sock, sub, reader), daemon=True, name=f"sub-{topic}-{agent_id}")
        thread.start()
        self._subs.append((sub, sock, thread))
        return sub

    @staticmethod
    def _pump(sock: socket.socket, sub: Subscription, reader: FrameReader) -> None:
        while True:
            try:
                data = sock.recv(65536)
            except OSError:
                break
            if not data:
                break
            try:
                docs = reader.feed(data)
            except (BusError, ValueError):
                break
            for doc in docs:
                if "op" not in doc:
                    sub._put(BusMessage.from_document(doc))
        sub.close()

    def close(self) -> None:
        for sub, sock, _ in self._subs:
            sub.close()
            try:
                sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            sock.close()
        self._subs = []
        for sock in self._pub.values():
            sock.close()
        self._pub = {}
