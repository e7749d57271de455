"""Captured-traffic sources.

Two file formats are read: classic pcap / pcapng (Ethernet, raw IP or Linux
cooked captures carrying TCP) and a plain hex-lines format::

    # timestamp src dst hex-payload
    1714608000.000000 10.0.0.10:40000 10.0.0.20:502 000100000006010300000001

Only TCP segments with a non-empty payload whose destination port is in the
target port list are emitted, in timestamp order.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Protocol, Union

import dpkt

logger = logging.getLogger(__name__)


class CaptureError(Exception):
    pass


class SourceUnavailable(CaptureError):
    pass


class MalformedCaptureFile(CaptureError):
    pass


@dataclass(frozen=True)
class RawCapture:
    timestamp: float
    src: str
    dst: str
    payload: bytes
    transport: str = "tcp"
    ref: str = ""

    def __post_init__(self) -> None:
        if not self.payload:
            raise ValueError("capture payload must be non-empty")

    @property
    def dst_port(self) -> int:
        return int(self.dst.rsplit(":", 1)[1])

    @property
    def src_port(self) -> int:
        return int(self.src.rsplit(":", 1)[1])


class CaptureSource(Protocol):
    def __iter__(self) -> Iterator[RawCapture]: ...


def _endpoint(addr: bytes, port: int) -> str:
    if len(addr) == 4:
        host = ".".join(str(b) for b in addr)
    else:
        import ipaddress

        host = f"[{ipaddress.IPv6Address(addr)}]"
    return f"{host}:{port}"


def _ip_layer(linktype: int, buf: bytes):
    if linktype == dpkt.pcap.DLT_EN10MB:
        frame = dpkt.ethernet.Ethernet(buf)
        return frame.data
    if linktype == dpkt.pcap.DLT_LINUX_SLL:
        return dpkt.sll.SLL(buf).data
    if linktype in (dpkt.pcap.DLT_RAW, 101, 228, 229):
        version = buf[0] >> 4 if buf else 0
        return dpkt.ip.IP(buf) if version == 4 else dpkt.ip6.IP6(buf)
    if linktype == dpkt.pcap.DLT_NULL:
        return dpkt.loopback.Loopback(buf).data
    raise MalformedCaptureFile(f"unsupported link type {linktype}")


def _reader(fh):
    try:
        return dpkt.pcap.Reader(fh)
    except ValueError:
        fh.seek(0)
    try:
        return dpkt.pcapng.Reader(fh)
    except ValueError as exc:
        raise MalformedCaptureFile(f"not a pcap or pcapng file: {exc}") from None


def read_pcap(path: Union[str, Path], ports: Optional[Iterable[int]] = None) -> list[RawCapture]:
    """TCP payloads from a capture file, filtered by destination port."""
    path = Path(path)
    wanted = set(ports) if ports is not None else None
    out: list[RawCapture] = []
    try:
        fh = path.open("rb")
    except OSError as exc:
        raise SourceUnavailable(f"{path}: {exc.strerror or exc}") from None
    with fh:
        reader = _reader(fh)
        linktype = reader.datalink()
        index = 0
        last_start: Optional[int] = None
        last_len = 0
        try:
            records = iter(reader)
            while True:
                start = fh.tell()
                try:
                    ts, buf = next(records)
                except StopIteration:
                    break
                last_start, last_len = start, len(buf)
                index += 1
                try:
                    ip = _ip_layer(linktype, buf)
                except (dpkt.UnpackError, IndexError):
                    logger.debug("%s#%d: undecodable link layer, skipped", path, index)
                    continue
                tcp = getattr(ip, "data", None)
                if not isinstance(tcp, dpkt.tcp.TCP) or not tcp.data:
                    continue
                if wanted is not None and tcp.dport not in wanted:
                    continue
                out.append(
                    RawCapture(
                        float(ts),
                        _endpoint(ip.src, tcp.sport),
                        _endpoint(ip.dst, tcp.dport),
                        bytes(tcp.data),
                        ref=f"{path.name}#{index}",
                    )
                )
        except (dpkt.NeedData, dpkt.UnpackError, ValueError) as exc:
            raise MalformedCaptureFile(f"{path}: truncated or corrupt record after #{index}: {exc}") from None
        if isinstance(reader, dpkt.pcap.Reader) and _short_last_record(fh, last_start, last_len):
            raise MalformedCaptureFile(f"{path}: record #{index} is cut short")
    out.sort(key=lambda c: c.timestamp)
    return out


def _short_last_record(fh, start: Optional[int], got: int) -> bool:
    """dpkt hands back a short body for a truncated final record; compare with its caplen."""
    if start is None:
        return False
    fh.seek(0)
    magic = fh.read(4)
    order = "<" if magic in (b"\xd4\xc3\xb2\xa1", b"\x4d\x3c\xb2\xa1") else ">"
    fh.seek(start + 8)
    (caplen,) = struct.unpack(order + "I", fh.read(4))
    return got < caplen


def read_hex_lines(path: Union[str, Path], ports: Optional[Iterable[int]] = None) -> list[RawCapture]:
    path = Path(path)
    wanted = set(ports) if ports is not None else None
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise SourceUnavailable(f"{path}: {exc.strerror or exc}") from None
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise MalformedCaptureFile(f"{path}:{lineno}: expected 4 columns, got {len(parts)}")
        ts, src, dst, hexdata = parts
        try:
            cap = RawCapture(float(ts), src, dst, bytes.fromhex(hexdata), ref=f"{path.name}:{lineno}")
            port = cap.dst_port
        except ValueError as exc:
            raise MalformedCaptureFile(f"{path}:{lineno}: {exc}") from None
        if wanted is None or port in wanted:
            out.append(cap)
    out.sort(key=lambda c: c.timestamp)
    return out


def ingest_traffic(source: Union[str, Path], ports: Optional[Iterable[int]] = None) -> Iterator[RawCapture]:
    """Captures from a file, picking the reader by extension.

    Live endpoints (``tcp://host:port``) are not supported by the shipped
    readers and raise SourceUnavailable.
    """
    text = str(source)
    if "://" in text:
        raise SourceUnavailable(f"live capture from {text} is not supported; record to a pcap file first")
    path = Path(text)
    if not path.exists():
        raise SourceUnavailable(f"{path}: no such file")
    if path.suffix in (".hex", ".txt"):
        records = read_hex_lines(path, ports)
    else:
        records = read_pcap(path, ports)
    return iter(records)
