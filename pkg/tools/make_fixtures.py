"""Regenerate the bundled data fixtures under src/icsfuzz/data.

    python tools/make_fixtures.py

Writes the knowledge store and the capture files. Output is deterministic.
"""

from __future__ import annotations

import json
import random
import struct
from pathlib import Path

DATA = Path(__file__).resolve().parents[1] / "src" / "icsfuzz" / "data"

MODBUS_FUNCTIONS = {
    1: ("read_coils", "Read Coils", "Reads 1 to 2000 contiguous coil states starting at start_address. "
        "Request PDU: function code, start_address (2 bytes), quantity (2 bytes)."),
    2: ("read_discrete_inputs", "Read Discrete Inputs", "Reads 1 to 2000 contiguous discrete inputs. "
        "Request PDU: function code, start_address, quantity."),
    3: ("read_holding_registers", "Read Holding Registers", "Reads the contents of 1 to 125 contiguous holding "
        "registers. Request PDU: function code 0x03, start_address (2 bytes), quantity (2 bytes). "
        "The response carries byte_count = 2 * quantity followed by the register values."),
    4: ("read_input_registers", "Read Input Registers", "Reads 1 to 125 contiguous input registers. "
        "Request PDU: function code, start_address, quantity."),
    5: ("write_single_coil", "Write Single Coil", "Writes one coil. output_value must be 0x0000 (OFF) or "
        "0xFF00 (ON); the response echoes the request."),
    6: ("write_single_register", "Write Single Register", "Writes one holding register; the response echoes "
        "the request."),
    15: ("write_multiple_coils", "Write Multiple Coils", "Writes 1 to 1968 coils. byte_count must equal "
         "ceil(quantity / 8) and the data must carry exactly byte_count bytes."),
    16: ("write_multiple_registers", "Write Multiple Registers", "Writes 1 to 123 registers. byte_count must "
         "equal 2 * quantity and the data must carry exactly byte_count bytes."),
}

MODBUS_FIELDS = {
    "transaction": "Transaction identifier chosen by the client and echoed by the server.",
    "protocol": "Protocol identifier; always 0 for Modbus. Servers drop frames with any other value.",
    "length": "Number of bytes that follow the length field: unit identifier plus PDU.",
    "unit": "Unit identifier addressing a device behind a gateway; 0 is broadcast.",
    "function_code": "Function code selecting the service; undefined codes yield exception 01.",
    "start_address": "Zero-based address of the first coil or register.",
    "quantity": "Number of coils or registers; bounds depend on the function code.",
    "byte_count": "Number of data bytes that follow in write-multiple requests.",
    "output_value": "Coil value for write single coil: 0x0000 or 0xFF00.",
    "register_value": "Register value for write single register.",
}


def knowledge_entries() -> list[dict]:
    entries = []
    for proto, prefix, title, body in [
        ("modbus_tcp", "modbus", "Modbus/TCP protocol rules overview",
         "A Modbus/TCP request is an MBAP header (transaction, protocol, length, unit) followed by a PDU "
         "(function code and data). The length field counts the unit identifier plus the PDU. Servers answer "
         "errors with function_code | 0x80 and an exception code."),
        ("s7comm", "s7comm", "S7comm protocol rules overview",
         "S7comm jobs travel in TPKT/COTP data frames. The S7 header carries protocol id 0x32, the ROSCTR, "
         "a PDU reference and the parameter and data lengths. Communication must be set up with function 0xF0 "
         "before read var (0x04) or write var (0x05)."),
        ("ethernet_ip", "enip", "EtherNet/IP protocol rules overview",
         "EtherNet/IP encapsulation has a 24-byte little-endian header. A client first sends RegisterSession "
         "and receives a session handle; SendRRData carries unconnected CIP requests such as Read Tag (0x4C) "
         "and Write Tag (0x4D). Sessions end with UnRegisterSession."),
    ]:
        entries.append({
            "id": f"{prefix}-00-overview",
            "protocol_id": proto,
            "kind": "command-format",
            "title": title,
            "body": body,
            "keywords": ["protocol", "rules", proto, "overview"],
            "source": "vendor protocol reference (condensed)",
        })
    for code, (slug, title, body) in MODBUS_FUNCTIONS.items():
        entries.append({
            "id": f"modbus-fc{code:02d}",
            "protocol_id": "modbus_tcp",
            "kind": "command-format",
            "title": f"Function Code {code:02d}: {title}",
            "body": body,
            "keywords": ["protocol", "rules", "modbus_tcp", "function_code", str(code), slug],
            "source": "Modbus Application Protocol Specification V1.1b3 (condensed)",
        })
    for name, body in MODBUS_FIELDS.items():
        entries.append({
            "id": f"modbus-field-{name}",
            "protocol_id": "modbus_tcp",
            "kind": "field-constraint",
            "title": f"Modbus/TCP field {name}",
            "body": body,
            "keywords": ["modbus_tcp", "field", name],
            "source": "Modbus Messaging on TCP/IP Implementation Guide (condensed)",
        })
    entries += [
        {
            "id": "vuln-session-exhaustion",
            "protocol_id": "ethernet_ip",
            "kind": "vulnerability-note",
            "title": "Session exhaustion through unreleased registrations",
            "body": "Controllers that allocate a session per registration and wait for an explicit release "
                    "can run out of session slots when clients disconnect without releasing. New connections "
                    "are then refused until the device is reset.",
            "keywords": ["session", "exhaustion", "registration", "dos", "modbus_tcp", "ethernet_ip"],
            "source": "public advisory pattern",
        },
        {
            "id": "vuln-length-overflow",
            "protocol_id": "modbus_tcp",
            "kind": "vulnerability-note",
            "title": "Header length larger than the payload",
            "body": "Stacks that trust the MBAP length field and read past the received payload can fault. "
                    "Mutate the length field above the real payload size to probe this.",
            "keywords": ["length", "overflow", "crash", "mbap", "modbus_tcp"],
            "source": "common ICS stack defect class",
        },
        {
            "id": "vuln-write-burst",
            "protocol_id": "s7comm",
            "kind": "vulnerability-note",
            "title": "I/O halt after bursts of malformed writes",
            "body": "Malformed write requests sent in rapid succession can leave the I/O write path "
                    "unresponsive until a manual reset.",
            "keywords": ["write", "burst", "malformed", "halt", "modbus_tcp", "s7comm", "16"],
            "source": "common ICS stack defect class",
        },
    ]
    return entries


def _ip_checksum(header: bytes) -> int:
    total = sum(struct.unpack("!10H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def _packet(src: str, dst: str, sport: int, dport: int, payload: bytes, seq: int) -> bytes:
    eth = bytes.fromhex("020000000002" "020000000001") + struct.pack("!H", 0x0800)
    tcp = struct.pack("!HHIIBBHHH", sport, dport, seq, 0, 5 << 4, 0x18, 65535, 0, 0)
    total = 20 + len(tcp) + len(payload)
    ip = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, seq & 0xFFFF, 0, 64, 6, 0,
        bytes(int(x) for x in src.split(".")), bytes(int(x) for x in dst.split(".")),
    )
    ip = ip[:10] + struct.pack("!H", _ip_checksum(ip)) + ip[12:]
    return eth + ip + tcp + payload


def _pcap(records: list[tuple[float, bytes]]) -> bytes:
    out = bytearray(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1))
    for ts, pkt in records:
        sec = int(ts)
        usec = int(round((ts - sec) * 1e6))
        out += struct.pack("<IIII", sec, usec, len(pkt), len(pkt)) + pkt
    return bytes(out)


def modbus_request(tid: int, unit: int, fc: int, body: bytes) -> bytes:
    pdu = bytes([fc]) + body
    return struct.pack(">HHHB", tid, 0, len(pdu) + 1, unit) + pdu


def modbus_exchanges(rng: random.Random, count: int) -> list[bytes]:
    out = []
    for i in range(count):
        fc = rng.choice([1, 2, 3, 3, 3, 4, 5, 6, 6, 15, 16, 16])
        tid = i + 1
        unit = rng.choice([1, 1, 1, 2, 17])
        addr = rng.choice([0, 0, 4, 10, 100, 400, 1000])
        if fc in (1, 2):
            body = struct.pack(">HH", addr, rng.choice([1, 8, 16, 64]))
        elif fc in (3, 4):
            body = struct.pack(">HH", addr, rng.choice([1, 2, 4, 10, 16]))
        elif fc == 5:
            body = struct.pack(">HH", addr, rng.choice([0x0000, 0xFF00]))
        elif fc == 6:
            body = struct.pack(">HH", addr, rng.choice([0, 1, 42, 1500]))
        elif fc == 15:
            qty = rng.choice([1, 8, 10])
            nbytes = (qty + 7) // 8
            body = struct.pack(">HHB", addr, qty, nbytes) + bytes(rng.randrange(256) for _ in range(nbytes))
        else:
            qty = rng.choice([1, 2, 4])
            body = struct.pack(">HHB", addr, qty, 2 * qty) + bytes(rng.randrange(256) for _ in range(2 * qty))
        out.append(modbus_request(tid, unit, fc, body))
    return out


def main() -> None:
    rng = random.Random(20240502)
    kb = DATA / "knowledge"
    kb.mkdir(parents=True, exist_ok=True)
    with (kb / "ics_rules.jsonl").open("w") as fh:
        for entry in knowledge_entries():
            fh.write(json.dumps(entry, sort_keys=True) + "\n")

    caps = DATA / "captures"
    caps.mkdir(parents=True, exist_ok=True)
    requests = modbus_exchanges(rng, 50)
    t0 = 1714608000.0
    records = []
    for i, req in enumerate(requests):
        records.append((t0 + i * 0.25, _packet("10.0.0.10", "10.0.0.20", 40000 + i, 502, req, 1000 + i)))
    (caps / "modbus_50.pcap").write_bytes(_pcap(records))

    mixed = []
    http = b"GET /status HTTP/1.1\r\nHost: hmi\r\n\r\n"
    for i, req in enumerate(requests[:10]):
        mixed.append((t0 + i * 0.5, _packet("10.0.0.10", "10.0.0.20", 41000 + i, 502, req, 2000 + i)))
        mixed.append((t0 + i * 0.5 + 0.1, _packet("10.0.0.10", "10.0.0.30", 42000 + i, 80, http, 3000 + i)))
    (caps / "mixed_ports.pcap").write_bytes(_pcap(mixed))

    with (caps / "modbus_50.hex").open("w") as fh:
        fh.write("# timestamp src dst hex-payload\n")
        for i, req in enumerate(requests):
            fh.write(f"{t0 + i * 0.25:.6f} 10.0.0.10:{40000 + i} 10.0.0.20:502 {req.hex()}\n")


if __name__ == "__main__":
    main()
