from __future__ import annotations

import socket
import warnings
from fractions import Fraction
from typing import Optional

import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from icsfuzz.protocol import ProtocolSpec, consistent_frame
from icsfuzz.protocol.specfile import BUNDLED, load_bundled

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

FC03 = bytes.fromhex("00 01 00 00 00 06 01 03 00 00 00 0A")


@pytest.fixture(scope="session")
def modbus() -> ProtocolSpec:
    return load_bundled("modbus_tcp")


@pytest.fixture(scope="session")
def specs() -> dict[str, ProtocolSpec]:
    return {pid: load_bundled(pid) for pid in BUNDLED}


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def scapy_modbus(data: bytes) -> dict:
    """Independent Modbus/TCP request dissection, keyed like the bundled spec."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from scapy.contrib.modbus import ModbusADURequest

    adu = ModbusADURequest(data)
    out = {"transaction": adu.transId, "protocol": adu.protoId, "length": adu.len, "unit": adu.unitId}
    pdu = adu.payload.fields
    names = {
        "funcCode": "function_code",
        "startAddr": "start_address",
        "quantity": "quantity",
        "quantityOutput": "quantity",
        "quantityRegisters": "quantity",
        "outputAddr": "start_address",
        "registerAddr": "start_address",
        "outputValue": "output_value",
        "registerValue": "register_value",
        "byteCount": "byte_count",
    }
    for key, value in pdu.items():
        if key in names:
            out[names[key]] = value
    return out


# -- frame strategies -----------------------------------------------------------


def _member(vs) -> st.SearchStrategy[int]:
    return st.sampled_from(vs.intervals).flatmap(lambda iv: st.integers(iv[0], iv[1]))


def _sizer_factor(spec: ProtocolSpec, name: str) -> Optional[Fraction]:
    for f in spec.fields:
        if f.is_length and f.domain.target.kind == "field" and f.domain.target.name == name:
            return f.domain.target.factor
    return None


@st.composite
def spec_frames(draw, spec: ProtocolSpec, *, valid: bool = False):
    """Frame drawn from declared domains with consistent length fields.

    With ``valid`` the default layout is skipped and conditional constraints
    are honoured, so the frame must validate.
    """
    layouts = [lay for lay in spec.layouts if not (valid and lay.discriminator is None)]
    layout = draw(st.sampled_from(layouts)) if layouts else None
    values: dict = {}
    if layout is not None and layout.discriminator is not None:
        disc = spec.field(layout.discriminator)
        keys = [k for lo, hi in layout.keys.intervals for k in range(lo, hi + 1) if k in disc.domain.allowed or not valid]
        values[layout.discriminator] = draw(st.sampled_from(keys))
    elif layout is not None and layout.discriminator is None:
        disc_name = next(lay.discriminator for lay in spec.layouts if lay.discriminator)
        taken = [lay.keys for lay in spec.layouts if lay.discriminator]
        width = spec.field(disc_name).width
        values[disc_name] = draw(st.integers(0, (1 << width) - 1).filter(lambda v: all(v not in k for k in taken)))
    names = list(spec.header) + (list(layout.fields) if layout is not None else [])
    for name in names:
        f = spec.field(name)
        if name in values or f.is_length:
            continue
        if f.opaque:
            factor = _sizer_factor(spec, name)
            n = draw(st.integers(0, 12))
            if factor is not None and (n * factor).denominator != 1:
                n += 1
            values[name] = draw(st.binary(min_size=n, max_size=n))
            continue
        allowed = f.domain.allowed
        if valid:
            for c in spec.constraints:
                if c.target == name and c.kind == "range" and c.applies(values):
                    allowed = c.allowed
        values[name] = draw(_member(allowed))
    if valid:
        for c in spec.constraints:
            if c.kind != "equals" or not c.applies(values) or c.target not in names:
                continue
            target = spec.field(c.target)
            if target.is_length and target.domain.target.kind == "field":
                need = c.expected(values)
                values[target.domain.target.name] = bytes(need)
    return consistent_frame(spec, values)


def scapy_response(data: bytes):
    """Modbus/TCP response dissected by scapy (PDU layer)."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from scapy.contrib.modbus import ModbusADUResponse

    return ModbusADUResponse(data).payload


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
