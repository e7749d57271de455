from __future__ import annotations

import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FC03, scapy_modbus, spec_frames
from icsfuzz.protocol import (
    Frame,
    FrameError,
    MissingField,
    SpecError,
    TooShort,
    ValueOutOfWidth,
    consistent_frame,
    decode_frame,
    encode_frame,
    encode_with_flags,
    enumerate_combos,
    validate_frame,
)
from icsfuzz.protocol.specfile import BUNDLED, SpecParseError, bundled_spec_path, load_bundled, parse_spec


def _request_section(pid: str) -> list[str]:
    lines = bundled_spec_path(pid).read_text().splitlines()
    out = []
    for line in lines:
        if line.strip() == "response":
            break
        out.append(line.split("#", 1)[0].strip())
    return out


# -- decode ---------------------------------------------------------------------


def test_decode_fc03_matches_reference_decoder(modbus):
    frame = decode_frame(FC03, modbus)
    assert dict(frame.values) == {
        "transaction": 1, "protocol": 0, "length": 6, "unit": 1,
        "function_code": 3, "start_address": 0, "quantity": 10,
    }
    assert dict(frame.values) == scapy_modbus(FC03)


def test_decode_empty_is_too_short(modbus):
    with pytest.raises(TooShort):
        decode_frame(b"", modbus)


def test_decode_lenient_validate_strict_on_length(modbus):
    data = bytearray(FC03)
    data[4:6] = b"\x00\x09"
    frame = decode_frame(bytes(data), modbus)
    assert frame.values["length"] == 9 == scapy_modbus(bytes(data))["length"]
    report = validate_frame(frame, modbus)
    assert not report.valid
    assert report.rules == ("length:length",)
    assert "mismatch" in report.violations[0].description


def test_decode_truncated_inside_field(modbus):
    with pytest.raises(TooShort):
        decode_frame(FC03[:9], modbus)


def test_decode_magic_mismatch(modbus):
    data = bytearray(FC03)
    data[2:4] = b"\x00\x01"
    with pytest.raises(FrameError):
        decode_frame(bytes(data), modbus)


def test_decode_fc16_matches_reference_decoder(modbus):
    data = bytes.fromhex("0001 0000 000b 01 10 0000 0002 04 00010002")
    frame = decode_frame(data, modbus)
    ref = scapy_modbus(data)
    for key in ("transaction", "length", "unit", "function_code", "start_address", "quantity", "byte_count"):
        assert frame.values[key] == ref[key]
    assert frame.values["data"] == bytes.fromhex("00010002")
    assert validate_frame(frame, modbus).valid


# -- encode ---------------------------------------------------------------------


def test_encode_round_trip_bytes(modbus):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        from scapy.contrib.modbus import ModbusADURequest, ModbusPDU03ReadHoldingRegistersRequest
    ref = bytes(ModbusADURequest(transId=1, unitId=1) / ModbusPDU03ReadHoldingRegistersRequest(startAddr=0, quantity=10))
    assert ref == FC03
    assert encode_frame(decode_frame(FC03, modbus), modbus) == FC03


def test_encode_missing_field_strict(modbus):
    frame = Frame("modbus_tcp", {"transaction": 1, "protocol": 0, "unit": 1, "start_address": 0, "quantity": 10})
    with pytest.raises(MissingField):
        encode_frame(frame, modbus)


def test_encode_pinned_length_survives(modbus):
    frame = decode_frame(FC03, modbus)
    pinned = Frame(frame.spec_id, {**frame.values, "length": 9}, pinned={"length"})
    assert encode_frame(pinned, modbus)[4:6] == b"\x00\x09"
    # without pinning the length is recomputed
    assert encode_frame(frame.replace(length=9), modbus)[4:6] == b"\x00\x06"


def test_encode_width_overflow(modbus):
    frame = decode_frame(FC03, modbus).replace(quantity=70000)
    with pytest.raises(ValueOutOfWidth):
        encode_frame(frame, modbus)
    out = encode_with_flags(frame, modbus, strict=False)
    assert out.truncated == ("quantity",)
    assert out.data[-2:] == (70000 & 0xFFFF).to_bytes(2, "big")


def test_encode_inserts_and_omits(modbus):
    frame = decode_frame(FC03, modbus)
    out = encode_with_flags(frame, modbus, omit=("unit",), inserts={"end": [b"\xaa\xbb"]})
    assert out.fields == ("transaction", "protocol", "length", "function_code", "start_address", "quantity", "+blob#0")
    assert out.data == bytes.fromhex("0001 0000 0007 03 0000 000a aabb")


# -- validate -------------------------------------------------------------------


def test_validate_well_formed(modbus):
    assert validate_frame(decode_frame(FC03, modbus), modbus).valid


def test_validate_length_with_short_remainder(modbus):
    data = bytes.fromhex("0001 0000 0009 01 03 0000 000a")
    report = validate_frame(decode_frame(data, modbus), modbus)
    assert [(v.field, "mismatch" in v.description) for v in report.violations] == [("length", True)]


def test_validate_undefined_function_code(modbus):
    data = bytes.fromhex("0001 0000 0002 01 5c")
    report = validate_frame(decode_frame(data, modbus), modbus)
    assert ("function_code", "not in enumerated domain") in [(v.field, v.description) for v in report.violations]


def test_validate_constraint_count(modbus):
    data = bytes.fromhex("0001 0000 000b 01 10 0000 0003 04 00010002")
    report = validate_frame(decode_frame(data, modbus), modbus)
    assert report.rules == ("constraint:register_write_bytes",)


# -- combos ---------------------------------------------------------------------


def test_combos_counting():
    spec = parse_spec(
        """
        protocol toy
        field a u8 range 0..255
          class lo 0..9
          class hi 10..255
        field b u8 range 0..255
          class x 0
          class y 1..9
          class z 10..255
        header a b
        """
    )
    assert len(enumerate_combos(spec)) == 5


def test_combos_single_opaque():
    spec = parse_spec("protocol toy\nfield blob bytes opaque\n  class any 0..*\nheader blob\n")
    assert enumerate_combos(spec) == [("blob", "any")]


@pytest.mark.parametrize("pid", sorted(BUNDLED))
def test_combos_match_fixture(pid):
    # oracle: class lines per field straight from the file; a field with none is one class
    per_field: list[int] = []
    for line in _request_section(pid):
        if line.startswith("field "):
            per_field.append(0)
        elif line.startswith("class "):
            per_field[-1] += 1
    expected = sum(max(1, n) for n in per_field)
    combos = enumerate_combos(load_bundled(pid))
    assert len(combos) == expected
    assert combos == enumerate_combos(load_bundled(pid))


def test_modbus_combo_count_frozen(modbus):
    assert len(enumerate_combos(modbus)) == 36
    assert len(modbus.fields) == 12


# -- spec parser ----------------------------------------------------------------


@pytest.mark.parametrize(
    "text, line",
    [
        ("protocol p\nfield a u8 range 0..255\nheader a\nbogus stmt\n", 4),
        ("field a u8 range 0..255\n", 1),
        ("protocol p\nfield a u7x range 0..1\nheader a\n", 2),
        ("protocol p\nfield a u8 range 0..255\n  class c 5..1\nheader a\n", 3),
    ],
)
def test_spec_parse_errors_name_line(text, line):
    with pytest.raises(SpecParseError) as err:
        parse_spec(text)
    assert err.value.line == line


def test_spec_overlapping_classes_rejected():
    with pytest.raises(SpecError):
        parse_spec("protocol p\nfield a u8 range 0..255\n  class x 0..10\n  class y 5..255\nheader a\n")


@pytest.mark.parametrize("pid", sorted(BUNDLED))
def test_canonical_request_is_valid(pid):
    spec = load_bundled(pid)
    frame = decode_frame(spec.canonical, spec)
    assert validate_frame(frame, spec).valid
    assert encode_frame(frame, spec) == spec.canonical


# -- properties -----------------------------------------------------------------


@pytest.mark.parametrize("pid", sorted(BUNDLED))
@settings(max_examples=150)
@given(data=st.data())
def test_round_trip_property(pid, data):
    spec = load_bundled(pid)
    frame = data.draw(spec_frames(spec))
    encoded = encode_frame(frame, spec, strict=False)
    assert decode_frame(encoded, spec) == frame


@pytest.mark.parametrize("pid", sorted(BUNDLED))
@settings(max_examples=150)
@given(data=st.data())
def test_validation_soundness_property(pid, data):
    spec = load_bundled(pid)
    frame = data.draw(spec_frames(spec, valid=True))
    assert validate_frame(frame, spec).valid, validate_frame(frame, spec)


@pytest.mark.parametrize("pid", sorted(BUNDLED))
@settings(max_examples=300)
@given(raw=st.binary(max_size=64))
def test_decode_totality_property(pid, raw):
    spec = load_bundled(pid)
    try:
        frame = decode_frame(raw, spec)
    except FrameError:
        return
    validate_frame(frame, spec)


@settings(max_examples=200)
@given(raw=st.binary(min_size=8, max_size=40))
def test_decode_agrees_with_reference_on_headers(raw):
    spec = load_bundled("modbus_tcp")
    raw = raw[:2] + b"\x00\x00" + raw[4:]
    try:
        frame = decode_frame(raw, spec)
    except TooShort:
        return  # body too short for the layout; the header alone still agrees below
    ref = scapy_modbus(raw)
    for key in ("transaction", "protocol", "length", "unit"):
        assert frame.values[key] == ref[key]
    assert frame.values["function_code"] == raw[7]


def test_consistent_frame_sets_lengths(modbus):
    frame = consistent_frame(modbus, {"transaction": 7, "protocol": 0, "unit": 1, "function_code": 16,
                                      "start_address": 4, "quantity": 2, "data": b"\x00\x01\x00\x02"})
    assert frame.values["byte_count"] == 4
    assert frame.values["length"] == 11
    assert validate_frame(frame, modbus).valid
