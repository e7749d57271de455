from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import FC03, scapy_modbus, spec_frames
from oracles import oracle_coverage
from icsfuzz.bus import Bus
from icsfuzz.campaign import bundled_path
from icsfuzz.capture import RawCapture
from icsfuzz.knowledge import bundled_store_path, load_store
from icsfuzz.protocol import decode_frame, encode_frame, validate_frame
from icsfuzz.protocol.specfile import load_bundled
from icsfuzz.seed import STAGES, Quarantine, Seed, SeedAgent, emit_seed, extract_seed


def _cap(payload: bytes, port: int = 502, ref: str = "t") -> RawCapture:
    return RawCapture(0.0, "10.0.0.1:40000", f"10.0.0.2:{port}", payload, ref=ref)


@pytest.fixture(scope="module")
def store():
    return load_store(bundled_store_path())


# -- extract --------------------------------------------------------------------


def test_fc03_seed(modbus, store):
    seed = extract_seed(_cap(FC03), store, modbus)
    assert isinstance(seed, Seed)
    ref = scapy_modbus(FC03)
    assert seed.summary == {"protocol": "modbus_tcp", "function_code": ref["function_code"],
                            "start_address": ref["start_address"], "length": ref["quantity"]}
    assert seed.summary == {"protocol": "modbus_tcp", "function_code": 3, "start_address": 0, "length": 10}
    assert set(seed.fields) <= {f.name for f in modbus.fields}
    assert seed.validation.valid
    assert [t[0] for t in seed.trace][0] == "identify" and seed.trace[-1][0] == "assemble"
    # each validated field consulted the store; the function code hit its command entry
    assert ("validate", "function_code", "modbus-fc03") in seed.trace


def test_stages_run_in_order(modbus, store):
    seed = extract_seed(_cap(FC03), store, modbus)
    order = [STAGES.index(t[0]) for t in seed.trace]
    assert order == sorted(order)
    validated = [t[1] for t in seed.trace if t[0] == "validate"]
    declared = [f.name for f in modbus.fields if f.name in validated]
    assert validated == declared


def test_random_bytes_quarantined_at_decode(modbus, store):
    q = extract_seed(_cap(bytes.fromhex("deadbeef")), store, modbus)
    assert isinstance(q, Quarantine) and q.stage == "decode"


def test_undefined_function_code_quarantined_at_validate(modbus, store):
    q = extract_seed(_cap(bytes.fromhex("0001 0000 0002 01 5c")), store, modbus)
    assert isinstance(q, Quarantine)
    assert (q.stage, q.field) == ("validate", "function_code")
    assert "function_code" in q.reason


def test_unknown_port_quarantined_at_identify(modbus, store):
    q = extract_seed(_cap(FC03, port=8080), store, modbus)
    assert isinstance(q, Quarantine) and q.stage == "identify"


def test_identify_by_port_among_bundled(specs, store):
    seed = extract_seed(_cap(specs["s7comm"].canonical, port=102), store, list(specs.values()))
    assert isinstance(seed, Seed) and seed.protocol_id == "s7comm"


def test_pipeline_deterministic(modbus, store):
    for payload in (FC03, b"\x00\x01\x00\x00\x00\x02\x01\x5c", b"\x01"):
        assert extract_seed(_cap(payload), store, modbus) == extract_seed(_cap(payload), store, modbus)


# -- emit -----------------------------------------------------------------------


def test_emit_document_schema(modbus, store):
    bus = Bus()
    sub = bus.subscribe("seed", "t")
    seed = extract_seed(_cap(FC03), store, modbus)
    assert emit_seed(seed, bus)
    (msg,) = sub.drain()
    assert msg.event == "seed"
    assert set(msg.data) == {"seed_id", "protocol_id", "fields", "provenance"}
    assert msg.data["fields"]["function_code"] == 3
    json.dumps(msg.document())
    assert Seed.from_document(msg.data, modbus).fields == seed.fields


def test_quarantine_not_published(modbus, store):
    bus = Bus()
    sub = bus.subscribe("seed", "t")
    log: list = []
    assert not emit_seed(extract_seed(_cap(b"\x01\x02"), store, modbus), bus, quarantine_log=log)
    assert sub.drain() == [] and len(log) == 1 and log[0]["stage"] == "decode"


def test_bus_down_buffers_then_delivers(modbus, store):
    bus = Bus()
    sub = bus.subscribe("seed", "t")
    agent = SeedAgent([modbus], store, bus)
    bus.disconnect()
    seeds = agent.run(bundled_path("modbus_50.pcap"))
    assert seeds and sub.drain() == []
    assert bus.buffered == len(seeds)
    assert bus.reconnect() == len(seeds)
    assert [m.data["seed_id"] for m in sub.drain()] == [s.seed_id for s in seeds]


# -- corpus ---------------------------------------------------------------------


def test_duplicate_captures_one_seed(modbus, store):
    bus = Bus()
    sub = bus.subscribe("seed", "t")
    agent = SeedAgent([modbus], store, bus)
    agent.process(_cap(FC03, ref="a"))
    agent.process(_cap(FC03, ref="b"))
    assert len(agent.corpus) == 1 and agent.corpus.duplicates == 1
    assert len(sub.drain()) == 1


def test_quarantine_file_written(modbus, store, tmp_path):
    path = tmp_path / "q.jsonl"
    agent = SeedAgent([modbus], store, quarantine_path=path)
    agent.process(_cap(b"\xff"))
    (line,) = path.read_text().splitlines()
    assert json.loads(line)["stage"] == "decode"


def test_capture_corpus_and_augmented_coverage(modbus, store):
    agent = SeedAgent([modbus], store)
    agent.run(bundled_path("modbus_50.pcap"))
    base = oracle_coverage("modbus_tcp", agent.corpus)
    added = agent.augment(modbus)
    assert added and all(s.provenance == "synthetic" for s in added)
    full = oracle_coverage("modbus_tcp", agent.corpus)
    assert full > base
    assert full >= Fraction(9, 10)
    assert full == Fraction(33, 36)  # frozen from the oracle above
    for seed in agent.corpus:
        frame = decode_frame(encode_frame(seed.frame(), modbus), modbus)
        assert validate_frame(frame, modbus).valid


@pytest.mark.parametrize("pid", ["s7comm", "ethernet_ip"])
def test_augmentation_seeds_are_valid(pid, store):
    spec = load_bundled(pid)
    agent = SeedAgent([spec], store)
    agent.process(_cap(spec.canonical, port=spec.default_port))
    agent.augment(spec)
    assert oracle_coverage(pid, agent.corpus) > Fraction(1, 2)
    assert all(s.validation.valid for s in agent.corpus)


# -- properties -----------------------------------------------------------------


@settings(max_examples=150)
@given(data=st.data())
def test_published_seeds_round_trip(modbus, store, data):
    frame = data.draw(spec_frames(modbus, valid=True))
    raw = encode_frame(frame, modbus)
    seed = extract_seed(_cap(raw), store, modbus)
    assert isinstance(seed, Seed)
    again = decode_frame(encode_frame(seed.frame(), modbus), modbus)
    assert again.values == seed.fields
    assert validate_frame(again, modbus).valid


@settings(max_examples=150)
@given(raw=st.binary(min_size=1, max_size=40))
def test_extraction_total_and_deterministic(modbus, store, raw):
    a = extract_seed(_cap(raw), store, modbus)
    b = extract_seed(_cap(raw), store, modbus)
    assert a == b
    if isinstance(a, Seed):
        assert validate_frame(decode_frame(raw, modbus), modbus).valid
    else:
        assert a.stage in STAGES
