from __future__ import annotations

import random
from decimal import Decimal
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icsfuzz.agents import FeedbackAgent
from icsfuzz.bus import Bus
from icsfuzz.feedback import (
    CLASSES,
    AnomalyHistory,
    FuzzyRule,
    Observation,
    ResponseClass,
    adjust_strategy,
    classify_response,
    record_anomaly,
    s_max,
    score,
    severity,
)
from icsfuzz.knowledge import KnowledgeStore, bundled_store_path, load_store
from icsfuzz.mutation import MutationRecord, MutationStrategy, TestCase

FC03_REPLY = bytes.fromhex("0001 0000 0017 01 03 14") + bytes(range(20))
EXC_REPLY = bytes.fromhex("0001 0000 0003 01 83 02")


def _obs(outcome="reply", reply=FC03_REPLY, rt=5.0, live="alive", res=0.0) -> Observation:
    return Observation("c1", outcome, rt, live, reply if outcome == "reply" else None, res)


def _fc16_case() -> TestCase:
    rec = MutationRecord("semantic", {"relation": "length:byte_count", "field": "byte_count", "delta": "4 vs 6"})
    data = bytes.fromhex("00010000000d01100000000204000000000000")
    return TestCase("c0t0000-000", "modbus_tcp-abc", "modbus_tcp", (rec,), data, MutationStrategy(), "semantic")


def _cents(draw_int: int) -> Decimal:
    return Decimal(draw_int) / 100


# -- classification -------------------------------------------------------------


def test_exception_reply_abnormal(modbus):
    assert classify_response(_obs(reply=EXC_REPLY), modbus) == ResponseClass("abnormal", "exception code")


def test_timeout_down_is_crash(modbus):
    assert classify_response(_obs("timeout", rt=100.0, live="down"), modbus) == ResponseClass("critical", "crash")


def test_valid_echo_normal(modbus):
    assert classify_response(_obs(), modbus) == ResponseClass("normal", "normal")


@pytest.mark.parametrize(
    "obs, expected",
    [
        (_obs("timeout", rt=100.0), ("critical", "timeout")),
        (_obs("connection-reset"), ("critical", "connection-reset")),
        (_obs("connection-refused", rt=0.0), ("critical", "connection-refused")),
        (_obs(live="degraded"), ("critical", "degraded")),
        (_obs(reply=b"\x00\x01"), ("abnormal", "malformed")),
        (_obs(reply=FC03_REPLY[:8] + b"\x13" + FC03_REPLY[9:]), ("abnormal", "invalid reply")),
        (_obs(rt=900.0), ("abnormal", "delay")),
    ],
)
def test_classification_table(modbus, obs, expected):
    got = classify_response(obs, modbus)
    assert (got.cls, got.reason) == expected


@settings(max_examples=300)
@given(
    outcome=st.sampled_from(["reply", "timeout", "connection-reset", "connection-refused"]),
    reply=st.binary(max_size=30),
    rt=st.floats(0, 5000),
    live=st.sampled_from(["alive", "degraded", "down"]),
)
def test_classification_total_and_pure(modbus, outcome, reply, rt, live):
    obs = _obs(outcome, reply, rt, live)
    a, b = classify_response(obs, modbus), classify_response(obs, modbus)
    assert a == b and a.cls in CLASSES
    assert (a.cls == "critical") == (outcome != "reply" or live != "alive")


def test_observation_invariants():
    with pytest.raises(ValueError):
        Observation("c", "timeout", -1.0, "alive")
    with pytest.raises(ValueError):
        Observation("c", "gone", 1.0, "alive")
    obs = _obs(res=3.5)
    assert Observation.from_message(obs.message()) == obs


# -- severity ----------------------------------------------------------------------


def test_crash_score_18(modbus):
    obs = _obs("timeout", rt=100.0, live="down")
    s = severity(obs, classify_response(obs, modbus), (1, 1, 1))
    assert (s.E, s.T, s.R, s.S) == (10, 8, 0, 18)


def test_normal_score_zero(modbus):
    s = severity(_obs(), classify_response(_obs(), modbus))
    assert s.S == 0 and (s.E, s.T, s.R) == (0, 0, 0)


def test_weighted_score_11():
    assert score(4, 3, 7, (2, 1, 0)).S == Decimal(11)


def test_resource_capped_at_ten(modbus):
    obs = _obs(res=42.0)
    assert severity(obs, classify_response(obs, modbus)).R == 10


def test_severity_bit_exact_1000_tuples():
    rng = random.Random(20240607)
    for _ in range(1000):
        ints = [rng.randint(0, 1000) for _ in range(3)] + [rng.randint(0, 1000) for _ in range(3)]
        w = [_cents(i) for i in ints[:3]]
        e, t, r = (_cents(i) for i in ints[3:])
        got = score(e, t, r, w)
        oracle = sum(Fraction(a, 100) * Fraction(b, 100) for a, b in zip(ints[:3], ints[3:]))
        assert Fraction(got.S) == oracle
        assert got.S - (got.weights[0] * got.E + got.weights[1] * got.T + got.weights[2] * got.R) == 0


@settings(max_examples=300)
@given(vals=st.lists(st.floats(0, 100, allow_nan=False), min_size=6, max_size=6))
def test_severity_identity_from_floats(vals):
    got = score(*vals[3:], weights=vals[:3])
    w = [Fraction(x) for x in got.weights]
    assert Fraction(got.S) == w[0] * Fraction(got.E) + w[1] * Fraction(got.T) + w[2] * Fraction(got.R)
    # operands are two-digit fixed point
    assert all(Fraction(x).denominator in (1, 2, 4, 5, 10, 20, 25, 50, 100) for x in (got.E, got.T, got.R, *got.weights))


def test_s_max_default():
    assert s_max() == 28 == 10 + 8 + 10
    assert s_max((2, 1, 0)) == 28


# -- strategy and fuzzy rule -------------------------------------------------------


def test_adjust_full_score_doubles():
    s = MutationStrategy(rho0=0.1, beta=1.0)
    new = adjust_strategy(s, score(10, 8, 10), s_max(), AnomalyHistory())
    assert new.rho == pytest.approx(0.2, abs=1e-12)
    assert new.feedback_score == 1.0


def test_adjust_zero_score_identity():
    s = MutationStrategy(rho0=0.1, field_priorities={"quantity": 2.0})
    new = adjust_strategy(s, score(0, 0, 0), s_max(), AnomalyHistory())
    assert new.rho == 0.1 and new.field_priorities == {"quantity": 2.0}


def test_damping_rule():
    hist = AnomalyHistory(10)
    for i in range(10):
        hist.add(anomalous=i < 9, alive=i < 2)
    assert hist.frequency == pytest.approx(0.9) and hist.stability == pytest.approx(0.2)
    s = MutationStrategy(rho0=0.1, beta=1.0)
    new = adjust_strategy(s, score(10, 8, 10), s_max(), hist)
    assert new.rho == pytest.approx(0.1, abs=1e-12)
    assert FuzzyRule().fires(hist)


@settings(max_examples=300)
@given(rho0=st.floats(0.01, 1), beta=st.floats(0, 4), a=st.integers(0, 2800), b=st.integers(0, 2800))
def test_adjust_monotone_and_oracle(rho0, beta, a, b):
    s = MutationStrategy(rho0=rho0, beta=beta)
    lo, hi = sorted((a, b))
    r_lo = adjust_strategy(s, score(_cents(lo), 0, 0), s_max(), AnomalyHistory()).rho
    r_hi = adjust_strategy(s, score(_cents(hi), 0, 0), s_max(), AnomalyHistory()).rho
    assert r_lo <= r_hi
    oracle = min(1.0, max(s.rho_min, rho0 * (1 + beta * float(Fraction(hi, 2800)))))
    assert r_hi == pytest.approx(oracle, rel=1e-12)


def test_priority_boost_capped(modbus):
    s = MutationStrategy(rho0=0.1)
    prio = s
    for _ in range(6):
        prio = adjust_strategy(prio, score(4, 0, 0), s_max(), AnomalyHistory(), implicated=["byte_count"],
                               spec=modbus, cap={"byte_count": 8 * 0.5})
    assert prio.field_priorities["byte_count"] == 4.0  # 0.5 doubled, capped at 8x


def test_publication_causality():
    bus = Bus()
    sub = bus.subscribe("strategy", "m")
    s = MutationStrategy(rho0=0.1)
    same = adjust_strategy(s, score(0, 0, 0), s_max(), AnomalyHistory(), bus=bus)
    assert same == s and sub.drain() == []
    new = adjust_strategy(s, score(4, 3, 0), s_max(), AnomalyHistory(), bus=bus)
    (msg,) = sub.drain()
    assert set(msg.data) == {"rho", "field_priorities", "direction_weights", "feedback_score"}
    assert msg.data["rho"] == new.rho == pytest.approx(0.1 * (1 + 7 / 28))


# -- knowledge records ----------------------------------------------------------


def test_record_crash_anomaly(modbus):
    store = load_store(bundled_store_path())
    store.path = None
    obs = _obs("timeout", rt=100.0, live="down")
    cls = classify_response(obs, modbus)
    entry = record_anomaly(severity(obs, cls), _fc16_case(), store, cls, obs=obs)
    assert {"crash", "modbus_tcp", "byte_count"} <= set(entry.keywords)
    assert entry.kind == "anomaly-record" and entry.source == "c0t0000-000"
    assert store.retrieve("crash modbus_tcp byte_count", k=1)[0].entry.id == entry.id


def test_record_skips_normal(modbus):
    store = KnowledgeStore()
    cls = classify_response(_obs(), modbus)
    assert record_anomaly(severity(_obs(), cls), _fc16_case(), store, cls) is None
    assert len(store) == 0


def test_identical_anomalies_distinct_ids(modbus):
    store = KnowledgeStore()
    obs = _obs("timeout", rt=100.0, live="down")
    cls = classify_response(obs, modbus)
    a = record_anomaly(severity(obs, cls), _fc16_case(), store, cls)
    b = record_anomaly(severity(obs, cls), _fc16_case(), store, cls)
    assert a.id != b.id and len(store) == 2


# -- agent loop -----------------------------------------------------------------


def test_agent_classifies_and_adjusts(modbus):
    bus = Bus()
    classified = bus.subscribe("response", "t")
    strategies = bus.subscribe("strategy", "t")
    agent = FeedbackAgent("feedback-0", bus, modbus, MutationStrategy(rho0=0.1), batch=4)
    case = _fc16_case()
    bus.publish("test_case", "test_case", case.message(), "mutation-0")
    for i in range(4):
        obs = Observation(case.case_id if i == 0 else f"x{i}", "timeout", 100.0, "down" if i == 0 else "alive")
        bus.publish("response", "response", obs.message(), "harness-0")
    assert agent.step() == 4
    out = [m for m in classified.drain() if m.event == "classified"]
    assert [m.data["class"] for m in out] == ["critical"] * 4
    assert out[0].data["reason"] == "crash" and out[0].data["severity"]["S"] == "18.00"
    (msg,) = strategies.drain()
    # mean S = (18 + 3 * 16) / 4 = 16.5
    assert msg.data["feedback_score"] == pytest.approx(16.5 / 28)
    assert agent.strategy.field_priorities["byte_count"] == 1.0  # spec priority 0.5, doubled
