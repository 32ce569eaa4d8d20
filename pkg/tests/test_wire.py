import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equihar.core import CalibratedSample, Vec3
from equihar.session import (
    Annotation,
    ColumnMismatchError,
    MissingManifestError,
    NonMonotoneTimeError,
    SampleTable,
    SessionError,
    SessionManifest,
    load_session,
    read_session,
    save_session,
)
from equihar.sim import GaitParams, ScriptStep, simulate_session
from equihar.wire import (
    HEADER_SIZE,
    BadCount,
    BadMagic,
    BadVersion,
    DecodeError,
    EmptyBatch,
    Ingestor,
    LengthMismatch,
    Packet,
    Truncated,
    decode_packet,
    encode_packet,
    ingest,
    table_packets,
)

int16 = st.integers(-32768, 32767)
packets = st.builds(
    Packet,
    device_id=st.integers(0, 9),
    seq=st.integers(0, 2**32 - 1),
    t_device_us=st.integers(0, 2**64 - 1),
    samples=st.lists(st.tuples(*[int16] * 6), min_size=1, max_size=10).map(tuple),
    flags=st.integers(0, 255),
)


def _pkt(dev=3, seq=0, t_us=0, n=2, fill=0):
    return Packet(dev, seq, t_us, tuple((fill,) * 6 for _ in range(n)))


def test_encoded_length():
    assert HEADER_SIZE == 18
    assert len(encode_packet(_pkt(n=2))) == 42


def test_header_layout_is_little_endian():
    b = encode_packet(Packet(7, 0x01020304, 0x1122334455667788, ((1, 2, 3, 4, 5, 6),), flags=1))
    assert b[:2] == b"\x51\x45"
    assert b[2] == 1 and b[3] == 7
    assert b[4:8] == bytes([4, 3, 2, 1])
    assert b[8:16] == bytes.fromhex("8877665544332211")
    assert b[16] == 1 and b[17] == 1
    assert struct.unpack("<6h", b[18:]) == (1, 2, 3, 4, 5, 6)


def test_physical_scaling_after_decode():
    p = decode_packet(encode_packet(Packet(0, 0, 0, ((2048, 0, 0, 16384, 0, 0),))))
    ing = Ingestor()
    out = ing.push(1.0, encode_packet(p)) + ing.flush()
    assert out[0].accel.x == 1.0
    assert out[0].gyro.x == 1000.0


@given(packets)
def test_round_trip(p):
    b = encode_packet(p)
    assert len(b) == 18 + 12 * p.n
    assert decode_packet(b) == p


@pytest.mark.parametrize("n", [0, 11])
def test_encode_rejects_bad_count(n):
    with pytest.raises(ValueError):
        encode_packet(_pkt(n=n) if n else Packet(0, 0, 0, ()))


def test_decode_error_kinds():
    good = encode_packet(_pkt(n=2))
    with pytest.raises(BadMagic):
        decode_packet(b"\x00\x00" + good[2:])
    with pytest.raises(BadVersion):
        decode_packet(good[:2] + b"\x02" + good[3:])
    with pytest.raises(Truncated):
        decode_packet(good[:17])
    with pytest.raises(Truncated):
        decode_packet(good[:-1])
    with pytest.raises(EmptyBatch):
        decode_packet(good[:16] + b"\x00" + good[17:18])
    with pytest.raises(BadCount):
        decode_packet(good[:16] + b"\x0b" + good[17:])
    with pytest.raises(LengthMismatch):
        decode_packet(good + b"\x00")
    kinds = {BadMagic, BadVersion, Truncated, EmptyBatch, BadCount, LengthMismatch}
    assert all(issubclass(k, DecodeError) for k in kinds) and len(kinds) == 6


@given(st.binary(max_size=200))
def test_decode_is_total(data):
    try:
        decode_packet(data)
    except DecodeError:
        pass


@given(packets, st.data())
def test_decode_is_total_on_mutations(p, data):
    b = bytearray(encode_packet(p))
    for _ in range(data.draw(st.integers(1, 5))):
        i = data.draw(st.integers(0, len(b) - 1))
        b[i] = data.draw(st.integers(0, 255))
    cut = data.draw(st.integers(0, len(b)))
    try:
        decode_packet(bytes(b[:cut]))
    except DecodeError:
        pass


# ------------------------------------------------------------------ ingest


def _stream(n_packets=50, per=4, dev=0, delta=5.0, seq0=0):
    period = 1 / 130
    out = []
    for i in range(n_packets):
        t_us = int(round(i * per * period * 1e6))
        pkt = Packet(dev, (seq0 + i * per) & 0xFFFFFFFF, t_us, tuple((i, 0, 2048, 0, 0, k) for k in range(per)))
        out.append((t_us * 1e-6 + delta, encode_packet(pkt)))
    return out


def test_in_order_stream_emits_everything_monotone():
    out = list(ingest(_stream()))
    assert len(out) == 200
    t = [s.t_s for s in out]
    assert all(b > a for a, b in zip(t, t[1:]))


def test_duplicate_packet_is_dropped():
    s = _stream(10)
    dup = s[:5] + [s[4]] + s[5:]
    ing = Ingestor()
    a = list(ingest(s))
    b = list(ingest(dup, ing))
    assert a == b
    assert ing.stats.duplicates == 1


def test_offset_exact_for_constant_delay():
    ing = Ingestor()
    out = list(ingest(_stream(delta=5.0), ing))
    assert ing.offset(0) == pytest.approx(5.0, abs=1e-12)
    assert out[0].t_s == pytest.approx(5.0, abs=1e-12)


def test_sequence_wraparound():
    out = list(ingest(_stream(20, seq0=2**32 - 10)))
    assert len(out) == 80
    seqs = [s.seq for s in out]
    assert seqs == list(range(seqs[0], seqs[0] + 80))


def test_reorder_within_window():
    s = _stream(10)
    swapped = list(s)
    (t3, b3), (t4, b4) = swapped[3], swapped[4]
    swapped[3], swapped[4] = (t3, b4), (t4, b3)
    a, b = list(ingest(swapped)), list(ingest(s))
    assert [(x.seq, x.accel, x.gyro) for x in a] == [(x.seq, x.accel, x.gyro) for x in b]
    assert max(abs(x.t_s - y.t_s) for x, y in zip(a, b)) < 1e-3


def test_malformed_and_unknown_counted():
    s = _stream(5)
    bad = [(s[0][0], b"junk"), (s[0][0], encode_packet(_pkt(dev=12)))]
    ing = Ingestor()
    out = list(ingest(s[:1] + bad + s[1:], ing))
    assert len(out) == 20
    assert ing.stats.malformed == 1 and ing.stats.unknown_device == 1


def test_ingest_deterministic():
    s = _stream(30)
    assert list(ingest(s)) == list(ingest(s))


@given(st.lists(st.tuples(st.floats(0, 100, allow_nan=False), st.binary(max_size=80)), max_size=30))
def test_ingest_never_raises_on_garbage(items):
    items.sort(key=lambda x: x[0])
    out = list(ingest(items))
    assert all(isinstance(s, CalibratedSample) for s in out)


def test_simulated_stream_recovered_exactly():
    sim = simulate_session([ScriptStep(3.0, GaitParams.preset("trot"))], seed=4)
    out = list(ingest(sim.packets()))
    assert len(out) == 10 * len(sim.t)
    for d in range(10):
        mine = [s for s in out if s.device_id == d]
        acc = np.array([s.accel for s in mine])
        np.testing.assert_array_equal(acc, sim.accel(d))
        t = np.array([s.t_s for s in mine])
        assert np.all(np.diff(t) > 0)


def test_device_clock_mode_uses_device_time():
    ing = Ingestor(clock="device")
    out = list(ingest(_stream(delta=123.0), ing))
    assert out[0].t_s == 0.0
    assert out[4].t_s == pytest.approx(4 / 130, abs=1e-6)
    with pytest.raises(ValueError):
        Ingestor(clock="gps")


def test_table_packets_round_trip():
    sim = simulate_session([ScriptStep(2.0, GaitParams.preset("walk"))], seed=1)
    tab = sim.to_samples()
    back = SampleTable.from_samples(ingest(table_packets(tab), Ingestor(clock="device")))
    order = np.lexsort((back.t_s, back.device))
    np.testing.assert_array_equal(back.device[order], tab.device)
    np.testing.assert_array_equal(back.accel[order], tab.accel)
    np.testing.assert_array_equal(back.gyro[order], tab.gyro)
    assert np.abs(back.t_s[order] - tab.t_s).max() < 1e-6


def test_table_packets_split_at_gaps():
    t = np.r_[np.arange(10), np.arange(20, 25)] / 130
    tab = SampleTable(t, np.zeros(15, int), np.zeros((15, 3)), np.zeros((15, 3)))
    pk = [decode_packet(b) for _, b in table_packets(tab)]
    assert [p.seq for p in pk] == [0, 4, 8, 20, 24]
    assert sum(p.n for p in pk) == 15


# ----------------------------------------------------------------- sessions


def test_empty_session_round_trip(tmp_path):
    m = SessionManifest("empty")
    save_session(tmp_path, m, SampleTable.empty())
    m2, s2 = load_session(tmp_path)
    assert m2 == m and len(s2) == 0


def test_simulated_session_round_trip_is_exact(tmp_path):
    sim = simulate_session([ScriptStep(2.0, GaitParams.preset("halt")), ScriptStep(3.0, GaitParams.preset("canter"))],
                           seed=9)
    tab = sim.to_samples()
    save_session(tmp_path, sim.manifest(), tab, annotations=sim.truth.labels, truth_events=sim.truth.events)
    s = read_session(tmp_path)
    assert s.manifest == sim.manifest()
    for name in ("t_s", "device", "accel", "gyro"):
        np.testing.assert_array_equal(getattr(s.samples, name), getattr(tab, name))
    assert s.annotations == sim.truth.labels
    assert s.truth_events == sim.truth.events
    assert s.has_truth


def test_row_count_arithmetic():
    sim = simulate_session([ScriptStep(60.0, GaitParams.preset("halt"))], seed=0)
    assert len(sim.to_samples()) == 60 * 130 * 10
    assert 45 * 60 * 130 * 10 == 3_510_000


def test_missing_manifest(tmp_path):
    with pytest.raises(MissingManifestError):
        load_session(tmp_path)


def test_column_mismatch(tmp_path):
    save_session(tmp_path, SessionManifest("x"), SampleTable.empty())
    (tmp_path / "samples.csv").write_text("t_s,device,ax_g\n")
    with pytest.raises(ColumnMismatchError):
        load_session(tmp_path)


def test_non_monotone_time(tmp_path):
    bad = SampleTable([0.0, 0.0], [1, 1], np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(NonMonotoneTimeError):
        save_session(tmp_path, SessionManifest("x"), bad)
    save_session(tmp_path, SessionManifest("x"), SampleTable([0.0, 1.0], [1, 1], np.zeros((2, 3)), np.zeros((2, 3))))
    text = (tmp_path / "samples.csv").read_text().splitlines()
    (tmp_path / "samples.csv").write_text("\n".join([text[0], text[2], text[1]]) + "\n")
    with pytest.raises(NonMonotoneTimeError):
        load_session(tmp_path)


def test_manifest_needs_all_devices(tmp_path):
    save_session(tmp_path, SessionManifest("x"), SampleTable.empty())
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["devices"] = doc["devices"][:5]
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(SessionError):
        load_session(tmp_path)


@given(st.lists(st.floats(-16, 16, allow_nan=False), min_size=1, max_size=20))
def test_sample_values_round_trip(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("s")
    n = len(vals)
    acc = np.array(vals)[:, None].repeat(3, axis=1)
    tab = SampleTable(np.arange(n) / 130, np.zeros(n, int), acc, -acc)
    save_session(path, SessionManifest("v"), tab, annotations=[Annotation("gait", "walk", 0.0, 1.5)])
    _, back = load_session(path)
    np.testing.assert_array_equal(back.accel, acc)
    np.testing.assert_array_equal(back.t_s, tab.t_s)
