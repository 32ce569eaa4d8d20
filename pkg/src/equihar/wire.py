"""UDP packet codec and live ingestion.

Packet layout, little-endian::

    offset size field
    0      2    magic        0x4551
    2      1    version      1
    3      1    device_id    0..9
    4      4    seq          index of the first sample (wraps at 2**32)
    8      8    t_device_us  device clock at the first sample
    16     1    n            samples in this packet, 1..10
    17     1    flags        bit0: factory calibrated
    18     12n  samples      n x (ax, ay, az, gx, gy, gz) int16

A datagram of ``18 + 12 n`` bytes fits a single 1472-byte UDP payload.
"""

from __future__ import annotations

import heapq
import logging
import statistics
import struct
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .core import (
    ACCEL_LSB_G,
    GYRO_LSB_DPS,
    N_DEVICES,
    SAMPLE_RATE_HZ,
    CalibratedSample,
    Vec3,
    quantize_accel,
    quantize_gyro,
)

log = logging.getLogger(__name__)

MAGIC = 0x4551
VERSION = 1
HEADER = struct.Struct("<HBBIQBB")
HEADER_SIZE = HEADER.size
SAMPLE_SIZE = 12
MAX_SAMPLES = 10
FLAG_FACTORY_CALIBRATED = 0x01

REORDER_WINDOW_S = 0.200
OFFSET_WINDOW = 64

_SAMPLE_STRUCTS = {n: struct.Struct(f"<{6 * n}h") for n in range(1, MAX_SAMPLES + 1)}


class DecodeError(ValueError):
    """Base class for packet decode failures."""


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class EmptyBatch(DecodeError):
    pass


class BadCount(DecodeError):
    pass


class LengthMismatch(DecodeError):
    pass


@dataclass(frozen=True)
class Packet:
    device_id: int
    seq: int
    t_device_us: int
    samples: tuple[tuple[int, int, int, int, int, int], ...]
    flags: int = 0
    version: int = VERSION
    magic: int = MAGIC

    @property
    def n(self) -> int:
        return len(self.samples)


def encode_packet(p: Packet) -> bytes:
    n = len(p.samples)
    if not 1 <= n <= MAX_SAMPLES:
        raise ValueError(f"sample count {n} outside 1..{MAX_SAMPLES}")
    if not 0 <= p.device_id <= 255:
        raise ValueError(f"device id {p.device_id} does not fit a byte")
    flat = [v for s in p.samples for v in s]
    if len(flat) != 6 * n:
        raise ValueError("each sample needs exactly 6 values")
    head = HEADER.pack(p.magic, p.version, p.device_id, p.seq & 0xFFFFFFFF, p.t_device_us, n, p.flags)
    try:
        body = _SAMPLE_STRUCTS[n].pack(*flat)
    except struct.error as exc:
        raise ValueError(str(exc)) from None
    return head + body


def decode_packet(data: bytes) -> Packet:
    """Parse one datagram.

    Raises a :class:`DecodeError` subclass for every malformed input; no
    other exception escapes for ``bytes`` input.
    """
    if len(data) < HEADER_SIZE:
        raise Truncated(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    magic, version, device_id, seq, t_us, n, flags = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagic(f"magic 0x{magic:04x}")
    if version != VERSION:
        raise BadVersion(f"version {version}")
    if n == 0:
        raise EmptyBatch("packet carries no samples")
    if n > MAX_SAMPLES:
        raise BadCount(f"sample count {n} > {MAX_SAMPLES}")
    expected = HEADER_SIZE + SAMPLE_SIZE * n
    if len(data) < expected:
        raise Truncated(f"need {expected} bytes for {n} samples, got {len(data)}")
    if len(data) > expected:
        raise LengthMismatch(f"{len(data) - expected} trailing bytes")
    flat = _SAMPLE_STRUCTS[n].unpack_from(data, HEADER_SIZE)
    samples = tuple(flat[i : i + 6] for i in range(0, 6 * n, 6))
    return Packet(device_id, seq, t_us, samples, flags, version, magic)


def _signed32(d: int) -> int:
    d &= 0xFFFFFFFF
    return d - (1 << 32) if d & 0x80000000 else d


@dataclass
class IngestStats:
    accepted_packets: int = 0
    emitted_samples: int = 0
    duplicates: int = 0
    late: int = 0
    malformed: int = 0
    unknown_device: int = 0
    gaps: int = 0
    clamped: int = 0


@dataclass
class _DeviceState:
    last_seq: int | None = None  # unwrapped
    next_seq: int | None = None
    ref_raw: int | None = None
    ref_unwrapped: int = 0
    deltas: deque = field(default_factory=lambda: deque(maxlen=OFFSET_WINDOW))
    offset_s: float | None = None
    pending: list = field(default_factory=list)  # heap of (seq, arrival, tiebreak, packet)
    pending_seqs: set = field(default_factory=set)
    recent: deque = field(default_factory=lambda: deque(maxlen=512))
    recent_set: set = field(default_factory=set)
    last_t: float | None = None
    flags: int = 0

    def unwrap(self, seq: int) -> int:
        if self.ref_raw is None:
            self.ref_raw = seq
            self.ref_unwrapped = seq
            return seq
        u = self.ref_unwrapped + _signed32(seq - self.ref_raw)
        self.ref_raw = seq
        self.ref_unwrapped = u
        return u

    def remember(self, seq: int):
        if len(self.recent) == self.recent.maxlen:
            self.recent_set.discard(self.recent[0])
        self.recent.append(seq)
        self.recent_set.add(seq)


class Ingestor:
    """Stateful packet-to-sample converter for one capture.

    Per device it drops duplicates, reorders within a 200 ms buffer and
    maps device time to host time with the running median of
    ``host_recv - t_device`` over the last 64 packets. Output is a
    deterministic function of the packet bytes and arrival times.

    With ``clock="device"`` the offset is pinned to zero and timestamps are
    the device clock itself; use it when all devices share one clock, as
    in a replayed recording.
    """

    def __init__(self, rate_hz: float = SAMPLE_RATE_HZ, reorder_window_s: float = REORDER_WINDOW_S,
                 n_devices: int = N_DEVICES, clock: str = "host"):
        if clock not in ("host", "device"):
            raise ValueError(f"clock must be 'host' or 'device', got {clock!r}")
        self.clock = clock
        self.period = 1.0 / rate_hz
        self.reorder_window_s = reorder_window_s
        self.n_devices = n_devices
        self.devices: dict[int, _DeviceState] = {}
        self.stats = IngestStats()
        self._counter = 0

    def offset(self, device_id: int) -> float | None:
        st = self.devices.get(device_id)
        return None if st is None else st.offset_s

    def push(self, host_time: float, data: bytes) -> list[CalibratedSample]:
        try:
            pkt = decode_packet(data)
        except DecodeError as exc:
            self.stats.malformed += 1
            log.debug("malformed packet: %s", exc)
            return self._release_all(host_time)
        if pkt.device_id >= self.n_devices:
            self.stats.unknown_device += 1
            return self._release_all(host_time)

        st = self.devices.setdefault(pkt.device_id, _DeviceState())
        seq = st.unwrap(pkt.seq)
        if seq in st.recent_set or seq in st.pending_seqs:
            self.stats.duplicates += 1
            return self._release_all(host_time)
        if st.next_seq is not None and seq < st.next_seq:
            self.stats.late += 1
            return self._release_all(host_time)

        if self.clock == "device":
            st.offset_s = 0.0
        else:
            st.deltas.append(host_time - pkt.t_device_us * 1e-6)
            st.offset_s = statistics.median(st.deltas)
        st.flags = pkt.flags
        self._counter += 1
        heapq.heappush(st.pending, (seq, host_time, self._counter, pkt))
        st.pending_seqs.add(seq)
        return self._release_all(host_time)

    def flush(self) -> list[CalibratedSample]:
        out = []
        for dev in sorted(self.devices):
            st = self.devices[dev]
            while st.pending:
                out.extend(self._emit(dev, st))
        return out

    def _release_all(self, now: float) -> list[CalibratedSample]:
        out = []
        for dev in sorted(self.devices):
            st = self.devices[dev]
            while st.pending:
                head_seq = st.pending[0][0]
                if st.next_seq is not None and head_seq == st.next_seq:
                    out.extend(self._emit(dev, st))
                    continue
                oldest = min(item[1] for item in st.pending)
                if now - oldest > self.reorder_window_s:
                    out.extend(self._emit(dev, st))
                    continue
                break
        return out

    def _emit(self, dev: int, st: _DeviceState) -> list[CalibratedSample]:
        seq, _arrival, _, pkt = heapq.heappop(st.pending)
        st.pending_seqs.discard(seq)
        if st.next_seq is not None and seq > st.next_seq:
            self.stats.gaps += 1
        st.last_seq = seq
        st.next_seq = seq + pkt.n
        st.remember(seq)
        self.stats.accepted_packets += 1

        t_first = pkt.t_device_us * 1e-6 + st.offset_s
        out = []
        for i, s in enumerate(pkt.samples):
            t = t_first + i * self.period
            if st.last_t is not None and t <= st.last_t:
                # offset estimate moved backwards by more than one period
                t = st.last_t + 1e-6
                self.stats.clamped += 1
            st.last_t = t
            out.append(
                CalibratedSample(
                    dev,
                    t,
                    Vec3(s[0] * ACCEL_LSB_G, s[1] * ACCEL_LSB_G, s[2] * ACCEL_LSB_G),
                    Vec3(s[3] * GYRO_LSB_DPS, s[4] * GYRO_LSB_DPS, s[5] * GYRO_LSB_DPS),
                    seq + i,
                )
            )
        self.stats.emitted_samples += len(out)
        return out


def ingest(packets: Iterable[tuple[float, bytes]], state: Ingestor | None = None) -> Iterator[CalibratedSample]:
    """Convert an arrival-ordered stream of ``(host_recv_time, datagram)``
    into calibrated samples; the state is flushed when the stream ends."""
    state = state if state is not None else Ingestor()
    for host_time, data in packets:
        yield from state.push(host_time, data)
    yield from state.flush()


def table_packets(samples, rate_hz: float = SAMPLE_RATE_HZ,
                  samples_per_packet: int = 4) -> list[tuple[float, bytes]]:
    """Re-encode a stored sample table as a datagram stream.

    The device clock is the table's own time axis, in microseconds, and
    ``seq`` counts sample periods from each device's first sample, so a
    gap in the table becomes a gap in ``seq``. Values are re-quantized to
    int16 counts, which is lossless for tables that came off the wire.
    Returns ``(send_time_s, datagram)`` ordered by send time, where the
    send time is that of the packet's last sample.
    """
    if not 1 <= samples_per_packet <= MAX_SAMPLES:
        raise ValueError(f"samples_per_packet outside 1..{MAX_SAMPLES}")
    if len(samples) and samples.t_s.min() < 0:
        raise ValueError("negative timestamps cannot be carried by the unsigned device clock")
    period = 1.0 / rate_hz
    out = []
    for d in samples.devices():
        tab = samples.for_device(d)
        t = tab.t_s
        raw = np.concatenate([quantize_accel(tab.accel), quantize_gyro(tab.gyro)], axis=1).tolist()
        k = np.rint((t - t[0]) / period).astype(np.int64)
        # packet boundaries: fixed size, plus every break in the sample grid
        brk = np.flatnonzero(np.diff(k) != 1) + 1
        for seg in np.split(np.arange(len(t)), brk):
            for s in range(0, len(seg), samples_per_packet):
                idx = seg[s : s + samples_per_packet]
                pkt = Packet(d, int(k[idx[0]]) & 0xFFFFFFFF, int(round(t[idx[0]] * 1e6)),
                             tuple(tuple(raw[i]) for i in idx))
                out.append((float(t[idx[-1]]), encode_packet(pkt)))
    out.sort(key=lambda item: item[0])
    return out
