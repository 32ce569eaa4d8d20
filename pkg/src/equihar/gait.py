"""Hoof-on / hoof-off detection on horse-limb tracks and timing evaluation.

Detection is two-stage. A hysteresis state machine on the low-passed rate
magnitude gives coarse stance and swing phases. Each transition is then
refined on the raw signals:

* hoof-on: peak of the zero-phase high-passed accel magnitude within
  +-60 ms of the swing-to-stance transition (the impact spike);
* hoof-off: the last sample below a fraction of the coming swing's peak
  rate, refined by extrapolating the rising edge back to zero rate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from .core import HORSE_LIMBS, Placement

HOOF_ON = "hoof_on"
HOOF_OFF = "hoof_off"
STANCE = "stance"
SWING = "swing"


@dataclass(frozen=True)
class HoofEvent:
    limb: Placement
    kind: str
    t_s: float

    def __post_init__(self):
        if self.kind not in (HOOF_ON, HOOF_OFF):
            raise ValueError(f"unknown event kind {self.kind!r}")


@dataclass(frozen=True)
class PhaseInterval:
    kind: str
    start: int  # sample index, inclusive
    end: int  # exclusive


@dataclass
class DetectorConfig:
    stance_dps: float = 50.0
    swing_dps: float = 150.0
    dwell_s: float = 0.040
    refractory_s: float = 0.100
    lowpass_hz: float = 10.0
    highpass_hz: float = 20.0
    impact_window_s: float = 0.060
    onset_fraction: float = 0.2
    edge_fraction: float = 0.5
    extrapolate_onset: bool = True

    @classmethod
    def from_dict(cls, doc: dict) -> "DetectorConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown detector settings: {sorted(unknown)}")
        return cls(**doc)


def _filt(kind, cutoff, rate, x):
    if len(x) < 16:
        return x
    sos = signal.butter(2, cutoff, kind, fs=rate, output="sos")
    return signal.sosfiltfilt(sos, x, axis=0)


def _valid_runs(valid):
    m = np.concatenate([[False], valid, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _phases_segment(g_lp, cfg: DetectorConfig, rate, offset):
    n = len(g_lp)
    dwell = max(1, math.ceil(cfg.dwell_s * rate - 1e-9))
    above = np.flatnonzero(g_lp > cfg.swing_dps)
    below = g_lp < cfg.stance_dps
    # indices where a below-threshold run of at least `dwell` samples starts
    sustained = []
    for s, e in _valid_runs(below):
        if e - s >= dwell:
            sustained.append(s)
    sustained = np.array(sustained, dtype=np.int64)

    state = SWING if g_lp[0] >= cfg.stance_dps else STANCE
    out = []
    start = 0
    pos = 0
    while True:
        if state == STANCE:
            j = np.searchsorted(above, pos, side="right")
            nxt = int(above[j]) if j < len(above) else None
        else:
            j = np.searchsorted(sustained, pos, side="right")
            nxt = int(sustained[j]) if j < len(sustained) else None
        if nxt is None or nxt >= n:
            out.append(PhaseInterval(state, offset + start, offset + n))
            break
        out.append(PhaseInterval(state, offset + start, offset + nxt))
        start = pos = nxt
        state = SWING if state == STANCE else STANCE
    return [p for p in out if p.end > p.start]


def detect_phases(track, config: DetectorConfig | None = None) -> list[PhaseInterval]:
    """Alternating stance / swing intervals from the rate magnitude.

    ``track`` needs ``gyro``, ``valid`` and ``rate_hz`` (a fused
    orientation track or a uniform track). Each valid run is segmented
    on its own.
    """
    cfg = config or DetectorConfig()
    out = []
    for a, b in _valid_runs(np.asarray(track.valid, dtype=bool)):
        if b - a < 2:
            continue
        g = np.linalg.norm(track.gyro[a:b], axis=1)
        g_lp = _filt("low", cfg.lowpass_hz, track.rate_hz, g)
        out.extend(_phases_segment(g_lp, cfg, track.rate_hz, a))
    return out


def _enforce(events: list[HoofEvent], refractory_s: float) -> list[HoofEvent]:
    out: list[HoofEvent] = []
    for e in sorted(events, key=lambda e: e.t_s):
        if out and out[-1].kind == e.kind:
            continue
        if out and e.t_s - out[-1].t_s < refractory_s:
            out.pop()
            continue
        out.append(e)
    return out


def detect_events(track, phases: Sequence[PhaseInterval], limb: Placement | None = None,
                  config: DetectorConfig | None = None) -> list[HoofEvent]:
    """Refine phase transitions into hoof events for one limb."""
    cfg = config or DetectorConfig()
    limb = Placement(track.device_id if limb is None else limb)
    rate = track.rate_hz
    n = len(track.gyro)
    if n == 0 or not phases:
        return []
    g = np.linalg.norm(track.gyro, axis=1)
    a_hp = _filt("high", cfg.highpass_hz, rate, np.linalg.norm(track.accel, axis=1))
    w = int(round(cfg.impact_window_s * rate))
    valid = np.asarray(track.valid, dtype=bool)

    def t_of(idx):
        return track.t0 + idx / rate

    events = []
    for prev, cur in zip(phases[:-1], phases[1:]):
        if prev.end != cur.start:
            continue
        k = cur.start
        if prev.kind == SWING and cur.kind == STANCE:
            lo, hi = max(prev.start, k - w), min(n, k + w + 1)
            seg = np.where(valid[lo:hi], a_hp[lo:hi], -np.inf)
            events.append(HoofEvent(limb, HOOF_ON, t_of(lo + int(np.argmax(seg)))))
        elif prev.kind == STANCE and cur.kind == SWING:
            peak = float(g[cur.start:cur.end].max())
            thr = cfg.onset_fraction * peak
            j = k
            while j > prev.start and g[j] >= thr:
                j -= 1
            idx = float(j)
            if cfg.extrapolate_onset:
                idx = _extrapolate_onset(g, j, cur.end, peak * cfg.edge_fraction, prev.start)
            events.append(HoofEvent(limb, HOOF_OFF, t_of(idx)))
    return _enforce(events, cfg.refractory_s)


def _extrapolate_onset(g, j, stop, edge_level, floor):
    """Zero-rate crossing of a line fitted to the rising edge after ``j``."""
    m = j + 1
    while m < stop and g[m] < edge_level:
        m += 1
    ks = np.arange(j + 1, min(m + 1, stop))
    if len(ks) < 2:
        return float(j)
    slope, icpt = np.polyfit(ks.astype(np.float64), g[ks], 1)
    if slope <= 0:
        return float(j)
    return float(np.clip(-icpt / slope, floor, j + 1))


def detect_all(tracks, limbs: Sequence[Placement] = HORSE_LIMBS,
               config: DetectorConfig | None = None) -> list[HoofEvent]:
    out = []
    for limb in limbs:
        if int(limb) not in tracks:
            continue
        tr = tracks[int(limb)]
        out.extend(detect_events(tr, detect_phases(tr, config), limb, config))
    return sorted(out, key=lambda e: (e.t_s, e.limb.value))


@dataclass
class TimingReport:
    n_truth: int
    n_detected: int
    matched: int
    misses: int
    false_positives: int
    mae_ms: float
    per_limb: dict[str, dict] = field(default_factory=dict)
    per_kind: dict[str, dict] = field(default_factory=dict)
    errors_ms: list[float] = field(default_factory=list, repr=False)
    statistic: str = "mean absolute error over matched events"

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("errors_ms")
        d["mae_ms"] = None if math.isnan(self.mae_ms) else self.mae_ms
        for group in (d["per_limb"], d["per_kind"]):
            for v in group.values():
                if v["mae_ms"] is not None and math.isnan(v["mae_ms"]):
                    v["mae_ms"] = None
        return d


def _greedy_match(det: list[float], tru: list[float], window: float):
    order = np.argsort(det, kind="stable")
    det_sorted = np.asarray(det, dtype=np.float64)[order]
    pairs = []
    for ti, t in enumerate(tru):
        lo = np.searchsorted(det_sorted, t - window, side="left")
        hi = np.searchsorted(det_sorted, t + window, side="right")
        for k in range(lo, hi):
            di = int(order[k])
            if abs(det[di] - t) <= window:
                pairs.append((abs(det[di] - t), ti, di))
    pairs.sort()
    used_t, used_d, out = set(), set(), []
    for _, ti, di in pairs:
        if ti in used_t or di in used_d:
            continue
        used_t.add(ti)
        used_d.add(di)
        out.append((ti, di, det[di] - tru[ti]))
    return out


def _summary(errors, n_truth, n_det):
    m = len(errors)
    return {
        "matched": m,
        "misses": n_truth - m,
        "false_positives": n_det - m,
        "mae_ms": float(np.mean(np.abs(errors)) * 1e3) if m else float("nan"),
    }


def evaluate_timing(detected: Sequence[HoofEvent], truth: Sequence[HoofEvent],
                    window: float = 0.100) -> TimingReport:
    """Greedy nearest-neighbour matching within +-``window`` per (limb, kind)."""
    keys = sorted({(e.limb, e.kind) for e in [*detected, *truth]})
    errors_all = []
    by_limb: dict[Placement, list] = {}
    by_kind: dict[str, list] = {}
    counts_limb: dict[Placement, list[int]] = {}
    counts_kind: dict[str, list[int]] = {}
    for limb, kind in keys:
        det = [e.t_s for e in detected if e.limb == limb and e.kind == kind]
        tru = [e.t_s for e in truth if e.limb == limb and e.kind == kind]
        errs = [m[2] for m in _greedy_match(det, tru, window)]
        errors_all.extend(errs)
        by_limb.setdefault(limb, []).extend(errs)
        by_kind.setdefault(kind, []).extend(errs)
        cl = counts_limb.setdefault(limb, [0, 0])
        cl[0] += len(tru)
        cl[1] += len(det)
        ck = counts_kind.setdefault(kind, [0, 0])
        ck[0] += len(tru)
        ck[1] += len(det)
    s = _summary(errors_all, len(truth), len(detected))
    return TimingReport(
        n_truth=len(truth),
        n_detected=len(detected),
        matched=s["matched"],
        misses=s["misses"],
        false_positives=s["false_positives"],
        mae_ms=s["mae_ms"],
        per_limb={l.slug: _summary(by_limb[l], *counts_limb[l]) for l in sorted(by_limb)},
        per_kind={k: _summary(by_kind[k], *counts_kind[k]) for k in sorted(by_kind)},
        errors_ms=[e * 1e3 for e in errors_all],
    )
