"""Deterministic synthetic horse and rider generator.

The signal model is phenomenological. A horse limb stands still during
stance (gyro zero, accel = gravity plus an exponentially decaying impact
at hoof-on). During swing it flexes forward and extends back: the rate
about the sensor x (sagittal) axis is one full sine period, so the limb
lands in the attitude it left with. The sagittal angle is integrated in
closed form and the accelerometer is rotated with it, so accel and gyro
stay kinematically consistent and an orientation filter can track the
limb.

The rider waist carries a low-passed mix of the limb accelerations
(horse trunk proxy). Every other rider sensor is the waist motion,
optionally delayed, plus an independent sinusoidal burst component and
noise. Rider sensors rotate with their own rates and their specific force
is expressed in the rotated sensor frame, so after fusion the injected
component reappears in the earth frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numba
import numpy as np
from scipy import signal

from .core import (
    ACCEL_LSB_G,
    GYRO_LSB_DPS,
    HORSE_LIMBS,
    N_DEVICES,
    RIDER_LIMBS,
    SAMPLE_RATE_HZ,
    Placement,
    quantize_accel,
    quantize_gyro,
    quat_conj,
    quat_rotate,
)
from .gait import HOOF_OFF, HOOF_ON, HoofEvent
from .session import Annotation, SampleTable, SessionManifest
from .wire import MAX_SAMPLES, Packet, encode_packet

GAITS = ("halt", "walk", "trot", "canter", "jump")

IMPACT_TAU_S = 0.08
SWING_FORWARD_G = 0.8
SWING_LIFT_G = 0.4
WAIST_TRANSMISSION = 0.5
WAIST_LOWPASS_HZ = 5.0
WAIST_GYRO_DPS_PER_G = 20.0
RIDER_GYRO_DPS_PER_G = 40.0
RIDER_GAIN = {
    Placement.RIDER_HEAD: (0.3, np.array([0.0, 0.0, 1.0])),
    Placement.RIDER_LEFT_ARM: (1.0, np.array([1.0, 0.0, 0.0])),
    Placement.RIDER_RIGHT_ARM: (1.0, np.array([1.0, 0.0, 0.0])),
    Placement.RIDER_LEFT_LEG: (0.8, np.array([0.0, 1.0, 0.0])),
    Placement.RIDER_RIGHT_LEG: (0.8, np.array([0.0, 1.0, 0.0])),
}
RIDER_PHASE = {p: 0.7 * i for i, p in enumerate(RIDER_LIMBS)}

# limb order LF, RF, LH, RH; phase = cycle fraction of hoof-on
_PRESETS = {
    "halt": dict(stride_hz=0.0, duty=(1.0,) * 4, phase=(0.0,) * 4, impact_g=0.0, swing_peak_dps=0.0),
    "walk": dict(stride_hz=0.9, duty=(0.6,) * 4, phase=(0.25, 0.75, 0.0, 0.5), impact_g=1.5, swing_peak_dps=300.0),
    "trot": dict(stride_hz=1.4, duty=(0.45,) * 4, phase=(0.0, 0.5, 0.5, 0.0), impact_g=2.5, swing_peak_dps=450.0),
    "canter": dict(stride_hz=1.8, duty=(0.4,) * 4, phase=(0.6, 0.3, 0.3, 0.0), impact_g=3.0, swing_peak_dps=550.0),
    "jump": dict(stride_hz=1.0, duty=(0.35, 0.35, 0.5, 0.5), phase=(0.0, 0.03, 0.1, 0.1), impact_g=4.5,
                 swing_peak_dps=600.0),
}
_CANTER_RIGHT_PHASE = (0.3, 0.6, 0.0, 0.3)


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class GaitParams:
    gait: str
    stride_hz: float = 0.0
    duty: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    phase: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    impact_g: float = 0.0
    swing_peak_dps: float = 0.0
    noise_accel_g: float = 0.01
    noise_gyro_dps: float = 0.5
    lateral_dps: float = 0.0
    lateral_sway_g: float = 0.0

    def __post_init__(self):
        if self.gait not in GAITS:
            raise ScriptError(f"unknown gait {self.gait!r}")
        if isinstance(self.duty, (int, float)):
            object.__setattr__(self, "duty", (float(self.duty),) * 4)
        object.__setattr__(self, "duty", tuple(float(d) for d in self.duty))
        object.__setattr__(self, "phase", tuple(float(p) for p in self.phase))
        if len(self.duty) != 4 or len(self.phase) != 4:
            raise ScriptError("duty and phase need one value per horse limb")
        if self.moving:
            if self.stride_hz <= 0:
                raise ScriptError(f"{self.gait} needs a positive stride frequency")
            if not all(0.0 < d < 1.0 for d in self.duty):
                raise ScriptError("duty factors must lie in (0, 1)")
        if not all(0.0 <= p < 1.0 for p in self.phase):
            raise ScriptError("phase offsets must lie in [0, 1)")
        if self.noise_accel_g < 0 or self.noise_gyro_dps < 0:
            raise ScriptError("noise sigmas must be non-negative")

    @property
    def moving(self) -> bool:
        return self.gait != "halt"

    @classmethod
    def preset(cls, gait: str, *, lead: str = "left", **overrides) -> "GaitParams":
        if gait not in _PRESETS:
            raise ScriptError(f"unknown gait {gait!r}")
        kw = dict(_PRESETS[gait])
        if gait == "canter" and lead == "right":
            kw["phase"] = _CANTER_RIGHT_PHASE
        kw.update(overrides)
        return cls(gait, **kw)


@dataclass(frozen=True)
class RiderParams:
    amplitude_g: float = 0.0
    frequency_hz: float = 2.0
    burst_on_s: float = 2.0
    burst_off_s: float = 1.0


@dataclass(frozen=True)
class ScriptStep:
    duration: float
    params: GaitParams
    task: str | None = None
    rider: RiderParams = field(default_factory=RiderParams)

    def __post_init__(self):
        if not self.duration > 0:
            raise ScriptError("step duration must be positive")


@dataclass
class GroundTruth:
    events: list[HoofEvent]
    labels: list[Annotation]

    def track(self, name: str) -> list[Annotation]:
        return [a for a in self.labels if a.track == name]

    def events_for(self, limb: Placement, kind: str | None = None) -> list[HoofEvent]:
        return [e for e in self.events if e.limb == limb and (kind is None or e.kind == kind)]


def _swing_local(s, peak, lateral):
    """Local-frame swing signals for swing progress ``s`` in [0, 1]."""
    s = np.asarray(s, dtype=np.float64)
    bump = np.sin(np.pi * s)
    wave = np.sin(2.0 * np.pi * s)
    scale = peak / 300.0 if peak > 0 else 0.0
    gyro = np.stack([peak * wave, np.zeros_like(s), lateral * bump], axis=-1)
    accel = np.stack([np.zeros_like(s), SWING_FORWARD_G * scale * wave, 1.0 + SWING_LIFT_G * scale * wave], axis=-1)
    return accel, gyro


def limb_cycle(params: GaitParams, phase: float, limb: int = 0, rng: np.random.Generator | None = None):
    """Noise-free (unless ``rng`` is given) limb signal at a cycle phase.

    ``phase`` is the limb's own cycle fraction with 0 at hoof-on. Values
    are in the limb's neutral frame (z up); the session generator rotates
    them by the sagittal swing angle.

    Returns
    -------
    accel : ndarray (3,) [g]
    gyro : ndarray (3,) [dps]
    """
    accel = np.array([0.0, 0.0, 1.0])
    gyro = np.zeros(3)
    if params.moving:
        duty = params.duty[limb]
        if phase < duty:
            dt = phase / params.stride_hz
            accel[2] += params.impact_g * math.exp(-dt / IMPACT_TAU_S)
        else:
            s = (phase - duty) / (1.0 - duty)
            a, g = _swing_local(s, params.swing_peak_dps, params.lateral_dps)
            accel, gyro = a, g
    if rng is not None:
        accel = accel + rng.normal(0.0, params.noise_accel_g, 3)
        gyro = gyro + rng.normal(0.0, params.noise_gyro_dps, 3)
    return accel, gyro


_EPS = 1e-9


def _limb_schedule(script: Sequence[ScriptStep], limb: int, total: float,
                   min_stance: float, min_swing: float, guard: float):
    """Return (initial_stance, times, kinds) with alternating kinds."""
    times: list[float] = []
    kinds: list[str] = []
    state = None
    t0 = 0.0
    cyc = 0.0
    for step in script:
        p = step.params
        t1 = t0 + step.duration
        if not p.moving:
            new_state = True
            evts = []
        else:
            f, d, ph = p.stride_hz, p.duty[limb], p.phase[limb]
            evts = []
            last_before = (-math.inf, HOOF_OFF)
            for target, kind in ((0.0, HOOF_ON), (d, HOOF_OFF)):
                # cycle index n with cyc + f (t - t0) = n + ph + target
                n = math.floor(cyc - ph - target) - 1
                while True:
                    t = t0 + (n + ph + target - cyc) / f
                    if t >= t1 - _EPS:
                        break
                    if t > t0 + _EPS:
                        evts.append((t, kind))
                    elif t > last_before[0]:
                        last_before = (t, kind)
                    n += 1
            # state at t0 follows from the same event arithmetic, so an
            # event landing on the boundary cannot be counted twice
            new_state = last_before[1] == HOOF_ON
            if state is None and abs(last_before[0] - t0) <= _EPS:
                evts.append((t0, last_before[1]))
            evts.sort()
            cyc += f * step.duration
        if state is None:
            initial = new_state
            if evts and evts[0][0] <= t0:
                initial = evts[0][1] == HOOF_OFF
        elif state != new_state:
            times.append(t0)
            kinds.append(HOOF_OFF if state else HOOF_ON)
        for t, k in evts:
            times.append(t)
            kinds.append(k)
        if evts:
            state = evts[-1][1] == HOOF_ON
        else:
            state = new_state
        t0 = t1

    # drop phases too short to be physical, keeping alternation
    changed = True
    while changed:
        changed = False
        while times and times[0] < guard:
            initial = kinds[0] == HOOF_ON
            del times[0], kinds[0]
            changed = True
        while times and times[-1] > total - guard:
            del times[-1], kinds[-1]
            changed = True
        for i in range(len(times) - 1):
            minimum = min_stance if kinds[i] == HOOF_ON else min_swing
            if times[i + 1] - times[i] < minimum:
                del times[i : i + 2], kinds[i : i + 2]
                changed = True
                break
    return initial, np.array(times), kinds


def _step_index(script, t):
    ends = np.cumsum([s.duration for s in script])
    return np.minimum(np.searchsorted(ends, t, side="right"), len(script) - 1)


@dataclass
class SimulatedSession:
    """Simulator output on the truth clock (t = k / rate)."""

    t: np.ndarray
    raw: dict[int, np.ndarray]  # device -> (n, 6) int16
    truth: GroundTruth
    rider_truth: dict[Placement, np.ndarray]
    rate_hz: float = SAMPLE_RATE_HZ
    seed: int = 0
    session_id: str = "sim"

    @property
    def duration(self) -> float:
        return len(self.t) / self.rate_hz

    def accel(self, device: int) -> np.ndarray:
        return self.raw[device][:, :3] * ACCEL_LSB_G

    def gyro(self, device: int) -> np.ndarray:
        return self.raw[device][:, 3:] * GYRO_LSB_DPS

    def to_samples(self, devices: Sequence[int] | None = None) -> SampleTable:
        devices = sorted(self.raw) if devices is None else sorted(devices)
        n = len(self.t)
        if not devices or n == 0:
            return SampleTable.empty()
        t = np.tile(self.t, len(devices))
        dev = np.repeat(np.array(devices, dtype=np.int64), n)
        acc = np.concatenate([self.accel(d) for d in devices])
        gyr = np.concatenate([self.gyro(d) for d in devices])
        return SampleTable(t, dev, acc, gyr)

    def manifest(self, devices: Sequence[int] | None = None) -> SessionManifest:
        m = SessionManifest(self.session_id, 0.0, self.rate_hz)
        present = set(self.raw if devices is None else devices)
        for d, rec in m.devices.items():
            rec.present = d in present
        return m

    def packets(self, samples_per_packet: int = 4, seed: int | None = None,
                devices: Sequence[int] | None = None) -> list[tuple[float, bytes]]:
        """Wire-format stream ordered by host arrival time.

        Each device clock starts at a random boot offset, sequence numbers
        start at a random 32-bit value (exercising wrap-around) and arrival
        latency is 2 ms plus exponential jitter (mean 1 ms).
        """
        if not 1 <= samples_per_packet <= MAX_SAMPLES:
            raise ValueError("samples_per_packet outside 1..10")
        rng = np.random.default_rng(self.seed if seed is None else seed)
        period = 1.0 / self.rate_hz
        out = []
        for d in sorted(self.raw) if devices is None else sorted(devices):
            raw = self.raw[d]
            boot_us = int(rng.integers(1_000_000, 100_000_000))
            seq0 = int(rng.integers(0, 2**32))
            starts = np.arange(0, len(raw), samples_per_packet)
            latency = 0.002 + rng.exponential(0.001, len(starts))
            for i, k in enumerate(starts):
                block = raw[k : k + samples_per_packet]
                t_first = self.t[k]
                pkt = Packet(d, (seq0 + int(k)) & 0xFFFFFFFF, boot_us + int(round(t_first * 1e6)),
                             tuple(tuple(int(v) for v in row) for row in block))
                arrival = t_first + (len(block) - 1) * period + latency[i]
                out.append((float(arrival), encode_packet(pkt)))
        out.sort(key=lambda item: item[0])
        return out


def _labels(script: Sequence[ScriptStep]) -> list[Annotation]:
    out = []
    for track, key in (("gait", lambda s: s.params.gait), ("task", lambda s: s.task)):
        t0 = 0.0
        cur = None
        for step in script:
            lab = key(step)
            t1 = t0 + step.duration
            if cur is not None and cur[0] == lab:
                cur = (lab, cur[1], t1)
            else:
                if cur is not None and cur[0] is not None:
                    out.append(Annotation(track, cur[0], cur[1], cur[2]))
                cur = (lab, t0, t1)
            t0 = t1
        if cur is not None and cur[0] is not None:
            out.append(Annotation(track, cur[0], cur[1], cur[2]))
    return out


@numba.njit(cache=True)
def _integrate_rate(gyr_dps, dt):
    """Sensor-to-earth attitude from body rates, starting level:
    ``q[k] = q[k-1] (x) exp(w[k] dt / 2)``."""
    n = gyr_dps.shape[0]
    out = np.empty((n, 4))
    w, x, y, z = 1.0, 0.0, 0.0, 0.0
    deg = np.pi / 180.0
    for k in range(n):
        gx = gyr_dps[k, 0] * deg
        gy = gyr_dps[k, 1] * deg
        gz = gyr_dps[k, 2] * deg
        rate = np.sqrt(gx * gx + gy * gy + gz * gz)
        half = 0.5 * rate * dt
        if rate > 0.0:
            s = np.sin(half) / rate
            dw, dx, dy, dz = np.cos(half), gx * s, gy * s, gz * s
            w, x, y, z = (w * dw - x * dx - y * dy - z * dz,
                          w * dx + x * dw + y * dz - z * dy,
                          w * dy - x * dz + y * dw + z * dx,
                          w * dz + x * dy - y * dx + z * dw)
            nq = np.sqrt(w * w + x * x + y * y + z * z)
            w, x, y, z = w / nq, x / nq, y / nq, z / nq
        out[k, 0] = w
        out[k, 1] = x
        out[k, 2] = y
        out[k, 3] = z
    return out


def _body_accel(lin_earth, gyr_dps, rate_hz):
    """Sensor-frame specific force for a body with earth-frame linear
    acceleration ``lin_earth`` [g] whose attitude follows ``gyr_dps``."""
    q = _integrate_rate(np.ascontiguousarray(gyr_dps, dtype=np.float64), 1.0 / rate_hz)
    return quat_rotate(quat_conj(q), lin_earth + np.array([0.0, 0.0, 1.0]))


def simulate_session(script: Sequence[ScriptStep], seed: int = 42, *, rate_hz: float = SAMPLE_RATE_HZ,
                     gyro_bias: dict[int, Sequence[float]] | None = None,
                     rider_lag: dict[Placement, int] | None = None,
                     min_stance_s: float = 0.15, min_swing_s: float = 0.2, edge_guard_s: float = 0.0,
                     session_id: str = "sim") -> SimulatedSession:
    """Generate all ten channels plus ground truth for a script.

    Wire packets for the same data come from :meth:`SimulatedSession.packets`.
    """
    script = list(script)
    if not script:
        raise ScriptError("script is empty")
    rng = np.random.default_rng(seed)
    total = float(sum(s.duration for s in script))
    n = int(round(total * rate_hz))
    t = np.arange(n) / rate_hz
    step_idx = _step_index(script, t)
    sigma_a = np.array([s.params.noise_accel_g for s in script])[step_idx][:, None]
    sigma_g = np.array([s.params.noise_gyro_dps for s in script])[step_idx][:, None]

    events: list[HoofEvent] = []
    local_accel = {}
    sensor = {}
    for li, limb in enumerate(HORSE_LIMBS):
        initial, times, kinds = _limb_schedule(script, li, total, min_stance_s, min_swing_s, edge_guard_s)
        kinds_arr = np.array(kinds, dtype=object)
        events.extend(HoofEvent(limb, k, float(tt)) for tt, k in zip(times, kinds))
        on_t = times[kinds_arr == HOOF_ON] if len(times) else np.zeros(0)
        off_t = times[kinds_arr == HOOF_OFF] if len(times) else np.zeros(0)

        # stance if the last event before t is hoof-on (or none and initial stance)
        pos = np.searchsorted(times, t, side="right") - 1
        if len(times):
            last_kind_on = np.where(pos >= 0, kinds_arr[np.maximum(pos, 0)] == HOOF_ON, initial)
        else:
            last_kind_on = np.full(n, initial)
        stance = last_kind_on.astype(bool)

        acc = np.zeros((n, 3))
        acc[:, 2] = 1.0
        gyr = np.zeros((n, 3))

        # impacts
        i_on = np.searchsorted(on_t, t, side="right") - 1
        has_on = stance & (i_on >= 0)
        if np.any(has_on):
            t_on = on_t[i_on[has_on]]
            # landing impact belongs to the gait the limb was moving in
            amp = np.array([script[j].params.impact_g for j in _step_index(script, t_on - 1e-9)])
            acc[has_on, 2] += amp * np.exp(-(t[has_on] - t_on) / IMPACT_TAU_S)

        # swings: (start, duration, peak, lateral)
        sw_start = list(off_t)
        if not initial:
            sw_start.insert(0, 0.0)
        sw_start = np.array(sw_start)
        sw_dur = np.empty(len(sw_start))
        sw_peak = np.empty(len(sw_start))
        sw_lat = np.empty(len(sw_start))
        for j, ts in enumerate(sw_start):
            p = script[int(_step_index(script, ts))].params
            nxt = on_t[on_t > ts]
            if len(nxt):
                sw_dur[j] = nxt[0] - ts
            else:
                nominal = (1.0 - p.duty[li]) / p.stride_hz if p.moving else 0.4
                sw_dur[j] = min(nominal, max(total - ts, 1e-9))
            sw_peak[j] = p.swing_peak_dps if p.moving else _PRESETS["walk"]["swing_peak_dps"]
            sw_lat[j] = p.lateral_dps
        i_sw = np.searchsorted(sw_start, t, side="right") - 1
        theta = np.zeros(n)
        in_swing = ~stance & (i_sw >= 0)
        if np.any(in_swing):
            j = i_sw[in_swing]
            s = np.clip((t[in_swing] - sw_start[j]) / sw_dur[j], 0.0, 1.0)
            bump = np.sin(np.pi * s)
            wave = np.sin(2 * np.pi * s)
            scale = sw_peak[j] / 300.0
            acc[in_swing, 1] = SWING_FORWARD_G * scale * wave
            acc[in_swing, 2] = 1.0 + SWING_LIFT_G * scale * wave
            gyr[in_swing, 0] = sw_peak[j] * wave
            gyr[in_swing, 2] = sw_lat[j] * bump
            theta[in_swing] = sw_peak[j] * sw_dur[j] / (2 * np.pi) * (1.0 - np.cos(2 * np.pi * s))

        local_accel[limb] = acc.copy()
        th = np.radians(theta)
        c, sn = np.cos(th), np.sin(th)
        # sensor-frame specific force = R_x(theta)^T a_local
        sens = np.empty_like(acc)
        sens[:, 0] = acc[:, 0]
        sens[:, 1] = c * acc[:, 1] + sn * acc[:, 2]
        sens[:, 2] = -sn * acc[:, 1] + c * acc[:, 2]
        sensor[limb] = (sens, gyr)

    # rider waist: low-passed limb mix plus lateral sway
    mix = np.mean([local_accel[l] for l in HORSE_LIMBS], axis=0) - np.array([0.0, 0.0, 1.0])
    sos = signal.butter(2, WAIST_LOWPASS_HZ, "low", fs=rate_hz, output="sos")
    waist_lin = WAIST_TRANSMISSION * signal.sosfiltfilt(sos, mix, axis=0) if n > 12 else WAIST_TRANSMISSION * mix
    sway = np.array([s.params.lateral_sway_g for s in script])[step_idx]
    stride = np.array([s.params.stride_hz for s in script])[step_idx]
    waist_lin[:, 0] += sway * np.sin(2 * np.pi * np.cumsum(stride) / rate_hz)
    hp = signal.butter(2, 0.5, "high", fs=rate_hz, output="sos")
    waist_rot = signal.sosfiltfilt(hp, waist_lin, axis=0) if n > 12 else np.zeros_like(waist_lin)
    waist_gyr = WAIST_GYRO_DPS_PER_G * np.stack([waist_rot[:, 1], waist_rot[:, 0], np.zeros(n)], axis=1)
    sensor[Placement.RIDER_WAIST] = (_body_accel(waist_lin, waist_gyr, rate_hz), waist_gyr)

    # rider limbs
    rider_truth = {}
    amp = np.array([s.rider.amplitude_g for s in script])[step_idx]
    freq = np.array([s.rider.frequency_hz for s in script])[step_idx]
    on_s = np.array([s.rider.burst_on_s for s in script])[step_idx]
    off_s = np.array([s.rider.burst_off_s for s in script])[step_idx]
    step_t0 = np.concatenate([[0.0], np.cumsum([s.duration for s in script])])[step_idx]
    local_t = t - step_t0
    cycle = on_s + off_s
    burst = np.where(off_s > 0, np.mod(local_t, np.where(cycle > 0, cycle, 1.0)) < on_s, True)
    rider_phase = 2 * np.pi * np.cumsum(freq) / rate_hz
    lags = {Placement.RIDER_LEFT_LEG: 2, Placement.RIDER_RIGHT_LEG: 2,
            Placement.RIDER_LEFT_ARM: 1, Placement.RIDER_RIGHT_ARM: 1}
    if rider_lag:
        lags.update(rider_lag)
    for limb in RIDER_LIMBS:
        gain, axis = RIDER_GAIN[limb]
        comp = (gain * amp * burst * np.sin(rider_phase + RIDER_PHASE[limb]))[:, None] * axis
        rider_truth[limb] = comp
        lag = int(lags.get(limb, 0))
        idx = np.clip(np.arange(n) - lag, 0, max(n - 1, 0))
        gyr = waist_gyr[idx] + RIDER_GYRO_DPS_PER_G * comp[:, [1, 2, 0]]
        sensor[limb] = (_body_accel(waist_lin[idx] + comp, gyr, rate_hz), gyr)

    raw = {}
    for dev in range(N_DEVICES):
        acc, gyr = sensor[Placement(dev)]
        acc = acc + sigma_a * rng.standard_normal((n, 3))
        gyr = gyr + sigma_g * rng.standard_normal((n, 3))
        if gyro_bias and dev in gyro_bias:
            gyr = gyr + np.asarray(gyro_bias[dev], dtype=np.float64)
        raw[dev] = np.concatenate([quantize_accel(acc), quantize_gyro(gyr)], axis=1)

    events.sort(key=lambda e: (e.t_s, e.limb.value))
    truth = GroundTruth(events, _labels(script))
    return SimulatedSession(t, raw, truth, rider_truth, rate_hz, seed, session_id)


def inject_faults(stream: Sequence[tuple[float, bytes]], loss_rate: float, swap_rate: float,
                  seed: int = 0) -> list[tuple[float, bytes]]:
    """Bernoulli packet loss followed by adjacent-pair payload swaps.

    Arrival times stay in place, so the result is still ordered by
    arrival; only which datagram lands in each slot changes.
    """
    if not (0.0 <= loss_rate <= 1.0 and 0.0 <= swap_rate <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    keep = rng.random(len(stream)) >= loss_rate
    kept = [item for item, k in zip(stream, keep) if k]
    times = [t for t, _ in kept]
    payloads = [b for _, b in kept]
    draws = rng.random(len(payloads))
    i = 0
    while i < len(payloads) - 1:
        if draws[i] < swap_rate:
            payloads[i], payloads[i + 1] = payloads[i + 1], payloads[i]
            i += 2
        else:
            i += 1
    return list(zip(times, payloads))


def step_from_dict(doc: dict) -> ScriptStep:
    try:
        gait = doc["gait"]
        duration = float(doc["duration"])
    except KeyError as exc:
        raise ScriptError(f"script step missing {exc.args[0]!r}") from None
    overrides = dict(doc.get("params", {}))
    params = GaitParams.preset(gait, lead=doc.get("lead", "left"), **overrides)
    rider = RiderParams(**doc.get("rider", {}))
    return ScriptStep(duration, params, doc.get("task"), rider)


def step_to_dict(step: ScriptStep) -> dict:
    p = step.params
    doc = {
        "duration": step.duration,
        "gait": p.gait,
        "params": {
            "stride_hz": p.stride_hz, "duty": list(p.duty), "phase": list(p.phase),
            "impact_g": p.impact_g, "swing_peak_dps": p.swing_peak_dps,
            "noise_accel_g": p.noise_accel_g, "noise_gyro_dps": p.noise_gyro_dps,
            "lateral_dps": p.lateral_dps, "lateral_sway_g": p.lateral_sway_g,
        },
        "rider": {
            "amplitude_g": step.rider.amplitude_g, "frequency_hz": step.rider.frequency_hz,
            "burst_on_s": step.rider.burst_on_s, "burst_off_s": step.rider.burst_off_s,
        },
    }
    if step.task is not None:
        doc["task"] = step.task
    return doc


@dataclass
class Script:
    steps: list[ScriptStep]
    gyro_bias: dict[int, tuple[float, float, float]] = field(default_factory=dict)
    session_id: str = "sim"


def parse_script(doc) -> Script:
    """Accept either a bare list of steps or ``{"steps": [...], ...}``."""
    if isinstance(doc, list):
        doc = {"steps": doc}
    if not isinstance(doc, dict) or "steps" not in doc:
        raise ScriptError("script must be a list of steps or an object with 'steps'")
    steps = [step_from_dict(s) for s in doc["steps"]]
    if not steps:
        raise ScriptError("script is empty")
    bias = {int(k): tuple(float(x) for x in v) for k, v in doc.get("gyro_bias", {}).items()}
    return Script(steps, bias, str(doc.get("session_id", "sim")))


def load_script(path) -> Script:
    with open(Path(path)) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScriptError(f"script is not valid JSON: {exc}") from None
    return parse_script(doc)


def with_noise(script: Sequence[ScriptStep], accel_g: float, gyro_dps: float) -> list[ScriptStep]:
    return [replace(s, params=replace(s.params, noise_accel_g=accel_g, noise_gyro_dps=gyro_dps)) for s in script]
