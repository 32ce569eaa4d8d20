"""Stillness-based bias calibration and resampling onto the shared grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from scipy import signal
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import IDENTITY, SAMPLE_RATE_HZ, Quaternion, quat_rotate
from .session import SampleTable

log = logging.getLogger(__name__)

GAP_PERIODS = 3
MAX_GYRO_BIAS_DPS = 50.0
MAX_ACCEL_BIAS_G = 0.5


class InsufficientSamplesError(ValueError):
    pass


class InsufficientStillnessError(ValueError):
    pass


@dataclass
class UniformTrack:
    device_id: int
    t0: float
    rate_hz: float
    accel: np.ndarray
    gyro: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return len(self.accel)

    @property
    def t(self) -> np.ndarray:
        return self.t0 + np.arange(len(self)) / self.rate_hz

    @property
    def duration(self) -> float:
        return len(self) / self.rate_hz

    def shifted(self, dt: float) -> "UniformTrack":
        return replace(self, t0=self.t0 + dt)

    @classmethod
    def from_arrays(cls, accel, gyro, *, device_id: int = 0, t0: float = 0.0,
                    rate_hz: float = SAMPLE_RATE_HZ, valid=None) -> "UniformTrack":
        accel = np.asarray(accel, dtype=np.float64).reshape(-1, 3)
        gyro = np.asarray(gyro, dtype=np.float64).reshape(-1, 3)
        if valid is None:
            valid = np.ones(len(accel), dtype=bool)
        return cls(device_id, t0, rate_hz, accel, gyro, np.asarray(valid, dtype=bool))


@dataclass(frozen=True)
class Calibration:
    device_id: int
    gyro_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    accel_bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    alignment: Quaternion = IDENTITY


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open index ranges where ``mask`` is True."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def _lowpass(x, cutoff_hz, rate_hz, order=2):
    """Causal Butterworth low-pass started in steady state at ``x[0]``.

    Causal on purpose: a zero-phase filter would smear the onset of
    motion backwards into the preceding rest.
    """
    if len(x) < 2:
        return x
    sos = signal.butter(order, cutoff_hz, "low", fs=rate_hz, output="sos")
    zi = signal.sosfilt_zi(sos)[:, :, None] * x[0][None, None, :]
    return signal.sosfilt(sos, x, axis=0, zi=zi)[0]


def detect_still(track: UniformTrack, min_duration: float = 1.0, gyro_thresh: float = 3.0,
                 lowpass_hz: float = 5.0, guard_s: float = 0.05) -> list[tuple[float, float]]:
    """Maximal intervals where the low-passed rate magnitude stays under
    ``gyro_thresh`` for at least ``min_duration`` seconds.

    The rate vector is smoothed before taking its norm, so zero-mean noise
    averages out while a constant bias does not. The smoothing is causal,
    so it lags the start of motion; ``guard_s`` is cut from the end of
    every interval that motion terminates.
    """
    if len(track) == 0:
        raise InsufficientSamplesError("track is empty")
    guard = int(round(guard_s * track.rate_hz))
    out = []
    for a, b in _runs(track.valid):
        g = _lowpass(track.gyro[a:b], lowpass_hz, track.rate_hz)
        still = np.linalg.norm(g, axis=1) < gyro_thresh
        for s, e in _runs(still):
            if e < b - a:
                e = max(s, e - guard)
            if (e - s) / track.rate_hz >= min_duration:
                out.append((track.t0 + (a + s) / track.rate_hz, track.t0 + (a + e) / track.rate_hz))
    return out


def _interval_mask(track: UniformTrack, intervals: Sequence[tuple[float, float]]) -> np.ndarray:
    t = track.t
    mask = np.zeros(len(track), dtype=bool)
    for s, e in intervals:
        mask |= (t >= s - 1e-9) & (t < e - 1e-9)
    return mask & track.valid


def estimate_bias(track: UniformTrack, still_intervals: Sequence[tuple[float, float]],
                  min_still_s: float = 1.0) -> Calibration:
    """Gyro bias = mean rate at rest. Accel bias = mean specific force minus
    a 1 g vector along its own direction, taken per interval (the attitude
    may differ between rests) and averaged weighted by length."""
    mask = _interval_mask(track, still_intervals)
    if mask.sum() / track.rate_hz < min_still_s:
        raise InsufficientStillnessError(
            f"device {track.device_id}: need {min_still_s:.1f} s of stillness, found "
            f"{mask.sum() / track.rate_hz:.2f} s; record a still period before moving"
        )
    gyro_bias = track.gyro[mask].mean(axis=0)
    parts, weights = [], []
    for iv in still_intervals:
        m = _interval_mask(track, [iv])
        if m.any():
            mean_acc = track.accel[m].mean(axis=0)
            parts.append(mean_acc - mean_acc / np.linalg.norm(mean_acc))
            weights.append(m.sum())
    accel_bias = np.average(parts, axis=0, weights=weights)
    if np.linalg.norm(gyro_bias) > MAX_GYRO_BIAS_DPS or np.linalg.norm(accel_bias) > MAX_ACCEL_BIAS_G:
        raise ValueError(f"device {track.device_id}: implausible bias estimate")
    return Calibration(track.device_id, gyro_bias, accel_bias)


def apply_calibration(track: UniformTrack, cal: Calibration) -> UniformTrack:
    accel = track.accel - cal.accel_bias
    gyro = track.gyro - cal.gyro_bias
    if tuple(cal.alignment) != tuple(IDENTITY):
        accel = quat_rotate(cal.alignment, accel)
        gyro = quat_rotate(cal.alignment, gyro)
    return replace(track, accel=accel, gyro=gyro)


def _as_device_map(samples) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    if isinstance(samples, SampleTable):
        return {d: (s.t_s, s.accel, s.gyro) for d in samples.devices() for s in [samples.for_device(d)]}
    return {int(d): tuple(np.asarray(x, dtype=np.float64) for x in v) for d, v in samples.items()}


def resample_uniform(samples: SampleTable | Mapping[int, tuple], rate_hz: float = SAMPLE_RATE_HZ,
                     gap_periods: float = GAP_PERIODS) -> dict[int, UniformTrack]:
    """Linearly interpolate every device onto ``t0 + k / rate``.

    The grid is shared: ``t0`` is the latest first sample over devices and
    the grid stops at the earliest last sample. Grid points strictly inside
    a source gap wider than ``gap_periods`` nominal periods are marked
    invalid instead of interpolated.
    """
    per_dev = _as_device_map(samples)
    if not per_dev:
        return {}
    for d, (t, _, _) in per_dev.items():
        if len(t) < 2:
            raise InsufficientSamplesError(f"device {d} has {len(t)} samples; need at least 2")
    t0 = max(float(v[0][0]) for v in per_dev.values())
    t_end = min(float(v[0][-1]) for v in per_dev.values())
    if t_end < t0:
        raise InsufficientSamplesError("devices do not overlap in time")
    n = int(np.floor((t_end - t0) * rate_hz + 1e-9)) + 1
    grid = t0 + np.arange(n) / rate_hz
    max_gap = gap_periods / rate_hz * (1.0 + 1e-9)

    tracks = {}
    for d in sorted(per_dev):
        t, acc, gyr = per_dev[d]
        vals = np.concatenate([acc, gyr], axis=1)
        out = np.empty((n, 6))
        for c in range(6):
            out[:, c] = np.interp(grid, t, vals[:, c])
        i = np.clip(np.searchsorted(t, grid, side="right") - 1, 0, len(t) - 2)
        inside = (grid > t[i]) & (grid < t[i + 1])
        valid = ~(inside & (np.diff(t)[i] > max_gap))
        tracks[d] = UniformTrack(d, t0, rate_hz, out[:, :3], out[:, 3:], valid)
    return tracks


def calibrate_tracks(tracks: Mapping[int, UniformTrack], **still_kw) -> tuple[dict[int, UniformTrack],
                                                                              dict[int, Calibration], list[str]]:
    """Estimate and remove bias per device; devices without enough
    stillness pass through unchanged with a note."""
    out, cals, notes = {}, {}, []
    for d, tr in tracks.items():
        try:
            cal = estimate_bias(tr, detect_still(tr, **still_kw))
        except (InsufficientStillnessError, ValueError) as exc:
            notes.append(f"device {d}: calibration skipped ({exc})")
            log.info("device %d: calibration skipped: %s", d, exc)
            cal = Calibration(d)
        cals[d] = cal
        out[d] = apply_calibration(tr, cal)
    return out, cals, notes


class BiasCalibrator(BaseEstimator, TransformerMixin):
    """Estimator form of still-period bias removal.

    ``X`` has shape (n_samples, 6): accel xyz [g] then gyro xyz [dps],
    sampled uniformly at ``rate_hz``.
    """

    def __init__(self, rate_hz=SAMPLE_RATE_HZ, min_duration=1.0, gyro_thresh=3.0):
        self.rate_hz = rate_hz
        self.min_duration = min_duration
        self.gyro_thresh = gyro_thresh

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 6:
            raise ValueError(f"expected 6 columns (accel, gyro), got {X.shape[1]}")
        track = UniformTrack.from_arrays(X[:, :3], X[:, 3:], rate_hz=self.rate_hz)
        self.still_intervals_ = detect_still(track, self.min_duration, self.gyro_thresh)
        cal = estimate_bias(track, self.still_intervals_)
        self.gyro_bias_ = cal.gyro_bias
        self.accel_bias_ = cal.accel_bias
        self.n_features_in_ = 6
        return self

    def transform(self, X):
        check_is_fitted(self, ["gyro_bias_", "accel_bias_"])
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return X - np.concatenate([self.accel_bias_, self.gyro_bias_])
