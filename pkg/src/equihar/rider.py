"""Rider-independent motion: horse-motion subtraction, movement magnitude
index (MMI) and limb-by-time activity maps.

The rider waist sensor serves as the horse-motion reference. Each rider
limb's earth-frame acceleration has the lag-aligned waist acceleration
subtracted; what remains is the rider's own movement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import SAMPLE_RATE_HZ, Placement

MAX_LAG_SAMPLES = 10
MIN_OVERLAP_S = 5.0
NORMALIZE_FLOOR_G = 1e-3


class InsufficientOverlapError(ValueError):
    pass


@dataclass
class ResidualTrack:
    limb: Placement
    t0: float
    rate_hz: float
    r: np.ndarray
    reference: np.ndarray  # lag-aligned waist a_earth
    valid: np.ndarray
    lag_s: float

    def __len__(self) -> int:
        return len(self.r)


@dataclass
class MmiSeries:
    limb: Placement
    centers: np.ndarray
    mmi: np.ndarray
    normalized: np.ndarray


@dataclass
class ActivityMap:
    limbs: list[Placement]
    t0: float
    bin_s: float
    values: np.ndarray  # (n_limbs, n_bins)

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def bin_edges(self) -> np.ndarray:
        return self.t0 + self.bin_s * np.arange(self.n_bins + 1)


def _pearson(x, y):
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(np.dot(x, x)) * float(np.dot(y, y)))
    return float(np.dot(x, y)) / den if den > 0 else 0.0


def align_lag(limb_a, waist_a, *, rate_hz: float = SAMPLE_RATE_HZ, max_lag: int = MAX_LAG_SAMPLES,
              limb_valid=None, waist_valid=None, min_overlap_s: float = MIN_OVERLAP_S) -> float:
    """Lag [s] that best aligns the waist to the limb.

    Maximizes the Pearson correlation of ``|limb[k]|`` with
    ``|waist[k - lag]|`` over integer lags in ``[-max_lag, max_lag]``.
    Exact ties go to the smallest ``|lag|``, then the negative lag. When
    no lag correlates above the ``3 / sqrt(N)`` noise floor the series
    are treated as unrelated and 0 is returned.
    """
    la = np.linalg.norm(np.asarray(limb_a, dtype=np.float64).reshape(-1, 3), axis=1)
    wa = np.linalg.norm(np.asarray(waist_a, dtype=np.float64).reshape(-1, 3), axis=1)
    n = min(len(la), len(wa))
    la, wa = la[:n], wa[:n]
    lv = np.ones(n, bool) if limb_valid is None else np.asarray(limb_valid, bool)[:n]
    wv = np.ones(n, bool) if waist_valid is None else np.asarray(waist_valid, bool)[:n]
    need = int(math.ceil(min_overlap_s * rate_hz))
    if np.count_nonzero(lv & wv) < need:
        raise InsufficientOverlapError(f"need {min_overlap_s:.1f} s of overlapping valid samples")

    best = None
    n_used = 0
    for lag in sorted(range(-max_lag, max_lag + 1), key=lambda L: (abs(L), L)):
        k = np.arange(max(0, lag), min(n, n + lag))
        m = lv[k] & wv[k - lag]
        if np.count_nonzero(m) < need:
            continue
        c = _pearson(la[k[m]], wa[k[m] - lag])
        if best is None or c > best[0] + 1e-12:
            best = (c, lag)
            n_used = int(np.count_nonzero(m))
    if best is None:
        raise InsufficientOverlapError("no lag leaves enough overlap")
    if best[0] < 3.0 / math.sqrt(n_used):
        return 0.0
    return best[1] / rate_hz


def extract_residual(limb, waist, lag_s: float = 0.0, limb_id: Placement | None = None) -> ResidualTrack:
    """``r[k] = limb.a_earth[k] - waist.a_earth[k - lag]`` on the shared
    grid; invalid wherever either side is invalid or out of range."""
    rate = limb.rate_hz
    lag = int(round(lag_s * rate))
    a = np.asarray(limb.a_earth, dtype=np.float64)
    w = np.asarray(waist.a_earth, dtype=np.float64)
    n = len(a)
    k = np.arange(n)
    src = k - lag
    inside = (src >= 0) & (src < len(w))
    ref = np.zeros_like(a)
    ref[inside] = w[src[inside]]
    valid = np.asarray(limb.valid, bool) & inside
    valid[inside] &= np.asarray(waist.valid, bool)[src[inside]]
    r = a - ref
    limb_id = Placement(limb.device_id if limb_id is None else limb_id)
    return ResidualTrack(limb_id, limb.t0, rate, r, ref, valid, lag / rate)


def _window_rms(x2, valid, starts, width):
    c = np.concatenate([[0.0], np.cumsum(np.where(valid, x2, 0.0))])
    cv = np.concatenate([[0], np.cumsum(~valid)])
    total = c[starts + width] - c[starts]
    bad = cv[starts + width] - cv[starts]
    out = np.sqrt(np.maximum(total, 0.0) / width)
    return np.where(bad > 0, np.nan, out)


def mmi(residual: ResidualTrack, window: float = 1.0, stride: float = 0.25) -> MmiSeries:
    """Windowed RMS of the residual magnitude [g].

    ``normalized`` divides by the RMS waist magnitude in the same window
    and is NaN where that reference is below 1e-3 g. Windows touching
    invalid samples are NaN.
    """
    rate = residual.rate_hz
    width = int(round(window * rate))
    n = len(residual)
    if width < 1 or width > n:
        raise ValueError(f"window of {window} s does not fit a {n / rate:.2f} s track")
    starts = []
    j = 0
    while True:
        s = int(round(j * stride * rate))
        if s + width > n:
            break
        starts.append(s)
        j += 1
    starts = np.array(starts, dtype=np.int64)
    r2 = np.einsum("ij,ij->i", residual.r, residual.r)
    w2 = np.einsum("ij,ij->i", residual.reference, residual.reference)
    m = _window_rms(r2, residual.valid, starts, width)
    ref = _window_rms(w2, residual.valid, starts, width)
    with np.errstate(invalid="ignore", divide="ignore"):
        norm = np.where(ref > NORMALIZE_FLOOR_G, m / ref, np.nan)
    centers = residual.t0 + starts / rate + window / 2.0
    return MmiSeries(residual.limb, centers, m, norm)


def activity_map(series: Mapping[Placement, MmiSeries] | Sequence[MmiSeries], *, t0: float, duration: float,
                 bin_s: float = 5.0) -> ActivityMap:
    """Mean MMI per limb and time bin. Bins without any finite window
    value are 0."""
    if isinstance(series, Mapping):
        series = list(series.values())
    n_bins = max(0, int(math.ceil(duration / bin_s - 1e-9)))
    limbs = [s.limb for s in series]
    values = np.zeros((len(series), n_bins))
    for i, s in enumerate(series):
        if n_bins == 0:
            break
        b = np.floor((s.centers - t0) / bin_s).astype(np.int64)
        ok = np.isfinite(s.mmi) & (b >= 0) & (b < n_bins)
        sums = np.bincount(b[ok], weights=s.mmi[ok], minlength=n_bins)
        counts = np.bincount(b[ok], minlength=n_bins)
        values[i] = np.divide(sums, counts, out=np.zeros(n_bins), where=counts > 0)
    return ActivityMap(limbs, t0, bin_s, values)
