"""End-to-end session analysis: resample, calibrate, fuse, detect hoof
events and quantify rider motion, then write plot-ready artifacts."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .core import HORSE_LIMBS, RIDER_LIMBS, SAMPLE_RATE_HZ, Placement
from .fusion import DEFAULT_BETA, OrientationTrack, fuse_orientation
from .gait import DetectorConfig, HoofEvent, TimingReport, detect_all, evaluate_timing
from .preprocess import calibrate_tracks, resample_uniform
from .rider import (
    ActivityMap,
    InsufficientOverlapError,
    MmiSeries,
    activity_map,
    align_lag,
    extract_residual,
    mmi,
)
from .session import SampleTable, Session, SessionManifest, write_events

log = logging.getLogger(__name__)


@dataclass
class AnalysisResult:
    duration_s: float
    events: list[HoofEvent]
    timing: TimingReport | None
    mmi: dict[Placement, MmiSeries]
    lags_s: dict[Placement, float]
    activity: ActivityMap | None
    notes: list[str] = field(default_factory=list)
    fused: dict[int, OrientationTrack] = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "duration_s": self.duration_s,
            "n_events": len(self.events),
            "timing": None if self.timing is None else self.timing.to_dict(),
            "rider_lags_ms": {p.slug: v * 1e3 for p, v in self.lags_s.items()},
            "mean_mmi_g": {p.slug: _nanmean(s.mmi) for p, s in self.mmi.items()},
            "notes": list(self.notes),
        }


def _nanmean(x):
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if len(x) else None


def analyze(manifest: SessionManifest, samples: SampleTable, *, truth_events: Sequence[HoofEvent] | None = None,
            detector: DetectorConfig | None = None, beta: float = DEFAULT_BETA,
            mmi_window_s: float = 1.0, mmi_stride_s: float = 0.25, bin_s: float = 5.0) -> AnalysisResult:
    """Run the full chain on one session.

    Devices missing from the samples are skipped; whatever depends on them
    is left out and noted. ``truth_events`` (possibly empty) enables the
    timing report.
    """
    notes: list[str] = []
    rate = manifest.sample_rate_hz or SAMPLE_RATE_HZ
    present = set(samples.devices())
    for d in manifest.present:
        if d not in present:
            notes.append(f"{Placement(d).slug}: listed as present but has no samples")
    if not present:
        notes.append("session has no samples")
        return AnalysisResult(0.0, [], _timing([], truth_events), {}, {}, None, notes)

    tracks = resample_uniform(samples, rate)
    tracks, _, cal_notes = calibrate_tracks(tracks)
    notes.extend(cal_notes)
    fused = {d: fuse_orientation(tr, beta) for d, tr in tracks.items()}
    any_track = next(iter(fused.values()))
    duration = len(any_track) / rate
    t0 = any_track.t0

    limbs = [p for p in HORSE_LIMBS if int(p) in fused]
    for p in HORSE_LIMBS:
        if int(p) not in fused:
            notes.append(f"{p.slug}: missing, no hoof events for this limb")
    events = detect_all(fused, limbs, detector)
    timing = _timing(events, truth_events, limbs)

    series: dict[Placement, MmiSeries] = {}
    lags: dict[Placement, float] = {}
    waist = fused.get(int(Placement.RIDER_WAIST))
    rider = [p for p in RIDER_LIMBS if int(p) in fused]
    if waist is None:
        if rider:
            notes.append("rider_waist missing: MMI and activity map skipped")
        else:
            notes.append("no rider sensors: MMI and activity map skipped")
    elif not rider:
        notes.append("no rider limb sensors: MMI and activity map skipped")
    elif len(waist) < int(round(mmi_window_s * rate)):
        notes.append("session shorter than one MMI window: MMI skipped")
    else:
        for p in rider:
            limb = fused[int(p)]
            try:
                lag = align_lag(limb.a_earth, waist.a_earth, rate_hz=rate, limb_valid=limb.valid,
                                waist_valid=waist.valid)
            except InsufficientOverlapError as exc:
                notes.append(f"{p.slug}: lag alignment skipped ({exc}); using zero lag")
                lag = 0.0
            lags[p] = lag
            series[p] = mmi(extract_residual(limb, waist, lag, p), mmi_window_s, mmi_stride_s)
    amap = activity_map(series, t0=t0, duration=duration, bin_s=bin_s) if series else None
    return AnalysisResult(duration, events, timing, series, lags, amap, notes, fused)


def _timing(events, truth, limbs=HORSE_LIMBS):
    if truth is None:
        return None
    keep = {int(p) for p in limbs}
    return evaluate_timing(events, [e for e in truth if int(e.limb) in keep])


def analyze_session(session: Session, **kw) -> AnalysisResult:
    truth = session.truth_events if session.has_truth else None
    return analyze(session.manifest, session.samples, truth_events=truth, **kw)


def mmi_frame(series: dict[Placement, MmiSeries]) -> pd.DataFrame:
    rows = [
        pd.DataFrame({"limb": p.slug, "t_center_s": s.centers, "mmi_g": s.mmi, "mmi_normalized": s.normalized})
        for p, s in series.items()
    ]
    if not rows:
        return pd.DataFrame(columns=["limb", "t_center_s", "mmi_g", "mmi_normalized"])
    return pd.concat(rows, ignore_index=True)


def activity_frame(amap: ActivityMap) -> pd.DataFrame:
    """Rows are limbs, columns are bin start times [s]."""
    cols = [f"{t:.3f}" for t in amap.bin_edges()[:-1]]
    df = pd.DataFrame(amap.values, columns=cols)
    df.insert(0, "limb", [p.slug for p in amap.limbs])
    return df


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return None
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def write_outputs(result: AnalysisResult, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "events.csv"]
    write_events(written[0], result.events)
    if result.timing is not None:
        written.append(out / "timing_report.json")
        written[-1].write_text(json.dumps(result.timing.to_dict(), indent=2, default=_json_default) + "\n")
    if result.mmi:
        written.append(out / "mmi.csv")
        mmi_frame(result.mmi).to_csv(written[-1], index=False)
    if result.activity is not None:
        written.append(out / "activity_map.csv")
        activity_frame(result.activity).to_csv(written[-1], index=False)
    written.append(out / "report.json")
    written[-1].write_text(json.dumps(result.summary(), indent=2, default=_json_default) + "\n")
    return written
