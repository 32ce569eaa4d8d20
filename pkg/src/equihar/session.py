"""Session directory persistence.

Layout::

    <session>/manifest.json
    <session>/samples.csv          t_s, device, ax_g, ay_g, az_g, gx_dps, gy_dps, gz_dps
    <session>/annotations.csv      track, label, start_s, end_s
    <session>/truth_events.csv     limb, kind, t_s      (simulator output only)
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd
import polars as pl

from .core import N_DEVICES, SAMPLE_RATE_HZ, CalibratedSample, Placement, Vec3

MANIFEST_VERSION = 1
SAMPLE_COLUMNS = ["t_s", "device", "ax_g", "ay_g", "az_g", "gx_dps", "gy_dps", "gz_dps"]
ANNOTATION_COLUMNS = ["track", "label", "start_s", "end_s"]
EVENT_COLUMNS = ["limb", "kind", "t_s"]


class SessionError(Exception):
    pass


class MissingManifestError(SessionError):
    pass


class ColumnMismatchError(SessionError):
    pass


class NonMonotoneTimeError(SessionError):
    pass


@dataclass
class DeviceRecord:
    placement: Placement
    present: bool = True
    gyro_bias_dps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    accel_bias_g: tuple[float, float, float] = (0.0, 0.0, 0.0)


@dataclass
class SessionManifest:
    session_id: str
    start_time: float = 0.0
    sample_rate_hz: float = SAMPLE_RATE_HZ
    devices: dict[int, DeviceRecord] = field(
        default_factory=lambda: {p.value: DeviceRecord(p) for p in Placement}
    )

    def __post_init__(self):
        missing = set(range(N_DEVICES)) - set(self.devices)
        if missing:
            raise SessionError(f"manifest lacks devices {sorted(missing)}; mark them absent instead")

    @property
    def present(self) -> list[int]:
        return sorted(d for d, rec in self.devices.items() if rec.present)

    def to_dict(self) -> dict:
        return {
            "format_version": MANIFEST_VERSION,
            "session_id": self.session_id,
            "start_time": self.start_time,
            "sample_rate_hz": self.sample_rate_hz,
            "devices": [
                {
                    "id": d,
                    "placement": rec.placement.slug,
                    "present": rec.present,
                    "calibration": {
                        "gyro_bias_dps": list(rec.gyro_bias_dps),
                        "accel_bias_g": list(rec.accel_bias_g),
                    },
                }
                for d, rec in sorted(self.devices.items())
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionManifest":
        if doc.get("format_version") != MANIFEST_VERSION:
            raise SessionError(f"unsupported manifest version {doc.get('format_version')!r}")
        devices = {}
        for d in doc["devices"]:
            cal = d.get("calibration", {})
            devices[int(d["id"])] = DeviceRecord(
                Placement.from_slug(d["placement"]),
                bool(d["present"]),
                tuple(float(v) for v in cal.get("gyro_bias_dps", (0.0, 0.0, 0.0))),
                tuple(float(v) for v in cal.get("accel_bias_g", (0.0, 0.0, 0.0))),
            )
        return cls(doc["session_id"], float(doc["start_time"]), float(doc["sample_rate_hz"]), devices)


@dataclass
class SampleTable:
    """Column store of calibrated samples, time-sorted per device."""

    t_s: np.ndarray
    device: np.ndarray
    accel: np.ndarray
    gyro: np.ndarray

    def __post_init__(self):
        self.t_s = np.asarray(self.t_s, dtype=np.float64).reshape(-1)
        self.device = np.asarray(self.device, dtype=np.int64).reshape(-1)
        self.accel = np.asarray(self.accel, dtype=np.float64).reshape(-1, 3)
        self.gyro = np.asarray(self.gyro, dtype=np.float64).reshape(-1, 3)
        n = len(self.t_s)
        if not (len(self.device) == len(self.accel) == len(self.gyro) == n):
            raise ColumnMismatchError("sample columns differ in length")

    def __len__(self) -> int:
        return len(self.t_s)

    @classmethod
    def empty(cls) -> "SampleTable":
        return cls(np.zeros(0), np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def from_samples(cls, samples: Iterable[CalibratedSample]) -> "SampleTable":
        rows = [(s.t_s, s.device_id, *s.accel, *s.gyro) for s in samples]
        if not rows:
            return cls.empty()
        a = np.array(rows, dtype=np.float64)
        return cls(a[:, 0], a[:, 1].astype(np.int64), a[:, 2:5], a[:, 5:8])

    def to_samples(self) -> list[CalibratedSample]:
        return [
            CalibratedSample(int(d), float(t), Vec3(*map(float, a)), Vec3(*map(float, g)))
            for t, d, a, g in zip(self.t_s, self.device, self.accel, self.gyro)
        ]

    def devices(self) -> list[int]:
        return sorted(int(d) for d in np.unique(self.device))

    def for_device(self, device_id: int) -> "SampleTable":
        m = self.device == device_id
        return SampleTable(self.t_s[m], self.device[m], self.accel[m], self.gyro[m])

    def check_monotone(self):
        for d in self.devices():
            t = self.t_s[self.device == d]
            if np.any(np.diff(t) <= 0):
                raise NonMonotoneTimeError(f"device {d} timestamps are not strictly increasing")


@dataclass(frozen=True)
class Annotation:
    track: str
    label: str
    start_s: float
    end_s: float


def save_session(path, manifest: SessionManifest, samples: SampleTable, *,
                 annotations: Sequence[Annotation] | None = None,
                 truth_events: Sequence | None = None) -> Path:
    """Write a session directory; floats use shortest round-trip text."""
    samples.check_monotone()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "manifest.json", "w") as fh:
        json.dump(manifest.to_dict(), fh, indent=2)
        fh.write("\n")
    cols = [samples.t_s, samples.device, *samples.accel.T, *samples.gyro.T]
    pl.DataFrame(dict(zip(SAMPLE_COLUMNS, cols))).write_csv(path / "samples.csv")
    if annotations is not None:
        write_annotations(path / "annotations.csv", annotations)
    if truth_events is not None:
        write_events(path / "truth_events.csv", truth_events)
    return path


def load_session(path) -> tuple[SessionManifest, SampleTable]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise MissingManifestError(f"{mpath} not found")
    with open(mpath) as fh:
        manifest = SessionManifest.from_dict(json.load(fh))
    spath = path / "samples.csv"
    if not spath.is_file():
        raise SessionError(f"{spath} not found")
    with open(spath) as fh:
        header = fh.readline().strip().split(",")
    if header != SAMPLE_COLUMNS:
        raise ColumnMismatchError(f"expected columns {SAMPLE_COLUMNS}, found {header}")
    schema = {c: pl.Float64 for c in SAMPLE_COLUMNS}
    schema["device"] = pl.Int64
    try:
        df = pl.read_csv(spath, schema=schema)
    except pl.exceptions.PolarsError as exc:
        raise SessionError(f"{spath}: {exc}") from exc
    samples = SampleTable(
        df["t_s"].to_numpy(),
        df["device"].to_numpy(),
        df.select(["ax_g", "ay_g", "az_g"]).to_numpy(),
        df.select(["gx_dps", "gy_dps", "gz_dps"]).to_numpy(),
    )
    samples.check_monotone()
    return manifest, samples


def write_annotations(path, annotations: Sequence[Annotation]):
    df = pd.DataFrame([(a.track, a.label, a.start_s, a.end_s) for a in annotations], columns=ANNOTATION_COLUMNS)
    df.to_csv(path, index=False)


def load_annotations(path) -> list[Annotation]:
    path = Path(path)
    if path.is_dir():
        path = path / "annotations.csv"
    if not path.is_file():
        return []
    df = pd.read_csv(path, dtype={"track": str, "label": str}, float_precision="round_trip")
    if list(df.columns) != ANNOTATION_COLUMNS:
        raise ColumnMismatchError(f"expected columns {ANNOTATION_COLUMNS}, found {list(df.columns)}")
    return [Annotation(r.track, r.label, float(r.start_s), float(r.end_s)) for r in df.itertuples(index=False)]


def write_events(path, events: Sequence):
    """Events need ``limb`` (Placement), ``kind`` and ``t_s`` attributes."""
    df = pd.DataFrame([(e.limb.slug, e.kind, e.t_s) for e in events], columns=EVENT_COLUMNS)
    df.to_csv(path, index=False)


def load_events(path) -> list:
    from .gait import HoofEvent

    path = Path(path)
    if path.is_dir():
        path = path / "truth_events.csv"
    if not path.is_file():
        return []
    df = pd.read_csv(path, dtype={"limb": str, "kind": str}, float_precision="round_trip")
    if list(df.columns) != EVENT_COLUMNS:
        raise ColumnMismatchError(f"expected columns {EVENT_COLUMNS}, found {list(df.columns)}")
    return [HoofEvent(Placement.from_slug(r.limb), r.kind, float(r.t_s)) for r in df.itertuples(index=False)]


@dataclass
class Session:
    path: Path | None
    manifest: SessionManifest
    samples: SampleTable
    annotations: list[Annotation]
    truth_events: list

    @property
    def has_truth(self) -> bool:
        return bool(self.truth_events) or (self.path is not None and (self.path / "truth_events.csv").is_file())


def read_session(path) -> Session:
    path = Path(path)
    manifest, samples = load_session(path)
    return Session(path, manifest, samples, load_annotations(path), load_events(path))


def is_writable_dir(path) -> bool:
    path = Path(path)
    probe = path if path.exists() else path.parent
    while not probe.exists():
        probe = probe.parent
    return os.access(probe, os.W_OK)
