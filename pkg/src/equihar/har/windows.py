"""Sliding-window featurization of resampled sessions."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..core import SAMPLE_RATE_HZ, Placement
from ..preprocess import UniformTrack, calibrate_tracks, resample_uniform
from ..session import Annotation, SampleTable, SessionManifest

WINDOW_S = 5.0
STRIDE_S = 2.5
MIN_COVERAGE = 0.8
AXES = ("ax", "ay", "az", "gx", "gy", "gz")
# horse-motion sensors: the four limbs and the rider waist as a trunk proxy.
# Rider limbs carry the rider's own movement and are left out by default.
DEFAULT_DEVICES = (0, 1, 2, 3, 5)


class NoAnnotationsError(ValueError):
    pass


@dataclass
class WindowDataset:
    """``X`` has shape (N, T, C); ``y`` indexes into ``vocab``."""

    X: np.ndarray
    y: np.ndarray
    vocab: list[str]
    channels: list[str]
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0))
    n_candidates: int = 0
    dropped: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def labels(self) -> list[str]:
        return [self.vocab[i] for i in self.y]

    def subset(self, idx) -> "WindowDataset":
        idx = np.asarray(idx)
        return WindowDataset(self.X[idx], self.y[idx], list(self.vocab), list(self.channels), self.starts[idx],
                             len(idx), {})

    def relabel(self, vocab: Sequence[str]) -> "WindowDataset":
        """Re-index labels against another vocabulary; unknown labels raise."""
        vocab = list(vocab)
        missing = sorted(set(self.labels) - set(vocab))
        if missing:
            raise ValueError(f"labels {missing} are not in the vocabulary {vocab}")
        pos = {v: i for i, v in enumerate(vocab)}
        y = np.array([pos[l] for l in self.labels], dtype=np.int64)
        return WindowDataset(self.X, y, vocab, list(self.channels), self.starts, self.n_candidates,
                             dict(self.dropped))


def n_candidates(n_samples: int, rate_hz: float = SAMPLE_RATE_HZ, window_s: float = WINDOW_S,
                 stride_s: float = STRIDE_S) -> int:
    w = int(round(window_s * rate_hz))
    s = int(round(stride_s * rate_hz))
    return 0 if n_samples < w else (n_samples - w) // s + 1


def _coverage(annotations: Sequence[Annotation], a: float, b: float) -> dict[str, float]:
    cov: dict[str, float] = {}
    for ann in annotations:
        overlap = min(b, ann.end_s) - max(a, ann.start_s)
        if overlap > 0:
            cov[ann.label] = cov.get(ann.label, 0.0) + overlap
    return cov


def downsample(x: np.ndarray, factor: int) -> np.ndarray:
    """Block mean along axis 1; trailing samples that do not fill a block
    are discarded."""
    if factor == 1:
        return x
    n = x.shape[1] // factor
    return x[:, : n * factor].reshape(x.shape[0], n, factor, *x.shape[2:]).mean(axis=2)


def make_windows(tracks: Mapping[int, UniformTrack], annotations: Sequence[Annotation], track: str, *,
                 window_s: float = WINDOW_S, stride_s: float = STRIDE_S, downsample_factor: int = 5,
                 min_coverage: float = MIN_COVERAGE, devices: Sequence[int] | None = None,
                 vocab: Sequence[str] | None = None) -> WindowDataset:
    """Cut labelled windows from tracks that share one grid.

    A window keeps the majority label of ``track`` when that label covers
    at least ``min_coverage`` of its span; otherwise, or if any sample in
    it is invalid, it is dropped. Channels are the six raw axes of every
    device in ``devices`` (default: all tracks), in device order.
    """
    anns = [a for a in annotations if a.track == track]
    if not anns:
        have = sorted({a.track for a in annotations})
        raise NoAnnotationsError(f"no annotations for track {track!r}; available: {have or 'none'}")
    devices = sorted(tracks) if devices is None else list(devices)
    missing = [d for d in devices if d not in tracks]
    if missing:
        raise ValueError(f"devices {missing} have no track")
    ref = tracks[devices[0]]
    rate, t0, n = ref.rate_hz, ref.t0, len(ref)
    w = int(round(window_s * rate))
    s = int(round(stride_s * rate))
    data = np.concatenate([np.concatenate([tracks[d].accel, tracks[d].gyro], axis=1) for d in devices], axis=1)
    valid = np.logical_and.reduce([tracks[d].valid for d in devices])
    channels = [f"{Placement(d).slug}.{ax}" for d in devices for ax in AXES]

    if vocab is None:
        vocab = sorted({a.label for a in anns})
    vocab = list(vocab)
    pos = {v: i for i, v in enumerate(vocab)}
    total = n_candidates(n, rate, window_s, stride_s)
    keep, labels = [], []
    dropped = {"coverage": 0, "invalid": 0}
    cum_bad = np.concatenate([[0], np.cumsum(~valid)])
    for i in range(total):
        a = i * s
        cov = _coverage(anns, t0 + a / rate, t0 + (a + w) / rate)
        best = max(cov.items(), key=lambda kv: (kv[1], kv[0]), default=(None, 0.0))
        if best[0] is None or best[1] < min_coverage * window_s - 1e-9:
            dropped["coverage"] += 1
            continue
        if cum_bad[a + w] - cum_bad[a]:
            dropped["invalid"] += 1
            continue
        if best[0] not in pos:
            raise ValueError(f"label {best[0]!r} is not in the vocabulary {vocab}")
        keep.append(a)
        labels.append(pos[best[0]])

    idx = np.asarray(keep, dtype=np.int64)
    if len(idx):
        X = data[idx[:, None] + np.arange(w)[None, :]]
    else:
        X = np.zeros((0, w, data.shape[1]))
    X = downsample(X, downsample_factor)
    starts = t0 + idx / rate
    return WindowDataset(X, np.asarray(labels, dtype=np.int64), vocab, channels, starts, total, dropped)


def session_windows(manifest: SessionManifest, samples: SampleTable, annotations: Sequence[Annotation],
                    track: str, *, devices: Sequence[int] | None = DEFAULT_DEVICES, **kw) -> WindowDataset:
    """Resample and bias-correct a stored session, then cut windows.

    ``devices=None`` uses every device that has samples.
    """
    tracks = resample_uniform(samples, manifest.sample_rate_hz)
    tracks, _, _ = calibrate_tracks(tracks)
    return make_windows(tracks, annotations, track, devices=devices, **kw)


def concat(datasets: Sequence[WindowDataset]) -> WindowDataset:
    """Stack datasets over a merged, sorted vocabulary."""
    if not datasets:
        raise ValueError("nothing to concatenate")
    ch = datasets[0].channels
    for d in datasets[1:]:
        if d.channels != ch:
            raise ValueError("datasets have different channels")
    vocab = sorted({v for d in datasets for v in d.labels})
    parts = [d.relabel(vocab) for d in datasets]
    return WindowDataset(
        np.concatenate([p.X for p in parts]),
        np.concatenate([p.y for p in parts]),
        vocab,
        list(ch),
        np.concatenate([p.starts for p in parts]),
        sum(d.n_candidates for d in datasets),
        {k: sum(d.dropped.get(k, 0) for d in datasets) for k in ("coverage", "invalid")},
    )

