"""Versioned binary container for a trained classifier.

Layout (all integers little-endian)::

    magic   8 bytes  b"EQHARCK\\0"
    version u32      1
    hlen    u32      length of the JSON header
    header  hlen     UTF-8 JSON: model config, vocabulary, training
                     settings, and the array directory
    arrays           for each directory entry, in order: ndim (u32), the
                     shape (ndim x u64), then the values as little-endian
                     float64 in C order

The directory lists array names; the payload of each array is
self-describing through its shape header.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ChannelStandardizer, ModelConfig, TransformerClassifier

MAGIC = b"EQHARCK\0"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(clf: TransformerClassifier) -> dict[str, np.ndarray]:
    st = clf.standardizer_
    out = {f"param.{k}": v for k, v in sorted(clf.params_.items())}
    out["std.mean"] = st.mean_
    out["std.std"] = st.std_
    out["std.keep"] = st.keep_.astype(np.float64)
    out["loss_curve"] = np.asarray(clf.loss_curve_, dtype=np.float64)
    return out


def save_checkpoint(path, clf: TransformerClassifier, *, extra: dict | None = None) -> Path:
    path = Path(path)
    arrays = _arrays(clf)
    header = {
        "config": clf.config_.to_dict(),
        "classes": [str(c) for c in clf.classes_],
        "estimator": {k: v for k, v in clf.get_params().items() if k != "classes"},
        "extra": extra or {},
        "arrays": list(arrays),
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        for a in arrays.values():
            a = np.ascontiguousarray(a, dtype="<f8")
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(a.tobytes())
    return path


def load_checkpoint(path) -> tuple[TransformerClassifier, dict]:
    """Rebuild a fitted classifier; also returns the ``extra`` metadata."""
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
        if version != VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(data[16 : 16 + hlen].decode())
        off = 16 + hlen
        arrays = {}
        for name in header["arrays"]:
            (ndim,) = struct.unpack_from("<I", data, off)
            shape = struct.unpack_from(f"<{ndim}Q", data, off + 4)
            off += 4 + 8 * ndim
            count = int(np.prod(shape)) if ndim else 1
            if off + 8 * count > len(data):
                raise CheckpointError(f"{path}: truncated array {name!r}")
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).copy()
            off += 8 * count
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")

    clf = TransformerClassifier(**header["estimator"])
    clf.config_ = ModelConfig(**header["config"])
    clf.classes_ = np.array(header["classes"])
    clf.params_ = {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")}
    st = ChannelStandardizer()
    st.mean_, st.std_ = arrays["std.mean"], arrays["std.std"]
    st.keep_ = arrays["std.keep"] > 0.5
    st.n_features_in_ = len(st.mean_)
    clf.standardizer_ = st
    clf.n_features_in_ = st.n_features_in_
    clf.loss_curve_ = arrays["loss_curve"].tolist()
    return clf, header["extra"]
