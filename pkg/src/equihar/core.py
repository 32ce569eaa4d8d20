"""Shared domain types, raw-unit scaling and quaternion math.

Conventions used by every module:

* quaternions are Hamilton products stored ``(w, x, y, z)``;
* an orientation quaternion rotates sensor-frame vectors into the earth
  frame (z up), i.e. ``v_earth = q * (0, v_sensor) * q^*``;
* accelerations are in g, angular rates in degrees per second.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

SAMPLE_RATE_HZ = 130.0
N_DEVICES = 10

ACCEL_RANGE_G = 16.0
GYRO_RANGE_DPS = 2000.0
ACCEL_LSB_G = ACCEL_RANGE_G / 32768.0
GYRO_LSB_DPS = GYRO_RANGE_DPS / 32768.0

GRAVITY = np.array([0.0, 0.0, 1.0])


class Vec3(NamedTuple):
    x: float
    y: float
    z: float


class Quaternion(NamedTuple):
    w: float
    x: float
    y: float
    z: float


IDENTITY = Quaternion(1.0, 0.0, 0.0, 0.0)


class Placement(IntEnum):
    """Sensor mounting site; the integer value is the device id."""

    HORSE_LF = 0
    HORSE_RF = 1
    HORSE_LH = 2
    HORSE_RH = 3
    RIDER_HEAD = 4
    RIDER_WAIST = 5
    RIDER_LEFT_ARM = 6
    RIDER_RIGHT_ARM = 7
    RIDER_LEFT_LEG = 8
    RIDER_RIGHT_LEG = 9

    @property
    def is_horse(self) -> bool:
        return self.value <= 3

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def from_slug(cls, slug: str) -> "Placement":
        try:
            return cls[slug.upper()]
        except KeyError:
            raise ValueError(f"unknown placement {slug!r}") from None


HORSE_LIMBS = (Placement.HORSE_LF, Placement.HORSE_RF, Placement.HORSE_LH, Placement.HORSE_RH)
RIDER_LIMBS = (
    Placement.RIDER_HEAD,
    Placement.RIDER_LEFT_ARM,
    Placement.RIDER_RIGHT_ARM,
    Placement.RIDER_LEFT_LEG,
    Placement.RIDER_RIGHT_LEG,
)


@dataclass(frozen=True)
class RawSample:
    device_id: int
    t_device_us: int
    accel_raw: tuple[int, int, int]
    gyro_raw: tuple[int, int, int]

    def __post_init__(self):
        for v in (*self.accel_raw, *self.gyro_raw):
            if not -32768 <= v <= 32767:
                raise ValueError(f"raw value {v} outside int16 range")


@dataclass(frozen=True)
class CalibratedSample:
    """One 6-axis reading in physical units on the host clock.

    ``seq`` is the device sample counter when known; it is not part of the
    persisted session table.
    """

    device_id: int
    t_s: float
    accel: Vec3
    gyro: Vec3
    seq: int | None = None


def accel_to_g(raw):
    return np.asarray(raw, dtype=np.float64) * ACCEL_LSB_G


def gyro_to_dps(raw):
    return np.asarray(raw, dtype=np.float64) * GYRO_LSB_DPS


def quantize_accel(g):
    """Physical accel [g] to saturated int16 counts."""
    return np.clip(np.rint(np.asarray(g) / ACCEL_LSB_G), -32768, 32767).astype(np.int16)


def quantize_gyro(dps):
    return np.clip(np.rint(np.asarray(dps) / GYRO_LSB_DPS), -32768, 32767).astype(np.int16)


class NotUnitQuaternionError(ValueError):
    pass


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_normalize(q) -> np.ndarray:
    """Unit-normalize and put in canonical sign.

    Canonical form has ``w >= 0``; when ``w == 0`` the first nonzero
    component is made positive.

    Raises
    ------
    ValueError
        If any quaternion has zero norm.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm == 0.0) or not np.all(np.isfinite(norm)):
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    q = q / norm
    nonzero = q != 0.0
    first = np.argmax(nonzero, axis=-1)
    lead = np.take_along_axis(q, first[..., None], axis=-1)
    return np.where(lead < 0.0, -q, q)


def quat_rotate(q, v, *, tol: float = 1e-6) -> np.ndarray:
    """Rotate vectors ``v`` by unit quaternions ``q`` (``q v q^*``).

    Raises
    ------
    NotUnitQuaternionError
        If any ``q`` deviates from unit norm by more than ``tol``.
    """
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if np.any(np.abs(np.linalg.norm(q, axis=-1) - 1.0) > tol):
        raise NotUnitQuaternionError("quat_rotate requires unit quaternions")
    w = q[..., :1]
    u = q[..., 1:]
    # v' = v + 2w (u x v) + 2 u x (u x v)
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_from_axis_angle(axis, angle_rad) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle_rad, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_angle(a, b) -> np.ndarray:
    """Rotation angle [rad] between orientations, sign-invariant."""
    dot = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(dot, 0.0, 1.0))


def tilt_error_deg(q, target_up_sensor) -> np.ndarray:
    """Angle between the earth z axis and ``q`` applied to a sensor-frame
    direction that should point up."""
    up = np.asarray(target_up_sensor, dtype=np.float64)
    up = up / np.linalg.norm(up, axis=-1, keepdims=True)
    r = quat_rotate(q, np.broadcast_to(up, np.shape(q)[:-1] + (3,)))
    return np.degrees(np.arccos(np.clip(r[..., 2], -1.0, 1.0)))


def yaw_deg(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.degrees(np.arctan2(2.0 * (w * z + x * y), 1.0 - 2.0 * (y * y + z * z)))
