"""Madgwick-style IMU orientation filter and gravity removal."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array

from .core import GRAVITY, SAMPLE_RATE_HZ, quat_normalize, quat_rotate
from .preprocess import UniformTrack

DEFAULT_BETA = 0.1
# Gain multiplier at t = 0, decaying linearly to 1 over INIT_PERIOD_S, so a
# wrong initial attitude is pulled in quickly without raising steady-state
# gain. Scaling keeps beta = 0 a pure gyro integrator.
INIT_GAIN_FACTOR = 100.0
INIT_PERIOD_S = 1.0
GRAD_FLOOR = 1e-6


@dataclass
class OrientationTrack:
    device_id: int
    track: UniformTrack
    q: np.ndarray
    a_earth: np.ndarray
    valid: np.ndarray

    @property
    def t(self) -> np.ndarray:
        return self.track.t

    @property
    def t0(self) -> float:
        return self.track.t0

    @property
    def rate_hz(self) -> float:
        return self.track.rate_hz

    @property
    def accel(self) -> np.ndarray:
        return self.track.accel

    @property
    def gyro(self) -> np.ndarray:
        return self.track.gyro

    def __len__(self) -> int:
        return len(self.q)


@numba.njit(cache=True)
def _madgwick(acc, gyr, valid, q0, beta, dt, init_factor, init_steps):
    n = acc.shape[0]
    out = np.empty((n, 4))
    q0w, q1, q2, q3 = q0[0], q0[1], q0[2], q0[3]
    deg = np.pi / 180.0
    for k in range(n):
        if not valid[k]:
            out[k, 0] = q0w
            out[k, 1] = q1
            out[k, 2] = q2
            out[k, 3] = q3
            continue
        gx = gyr[k, 0] * deg
        gy = gyr[k, 1] * deg
        gz = gyr[k, 2] * deg
        # q_dot = 0.5 * q (x) (0, w)
        dw = 0.5 * (-q1 * gx - q2 * gy - q3 * gz)
        dx = 0.5 * (q0w * gx + q2 * gz - q3 * gy)
        dy = 0.5 * (q0w * gy - q1 * gz + q3 * gx)
        dz = 0.5 * (q0w * gz + q1 * gy - q2 * gx)

        b = beta
        if k < init_steps:
            b = beta * (1.0 + (init_factor - 1.0) * (1.0 - k / init_steps))
        ax, ay, az = acc[k, 0], acc[k, 1], acc[k, 2]
        an = np.sqrt(ax * ax + ay * ay + az * az)
        if b > 0.0 and an > 0.0:
            ax /= an
            ay /= an
            az /= an
            # f = q^* (0,0,0,1) q - a ;  grad = J^T f
            f1 = 2.0 * (q1 * q3 - q0w * q2) - ax
            f2 = 2.0 * (q0w * q1 + q2 * q3) - ay
            f3 = 2.0 * (0.5 - q1 * q1 - q2 * q2) - az
            s0 = -2.0 * q2 * f1 + 2.0 * q1 * f2
            s1 = 2.0 * q3 * f1 + 2.0 * q0w * f2 - 4.0 * q1 * f3
            s2 = -2.0 * q0w * f1 + 2.0 * q3 * f2 - 4.0 * q2 * f3
            s3 = 2.0 * q1 * f1 + 2.0 * q2 * f2
            sn = np.sqrt(s0 * s0 + s1 * s1 + s2 * s2 + s3 * s3)
            # at the fixed point the normalised gradient is rounding noise
            if sn > GRAD_FLOOR:
                dw -= b * s0 / sn
                dx -= b * s1 / sn
                dy -= b * s2 / sn
                dz -= b * s3 / sn
        q0w += dw * dt
        q1 += dx * dt
        q2 += dy * dt
        q3 += dz * dt
        qn = np.sqrt(q0w * q0w + q1 * q1 + q2 * q2 + q3 * q3)
        q0w /= qn
        q1 /= qn
        q2 /= qn
        q3 /= qn
        out[k, 0] = q0w
        out[k, 1] = q1
        out[k, 2] = q2
        out[k, 3] = q3
    return out


def quat_from_gravity(accel) -> np.ndarray:
    """Zero-yaw orientation that maps the measured accel direction onto
    earth +z."""
    a = np.asarray(accel, dtype=np.float64)
    a = a / np.linalg.norm(a)
    z = GRAVITY
    c = float(np.dot(a, z))
    if c < -1.0 + 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    axis = np.cross(a, z)
    q = np.array([1.0 + c, *axis])
    return quat_normalize(q)


def run_filter(accel, gyro, valid=None, *, beta=DEFAULT_BETA, rate_hz=SAMPLE_RATE_HZ, q0=None,
               init_gain_factor=INIT_GAIN_FACTOR, init_period_s=INIT_PERIOD_S) -> np.ndarray:
    accel = np.ascontiguousarray(accel, dtype=np.float64)
    gyro = np.ascontiguousarray(gyro, dtype=np.float64)
    n = len(accel)
    valid = np.ones(n, dtype=bool) if valid is None else np.ascontiguousarray(valid, dtype=bool)
    if q0 is None:
        first = np.flatnonzero(valid & (np.linalg.norm(accel, axis=1) > 0))
        q0 = quat_from_gravity(accel[first[0]]) if len(first) else np.array([1.0, 0.0, 0.0, 0.0])
    q0 = quat_normalize(np.asarray(q0, dtype=np.float64))
    q = _madgwick(accel, gyro, valid, q0, float(beta), 1.0 / rate_hz, float(init_gain_factor),
                  int(round(init_period_s * rate_hz)))
    return quat_normalize(q) if n else q


def earth_accel(accel, q) -> np.ndarray:
    """Gravity-free earth-frame acceleration [g]."""
    return quat_rotate(q, accel) - GRAVITY


def fuse_orientation(track: UniformTrack, gain_beta: float = DEFAULT_BETA, *, q0=None,
                     init_gain_factor: float = INIT_GAIN_FACTOR,
                     init_period_s: float = INIT_PERIOD_S) -> OrientationTrack:
    """Run the filter over a calibrated uniform track.

    Invalid samples hold the last valid attitude and stay flagged invalid.
    """
    q = run_filter(track.accel, track.gyro, track.valid, beta=gain_beta, rate_hz=track.rate_hz, q0=q0,
                   init_gain_factor=init_gain_factor, init_period_s=init_period_s)
    a = earth_accel(track.accel, q) if len(q) else np.zeros((0, 3))
    return OrientationTrack(track.device_id, track, q, a, track.valid.copy())


class MadgwickFilter(BaseEstimator, TransformerMixin):
    """Estimator wrapper: ``transform`` maps (n, 6) accel+gyro rows to
    (n, 4) sensor-to-earth quaternions. Stateless, so ``fit`` only
    validates."""

    def __init__(self, beta=DEFAULT_BETA, rate_hz=SAMPLE_RATE_HZ, init_gain_factor=INIT_GAIN_FACTOR,
                 init_period_s=INIT_PERIOD_S):
        self.beta = beta
        self.rate_hz = rate_hz
        self.init_gain_factor = init_gain_factor
        self.init_period_s = init_period_s

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 6:
            raise ValueError(f"expected 6 columns (accel, gyro), got {X.shape[1]}")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        self.n_features_in_ = 6
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != 6:
            raise ValueError(f"expected 6 columns (accel, gyro), got {X.shape[1]}")
        return run_filter(X[:, :3], X[:, 3:], beta=self.beta, rate_hz=self.rate_hz,
                          init_gain_factor=self.init_gain_factor, init_period_s=self.init_period_s)
