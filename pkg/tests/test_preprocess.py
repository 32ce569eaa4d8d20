import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equihar.preprocess import (
    BiasCalibrator,
    InsufficientSamplesError,
    InsufficientStillnessError,
    UniformTrack,
    apply_calibration,
    calibrate_tracks,
    detect_still,
    estimate_bias,
    resample_uniform,
)
from equihar.sim import GaitParams, ScriptStep, simulate_session

RATE = 130.0


def still_track(seconds, gyro=(0, 0, 0), accel=(0, 0, 1)):
    n = int(seconds * RATE)
    return UniformTrack.from_arrays(np.tile(accel, (n, 1)), np.tile(gyro, (n, 1)))


def test_still_constant_zero():
    tr = still_track(5)
    [(a, b)] = detect_still(tr)
    assert a == 0 and b == pytest.approx(5.0)


def test_still_none_when_rotating():
    assert detect_still(still_track(5, gyro=(100, 0, 0))) == []


def test_still_on_simulated_halt_then_walk():
    sim = simulate_session([ScriptStep(2.0, GaitParams.preset("halt")), ScriptStep(8.0, GaitParams.preset("walk"))],
                           seed=0)
    tr = resample_uniform(sim.to_samples([0]))[0]
    [(a, b)] = detect_still(tr)
    assert a == pytest.approx(0.0, abs=0.05)
    assert b == pytest.approx(2.0, abs=0.05)


def test_bias_constant_gyro():
    tr = still_track(3, gyro=(2, 0, 0))
    cal = estimate_bias(tr, [(0, 3)])
    np.testing.assert_allclose(cal.gyro_bias, [2, 0, 0], atol=1e-12)


def test_bias_accel_along_gravity():
    tr = still_track(3, accel=(0, 0, 1.02))
    cal = estimate_bias(tr, [(0, 3)])
    np.testing.assert_allclose(cal.accel_bias, [0, 0, 0.02], atol=1e-12)


def test_bias_needs_stillness():
    with pytest.raises(InsufficientStillnessError, match="still"):
        estimate_bias(still_track(0.5), [(0, 0.5)])


def test_bias_recovered_from_simulator():
    bias = (1.5, -0.7, 0.3)
    sim = simulate_session([ScriptStep(5.0, GaitParams.preset("halt")), ScriptStep(5.0, GaitParams.preset("trot"))],
                           seed=3, gyro_bias={0: bias})
    tr = resample_uniform(sim.to_samples([0]))[0]
    cal = estimate_bias(tr, detect_still(tr))
    np.testing.assert_allclose(cal.gyro_bias, bias, atol=0.1)


def test_calibration_is_idempotent():
    sim = simulate_session([ScriptStep(5.0, GaitParams.preset("halt")), ScriptStep(5.0, GaitParams.preset("walk"))],
                           seed=3, gyro_bias={1: (3.0, 1.0, -2.0)})
    tracks = resample_uniform(sim.to_samples([1]))
    once, _, _ = calibrate_tracks(tracks)
    _, cals, _ = calibrate_tracks(once)
    noise = GaitParams.preset("halt").noise_gyro_dps
    assert np.linalg.norm(cals[1].gyro_bias) < noise
    assert np.linalg.norm(cals[1].accel_bias) < 0.01


def test_calibration_skips_moving_device_with_note():
    sim = simulate_session([ScriptStep(5.0, GaitParams.preset("trot"))], seed=0)
    tracks = resample_uniform(sim.to_samples([0]))
    out, cals, notes = calibrate_tracks(tracks)
    assert np.all(cals[0].gyro_bias == 0) and notes
    np.testing.assert_array_equal(out[0].gyro, tracks[0].gyro)


def test_resample_hand_value():
    tracks = resample_uniform({0: ([0.0, 0.010], np.array([[0, 0, 0], [1, 1, 1.0]]), np.zeros((2, 3)))})
    tr = tracks[0]
    assert tr.accel[1, 0] == pytest.approx(0.76923, abs=1e-5)
    assert tr.accel[1, 0] == pytest.approx((1 / 130) / 0.010, abs=1e-12)


def test_resample_on_grid_identity(rng):
    t = np.arange(200) / RATE
    a = rng.normal(size=(200, 3))
    g = rng.normal(size=(200, 3))
    tr = resample_uniform({0: (t, a, g)})[0]
    np.testing.assert_array_equal(tr.accel, a)
    np.testing.assert_array_equal(tr.gyro, g)
    assert tr.valid.all()


def test_dropout_masks_thirteen_points():
    t = np.arange(1000) / RATE
    # remove 100 ms worth of interior samples
    k0 = 390
    keep = np.ones(1000, bool)
    keep[k0 + 1 : k0 + 1 + 12] = False
    t2 = t[keep]
    assert t2[k0 + 1] - t2[k0] == pytest.approx(13 / RATE)
    tr = resample_uniform({0: (t2, np.zeros((len(t2), 3)), np.zeros((len(t2), 3)))})[0]
    assert (~tr.valid).sum() == 12
    # a 100 ms gap: 13 periods wide, 12 interior grid points plus the 13th
    # landing on the next source sample
    assert 0.100 * RATE == 13.0


def test_small_gap_is_bridged():
    t = np.delete(np.arange(100) / RATE, [50, 51])
    tr = resample_uniform({0: (t, np.zeros((98, 3)), np.zeros((98, 3)))})[0]
    assert tr.valid.all()


def test_too_few_samples():
    with pytest.raises(InsufficientSamplesError):
        resample_uniform({0: ([0.0], np.zeros((1, 3)), np.zeros((1, 3)))})


def test_shared_grid_across_devices():
    t1 = np.arange(0.0, 2.0, 1 / 130)
    t2 = np.arange(0.013, 2.5, 1 / 130)
    tr = resample_uniform({0: (t1, np.zeros((len(t1), 3)), np.zeros((len(t1), 3))),
                           1: (t2, np.zeros((len(t2), 3)), np.zeros((len(t2), 3)))})
    assert tr[0].t0 == tr[1].t0 == pytest.approx(0.013)
    assert len(tr[0]) == len(tr[1])
    assert tr[0].t[-1] <= t1[-1] + 1e-12


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.0, 1 / 130), st.integers(0, 2**31))
def test_resample_exact_on_affine(a, b, offset, seed):
    rng = np.random.default_rng(seed)
    dt = rng.uniform(0.5, 1.5, 300) / RATE
    t = offset + np.cumsum(dt)
    v = a + b * t
    vals = np.stack([v, v, v], axis=1)
    tr = resample_uniform({0: (t, vals, vals)}, gap_periods=10)[0]
    expect = a + b * tr.t
    assert np.abs(tr.accel[:, 0] - expect).max() <= 1e-12 * (1 + abs(a) + abs(b) * t.max())


def test_estimator_form():
    sim = simulate_session([ScriptStep(4.0, GaitParams.preset("halt")), ScriptStep(4.0, GaitParams.preset("walk"))],
                           seed=0, gyro_bias={0: (2.0, 0.0, 0.0)})
    X = np.concatenate([sim.accel(0), sim.gyro(0)], axis=1)
    est = BiasCalibrator().fit(X)
    assert est.gyro_bias_[0] == pytest.approx(2.0, abs=0.1)
    Y = est.transform(X)
    assert Y.shape == X.shape
    assert est.get_params()["gyro_thresh"] == 3.0
