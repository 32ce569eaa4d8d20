from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from equihar.core import RIDER_LIMBS, Placement, quat_from_axis_angle, quat_rotate
from equihar.fusion import fuse_orientation
from equihar.preprocess import resample_uniform
from equihar.rider import (
    InsufficientOverlapError,
    MmiSeries,
    ResidualTrack,
    activity_map,
    align_lag,
    extract_residual,
    mmi,
)
from equihar.sim import GaitParams, RiderParams, ScriptStep, simulate_session, with_noise

RATE = 130.0


def track(a, device_id=6, valid=None):
    a = np.asarray(a, float)
    return SimpleNamespace(a_earth=a, valid=np.ones(len(a), bool) if valid is None else valid,
                           rate_hz=RATE, t0=0.0, device_id=device_id)


def residual(r, ref=None):
    r = np.asarray(r, float)
    ref = np.zeros_like(r) if ref is None else ref
    return ResidualTrack(Placement.RIDER_LEFT_ARM, 0.0, RATE, r, ref, np.ones(len(r), bool), 0.0)


def smooth_signal(rng, n):
    # band-limited so neighbouring lags are distinguishable but correlated
    x = rng.normal(size=(n + 40, 3))
    k = np.hanning(9)
    return np.stack([np.convolve(x[:, i], k / k.sum(), "same") for i in range(3)], 1)[20:-20] + [0, 0, 1]


def test_lag_identical_is_zero(rng):
    a = smooth_signal(rng, 1300)
    assert align_lag(a, a) == 0.0


@pytest.mark.parametrize("shift", [-7, -3, 3, 10])
def test_lag_recovers_shift(rng, shift):
    w = smooth_signal(rng, 1400)
    # limb[k] = waist[k - shift]
    limb = np.roll(w, shift, axis=0)
    assert align_lag(limb, w) == pytest.approx(shift / RATE, abs=1e-12)


def test_lag_independent_noise_is_zero(rng):
    assert align_lag(rng.normal(size=(1300, 3)), rng.normal(size=(1300, 3))) == 0.0


def test_lag_needs_overlap(rng):
    with pytest.raises(InsufficientOverlapError):
        align_lag(rng.normal(size=(600, 3)), rng.normal(size=(600, 3)))
    a = rng.normal(size=(1300, 3))
    v = np.zeros(1300, bool)
    v[:300] = True
    with pytest.raises(InsufficientOverlapError):
        align_lag(a, a, limb_valid=v)


@settings(max_examples=25)
@given(st.integers(0, 2**31))
def test_self_subtraction_is_exact_zero(seed):
    a = np.random.default_rng(seed).normal(size=(200, 3))
    r = extract_residual(track(a), track(a, 5), 0.0)
    assert np.array_equal(r.r, np.zeros_like(a))
    assert r.valid.all()


def test_zero_waist_leaves_limb(rng):
    a = rng.normal(size=(200, 3))
    r = extract_residual(track(a), track(np.zeros_like(a), 5))
    np.testing.assert_array_equal(r.r, a)


def test_residual_lag_and_validity(rng):
    a = rng.normal(size=(100, 3))
    w = rng.normal(size=(100, 3))
    wv = np.ones(100, bool)
    wv[50] = False
    r = extract_residual(track(a), track(w, 5, wv), lag_s=2 / RATE)
    np.testing.assert_array_equal(r.r[10], a[10] - w[8])
    assert not r.valid[:2].any() and not r.valid[52] and r.valid[2:52].all()
    assert r.lag_s == pytest.approx(2 / RATE)


def rider_session(amplitude, seed=4):
    # noise-free: the oracles concern the injected component, not the sensor floor
    rider = RiderParams(amplitude_g=amplitude, frequency_hz=2.0, burst_on_s=1e6, burst_off_s=1.0)
    script = [ScriptStep(3.0, GaitParams.preset("halt")), ScriptStep(20.0, GaitParams.preset("trot"), rider=rider)]
    sim = simulate_session(with_noise(script, 0.0, 0.0), seed=seed)
    tracks = resample_uniform(sim.to_samples())
    return sim, {d: fuse_orientation(tr) for d, tr in tracks.items()}


def residual_for(tracks, limb):
    waist = tracks[int(Placement.RIDER_WAIST)]
    lt = tracks[int(limb)]
    lag = align_lag(lt.a_earth, waist.a_earth, limb_valid=lt.valid, waist_valid=waist.valid)
    return extract_residual(lt, waist, lag, limb)


def test_residual_recovers_injected_component():
    sim, tracks = rider_session(0.3)
    for limb in RIDER_LIMBS:
        r = residual_for(tracks, limb)
        s = np.linalg.norm(sim.rider_truth[limb], axis=1)
        k = slice(int(4 * RATE), len(r) - int(RATE))
        c = np.corrcoef(np.linalg.norm(r.r[k], axis=1), s[k])[0, 1]
        assert c >= 0.95, (limb, c)
        assert abs(r.lag_s) <= 10 / RATE


def test_mmi_doubles_with_rider_amplitude():
    _, t1 = rider_session(0.1)
    _, t2 = rider_session(0.2)
    for limb in RIDER_LIMBS:
        m1 = mmi(residual_for(t1, limb)).mmi
        m2 = mmi(residual_for(t2, limb)).mmi
        k = slice(16, -4)  # riding segment, away from the halt
        ratio = np.nanmean(m2[k]) / np.nanmean(m1[k])
        assert ratio == pytest.approx(2.0, rel=0.01), limb


def test_mmi_constant_magnitude():
    n = 650
    ang = np.linspace(0, 20, n)
    r = 0.2 * np.stack([np.cos(ang), np.sin(ang), np.zeros(n)], 1)
    m = mmi(residual(r))
    np.testing.assert_allclose(m.mmi, 0.2, rtol=1e-12)
    assert len(m.centers) == 1 + (n - 130) // round(0.25 * RATE)
    assert m.centers[0] == pytest.approx(0.5)


def test_mmi_zero_and_normalized_undefined():
    m = mmi(residual(np.zeros((300, 3))))
    assert np.all(m.mmi == 0) and np.all(np.isnan(m.normalized))


def test_mmi_normalized(rng):
    r = rng.normal(size=(300, 3))
    m = mmi(residual(r, 2 * r))
    np.testing.assert_allclose(m.normalized, 0.5)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(0, 50))
def test_mmi_scales_linearly(seed, c):
    r = np.random.default_rng(seed).normal(size=(260, 3))
    np.testing.assert_allclose(mmi(residual(c * r)).mmi, c * mmi(residual(r)).mmi, rtol=1e-12, atol=1e-300)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.floats(-np.pi, np.pi))
def test_mmi_yaw_invariant(seed, yaw):
    r = np.random.default_rng(seed).normal(size=(260, 3))
    q = quat_from_axis_angle([0, 0, 1], yaw)
    rot = quat_rotate(np.tile(q, (len(r), 1)), r)
    np.testing.assert_allclose(mmi(residual(rot)).mmi, mmi(residual(r)).mmi, rtol=1e-9)


def test_mmi_invalid_window_is_nan():
    res = residual(np.ones((300, 3)))
    res.valid[150] = False
    m = mmi(res)
    hit = (m.centers - 0.5 <= 150 / RATE) & (m.centers + 0.5 > 150 / RATE)
    assert np.isnan(m.mmi[hit]).all() and np.isfinite(m.mmi[~hit]).all()


def test_mmi_window_too_large():
    with pytest.raises(ValueError):
        mmi(residual(np.zeros((100, 3))))


def series(limb, centers, value):
    c = np.asarray(centers, float)
    return MmiSeries(limb, c, np.full(len(c), value), np.full(len(c), np.nan))


def test_activity_map_constant():
    s = series(Placement.RIDER_HEAD, np.arange(0.5, 59.6, 0.25), 0.1)
    am = activity_map([s], t0=0.0, duration=60.0)
    assert am.values.shape == (1, 12)
    np.testing.assert_allclose(am.values, 0.1)
    np.testing.assert_allclose(am.bin_edges(), np.arange(0, 61, 5.0))


def test_activity_map_zero_length():
    am = activity_map([series(Placement.RIDER_HEAD, [], 0.1)], t0=0.0, duration=0.0)
    assert am.values.shape == (1, 0)


def test_activity_map_empty_bins_are_zero():
    am = activity_map({Placement.RIDER_HEAD: series(Placement.RIDER_HEAD, [1.0, 2.0], 0.3)}, t0=0.0, duration=15.0)
    np.testing.assert_allclose(am.values, [[0.3, 0.0, 0.0]])
    assert (am.values >= 0).all()
