import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from equihar.core import HORSE_LIMBS, Placement
from equihar.gait import HOOF_OFF, HOOF_ON
from equihar.protocols import DRIFT_DPS, TASK_CLASSES, TASKS, HorseProfile, gait_protocol, task_protocol
from equihar.sim import (
    GaitParams,
    RiderParams,
    ScriptError,
    ScriptStep,
    inject_faults,
    limb_cycle,
    parse_script,
    simulate_session,
    step_from_dict,
    step_to_dict,
)


def walk(**kw):
    return GaitParams.preset("walk", **kw)


def test_limb_cycle_halt():
    for ph in (0.0, 0.3, 0.9):
        a, g = limb_cycle(GaitParams.preset("halt"), ph)
        np.testing.assert_array_equal(a, [0, 0, 1])
        np.testing.assert_array_equal(g, [0, 0, 0])


def test_limb_cycle_stance_is_quiet():
    p = walk(duty=0.6)
    _, g = limb_cycle(p, 0.3, rng=np.random.default_rng(0))
    assert np.linalg.norm(g) < 3 * np.sqrt(3) * p.noise_gyro_dps


def test_limb_cycle_swing_reaches_peak():
    # two-lobe swing: the sagittal rate peaks a quarter of the way into the
    # swing and its integral over the swing is zero
    p = walk(duty=0.6)
    _, g = limb_cycle(p, 0.6 + 0.25 * 0.4)
    assert g[0] == pytest.approx(p.swing_peak_dps, rel=0.01)
    s = np.linspace(0.6, 1.0, 4001)[:-1]
    rates = np.array([limb_cycle(p, x)[1][0] for x in s])
    assert abs(rates.mean()) < 1e-9 * p.swing_peak_dps + 1e-6


def test_limb_cycle_impact_at_onset():
    p = walk()
    a, _ = limb_cycle(p, 0.0)
    assert a[2] == pytest.approx(1.0 + p.impact_g)


def test_walk_event_count():
    sim = simulate_session([ScriptStep(10.0, walk(stride_hz=0.9))], seed=3)
    for limb in HORSE_LIMBS:
        assert len(sim.truth.events_for(limb, HOOF_ON)) == 9


def test_halt_only():
    sim = simulate_session([ScriptStep(5.0, GaitParams.preset("halt"))], seed=0)
    assert sim.truth.events == []
    gait = sim.truth.track("gait")
    assert [(a.label, a.start_s, a.end_s) for a in gait] == [("halt", 0.0, 5.0)]


def test_halt_accel_norm():
    p = GaitParams.preset("halt")
    sim = simulate_session([ScriptStep(5.0, p)], seed=2)
    for d in range(10):
        norm = np.linalg.norm(sim.accel(d), axis=1)
        assert np.abs(norm - 1).max() < 3 * np.sqrt(3) * p.noise_accel_g + 1e-3


def test_empty_script_rejected():
    with pytest.raises(ScriptError):
        simulate_session([], seed=0)
    with pytest.raises(ScriptError):
        parse_script([])


def test_same_seed_same_packets():
    script = [ScriptStep(2.0, GaitParams.preset("trot"))]
    a = simulate_session(script, seed=5).packets()
    b = simulate_session(script, seed=5).packets()
    assert a == b
    c = simulate_session(script, seed=6).packets()
    assert a != c


@pytest.mark.parametrize("gait", ["walk", "trot", "canter", "jump"])
def test_truth_alternates_with_minimum_durations(gait):
    sim = simulate_session([ScriptStep(2.0, GaitParams.preset("halt")), ScriptStep(12.0, GaitParams.preset(gait))],
                           seed=1)
    for limb in HORSE_LIMBS:
        ev = sorted(sim.truth.events_for(limb), key=lambda e: e.t_s)
        assert ev, limb
        kinds = [e.kind for e in ev]
        assert all(a != b for a, b in zip(kinds, kinds[1:]))
        for a, b in zip(ev, ev[1:]):
            # stance (on -> off) >= 0.15 s, swing (off -> on) >= 0.2 s
            assert b.t_s - a.t_s >= (0.15 if a.kind == HOOF_ON else 0.2) - 1e-9


def test_walk_footfall_order():
    sim = simulate_session([ScriptStep(10.0, walk())], seed=0)
    first = {l: min(e.t_s for e in sim.truth.events_for(l, HOOF_ON) if e.t_s > 2.0) for l in HORSE_LIMBS}
    order = sorted(first, key=first.get)
    # 4-beat: LH, LF, RH, RF (cyclic)
    cyc = [Placement.HORSE_LH, Placement.HORSE_LF, Placement.HORSE_RH, Placement.HORSE_RF]
    i = cyc.index(order[0])
    assert order == cyc[i:] + cyc[:i]


def test_trot_diagonal_pairs_synchronized():
    sim = simulate_session([ScriptStep(6.0, GaitParams.preset("trot"))], seed=0)
    lf = [e.t_s for e in sim.truth.events_for(Placement.HORSE_LF, HOOF_ON)]
    rh = [e.t_s for e in sim.truth.events_for(Placement.HORSE_RH, HOOF_ON)]
    assert len(lf) == len(rh)
    np.testing.assert_allclose(lf, rh, atol=1e-9)


def test_waist_depends_only_on_horse_limbs():
    base = [ScriptStep(6.0, walk(), rider=RiderParams(0.0))]
    busy = [ScriptStep(6.0, walk(), rider=RiderParams(0.3, 2.5))]
    a = simulate_session(base, seed=11)
    b = simulate_session(busy, seed=11)
    w = int(Placement.RIDER_WAIST)
    np.testing.assert_array_equal(a.raw[w], b.raw[w])
    for limb in HORSE_LIMBS:
        np.testing.assert_array_equal(a.raw[int(limb)], b.raw[int(limb)])
    assert not np.array_equal(a.raw[int(Placement.RIDER_LEFT_ARM)], b.raw[int(Placement.RIDER_LEFT_ARM)])


def test_gyro_bias_injection():
    sim = simulate_session([ScriptStep(3.0, GaitParams.preset("halt", noise_gyro_dps=0.0))], seed=0,
                           gyro_bias={0: (1.5, -0.7, 0.3)})
    np.testing.assert_allclose(sim.gyro(0).mean(axis=0), [1.5, -0.7, 0.3], atol=0.04)


# ------------------------------------------------------------------ faults


def _stream(n):
    return [(i * 0.01, i.to_bytes(2, "little")) for i in range(n)]


def test_faults_identity():
    s = _stream(500)
    assert inject_faults(s, 0.0, 0.0, seed=1) == s


def test_faults_total_loss():
    assert inject_faults(_stream(500), 1.0, 0.0) == []


def test_faults_loss_count_regression():
    s = _stream(10_000)
    dropped = 10_000 - len(inject_faults(s, 0.01, 0.0, seed=0))
    assert abs(dropped - 100) <= 40
    assert dropped == 89


def test_faults_deterministic_and_time_ordered():
    s = _stream(2000)
    a = inject_faults(s, 0.05, 0.1, seed=3)
    assert a == inject_faults(s, 0.05, 0.1, seed=3)
    assert [t for t, _ in a] == sorted(t for t, _ in a)
    assert sorted(b for _, b in a) == sorted(set(b for _, b in a))


def test_faults_reject_bad_rates():
    with pytest.raises(ValueError):
        inject_faults(_stream(3), 1.5, 0.0)


# ------------------------------------------------------------------ scripts


@given(st.sampled_from(["halt", "walk", "trot", "canter", "jump"]), st.floats(0.1, 100),
       st.sampled_from([None, "working_trot"]))
def test_step_dict_round_trip(gait, dur, task):
    step = ScriptStep(dur, GaitParams.preset(gait), task)
    assert step_from_dict(step_to_dict(step)) == step


@pytest.mark.parametrize("doc", [
    [{"gait": "gallop", "duration": 1}],
    [{"gait": "walk"}],
    [{"gait": "walk", "duration": -1}],
    [{"gait": "walk", "duration": 1, "params": {"duty": 1.5}}],
    {"no_steps": []},
])
def test_invalid_scripts(doc):
    with pytest.raises(ScriptError):
        parse_script(doc)


def test_protocols_cover_their_classes():
    prof = HorseProfile.random(5)
    g = gait_protocol(prof, seed=5, repeats=2)
    assert {s.params.gait for s in g.steps} == {"halt", "walk", "trot", "canter", "jump"}
    assert g.steps[0].params.gait == "halt"
    t = task_protocol(prof, seed=5, repeats=3)
    assert sorted({s.task for s in t.steps if s.task}) == sorted(TASK_CLASSES)
    assert len(TASKS) == 6


def test_half_pass_graded_and_short():
    prof = HorseProfile(lateral_dps=0.0)
    t = task_protocol(prof, seed=2, repeats=4, segment_s=(20.0, 20.0))
    hp = [s for s in t.steps if s.task == "half_pass"]
    lo, hi = TASKS["half_pass"].lateral_dps
    lat = sorted(s.params.lateral_dps for s in hp)
    # one segment per quarter of the range, plus at most DRIFT_DPS of drift
    assert len(hp) == 4
    for k, v in enumerate(lat):
        assert lo + k * (hi - lo) / 4 <= v <= lo + (k + 1) * (hi - lo) / 4 + DRIFT_DPS
    assert all(s.duration == pytest.approx(12.0) for s in hp)
