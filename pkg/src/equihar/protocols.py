"""Ready-made simulator scripts: per-horse variability, a gait protocol and
a six-task dressage protocol."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import GaitParams, RiderParams, Script, ScriptStep

GAIT_CLASSES = ("halt", "walk", "trot", "canter", "jump")


@dataclass(frozen=True)
class TaskSpec:
    gait: str
    lead: str = "left"
    stride: float = 1.0
    impact: float = 1.0
    swing: float = 1.0
    lateral_dps: tuple[float, float] = (0.0, 0.0)  # range over graded segments
    lateral_sway_g: tuple[float, float] = (0.0, 0.0)
    duration: float = 1.0  # scales the protocol's segment length


# half_pass is a sideways trot: working_trot plus a lateral rate and trunk
# sway. Its segments are ridden at graded angles from shallow to steep, and
# every moving segment carries some natural sideways drift, so the shallow
# ones look like a working trot. That makes it the hardest task to separate.
# It is also a short movement across the arena.
TASKS = {
    "free_walk": TaskSpec("walk", stride=0.95, swing=1.1),
    "working_trot": TaskSpec("trot"),
    "lengthened_trot": TaskSpec("trot", stride=0.85, impact=1.5, swing=1.4),
    "canter_left": TaskSpec("canter", "left"),
    "canter_right": TaskSpec("canter", "right"),
    "half_pass": TaskSpec("trot", lateral_dps=(0.0, 16.0), lateral_sway_g=(0.0, 0.025),
                          duration=0.6),
}
TASK_CLASSES = tuple(TASKS)
DRIFT_DPS = 4.0  # upper bound of the natural per-segment lateral drift
DRIFT_SWAY_G = 0.006


@dataclass(frozen=True)
class HorseProfile:
    """Multiplicative deviations of one horse from the gait presets."""

    name: str = "horse"
    stride_scale: float = 1.0
    impact_scale: float = 1.0
    swing_scale: float = 1.0
    duty_shift: float = 0.0
    lateral_dps: float = 0.0
    sway_g: float = 0.0

    @classmethod
    def random(cls, seed: int, name: str | None = None) -> "HorseProfile":
        rng = np.random.default_rng(seed)
        return cls(
            name or f"horse{seed}",
            stride_scale=float(rng.uniform(0.95, 1.05)),
            impact_scale=float(rng.uniform(0.9, 1.1)),
            swing_scale=float(rng.uniform(0.93, 1.07)),
            duty_shift=float(rng.uniform(-0.03, 0.03)),
            lateral_dps=float(rng.uniform(0.0, 2.0)),
            sway_g=float(rng.uniform(0.0, 0.004)),
        )

    def params(self, gait: str, lead: str = "left", *, stride: float = 1.0, impact: float = 1.0,
               swing: float = 1.0, lateral_dps: float = 0.0, lateral_sway_g: float = 0.0, **extra) -> GaitParams:
        """Preset for ``gait`` scaled by this horse and by the task factors;
        lateral terms add to the horse's own."""
        base = GaitParams.preset(gait, lead=lead)
        if not base.moving:
            return GaitParams.preset(gait, **extra)
        return GaitParams.preset(
            gait,
            lead=lead,
            stride_hz=base.stride_hz * self.stride_scale * stride,
            impact_g=base.impact_g * self.impact_scale * impact,
            swing_peak_dps=base.swing_peak_dps * self.swing_scale * swing,
            duty=tuple(float(np.clip(d + self.duty_shift, 0.2, 0.8)) for d in base.duty),
            lateral_dps=self.lateral_dps + lateral_dps,
            lateral_sway_g=self.sway_g + lateral_sway_g,
            **extra,
        )


def _rider(rng) -> RiderParams:
    return RiderParams(amplitude_g=float(rng.uniform(0.05, 0.3)), frequency_hz=float(rng.uniform(1.5, 3.0)))


def gait_protocol(profile: HorseProfile, seed: int = 0, *, repeats: int = 4,
                  segment_s: tuple[float, float] = (20.0, 40.0), settle_s: float = 5.0) -> Script:
    """Shuffled blocks of every gait class after an initial still period.
    Canter alternates leads; the ``task`` field stays empty."""
    rng = np.random.default_rng(seed)
    steps = [ScriptStep(settle_s, GaitParams.preset("halt"))]
    blocks = [g for g in GAIT_CLASSES for _ in range(repeats)]
    rng.shuffle(blocks)
    n_canter = 0
    for g in blocks:
        lead = "left"
        if g == "canter":
            lead = ("left", "right")[n_canter % 2]
            n_canter += 1
        steps.append(ScriptStep(float(rng.uniform(*segment_s)), profile.params(g, lead), rider=_rider(rng)))
    return Script(steps, session_id=f"{profile.name}-gait")


def task_protocol(profile: HorseProfile, seed: int = 0, *, repeats: int = 4,
                  segment_s: tuple[float, float] = (20.0, 40.0), settle_s: float = 5.0) -> Script:
    """Shuffled blocks of the dressage tasks, each annotated on the task
    track (the gait track is annotated too).

    Lateral intensity is stratified: the k-th repeat of a task draws its
    position in the task's lateral range from quantile bin k, so every
    protocol spans shallow to steep segments.
    """
    rng = np.random.default_rng(seed)
    steps = [ScriptStep(settle_s, GaitParams.preset("halt"))]
    blocks = [t for t in TASK_CLASSES for _ in range(repeats)]
    rng.shuffle(blocks)
    grade = {t: list(rng.permutation(repeats)) for t in TASK_CLASSES}
    for name in blocks:
        spec = TASKS[name]
        u = (grade[name].pop() + rng.uniform()) / repeats
        (l0, l1), (s0, s1) = spec.lateral_dps, spec.lateral_sway_g
        params = profile.params(spec.gait, spec.lead, stride=spec.stride, impact=spec.impact, swing=spec.swing,
                                lateral_dps=l0 + u * (l1 - l0) + rng.uniform(0.0, DRIFT_DPS),
                                lateral_sway_g=s0 + u * (s1 - s0) + rng.uniform(0.0, DRIFT_SWAY_G))
        dur = spec.duration * float(rng.uniform(*segment_s))
        steps.append(ScriptStep(dur, params, task=name, rider=_rider(rng)))
    return Script(steps, session_id=f"{profile.name}-task")
