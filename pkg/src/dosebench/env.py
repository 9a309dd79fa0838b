"""Discrete-time glucose-insulin environment (15-minute control interval).

An episode covers 16 hours (64 control steps). Each step integrates the
patient physiology at 1-minute RK4 substeps, applies any meal falling in the
interval, and scores the resulting true glucose with the risk reward.
Observations report sensor glucose (true + Gaussian noise); reward and
termination always use true glucose.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .patients import (Cohort, MealEvent, PatientParams, PatientState,
                       apply_meal, get_patient, step_physiology)

CONTROL_INTERVAL_MIN = 15
SUBSTEP_MIN = 1.0
MAX_STEPS = 64
WINDOW_STEPS = 16
OBS_DIM = 3 * WINDOW_STEPS

ACTION_LOW = 0.0
ACTION_HIGH = 9.0

BG_TERMINATE_LOW = 40.0
BG_TERMINATE_HIGH = 500.0

DEFAULT_START_CLOCK = "05:00"

# Default meal plan: breakfast / lunch / afternoon snack, grams before the
# cohort scale factor, minutes after episode start (05:00 + offset).
_DEFAULT_MEALS = ((120.0, 45.0), (420.0, 60.0), (600.0, 20.0))
_COHORT_MEAL_SCALE = {Cohort.ADULT: 1.0, Cohort.ADOLESCENT: 0.8, Cohort.CHILD: 0.6}


def parse_clock(text: str) -> int:
    """'HH:MM' -> minutes since midnight."""
    hh, mm = text.split(":")[:2]
    return int(hh) * 60 + int(mm)


def format_clock(total_minutes: int) -> tuple[int, str]:
    """Absolute minutes since day-1 midnight -> (day index, 'HH:MM:SS')."""
    day = total_minutes // (24 * 60) + 1
    rem = total_minutes % (24 * 60)
    return day, f"{rem // 60:02d}:{rem % 60:02d}:00"


@dataclass(frozen=True)
class Scenario:
    cohort: Cohort
    patient_id: int
    meal_schedule: tuple[MealEvent, ...]
    initial_bg_range: tuple[float, float] = (120.0, 180.0)
    episode_start_clock: str = DEFAULT_START_CLOCK
    meal_jitter_min: float = 30.0
    meal_jitter_carb_frac: float = 0.2

    def __post_init__(self):
        lo, hi = self.initial_bg_range
        if not (0 < lo <= hi):
            raise ValueError("initial_bg_range must satisfy 0 < low <= high")
        offsets = [m.time_offset for m in self.meal_schedule]
        if offsets != sorted(offsets) or len(set(offsets)) != len(offsets):
            raise ValueError("meal times must be strictly increasing")


def default_scenario(cohort: Cohort, patient_id: int) -> Scenario:
    scale = _COHORT_MEAL_SCALE[Cohort(cohort)]
    meals = tuple(MealEvent(time_offset=t, carbs=c * scale)
                  for t, c in _DEFAULT_MEALS)
    return Scenario(cohort=Cohort(cohort), patient_id=patient_id,
                    meal_schedule=meals)


@dataclass(frozen=True)
class Observation:
    """Stacked 16-step window of (sensor glucose, rate, dose) triples."""

    window: tuple[tuple[float, float, float], ...]
    clock_minutes: tuple[int, ...]
    flat: np.ndarray  # 48 values, chronological, most-recent-last


@dataclass
class StepRecord:
    """One measurement plus the action taken at that time.

    `rate` is the infusion chosen at this measurement (0.0 for the current,
    not-yet-acted row and for the initial measurement). `meal_carbs` is the
    carbohydrate amount ingested during the interval ending at this
    measurement.
    """

    step: int
    clock: int
    bg_true: float
    bg_sensor: float
    rate: float = 0.0
    dose: float = 0.0
    meal_carbs: float = 0.0
    reward: float = 0.0


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    truncated: bool
    info: dict


def build_observation(history: list[StepRecord]) -> Observation:
    """Assemble the trailing 16-step window, padding before episode start.

    Padded rows replicate the initial sensor glucose with zero insulin.
    """
    if not history:
        raise ValueError("history must contain at least one measurement")
    rows = []
    clocks = []
    first = history[0]
    pad = WINDOW_STEPS - len(history)
    for i in range(pad):
        rows.append((first.bg_sensor, 0.0, 0.0))
        clocks.append(first.clock - (pad - i) * CONTROL_INTERVAL_MIN)
    for rec in history[-WINDOW_STEPS:]:
        rows.append((rec.bg_sensor, rec.rate, rec.dose))
        clocks.append(rec.clock)
    flat = np.asarray(rows, dtype=np.float64).reshape(-1)
    return Observation(window=tuple(rows), clock_minutes=tuple(clocks), flat=flat)


class GlucoseEnv:
    """Single-patient simulation environment; owns its random streams."""

    def __init__(self, scenario: Scenario, params: PatientParams | None = None):
        self.scenario = scenario
        self.params = params or get_patient(scenario.cohort, scenario.patient_id)
        self.history: list[StepRecord] = []
        self.state: PatientState | None = None
        self._meals: list[MealEvent] = []
        self._noise_rng: np.random.Generator | None = None
        self._sensor_rng: np.random.Generator | None = None
        self._step_count = 0
        self._done = False
        self.termination_cause: str | None = None

    def reset(self, seed) -> Observation:
        """Start an episode. `seed` is an int or a numpy SeedSequence."""
        ss = seed if isinstance(seed, np.random.SeedSequence) \
            else np.random.SeedSequence(int(seed))
        init_ss, jitter_ss, noise_ss, sensor_ss = ss.spawn(4)
        self._noise_rng = np.random.default_rng(noise_ss)
        self._sensor_rng = np.random.default_rng(sensor_ss)

        init_rng = np.random.default_rng(init_ss)
        lo, hi = self.scenario.initial_bg_range
        bg0 = float(init_rng.uniform(lo, hi))

        jitter_rng = np.random.default_rng(jitter_ss)
        self._meals = []
        for meal in self.scenario.meal_schedule:
            dt = jitter_rng.uniform(-self.scenario.meal_jitter_min,
                                    self.scenario.meal_jitter_min)
            dc = jitter_rng.uniform(-self.scenario.meal_jitter_carb_frac,
                                    self.scenario.meal_jitter_carb_frac)
            t = min(max(meal.time_offset + dt, 0.0), 959.0)
            self._meals.append(MealEvent(time_offset=t,
                                         carbs=max(meal.carbs * (1 + dc), 1.0)))
        self._meals.sort(key=lambda m: m.time_offset)

        clock0 = parse_clock(self.scenario.episode_start_clock)
        self.state = PatientState(g=bg0, s1=0.0, s2=0.0, x=0.0, q_gut=0.0,
                                  t_elapsed=0.0, clock=clock0)
        self._step_count = 0
        self._done = False
        self.termination_cause = None
        self.history = [StepRecord(step=0, clock=clock0, bg_true=bg0,
                                   bg_sensor=self._sense(bg0))]
        return build_observation(self.history)

    def _sense(self, bg_true: float) -> float:
        noise = self.params.cgm_sigma * self._sensor_rng.standard_normal() \
            if self.params.cgm_sigma > 0 else 0.0
        return max(bg_true + noise, 1.0)

    def step(self, action: float) -> StepResult:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        if self._done:
            raise RuntimeError("episode is over; call reset()")
        if not math.isfinite(action) or not (ACTION_LOW <= action <= ACTION_HIGH):
            raise ValueError(f"action must lie in [{ACTION_LOW}, {ACTION_HIGH}], "
                             f"got {action!r}")

        # Record the chosen action on the current measurement row.
        self.history[-1].rate = float(action)
        self.history[-1].dose = float(action) / 60.0 * CONTROL_INTERVAL_MIN

        t0 = self.state.t_elapsed
        meal_carbs = 0.0
        for minute in range(CONTROL_INTERVAL_MIN):
            t = t0 + minute
            for meal in self._meals:
                if t <= meal.time_offset < t + SUBSTEP_MIN:
                    self.state = apply_meal(self.state, meal.carbs)
                    meal_carbs += meal.carbs
            self.state = step_physiology(self.state, self.params, float(action),
                                         SUBSTEP_MIN, self._noise_rng)
        self.state.clock += CONTROL_INTERVAL_MIN
        self._step_count += 1

        bg = self.state.g
        terminated = bg < BG_TERMINATE_LOW or bg > BG_TERMINATE_HIGH
        truncated = not terminated and self._step_count >= MAX_STEPS
        reward = metrics.step_reward(bg, terminated)
        risk = metrics.risk_index(bg).ri
        if terminated:
            self.termination_cause = "hypo" if bg < BG_TERMINATE_LOW else "hyper"
        self._done = terminated or truncated

        rec = StepRecord(step=self._step_count, clock=self.state.clock,
                         bg_true=bg, bg_sensor=self._sense(bg),
                         meal_carbs=meal_carbs, reward=reward)
        self.history.append(rec)
        obs = build_observation(self.history)
        info = {"bg_true": bg, "risk_index": risk, "meal_carbs": meal_carbs}
        return StepResult(observation=obs, reward=reward,
                          terminated=terminated, truncated=truncated, info=info)


def trace_lines(env: GlucoseEnv):
    """Episode trace as JSON-lines rows, one completed step per line."""
    lines = []
    n = len(env.history)
    for i, rec in enumerate(env.history):
        terminated = (i == n - 1) and env.termination_cause is not None
        truncated = (i == n - 1) and env._done and env.termination_cause is None
        lines.append(json.dumps({
            "t": rec.step,
            "clock": "Day {}, {}".format(*format_clock(rec.clock)),
            "bg_true": round(rec.bg_true, 4),
            "bg_sensor": round(rec.bg_sensor, 4),
            "rate": rec.rate,
            "dose": rec.dose,
            "reward": round(rec.reward, 6),
            "terminated": terminated,
            "truncated": truncated,
            "meal_carbs": round(rec.meal_carbs, 3),
        }, sort_keys=True))
    return lines


def write_trace(env: GlucoseEnv, path):
    with open(path, "w") as fh:
        for line in trace_lines(env):
            fh.write(line + "\n")


def load_scenario(path) -> tuple[Scenario, list[int]]:
    """Read a scenario file (YAML key-value schema); returns it plus seeds.

    Schema::

        cohort: child            # adult | adolescent | child
        patient_id: 0
        initial_bg_range: [120, 180]
        episode_start_clock: "05:00"
        meals:
          - {time_offset: 120, carbs: 27}
        seeds: [1, 100, 1000, 10000]
    """
    import yaml
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    meals = tuple(MealEvent(time_offset=float(m["time_offset"]),
                            carbs=float(m["carbs"]))
                  for m in raw.get("meals", []))
    scenario = Scenario(
        cohort=Cohort(raw["cohort"]),
        patient_id=int(raw["patient_id"]),
        meal_schedule=meals,
        initial_bg_range=tuple(raw.get("initial_bg_range", (120.0, 180.0))),
        episode_start_clock=raw.get("episode_start_clock", DEFAULT_START_CLOCK),
        meal_jitter_min=float(raw.get("meal_jitter_min", 30.0)),
        meal_jitter_carb_frac=float(raw.get("meal_jitter_carb_frac", 0.2)),
    )
    seeds = [int(s) for s in raw.get("seeds", [1, 100, 1000, 10000])]
    return scenario, seeds


def noiseless(scenario: Scenario) -> GlucoseEnv:
    """Environment with process and sensor noise switched off (testing)."""
    params = get_patient(scenario.cohort, scenario.patient_id)
    params = replace(params, noise_sigma=0.0, cgm_sigma=0.0)
    return GlucoseEnv(scenario, params=params)
