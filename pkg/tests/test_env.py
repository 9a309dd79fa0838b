import json

import numpy as np
import pytest

from dosebench.env import (CONTROL_INTERVAL_MIN, MAX_STEPS, OBS_DIM,
                           WINDOW_STEPS, GlucoseEnv, Scenario, StepRecord,
                           build_observation, default_scenario, format_clock,
                           load_scenario, noiseless, parse_clock, trace_lines,
                           write_trace)
from dosebench.patients import Cohort, MealEvent


def test_clock_helpers():
    assert parse_clock("05:00") == 300
    assert parse_clock("23:59") == 1439
    assert format_clock(300) == (1, "05:00:00")
    assert format_clock(315) == (1, "05:15:00")
    assert format_clock(24 * 60 + 30) == (2, "00:30:00")


def test_default_scenario_meal_scaling():
    adult = default_scenario(Cohort.ADULT, 0)
    child = default_scenario(Cohort.CHILD, 0)
    assert [m.carbs for m in adult.meal_schedule] == [45.0, 60.0, 20.0]
    assert [m.carbs for m in child.meal_schedule] == \
        pytest.approx([27.0, 36.0, 12.0])
    assert [m.time_offset for m in adult.meal_schedule] == [120.0, 420.0, 600.0]


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(cohort=Cohort.ADULT, patient_id=0,
                 meal_schedule=(MealEvent(300, 30), MealEvent(100, 30)))
    with pytest.raises(ValueError):
        Scenario(cohort=Cohort.ADULT, patient_id=0, meal_schedule=(),
                 initial_bg_range=(180.0, 120.0))


def test_reset_is_deterministic_per_seed():
    scenario = default_scenario(Cohort.ADULT, 0)
    rollouts = []
    for _ in range(2):
        env = GlucoseEnv(scenario)
        obs = env.reset(42)
        flats = [obs.flat.copy()]
        for _ in range(10):
            flats.append(env.step(1.5).observation.flat.copy())
        rollouts.append(np.stack(flats))
    assert np.array_equal(rollouts[0], rollouts[1])

    env = GlucoseEnv(scenario)
    other = env.reset(43)
    assert not np.array_equal(other.flat, rollouts[0][0])


def test_initial_bg_within_configured_range():
    scenario = default_scenario(Cohort.ADOLESCENT, 1)
    for seed in range(25):
        env = GlucoseEnv(scenario)
        env.reset(seed)
        assert 120.0 <= env.history[0].bg_true <= 180.0


def test_meal_jitter_stays_within_bounds():
    scenario = default_scenario(Cohort.ADULT, 0)
    for seed in range(25):
        env = GlucoseEnv(scenario)
        env.reset(seed)
        for meal, base in zip(env._meals, scenario.meal_schedule):
            assert abs(meal.time_offset - base.time_offset) <= 30.0 + 1e-9
            assert abs(meal.carbs / base.carbs - 1.0) <= 0.2 + 1e-9


def test_episode_truncates_at_64_steps():
    env = noiseless(default_scenario(Cohort.ADULT, 0))
    env.reset(1)
    for step in range(MAX_STEPS):
        res = env.step(1.0)
    assert res.truncated and not res.terminated
    assert env.termination_cause is None
    assert len(env.history) == MAX_STEPS + 1
    with pytest.raises(RuntimeError):
        env.step(0.0)


def test_zero_dose_child_terminates_hyper():
    env = noiseless(default_scenario(Cohort.CHILD, 0))
    env.reset(1)
    while True:
        res = env.step(0.0)
        if res.terminated or res.truncated:
            break
    assert res.terminated
    assert env.termination_cause == "hyper"
    assert env.history[-1].bg_true > 500.0


def test_termination_only_judged_at_interval_end():
    # Every recorded interval-end BG before the last one is inside bounds,
    # whatever the trajectory did inside the interval.
    env = noiseless(default_scenario(Cohort.CHILD, 2))
    env.reset(7)
    while True:
        res = env.step(0.0)
        if res.terminated or res.truncated:
            break
    for rec in env.history[1:-1]:
        assert 40.0 <= rec.bg_true <= 500.0


def test_action_validation_and_lifecycle():
    env = GlucoseEnv(default_scenario(Cohort.ADULT, 0))
    with pytest.raises(RuntimeError):
        env.step(0.0)
    env.reset(1)
    for bad in (-0.1, 9.1, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            env.step(bad)


def test_dose_is_quarter_of_rate():
    env = GlucoseEnv(default_scenario(Cohort.ADULT, 0))
    env.reset(5)
    env.step(3.0)
    assert env.history[0].rate == 3.0
    assert env.history[0].dose == pytest.approx(0.75)
    assert env.history[1].rate == 0.0  # current row: not yet acted


def test_observation_padding_and_layout():
    history = [StepRecord(step=0, clock=300, bg_true=150.0, bg_sensor=151.0)]
    obs = build_observation(history)
    assert obs.flat.shape == (OBS_DIM,)
    assert len(obs.window) == WINDOW_STEPS
    assert all(row == (151.0, 0.0, 0.0) for row in obs.window)
    assert obs.clock_minutes[0] == 300 - 15 * CONTROL_INTERVAL_MIN
    assert obs.clock_minutes[-1] == 300

    history.append(StepRecord(step=1, clock=315, bg_true=140.0,
                              bg_sensor=139.0, rate=2.0, dose=0.5))
    obs = build_observation(history)
    assert obs.window[-1] == (139.0, 2.0, 0.5)       # most recent last
    assert obs.window[-2] == (151.0, 0.0, 0.0)
    assert obs.flat[-3:] == pytest.approx([139.0, 2.0, 0.5])

    with pytest.raises(ValueError):
        build_observation([])


def test_window_slides_after_sixteen_steps():
    env = GlucoseEnv(default_scenario(Cohort.ADULT, 0))
    env.reset(2)
    for _ in range(20):
        res = env.step(1.0)
    window_clocks = res.observation.clock_minutes
    assert len(window_clocks) == WINDOW_STEPS
    assert window_clocks[-1] == 300 + 20 * 15
    assert window_clocks[0] == 300 + 5 * 15


def test_noiseless_env_has_equal_true_and_sensor_bg():
    env = noiseless(default_scenario(Cohort.CHILD, 1))
    env.reset(9)
    env.step(1.0)
    for rec in env.history:
        assert rec.bg_true == rec.bg_sensor


def test_sensor_noise_differs_from_truth():
    env = GlucoseEnv(default_scenario(Cohort.ADULT, 0))
    env.reset(9)
    diffs = [abs(r.bg_true - r.bg_sensor) for r in env.history]
    env.step(1.0)
    diffs += [abs(r.bg_true - r.bg_sensor) for r in env.history[-1:]]
    assert max(diffs) > 0.0


def test_trace_export(tmp_path):
    env = noiseless(default_scenario(Cohort.ADULT, 0))
    env.reset(3)
    for _ in range(5):
        env.step(2.0)
    lines = trace_lines(env)
    assert len(lines) == 6
    rows = [json.loads(line) for line in lines]
    assert rows[0]["clock"] == "Day 1, 05:00:00"
    assert rows[0]["rate"] == 2.0
    assert rows[-1]["rate"] == 0.0
    assert not any(r["terminated"] or r["truncated"] for r in rows)

    path = tmp_path / "trace.jsonl"
    write_trace(env, path)
    assert path.read_text().splitlines() == lines


def test_trace_marks_termination():
    env = noiseless(default_scenario(Cohort.CHILD, 0))
    env.reset(1)
    while not env.step(0.0).terminated:
        pass
    rows = [json.loads(line) for line in trace_lines(env)]
    assert rows[-1]["terminated"] and not rows[-1]["truncated"]
    assert not any(r["terminated"] for r in rows[:-1])


def test_scenario_yaml_round_trip(tmp_path):
    path = tmp_path / "scenario.yaml"
    path.write_text(
        "cohort: child\n"
        "patient_id: 2\n"
        "initial_bg_range: [130, 160]\n"
        "episode_start_clock: \"06:30\"\n"
        "meals:\n"
        "  - {time_offset: 90, carbs: 25}\n"
        "  - {time_offset: 400, carbs: 40}\n"
        "seeds: [7, 8]\n")
    scenario, seeds = load_scenario(path)
    assert scenario.cohort == Cohort.CHILD
    assert scenario.patient_id == 2
    assert scenario.initial_bg_range == (130, 160)
    assert scenario.episode_start_clock == "06:30"
    assert [m.carbs for m in scenario.meal_schedule] == [25.0, 40.0]
    assert seeds == [7, 8]

    env = GlucoseEnv(scenario)
    env.reset(seeds[0])
    assert env.history[0].clock == parse_clock("06:30")


def test_rewards_use_true_bg_not_sensor():
    from dosebench import metrics
    env = GlucoseEnv(default_scenario(Cohort.ADULT, 0))
    env.reset(4)
    res = env.step(1.0)
    assert res.reward == pytest.approx(
        metrics.step_reward(env.history[-1].bg_true, False))
