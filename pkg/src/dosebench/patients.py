"""Virtual patient cohorts and the minimal glucose-insulin physiology.

Three cohorts of four patients each. Volatility ordering is built into the
parameters: children have the smallest glucose distribution volume (so the
same meal moves them the most), adults the largest. Insulin follows a
two-compartment subcutaneous chain into a remote-action state that lowers
glucose multiplicatively; carbs drain from a gut compartment into plasma.

State derivatives (u = infusion rate in U/h):

    s1' = u/60 - s1/tau_sc
    s2' = (s1 - s2)/tau_sc
    I   = s2 / (tau_sc * v_i)
    x'  = -p2*x + p2*s_i*I
    q'  = -k_abs*q
    g'  = -p1*(g - g_b) - x*g + 1000*f_bio*k_abs*q/v_g  (+ process noise)

Integration is RK4 at 1-minute substeps; noise enters after each substep.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np


class Cohort(str, Enum):
    ADULT = "adult"
    ADOLESCENT = "adolescent"
    CHILD = "child"


@dataclass(frozen=True)
class PatientParams:
    cohort: Cohort
    patient_id: int
    v_g: float          # glucose distribution volume, dL
    s_i: float          # insulin sensitivity, 1/min per U/L
    p1: float           # glucose self-regulation rate, 1/min
    p2: float           # insulin-action decay rate, 1/min
    tau_sc: float       # subcutaneous absorption time constant, min
    v_i: float          # insulin distribution volume, L
    k_abs: float        # carb absorption rate, 1/min
    f_bio: float        # meal bioavailability
    g_b: float          # basal glucose, mg/dL
    noise_sigma: float  # process noise, mg/dL per sqrt-min
    cgm_sigma: float    # sensor noise std, mg/dL

    def __post_init__(self):
        for name in ("v_g", "s_i", "p1", "p2", "tau_sc", "v_i", "k_abs", "g_b"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not (0 < self.f_bio <= 1):
            raise ValueError("f_bio must lie in (0, 1]")
        if self.noise_sigma < 0 or self.cgm_sigma < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass
class PatientState:
    g: float        # plasma glucose, mg/dL
    s1: float       # subcutaneous insulin, first compartment, U
    s2: float       # subcutaneous insulin, second compartment, U
    x: float        # remote insulin action, 1/min
    q_gut: float    # gut carbohydrate, g
    t_elapsed: float = 0.0   # minutes since episode start
    clock: int = 300         # wall-clock minutes since day-1 midnight

    def check_finite(self):
        vals = (self.g, self.s1, self.s2, self.x, self.q_gut)
        if not all(math.isfinite(v) for v in vals):
            raise FloatingPointError(f"non-finite patient state: {self}")


@dataclass(frozen=True)
class MealEvent:
    time_offset: float  # minutes from episode start
    carbs: float        # grams

    def __post_init__(self):
        if not (0 <= self.time_offset < 960):
            raise ValueError("meal time_offset must lie in [0, 960)")
        if self.carbs <= 0:
            raise ValueError("meal carbs must be positive")


# Cohort base parameters. Child s_i is frozen where the patient-0 correction
# factor lands near 25 mg/dL per unit (2.36 U from BG 164 gives a ~57 mg/dL
# peak drop vs the untreated trajectory); k_abs sets meal-spike sharpness and
# separates careless dosing from deliberate control on the child group.
# Adult/adolescent values scale with their larger distribution volumes and
# slower kinetics.
_BASE = {
    Cohort.ADULT: dict(
        v_g=120.0, s_i=3.6, p1=0.010, p2=0.020, tau_sc=60.0, v_i=12.0,
        k_abs=0.022, f_bio=0.8, g_b=140.0, noise_sigma=0.15, cgm_sigma=2.0,
    ),
    Cohort.ADOLESCENT: dict(
        v_g=75.0, s_i=1.9, p1=0.006, p2=0.030, tau_sc=40.0, v_i=8.0,
        k_abs=0.018, f_bio=0.8, g_b=130.0, noise_sigma=0.20, cgm_sigma=2.0,
    ),
    Cohort.CHILD: dict(
        v_g=45.0, s_i=1.51, p1=0.004, p2=0.040, tau_sc=25.0, v_i=5.0,
        k_abs=0.022, f_bio=0.8, g_b=120.0, noise_sigma=0.25, cgm_sigma=2.0,
    ),
}

# Mild deterministic within-cohort spread; patient 0 keeps the calibrated
# base values. v_g multipliers stay within +-10% so the cohort-level
# volatility ordering is preserved patient by patient.
_SI_SPREAD = (1.00, 0.92, 1.06, 0.97)
_VG_SPREAD = (1.00, 1.05, 0.93, 1.08)


def make_cohort(cohort: Cohort) -> list[PatientParams]:
    """Deterministic parameter sets for the four patients of a cohort."""
    cohort = Cohort(cohort)
    base = _BASE[cohort]
    patients = []
    for pid in range(4):
        patients.append(PatientParams(
            cohort=cohort,
            patient_id=pid,
            v_g=base["v_g"] * _VG_SPREAD[pid],
            s_i=base["s_i"] * _SI_SPREAD[pid],
            p1=base["p1"],
            p2=base["p2"],
            tau_sc=base["tau_sc"],
            v_i=base["v_i"],
            k_abs=base["k_abs"],
            f_bio=base["f_bio"],
            g_b=base["g_b"],
            noise_sigma=base["noise_sigma"],
            cgm_sigma=base["cgm_sigma"],
        ))
    return patients


def get_patient(cohort: Cohort, patient_id: int) -> PatientParams:
    return make_cohort(cohort)[patient_id]


def _derivs(s, p: PatientParams, rate: float):
    g, s1, s2, x, q = s
    plasma_insulin = s2 / (p.tau_sc * p.v_i)
    ra = 1000.0 * p.f_bio * p.k_abs * q / p.v_g
    return (
        -p.p1 * (g - p.g_b) - x * g + ra,
        rate / 60.0 - s1 / p.tau_sc,
        (s1 - s2) / p.tau_sc,
        -p.p2 * x + p.p2 * p.s_i * plasma_insulin,
        -p.k_abs * q,
    )


def step_physiology(state: PatientState, params: PatientParams, rate: float,
                    dt: float, noise_stream: np.random.Generator | None = None
                    ) -> PatientState:
    """One RK4 step of the surrogate dynamics plus optional process noise.

    dt is in minutes, rate in U/h held constant over the step. Non-negativity
    is restored by flooring; glucose is floored at a small positive value so
    downstream logs stay defined.
    """
    if not (0 < dt <= 15):
        raise ValueError("dt must lie in (0, 15] minutes")
    if rate < 0 or not math.isfinite(rate):
        raise ValueError("infusion rate must be finite and non-negative")
    state.check_finite()

    y0 = (state.g, state.s1, state.s2, state.x, state.q_gut)
    k1 = _derivs(y0, params, rate)
    k2 = _derivs(tuple(y + 0.5 * dt * k for y, k in zip(y0, k1)), params, rate)
    k3 = _derivs(tuple(y + 0.5 * dt * k for y, k in zip(y0, k2)), params, rate)
    k4 = _derivs(tuple(y + dt * k for y, k in zip(y0, k3)), params, rate)
    y1 = [y + dt / 6.0 * (a + 2 * b + 2 * c + d)
          for y, a, b, c, d in zip(y0, k1, k2, k3, k4)]

    g, s1, s2, x, q = y1
    if noise_stream is not None and params.noise_sigma > 0:
        g += params.noise_sigma * math.sqrt(dt) * noise_stream.standard_normal()

    new = PatientState(
        g=max(g, 1.0),
        s1=max(s1, 0.0),
        s2=max(s2, 0.0),
        x=max(x, 0.0),
        q_gut=max(q, 0.0),
        t_elapsed=state.t_elapsed + dt,
        clock=state.clock,  # clock advances per control interval, not here
    )
    new.check_finite()
    return new


def apply_meal(state: PatientState, carbs: float) -> PatientState:
    """Add carbs to the gut compartment; glucose is untouched at this instant."""
    if carbs <= 0:
        raise ValueError("carbs must be positive")
    return replace(state, q_gut=state.q_gut + carbs)


def apply_bolus(state: PatientState, units: float) -> PatientState:
    """Instantaneous subcutaneous bolus (testing/calibration helper)."""
    if units < 0:
        raise ValueError("bolus units must be non-negative")
    return replace(state, s1=state.s1 + units)


def steady_state(params: PatientParams, g: float | None = None) -> PatientState:
    """Resting state with no insulin on board and an empty gut."""
    return PatientState(g=params.g_b if g is None else g,
                        s1=0.0, s2=0.0, x=0.0, q_gut=0.0)


def correction_drop(params: PatientParams, initial_bg: float, units: float,
                    horizon_min: int = 180) -> float:
    """Peak glucose drop attributable to a correction bolus, noise off.

    Measured against the untreated trajectory from the same start, so the
    slow p1 relaxation toward basal does not count toward the correction
    factor.
    """
    quiet = replace(params, noise_sigma=0.0)
    treated = apply_bolus(steady_state(quiet, g=initial_bg), units)
    untreated = steady_state(quiet, g=initial_bg)
    best = 0.0
    for _ in range(horizon_min):
        treated = step_physiology(treated, quiet, 0.0, 1.0)
        untreated = step_physiology(untreated, quiet, 0.0, 1.0)
        best = max(best, untreated.g - treated.g)
    return best


def meal_response_std(params: PatientParams, initial_bg: float,
                      carbs: float = 30.0, horizon_min: int = 240) -> float:
    """Std over time of the noiseless BG trajectory after a single meal.

    Used as the cohort volatility metric: for the same meal, the smaller the
    patient's distribution volume, the larger the excursion and the std.
    """
    quiet = replace(params, noise_sigma=0.0)
    state = apply_meal(steady_state(quiet, g=initial_bg), carbs)
    traj = [state.g]
    for _ in range(horizon_min):
        state = step_physiology(state, quiet, 0.0, 1.0)
        traj.append(state.g)
    return float(np.std(traj))
