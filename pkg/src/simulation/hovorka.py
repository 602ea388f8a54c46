"""
Hovorka compartmental model of glucose-insulin dynamics.

State vector (last axis, 10 components):
- D1, D2: gut carbohydrate compartments [g]
- S1, S2: subcutaneous insulin depots [U]
- I: plasma insulin [mU/L]
- x1, x2, x3: insulin action on transport, disposal and endogenous production
- Q1, Q2: accessible and non-accessible glucose masses [mmol]

Meals and boluses enter as impulses at the start of a 5-minute segment, basal as a
constant rate within it. All functions accept leading batch axes, so many windows
are simulated in one call.
"""

import json
import logging
from dataclasses import asdict, dataclass, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.optimize import bisect

from src.analysis.impact import CURVE_OFFSETS, ImpactCurve, zscore
from src.config.paths import HOVORKA_PARAMS_JSON
from src.config.thresholds import MGDL_PER_MMOL, SLOT_MINUTES, WINDOW_STEPS

logger = logging.getLogger(__name__)

STATE_NAMES = ["D1", "D2", "S1", "S2", "I", "x1", "x2", "x3", "Q1", "Q2"]
D1, D2, S1, S2, I, X1, X2, X3, Q1, Q2 = range(len(STATE_NAMES))
N_STATES = len(STATE_NAMES)

# g of carbohydrate -> mmol of glucose
MMOL_PER_G_GLUCOSE = 1000.0 / 180.16

# Glucose-dependent consumption and renal clearance (mmol/L)
F01_SATURATION_MMOL = 4.5
RENAL_THRESHOLD_MMOL = 9.0
RENAL_CLEARANCE_RATE = 0.003

# Equilibrium search bracket on basal (U/h)
BASAL_BRACKET = (0.0, 10.0)
EQUILIBRIUM_TARGET_RANGE = (90.0, 180.0)


class NonFiniteStateError(RuntimeError):
    """Integration produced NaN or inf."""

    def __init__(self, time_min: float):
        super().__init__(f"Non-finite Hovorka state at t = {time_min:g} min")
        self.time_min = time_min


class NoEquilibriumError(RuntimeError):
    """No basal rate in the search bracket holds the target glucose."""


@dataclass(frozen=True)
class HovorkaParams:
    weight_kg: float = 70.0
    t_maxG: float = 40.0
    t_maxI: float = 55.0
    A_G: float = 0.8
    k12: float = 0.066
    ka1: float = 0.006
    ka2: float = 0.06
    ka3: float = 0.03
    S_IT: float = 51.2e-4
    S_ID: float = 8.2e-4
    S_IE: float = 520e-4
    k_e: float = 0.138
    V_I: float = 0.12
    V_G: float = 0.16
    EGP_0: float = 0.0161
    F_01: float = 0.0097

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"Hovorka parameter {f.name} must be positive, got {value}")
        if self.A_G > 1:
            raise ValueError(f"A_G must lie in (0, 1], got {self.A_G}")

    @classmethod
    def from_json(cls, path: Union[str, Path] = HOVORKA_PARAMS_JSON,
                  weight_kg: float = 70.0) -> "HovorkaParams":
        """
        Load population defaults from a versioned parameter file.

        Args:
            path: JSON document with a `parameters` mapping of symbol -> {value, unit, source}
            weight_kg: Body weight the per-kg values are scaled by

        Returns:
            HovorkaParams
        """
        with open(path) as f:
            doc = json.load(f)
        known = {f.name for f in fields(cls)}
        values = {}
        for name, entry in doc["parameters"].items():
            if name not in known:
                raise ValueError(f"Unknown Hovorka parameter in {path}: {name}")
            values[name] = float(entry["value"] if isinstance(entry, dict) else entry)
        values["weight_kg"] = float(weight_kg)
        return cls(**values)

    def with_weight(self, weight_kg: float) -> "HovorkaParams":
        return replace(self, weight_kg=float(weight_kg))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InputSchedule:
    """
    Piecewise-constant inputs on 5-minute segments (last axis = segment).

    basal is a rate in U/h held over the segment; bolus (U) and carbs (g) are
    delivered as impulses at the segment start.
    """
    basal: np.ndarray
    bolus: np.ndarray
    carbs: np.ndarray
    segment_min: float = float(SLOT_MINUTES)

    @property
    def n_segments(self) -> int:
        return np.shape(self.basal)[-1]

    @classmethod
    def from_frame(cls, df: pd.DataFrame, duration_min: Optional[float] = None) -> "InputSchedule":
        """
        Build a schedule from rows `time_min,basal,bolus,carbs`.

        Basal holds from its row until the next row; bolus and carbs are summed into
        the segment containing their time.
        """
        df = df.sort_values("time_min")
        if duration_min is None:
            duration_min = float(df["time_min"].max()) + SLOT_MINUTES
        n = int(np.ceil(duration_min / SLOT_MINUTES))
        seg = (df["time_min"].values // SLOT_MINUTES).astype(int)
        if np.any(seg < 0):
            raise ValueError("Scenario times must be non-negative")
        keep = seg < n
        basal = np.full(n, np.nan)
        basal[seg[keep]] = df["basal"].values[keep]
        basal = pd.Series(basal).ffill().fillna(0.0).values
        bolus = np.bincount(seg[keep], weights=df["bolus"].values[keep], minlength=n)
        carbs = np.bincount(seg[keep], weights=df["carbs"].values[keep], minlength=n)
        return cls(basal=basal, bolus=bolus, carbs=carbs)


@dataclass
class Trajectory:
    times: np.ndarray      # minutes, sampled every segment
    states: np.ndarray     # (n_samples, ..., N_STATES)
    glucose: np.ndarray    # (n_samples, ...) mg/dl
    n_clamped: int = 0

    def to_frame(self) -> pd.DataFrame:
        if self.states.ndim != 2:
            raise ValueError("Only unbatched trajectories convert to a table")
        df = pd.DataFrame(self.states, columns=STATE_NAMES)
        df.insert(0, "glucose", self.glucose)
        df.insert(0, "time_min", self.times)
        return df


def glucose_mgdl(state: np.ndarray, params: HovorkaParams) -> np.ndarray:
    """Plasma glucose G = Q1 / (V_G * W), in mg/dl."""
    state = np.asarray(state, dtype=float)
    return state[..., Q1] / (params.V_G * params.weight_kg) * MGDL_PER_MMOL


def gut_flux(state: np.ndarray, params: HovorkaParams) -> np.ndarray:
    """Carbohydrate appearance U_G in g/min."""
    return np.asarray(state, dtype=float)[..., D2] / params.t_maxG


def derivatives(state: np.ndarray, params: HovorkaParams,
                carb_rate: Union[float, np.ndarray] = 0.0,
                insulin_rate: Union[float, np.ndarray] = 0.0) -> np.ndarray:
    """
    Time derivative of the model state.

    Args:
        state: Array (..., 10)
        params: Model parameters
        carb_rate: Carbohydrate intake, g/min
        insulin_rate: Subcutaneous insulin infusion, U/min

    Returns:
        Array (..., 10) of d(state)/dt per minute
    """
    p = params
    W = p.weight_kg
    state = np.asarray(state, dtype=float)
    d1, d2, s1, s2, ins, x1, x2, x3, q1, q2 = np.moveaxis(state, -1, 0)

    G = q1 / (p.V_G * W)
    u_g = d2 / p.t_maxG * MMOL_PER_G_GLUCOSE
    f01c = np.where(G >= F01_SATURATION_MMOL, p.F_01 * W, p.F_01 * W * G / F01_SATURATION_MMOL)
    f_r = np.where(G > RENAL_THRESHOLD_MMOL,
                   RENAL_CLEARANCE_RATE * (G - RENAL_THRESHOLD_MMOL) * p.V_G * W, 0.0)

    dd1 = p.A_G * carb_rate - d1 / p.t_maxG
    dd2 = (d1 - d2) / p.t_maxG
    ds1 = insulin_rate - s1 / p.t_maxI
    ds2 = (s1 - s2) / p.t_maxI
    # U -> mU
    di = s2 * 1000.0 / (p.t_maxI * p.V_I * W) - p.k_e * ins
    dx1 = -p.ka1 * x1 + p.ka1 * p.S_IT * ins
    dx2 = -p.ka2 * x2 + p.ka2 * p.S_ID * ins
    dx3 = -p.ka3 * x3 + p.ka3 * p.S_IE * ins
    dq1 = -f01c - x1 * q1 + p.k12 * q2 - f_r + u_g + p.EGP_0 * W * (1.0 - x3)
    dq2 = x1 * q1 - (p.k12 + x2) * q2

    parts = np.broadcast_arrays(dd1, dd2, ds1, ds2, di, dx1, dx2, dx3, dq1, dq2)
    return np.stack(parts, axis=-1)


def rk4_step(state: np.ndarray, params: HovorkaParams, dt: float,
             carb_rate=0.0, insulin_rate=0.0) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step of length dt minutes."""
    k1 = derivatives(state, params, carb_rate, insulin_rate)
    k2 = derivatives(state + 0.5 * dt * k1, params, carb_rate, insulin_rate)
    k3 = derivatives(state + 0.5 * dt * k2, params, carb_rate, insulin_rate)
    k4 = derivatives(state + dt * k3, params, carb_rate, insulin_rate)
    return state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _n_steps(duration: float, step: float) -> int:
    n = duration / step
    if n < 0 or not np.isclose(n, round(n), rtol=0, atol=1e-9):
        raise ValueError(f"Duration {duration} min is not a multiple of step {step} min")
    return int(round(n))


def step_segment(state: np.ndarray, params: HovorkaParams, minutes: float, step: float = 1.0,
                 basal=0.0, bolus=0.0, carbs=0.0, t0: float = 0.0) -> Tuple[np.ndarray, int]:
    """
    Advance the state over one piecewise-constant input segment.

    Bolus and carbs are delivered at the segment start; basal (U/h) is infused
    throughout. Negative components are clamped to zero after every step.

    Returns:
        (new_state, number of clamped components)
    """
    state = np.array(state, dtype=float, copy=True)
    state[..., S1] += bolus
    state[..., D1] += params.A_G * np.asarray(carbs, dtype=float)
    insulin_rate = np.asarray(basal, dtype=float) / 60.0

    n_clamped = 0
    for k in range(_n_steps(minutes, step)):
        state = rk4_step(state, params, step, 0.0, insulin_rate)
        if not np.all(np.isfinite(state)):
            raise NonFiniteStateError(t0 + (k + 1) * step)
        negative = state < 0
        if negative.any():
            n_clamped += int(negative.sum())
            state = np.where(negative, 0.0, state)
    return state, n_clamped


def _segment_inputs(schedule: InputSchedule, k: int):
    if k < schedule.n_segments:
        return schedule.basal[..., k], schedule.bolus[..., k], schedule.carbs[..., k]
    # beyond the schedule: last basal holds, no impulses
    last = np.asarray(schedule.basal)[..., -1]
    return last, 0.0, 0.0


def integrate(state: np.ndarray, params: HovorkaParams, schedule: InputSchedule,
              duration: Optional[float] = None, step: float = 1.0) -> Trajectory:
    """
    Fixed-step RK4 integration over a piecewise-constant input schedule.

    Args:
        state: Initial state (..., 10)
        params: Model parameters
        schedule: Inputs per segment; leading axes broadcast against the state's
        duration: Minutes to simulate, a multiple of the segment length
            (default: the whole schedule)
        step: Integrator step in minutes, at most 5 and dividing the segment length

    Returns:
        Trajectory sampled at every segment boundary, t = 0 included
    """
    if step <= 0 or step > SLOT_MINUTES:
        raise ValueError(f"Integrator step must lie in (0, {SLOT_MINUTES}] min, got {step}")
    seg = schedule.segment_min
    _n_steps(seg, step)
    if duration is None:
        duration = schedule.n_segments * seg
    n_segments = _n_steps(duration, seg)

    state = np.asarray(state, dtype=float)
    states = [state]
    total_clamped = 0
    for k in range(n_segments):
        basal, bolus, carbs = _segment_inputs(schedule, k)
        state, n_clamped = step_segment(state, params, seg, step, basal, bolus, carbs, t0=k * seg)
        total_clamped += n_clamped
        states.append(state)

    if total_clamped:
        logger.warning("Clamped %d negative state components to zero over %g min",
                       total_clamped, duration)
    states = np.stack(states)
    return Trajectory(
        times=np.arange(n_segments + 1) * seg,
        states=states,
        glucose=glucose_mgdl(states, params),
        n_clamped=total_clamped,
    )


def equilibrium_state(params: HovorkaParams, glucose: float, basal: float) -> np.ndarray:
    """Steady state of every compartment except Q1 for a constant basal (U/h)."""
    p = params
    W = p.weight_kg
    u = basal / 60.0
    ins = u * 1000.0 / (p.V_I * W * p.k_e)
    x1, x2, x3 = p.S_IT * ins, p.S_ID * ins, p.S_IE * ins
    q1 = glucose / MGDL_PER_MMOL * p.V_G * W
    q2 = x1 * q1 / (p.k12 + x2)
    return np.array([0.0, 0.0, u * p.t_maxI, u * p.t_maxI, ins, x1, x2, x3, q1, q2])


def find_equilibrium(params: HovorkaParams, target_glucose: float = 120.0) -> Tuple[np.ndarray, float]:
    """
    Steady state holding the target glucose under a constant basal.

    Bisection on the basal rate; for each candidate the linear compartments are
    back-substituted so only dQ1/dt remains to be zeroed.

    Args:
        params: Model parameters
        target_glucose: mg/dl, within [90, 180]

    Returns:
        (state, basal rate in U/h)
    """
    lo, hi = EQUILIBRIUM_TARGET_RANGE
    if not lo <= target_glucose <= hi:
        raise ValueError(f"Equilibrium target must lie in [{lo}, {hi}] mg/dl, got {target_glucose}")

    def residual(basal: float) -> float:
        return float(derivatives(equilibrium_state(params, target_glucose, basal), params)[Q1])

    b_lo, b_hi = BASAL_BRACKET
    if residual(b_lo) * residual(b_hi) > 0:
        raise NoEquilibriumError(
            f"No basal in [{b_lo}, {b_hi}] U/h holds {target_glucose} mg/dl for weight {params.weight_kg} kg")
    basal = bisect(residual, b_lo, b_hi, xtol=1e-14, maxiter=200)
    return equilibrium_state(params, target_glucose, basal), basal


@lru_cache(maxsize=4096)
def _cached_equilibrium(params: HovorkaParams, target_glucose: float) -> Tuple[tuple, float]:
    state, basal = find_equilibrium(params, target_glucose)
    return tuple(state), basal


def anchored_state(params: HovorkaParams, glucose: float) -> np.ndarray:
    """
    Equilibrium re-anchored to an observed glucose value.

    The equilibrium is solved at the glucose clipped to the solvable range (rounded
    to 0.1 mg/dl for caching), then both glucose masses are rescaled so the state
    reads exactly the observed value.
    """
    lo, hi = EQUILIBRIUM_TARGET_RANGE
    target = round(float(np.clip(glucose, lo, hi)), 1)
    state, _ = _cached_equilibrium(params, target)
    state = np.array(state)
    ratio = glucose / glucose_mgdl(state, params)
    state[Q1] *= ratio
    state[Q2] *= ratio
    return state


def predict_windows(glucose0: np.ndarray, basal: np.ndarray, bolus: np.ndarray, carbs: np.ndarray,
                    params: HovorkaParams, step: float = 1.0) -> np.ndarray:
    """
    Batched equilibrium-anchored replay.

    Args:
        glucose0: (B,) first glucose of each window, mg/dl
        basal, bolus, carbs: (B, T) per-slot inputs
        params: Model parameters (one weight for the whole batch)
        step: Integrator step in minutes

    Returns:
        (B,) simulated glucose 5 min after the last slot, mg/dl
    """
    glucose0 = np.asarray(glucose0, dtype=float)
    state0 = np.stack([anchored_state(params, g) for g in glucose0])
    schedule = InputSchedule(basal=np.asarray(basal, float), bolus=np.asarray(bolus, float),
                             carbs=np.asarray(carbs, float))
    trajectory = integrate(state0, params, schedule, step=step)
    return trajectory.glucose[-1]


def predict_next(window: pd.DataFrame, params: HovorkaParams, step: float = 1.0) -> float:
    """
    Glucose 5 minutes after a 48-row grid window, in mg/dl.

    Args:
        window: Grid rows with glucose, basal, bolus and carbs columns
        params: Model parameters
        step: Integrator step in minutes

    Returns:
        Predicted glucose
    """
    if len(window) != WINDOW_STEPS:
        raise ValueError(f"Window must have {WINDOW_STEPS} rows, got {len(window)}")
    prediction = predict_windows(
        [window["glucose"].iloc[0]],
        window["basal"].values[None, :],
        window["bolus"].values[None, :],
        window["carbs"].values[None, :],
        params, step=step,
    )
    return float(prediction[0])


def theoretical_activity_curves(params: HovorkaParams, target_glucose: float = 120.0,
                                normalize: bool = True) -> Tuple[ImpactCurve, ImpactCurve]:
    """
    Model response to a unit carb impulse and a unit insulin impulse over 0-240 min.

    The carb curve is the gut flux U_G after 1 g of carbohydrate. The insulin curve
    is the negated glucose-lowering rate carried by the insulin-action states after
    1 U of insulin, Q1*dx1 + Q2*dx2 + EGP_0*W*dx3 evaluated at equilibrium masses.
    Both are sampled at 5-minute offsets and z-scored when normalize is set.

    Returns:
        (carb_curve, insulin_curve)
    """
    eq, basal = find_equilibrium(params, target_glucose)
    n = WINDOW_STEPS
    bolus = np.zeros((3, n))
    carbs = np.zeros((3, n))
    carbs[1, 0] = 1.0
    bolus[2, 0] = 1.0
    schedule = InputSchedule(basal=np.full((3, n), basal), bolus=bolus, carbs=carbs)
    states = integrate(np.repeat(eq[None, :], 3, axis=0), params, schedule).states

    carb = gut_flux(states[:, 1], params) - gut_flux(states[:, 0], params)
    dx = states[:, 2, X1:X3 + 1] - states[:, 0, X1:X3 + 1]
    insulin = -(eq[Q1] * dx[:, 0] + eq[Q2] * dx[:, 1] + params.EGP_0 * params.weight_kg * dx[:, 2])

    curves = []
    for channel, values in (("carbs", carb), ("total_insulin", insulin)):
        curves.append(ImpactCurve(
            offsets=CURVE_OFFSETS,
            mean=zscore(values) if normalize else values,
            stderr=np.zeros(len(CURVE_OFFSETS)),
            n_events=np.ones(len(CURVE_OFFSETS), dtype=int),
            channel=channel,
            meta={"source": "hovorka", "normalized": normalize},
        ))
    return curves[0], curves[1]
