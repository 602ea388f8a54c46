"""
Synthetic participants simulated with the Hovorka model.

Each participant lives under a behavioural policy: daily meals with ratio-based
boluses, correction boluses when glucose stays high, a basal schedule or a
proportional closed-loop controller, and exercise / food notes. The device-visible
stream is written with confounders applied (hidden meals, misestimated carbs,
bolus timing), next to a ground-truth sidecar of every slot's true inputs and
noise-free glucose.

Files per participant (see SYNTH_FILES): <pid>_events.jsonl, <pid>_profile.json,
<pid>_truth.csv and <pid>_meals.csv.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from src.config.paths import SYNTH_FILES
from src.config.thresholds import HYPO_MGDL, SLOT_MINUTES
from src.ingest.parse_events import PatientProfile, RawEvent, write_events_jsonl
from src.simulation.hovorka import HovorkaParams, find_equilibrium, glucose_mgdl, step_segment

logger = logging.getLogger(__name__)

SLOTS_PER_DAY = 24 * 60 // SLOT_MINUTES
TRUTH_COLUMNS = ["timestamp", "glucose", "cgm", "basal", "bolus", "carbs", "announced_carbs"]
MEAL_COLUMNS = ["timestamp", "kind", "true_carbs_g", "announced_carbs_g", "reported", "bolus_u"]

HIGH_INTENSITY_ACTIVITIES = ["running", "cycling", "swimming", "football", "hiit"]
LOW_INTENSITY_ACTIVITIES = ["walking", "yoga", "stretching"]
MEAL_NOTES = ["pizza", "cheese sandwich", "steak", "chicken salad", "pasta", "cereal",
              "coffee", "latte", "wine", "beer", "chocolate", "toast"]


@dataclass(frozen=True)
class Confounders:
    unreported_meal_prob: float = 0.0
    carb_misestimation_bias: float = 0.40    # announced = true * (1 + bias)
    insulin_carb_coupling: bool = True       # meal boluses in the meal's slot
    unreported_hypo_treatment: bool = False  # 15 g below 70 mg/dl, never logged

    def __post_init__(self):
        if not 0.0 <= self.unreported_meal_prob <= 1.0:
            raise ValueError(f"unreported_meal_prob must lie in [0, 1], got {self.unreported_meal_prob}")
        if self.carb_misestimation_bias <= -1.0:
            raise ValueError("carb_misestimation_bias must exceed -1")

    @classmethod
    def none(cls) -> "Confounders":
        return cls(unreported_meal_prob=0.0, carb_misestimation_bias=0.0,
                   insulin_carb_coupling=False, unreported_hypo_treatment=False)


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 5
    days_per_patient: int = 60
    seed: int = 0
    meals_per_day: float = 3.0
    meal_carbs_mean_g: float = 50.0
    meal_carbs_sd_g: float = 20.0
    meal_carbs_range_g: Tuple[float, float] = (10.0, 120.0)
    carb_ratio: float = 10.0                  # g per U
    correction_threshold: float = 250.0       # mg/dl
    correction_target: float = 150.0
    correction_factor: float = 40.0           # mg/dl per U
    weight_range_kg: Tuple[float, float] = (60.0, 90.0)
    basal_policy: str = "schedule"            # or "closed_loop"
    cgm_noise: float = 0.05                   # lognormal sigma
    exercise_per_week: float = 3.0
    high_intensity_share: float = 0.2
    meal_note_prob: float = 0.3
    step: float = 5.0
    start: str = "2021-01-04T00:00:00Z"
    confounders: Confounders = field(default_factory=Confounders)

    def __post_init__(self):
        if self.n_patients < 1 or self.days_per_patient < 1:
            raise ValueError("n_patients and days_per_patient must be positive")
        for name in ("high_intensity_share", "meal_note_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.cgm_noise < 0:
            raise ValueError(f"cgm_noise must be non-negative, got {self.cgm_noise}")
        if self.basal_policy not in ("schedule", "closed_loop"):
            raise ValueError(f"Unknown basal_policy '{self.basal_policy}'")
        if self.meals_per_day < 0 or self.exercise_per_week < 0:
            raise ValueError("Event rates must be non-negative")
        if self.carb_ratio <= 0 or self.correction_factor <= 0:
            raise ValueError("carb_ratio and correction_factor must be positive")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SynthConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown SynthConfig fields: {sorted(unknown)}")
        if isinstance(d.get("confounders"), dict):
            d["confounders"] = Confounders(**d["confounders"])
        for name in ("meal_carbs_range_g", "weight_range_kg"):
            if name in d:
                d[name] = tuple(float(v) for v in d[name])
        return cls(**d)

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "SynthConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticPatient:
    profile: PatientProfile
    events: List[RawEvent]
    truth: pd.DataFrame          # TRUTH_COLUMNS, one row per slot
    meals: pd.DataFrame          # MEAL_COLUMNS, one row per true carb intake
    initial_glucose: float = 120.0


def _meal_plan(rng: np.random.Generator, cfg: SynthConfig, n_days: int) -> List[Tuple[int, float]]:
    """(slot, true grams) for every planned meal, spread over the waking day."""
    lo, hi = cfg.meal_carbs_range_g
    shape = (cfg.meal_carbs_mean_g / cfg.meal_carbs_sd_g) ** 2
    scale = cfg.meal_carbs_sd_g ** 2 / cfg.meal_carbs_mean_g
    plan = []
    for day in range(n_days):
        k = int(np.clip(rng.poisson(cfg.meals_per_day), 1, 6)) if cfg.meals_per_day > 0 else 0
        if k == 0:
            continue
        hours = np.linspace(7.5, 19.5, k) + rng.normal(0, 0.5, k)
        grams = np.clip(rng.gamma(shape, scale, k), lo, hi)
        for h, g in zip(np.clip(hours, 6.0, 22.0), grams):
            plan.append((day * SLOTS_PER_DAY + int(h * 60 // SLOT_MINUTES), float(round(g))))
    return plan


def _bolus_slot(rng: np.random.Generator, slot: int, coupled: bool) -> int:
    if coupled:
        return slot
    offset = int(rng.integers(2, 7)) * (1 if rng.random() < 0.5 else -1)
    return slot + offset


def _notes(rng: np.random.Generator, cfg: SynthConfig, n_days: int, meal_slots: List[int]) -> dict:
    notes = {}
    for day in range(n_days):
        for _ in range(rng.poisson(cfg.exercise_per_week / 7.0)):
            slot = day * SLOTS_PER_DAY + int(rng.integers(8 * 12, 20 * 12))
            pool = HIGH_INTENSITY_ACTIVITIES if rng.random() < cfg.high_intensity_share else LOW_INTENSITY_ACTIVITIES
            notes[slot] = str(rng.choice(pool))
    for slot in meal_slots:
        if rng.random() < cfg.meal_note_prob and slot not in notes:
            notes[slot] = str(rng.choice(MEAL_NOTES))
    return notes


def simulate_patient(cfg: SynthConfig, index: int, params: Optional[HovorkaParams] = None) -> SyntheticPatient:
    """
    Simulate one participant slot by slot.

    Glucose at each slot start is read by the CGM (multiplicative lognormal noise);
    dosing decisions use the CGM value; inputs then act over the 5-minute segment.
    """
    rng = np.random.default_rng([cfg.seed, index])
    conf = cfg.confounders
    pid = f"synth{index:03d}"
    weight = float(round(rng.uniform(*cfg.weight_range_kg), 1))
    params = (params or HovorkaParams()).with_weight(weight)
    state, basal_rate = find_equilibrium(params, 120.0)

    n = cfg.days_per_patient * SLOTS_PER_DAY
    carbs = np.zeros(n)
    announced = np.zeros(n)
    bolus = np.zeros(n)
    basal = np.full(n, basal_rate)
    meals = []
    for slot, grams in _meal_plan(rng, cfg, cfg.days_per_patient):
        if slot >= n:
            continue
        reported = rng.random() >= conf.unreported_meal_prob
        carbs[slot] += grams
        dose, ann = 0.0, 0.0
        if reported:
            ann = float(round(grams * (1.0 + conf.carb_misestimation_bias)))
            announced[slot] += ann
            # ratio calibrated to the participant's own estimates
            dose = round(grams / cfg.carb_ratio, 2)
            bolus_at = _bolus_slot(rng, slot, conf.insulin_carb_coupling)
            if 0 <= bolus_at < n:
                bolus[bolus_at] += dose
        meals.append((slot, "meal", grams, ann, reported, dose))
    notes = _notes(rng, cfg, cfg.days_per_patient, [m[0] for m in meals if m[4]])

    noise = np.exp(rng.normal(0.0, cfg.cgm_noise, n)) if cfg.cgm_noise > 0 else np.ones(n)
    glucose = np.empty(n)
    cgm = np.empty(n)
    last_correction = -np.inf
    last_treatment = -np.inf
    for k in range(n):
        glucose[k] = float(glucose_mgdl(state, params))
        cgm[k] = round(glucose[k] * noise[k], 1)
        if cgm[k] > cfg.correction_threshold and k - last_correction >= 36 and bolus[k] == 0:
            bolus[k] = round((cgm[k] - cfg.correction_target) / cfg.correction_factor, 2)
            last_correction = k
        if conf.unreported_hypo_treatment and cgm[k] < HYPO_MGDL and k - last_treatment >= 6:
            carbs[k] += 15.0
            meals.append((k, "hypo_treatment", 15.0, 0.0, False, 0.0))
            last_treatment = k
        if cfg.basal_policy == "closed_loop":
            basal[k] = round(float(np.clip(basal_rate * (1.0 + (cgm[k] - 120.0) / 60.0), 0.0, 4.0 * basal_rate)), 4)
        state, _ = step_segment(state, params, SLOT_MINUTES, cfg.step, basal[k], bolus[k], carbs[k])

    timestamps = pd.date_range(pd.Timestamp(cfg.start), periods=n, freq=f"{SLOT_MINUTES}min")
    truth = pd.DataFrame({
        "timestamp": timestamps,
        "glucose": glucose,
        "cgm": cgm,
        "basal": basal,
        "bolus": bolus,
        "carbs": carbs,
        "announced_carbs": announced,
    }, columns=TRUTH_COLUMNS)
    meal_table = pd.DataFrame([{
        "timestamp": timestamps[slot], "kind": kind, "true_carbs_g": grams,
        "announced_carbs_g": ann, "reported": reported, "bolus_u": dose,
    } for slot, kind, grams, ann, reported, dose in sorted(meals, key=lambda m: m[0])], columns=MEAL_COLUMNS)

    events = []
    for k, ts in enumerate(timestamps):
        events.append(RawEvent(ts, "cgm", float(cgm[k])))
        if cfg.basal_policy == "closed_loop":
            events.append(RawEvent(ts, "temp_basal", float(basal[k]), duration_min=30))
        if bolus[k] > 0:
            events.append(RawEvent(ts, "bolus", float(bolus[k])))
        if announced[k] > 0:
            events.append(RawEvent(ts, "carbs", float(announced[k])))
        if k in notes:
            events.append(RawEvent(ts, "note", 0.0, text=notes[k]))

    profile = PatientProfile(
        participant_id=pid,
        default_basal_schedule=[(0, float(basal_rate))],
        weight_kg=weight,
        mean_total_daily_insulin=float(bolus.sum() / cfg.days_per_patient + basal.mean() * 24),
        mean_daily_carbs=float(announced.sum() / cfg.days_per_patient),
        hcls_system="synthetic" if cfg.basal_policy == "closed_loop" else None,
        basal_log_style="androidaps" if cfg.basal_policy == "closed_loop" else None,
    )
    hidden = int((~meal_table["reported"]).sum()) if len(meal_table) else 0
    logger.debug(f"{pid}: {len(meal_table)} carb intakes ({hidden} unreported), "
                 f"glucose {np.median(glucose):.0f} mg/dl median")
    return SyntheticPatient(profile=profile, events=events, truth=truth, meals=meal_table)


def generate_synthetic(cfg: SynthConfig, params: Optional[HovorkaParams] = None, n_jobs: int = 1,
                       progress: bool = False) -> List[SyntheticPatient]:
    """
    Simulate every participant of a cohort.

    Participant i draws from its own generator seeded with (seed, i), so results do
    not depend on n_jobs.
    """
    indices = range(cfg.n_patients)
    if n_jobs == 1:
        patients = [simulate_patient(cfg, i, params)
                    for i in tqdm(indices, desc="Simulating participants", disable=not progress)]
    else:
        patients = Parallel(n_jobs=n_jobs)(delayed(simulate_patient)(cfg, i, params) for i in indices)
    logger.info(f"Simulated {len(patients)} participants x {cfg.days_per_patient} days")
    return patients


def write_cohort(patients: List[SyntheticPatient], out_dir: Union[str, Path]) -> List[Path]:
    """Write every participant's stream, profile and sidecars; returns the event files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for p in patients:
        pid = p.profile.participant_id
        events_path = out_dir / SYNTH_FILES["EVENTS"].format(pid=pid)
        write_events_jsonl(p.events, events_path)
        with open(out_dir / SYNTH_FILES["PROFILE"].format(pid=pid), "w") as f:
            json.dump(p.profile.to_dict(), f, indent=2, sort_keys=True)
        truth = p.truth.copy()
        truth["timestamp"] = truth["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        truth.to_csv(out_dir / SYNTH_FILES["TRUTH"].format(pid=pid), index=False, float_format="%.6g")
        meals = p.meals.copy()
        meals["timestamp"] = pd.to_datetime(meals["timestamp"], utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        meals.to_csv(out_dir / SYNTH_FILES["MEALS"].format(pid=pid), index=False, float_format="%.4f")
        written.append(events_path)
    return written
