"""
Unreported-meal relabelling against the Hovorka replay.

Each grid row t is replayed from an equilibrium anchored 4 h earlier with the
recorded basal, bolus and carbs. Row t is a divergence onset when the residual
observed - simulated glucose exceeds the threshold anywhere in the next 30
minutes while no carbs were logged in the preceding hour. With
divergence_criterion="rise" the residual is smoothed with a centred moving
average and must instead climb by the threshold above its value at t. Onsets
closer than 2 h to an earlier onset are merged into it.

For every onset a grid of (quantity, timing) candidates is replayed and the one
whose simulated glucose best tracks the observed rise over the fit horizon is
added to the carbs channel.
"""

import itertools
import logging
import warnings
from dataclasses import dataclass, fields
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config.thresholds import SLOT_MINUTES, SLOT_SECONDS
from src.ingest.build_grid import contiguous_segments
from src.simulation.hovorka import HovorkaParams, InputSchedule, anchored_state, integrate

logger = logging.getLogger(__name__)

CHANGELOG_COLUMNS = ["timestamp", "added_carbs_g", "objective_before", "objective_after"]
DIVERGENCE_CRITERIA = ("absolute", "rise")


@dataclass(frozen=True)
class RelabelConfig:
    divergence_threshold: float = 30.0      # mg/dl, observed - simulated
    divergence_criterion: str = "absolute"  # or "rise": smoothed residual climb above row t
    horizon_min: int = 30
    carb_grid: Tuple[float, ...] = tuple(float(g) for g in range(5, 65, 5))
    timing_grid: Tuple[int, ...] = tuple(range(-30, 5, 5))   # minutes relative to the onset
    fit_horizon_min: int = 120
    lookback_min: int = 240
    quiet_carbs_min: int = 60
    min_separation_min: int = 120
    smoothing_slots: int = 5
    step: float = 5.0
    chunk_size: int = 2048

    def __post_init__(self):
        object.__setattr__(self, "carb_grid", tuple(float(g) for g in self.carb_grid))
        object.__setattr__(self, "timing_grid", tuple(int(t) for t in self.timing_grid))
        if not self.carb_grid or not self.timing_grid:
            raise ValueError("RelabelConfig grids must be non-empty")
        if any(g <= 0 for g in self.carb_grid):
            raise ValueError("carb_grid quantities must be positive")
        if any(t % SLOT_MINUTES for t in self.timing_grid):
            raise ValueError(f"timing_grid entries must be multiples of {SLOT_MINUTES} min")
        if self.divergence_criterion not in DIVERGENCE_CRITERIA:
            raise ValueError(f"Unknown divergence_criterion '{self.divergence_criterion}', "
                             f"expected one of {DIVERGENCE_CRITERIA}")
        if not self.divergence_threshold > 0:
            raise ValueError(f"divergence_threshold must be positive, got {self.divergence_threshold}")
        if self.smoothing_slots < 1 or self.smoothing_slots % 2 == 0:
            raise ValueError("smoothing_slots must be a positive odd number")
        for name in ("horizon_min", "fit_horizon_min", "lookback_min", "quiet_carbs_min", "min_separation_min"):
            value = getattr(self, name)
            if value < 0 or value % SLOT_MINUTES:
                raise ValueError(f"{name} must be a non-negative multiple of {SLOT_MINUTES}")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "RelabelConfig":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"Unknown RelabelConfig fields: {sorted(unknown)}")
        return cls(**d)

    def slots(self, minutes: int) -> int:
        return int(minutes) // SLOT_MINUTES


@dataclass(frozen=True)
class Divergence:
    row: int
    timestamp: pd.Timestamp
    excess_mgdl: float


@dataclass(frozen=True)
class MealChange:
    row: int
    timestamp: pd.Timestamp
    added_carbs_g: float
    objective_before: float
    objective_after: float


def participant_params(grid, params: HovorkaParams) -> HovorkaParams:
    if grid.profile is not None and grid.profile.weight_kg is not None:
        return params.with_weight(grid.profile.weight_kg)
    return params


def _channels(frame: pd.DataFrame):
    return tuple(frame[c].to_numpy(dtype=float) for c in ("glucose", "basal", "bolus", "carbs"))


def _replay(glucose, basal, bolus, carbs, anchors: np.ndarray, n_segments: int, params: HovorkaParams,
            step: float, extra_carbs: Optional[np.ndarray] = None) -> np.ndarray:
    """Simulated glucose on rows anchor..anchor+n_segments, shape (B, n_segments + 1)."""
    rows = anchors[:, None] + np.arange(n_segments)[None, :]
    meal_inputs = carbs[rows] if extra_carbs is None else carbs[rows] + extra_carbs
    state0 = np.stack([anchored_state(params, g) for g in glucose[anchors]])
    schedule = InputSchedule(basal=basal[rows], bolus=bolus[rows], carbs=meal_inputs)
    return integrate(state0, params, schedule, step=step).glucose.T


def _smooth(values: np.ndarray, width: int) -> np.ndarray:
    """Centred moving average along the last axis, ignoring NaN."""
    if width <= 1:
        return values
    half = width // 2
    padded = np.pad(values, ((0, 0), (half, half)), constant_values=np.nan)
    stacked = np.stack([padded[:, i:i + values.shape[1]] for i in range(width)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return np.nanmean(stacked, axis=0)


def divergence_excess(grid, params: HovorkaParams, cfg: Optional[RelabelConfig] = None) -> np.ndarray:
    """
    Largest residual (observed - simulated) within the horizon after each row.

    With the "rise" criterion: largest climb of the smoothed residual above its
    value at the row.

    Rows are positions in a contiguous grid. Rows too close to either edge, or
    whose anchor has no glucose, stay NaN.
    """
    cfg = cfg or RelabelConfig()
    glucose, basal, bolus, carbs = _channels(grid.frame)
    n = len(glucose)
    L, H = cfg.slots(cfg.lookback_min), cfg.slots(cfg.horizon_min)
    rise = cfg.divergence_criterion == "rise"
    S = cfg.smoothing_slots // 2 if rise else 0
    m = L + H + S
    excess = np.full(n, np.nan)

    rows = np.arange(L, n - H - S)
    rows = rows[np.isfinite(glucose[rows - L])]
    if len(rows) == 0:
        return excess
    for chunk in np.array_split(rows, int(np.ceil(len(rows) / cfg.chunk_size))):
        anchors = chunk - L
        simulated = _replay(glucose, basal, bolus, carbs, anchors, m, params, cfg.step)
        span = anchors[:, None] + np.arange(m + 1)[None, :]
        residual = glucose[span] - simulated
        if rise:
            residual = _smooth(residual, cfg.smoothing_slots)
            ahead = residual[:, L + 1:L + H + 1] - residual[:, [L]]
        else:
            ahead = residual[:, L + 1:L + H + 1]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            excess[chunk] = np.nanmax(ahead, axis=1)
    return excess


def detect_divergences(grid, params: HovorkaParams, cfg: Optional[RelabelConfig] = None) -> List[Divergence]:
    """
    Onsets where observed glucose runs above the replay with no logged carbs.

    Args:
        grid: GlucoseGrid (gaps from day filtering allowed)
        params: Model parameters; the grid profile's weight overrides theirs
        cfg: Thresholds and horizons

    Returns:
        Onsets in time order, at least min_separation_min apart; rows index grid.frame
    """
    cfg = cfg or RelabelConfig()
    params = participant_params(grid, params)
    quiet = cfg.slots(cfg.quiet_carbs_min)
    separation = cfg.slots(cfg.min_separation_min)

    onsets = []
    offset = 0
    for segment in contiguous_segments(grid):
        excess = divergence_excess(segment, params, cfg)
        has_carbs = np.concatenate([[0], np.cumsum(segment.frame["carbs"].to_numpy() > 0)])
        t = np.arange(len(excess))
        recent = has_carbs[t + 1] - has_carbs[np.maximum(t - quiet, 0)]
        with np.errstate(invalid="ignore"):
            flagged = np.flatnonzero((excess > cfg.divergence_threshold) & (recent == 0))
        last = -np.inf
        for row in flagged:
            if row - last >= separation:
                onsets.append(Divergence(int(offset + row), segment.frame["timestamp"].iloc[row],
                                         float(excess[row])))
                last = row
        offset += len(segment)
    logger.info(f"{grid.participant_id}: {len(onsets)} divergence onsets")
    return onsets


def _fit_onset(glucose, basal, bolus, carbs, timestamps: np.ndarray, onset: int,
               params: HovorkaParams, cfg: RelabelConfig) -> Optional[MealChange]:
    n = len(glucose)
    offsets = np.array(cfg.timing_grid) // SLOT_MINUTES
    ref = onset + int(offsets.min()) - 1
    anchor = max(0, ref - cfg.slots(cfg.lookback_min))
    end = min(n - 1, onset + cfg.slots(cfg.fit_horizon_min))
    if ref < anchor or onset + int(offsets.max()) > end or end - onset < cfg.slots(cfg.horizon_min):
        logger.warning(f"Onset at row {onset} lies too close to the grid edge, skipped")
        return None
    if np.any(np.diff(timestamps[anchor:end + 1]) != SLOT_SECONDS) or not np.isfinite(glucose[anchor]):
        logger.warning(f"Onset at row {onset}: replay span is not contiguous or has no anchor glucose, skipped")
        return None

    m = end - anchor
    candidates = list(itertools.product(cfg.carb_grid, offsets))
    extra = np.zeros((len(candidates) + 1, m))
    for b, (grams, off) in enumerate(candidates, start=1):
        extra[b, onset + off - anchor] = grams

    anchors = np.full(len(extra), anchor)
    simulated = _replay(glucose, basal, bolus, carbs, anchors, m, params, cfg.step, extra_carbs=extra)
    residual = glucose[anchor:end + 1][None, :] - simulated
    ref_col = ref - anchor
    lo = max(0, ref_col - cfg.smoothing_slots + 1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        level = np.nanmean(residual[:, lo:ref_col + 1], axis=1, keepdims=True)
    if not np.isfinite(level[0, 0]):
        logger.warning(f"Onset at row {onset}: no glucose before the candidate meals, skipped")
        return None
    deviation = residual[:, onset - anchor:] - level
    objective = np.nansum(deviation ** 2, axis=1)

    best = int(np.argmin(objective[1:])) + 1
    before, after = float(objective[0]), float(objective[best])
    if not after < before:
        logger.info(f"Onset at row {onset}: no candidate improves the fit, skipped")
        return None
    grams, off = candidates[best - 1]
    row = onset + int(off)
    return MealChange(row, pd.Timestamp(int(timestamps[row]), unit="s", tz="UTC"), float(grams), before, after)


def relabel_meals(grid, params: HovorkaParams, cfg: Optional[RelabelConfig] = None,
                  onsets: Optional[Sequence[Divergence]] = None) -> Tuple[object, pd.DataFrame]:
    """
    Add the best-fitting unreported meal at every divergence onset.

    Candidate searches run against the original grid; the winning carbs are then
    added in one pass. Recorded carbs are never reduced and no other channel changes.

    Args:
        grid: GlucoseGrid
        params: Model parameters
        cfg: Search grids and horizons
        onsets: Precomputed onsets (default: detect_divergences)

    Returns:
        (relabelled grid copy, change log with CHANGELOG_COLUMNS)
    """
    cfg = cfg or RelabelConfig()
    params = participant_params(grid, params)
    if onsets is None:
        onsets = detect_divergences(grid, params, cfg)

    glucose, basal, bolus, carbs = _channels(grid.frame)
    timestamps = grid.frame["timestamp"].values.astype("datetime64[s]").astype(np.int64)
    changes = []
    for onset in onsets:
        change = _fit_onset(glucose, basal, bolus, carbs, timestamps, onset.row, params, cfg)
        if change is not None:
            changes.append(change)

    out = grid.copy()
    new_carbs = carbs.copy()
    for change in changes:
        new_carbs[change.row] += change.added_carbs_g
    out.frame["carbs"] = new_carbs

    log = pd.DataFrame([{
        "timestamp": c.timestamp,
        "added_carbs_g": c.added_carbs_g,
        "objective_before": c.objective_before,
        "objective_after": c.objective_after,
    } for c in changes], columns=CHANGELOG_COLUMNS)
    logger.info(f"{grid.participant_id}: added {len(changes)} meals "
                f"({log['added_carbs_g'].sum():.0f} g) at {len(onsets)} onsets")
    return out, log


def meals_per_day(grid, min_carbs_g: float = 15.0) -> float:
    """Carb entries of at least min_carbs_g per day of grid coverage."""
    days = len(grid) * SLOT_MINUTES / (24 * 60)
    if days == 0:
        return 0.0
    return float((grid.frame["carbs"].to_numpy() >= min_carbs_g).sum() / days)


def write_changelog(log: pd.DataFrame, path) -> None:
    out = log.copy()
    out["timestamp"] = pd.to_datetime(out["timestamp"], utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    out.to_csv(path, index=False, float_format="%.4f")
