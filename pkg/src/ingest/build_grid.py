"""
Uniform 5-minute glucose grid.

- snap_to_grid: nearest 5-minute slot, exact half-way ties rounded up
- build_grid: per-slot glucose, basal in effect, summed bolus and carbs
- interpolate_glucose: log-linear fill between consecutive real CGM readings
- grid_to_events: events that rebuild an identical grid
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.config.channels import EVENT_FLAGS, GRID_COLUMNS
from src.config.thresholds import SLOT_MINUTES, SLOT_SECONDS
from src.ingest.parse_events import PatientProfile, RawEvent

logger = logging.getLogger(__name__)

NS_PER_SECOND = 10 ** 9


@dataclass
class GlucoseGrid:
    """
    One participant's 5-minute series.

    frame columns: timestamp (UTC), glucose (mg/dl, NaN where missing),
    interpolated, basal (U/h), bolus (U), carbs (g) and one 0/1 column per event flag.
    """
    participant_id: str
    frame: pd.DataFrame
    profile: Optional[PatientProfile] = None

    @property
    def start(self) -> pd.Timestamp:
        return self.frame["timestamp"].iloc[0]

    def __len__(self) -> int:
        return len(self.frame)

    def copy(self) -> "GlucoseGrid":
        return replace(self, frame=self.frame.copy())

    def validate(self, allow_gaps: bool = False) -> None:
        """
        Raise ValueError when spacing or channel invariants are broken.

        With allow_gaps, rows may skip whole slots (day-filtered grids) but must
        stay on the 5-minute lattice.
        """
        ts = self.frame["timestamp"]
        if len(ts) > 1:
            steps = np.diff(ts.values.astype("datetime64[s]").astype(np.int64))
            bad = ((steps <= 0) | (steps % SLOT_SECONDS != 0)) if allow_gaps else steps != SLOT_SECONDS
            if np.any(bad):
                raise ValueError("Grid rows are not spaced exactly 5 minutes apart")
        if ts.iloc[0].value % (SLOT_SECONDS * NS_PER_SECOND):
            raise ValueError("Grid start is not aligned to a 5-minute boundary")
        for col in ("basal", "bolus", "carbs"):
            if (self.frame[col] < 0).any():
                raise ValueError(f"Negative values in {col}")
        glucose = self.frame["glucose"]
        if (glucose[glucose.notna()] <= 0).any():
            raise ValueError("Non-positive glucose in grid")
        if (self.frame["interpolated"] & glucose.isna()).any():
            raise ValueError("Rows flagged interpolated without a glucose value")

    def to_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        out = self.frame[GRID_COLUMNS].copy()
        out["timestamp"] = out["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        out["interpolated"] = out["interpolated"].astype(int)
        out.to_csv(path, index=False, float_format="%.6g")

    @classmethod
    def from_csv(cls, path: Union[str, Path], participant_id: str = "",
                 profile: Optional[PatientProfile] = None) -> "GlucoseGrid":
        df = pd.read_csv(path)
        df["timestamp"] = pd.to_datetime(df["timestamp"], utc=True)
        df["interpolated"] = df["interpolated"].astype(bool)
        for flag in EVENT_FLAGS:
            df[flag] = df[flag].astype(int) if flag in df.columns else 0
        if profile is not None and not participant_id:
            participant_id = profile.participant_id
        return cls(participant_id=participant_id or Path(path).stem, frame=df[GRID_COLUMNS], profile=profile)


def contiguous_segments(grid: GlucoseGrid) -> List[GlucoseGrid]:
    """Split a grid at timestamp gaps into runs of consecutive 5-minute rows."""
    ts = grid.frame["timestamp"].values.astype("datetime64[s]").astype(np.int64)
    if len(ts) < 2:
        return [grid]
    breaks = np.flatnonzero(np.diff(ts) != SLOT_SECONDS) + 1
    if len(breaks) == 0:
        return [grid]
    bounds = np.concatenate([[0], breaks, [len(ts)]])
    return [replace(grid, frame=grid.frame.iloc[a:b].reset_index(drop=True))
            for a, b in zip(bounds[:-1], bounds[1:])]


def slot_of(timestamp: pd.Timestamp) -> int:
    """Absolute slot index of the nearest 5-minute mark; 2.5 minutes rounds up."""
    seconds = timestamp.value // NS_PER_SECOND
    return int((seconds + SLOT_SECONDS // 2) // SLOT_SECONDS)


def slot_timestamp(slot: int) -> pd.Timestamp:
    return pd.Timestamp(slot * SLOT_SECONDS * NS_PER_SECOND, tz="UTC")


def snap_to_grid(events: List[RawEvent]) -> List[Tuple[int, RawEvent]]:
    """Assign each event to its nearest 5-minute slot (absolute index)."""
    return [(slot_of(e.timestamp), e) for e in events]


def schedule_rates(profile: PatientProfile, timestamps: pd.Series) -> np.ndarray:
    """Profile default basal rate for each timestamp's time of day."""
    half_hour = (timestamps.dt.hour * 2 + timestamps.dt.minute // 30).values
    return profile.half_hour_rates()[half_hour]


def _basal_channel(basal_events: List[Tuple[int, RawEvent]], first: int, n: int,
                   default: np.ndarray) -> np.ndarray:
    basal = default.copy()
    overlaps = []
    for i, (slot, event) in enumerate(basal_events):
        next_slot = basal_events[i + 1][0] if i + 1 < len(basal_events) else first + n
        start = slot - first
        if event.kind == "default_basal_schedule":
            end = next_slot - first
        else:
            n_slots = int(np.ceil(event.duration_min / SLOT_MINUTES))
            end = start + n_slots
            if end > next_slot - first:
                nxt = basal_events[i + 1][1]
                if nxt.kind == "temp_basal":
                    overlaps.append(event.timestamp)
                end = next_slot - first
        basal[start:min(end, n)] = event.value
    if overlaps:
        logger.warning(f"Overlapping temp basals: {len(overlaps)} instructions from {overlaps[0]} "
                       f"cut short by a later instruction")
    return basal


def build_grid(events: List[RawEvent], profile: PatientProfile) -> GlucoseGrid:
    """
    Build a uniform 5-minute grid from one participant's events.

    Basal per slot is the instruction in effect: a temp basal fills every slot of
    its duration, a default_basal_schedule record holds until the next basal
    record, and any later record truncates an earlier one. Slots without a record
    take the profile's default schedule rate for that time of day. Bolus and carbs
    are summed per slot; several CGM readings in one slot are averaged.

    Args:
        events: Events sorted by timestamp
        profile: Participant profile

    Returns:
        GlucoseGrid with glucose left missing where no reading exists
    """
    if not events:
        raise ValueError("Cannot build a grid from an empty event list")
    snapped = snap_to_grid(events)
    slots = np.array([s for s, _ in snapped])
    first, last = int(slots.min()), int(slots.max())
    n = last - first + 1

    timestamps = pd.Series(pd.date_range(slot_timestamp(first), periods=n, freq=f"{SLOT_MINUTES}min"))
    idx = slots - first
    kinds = np.array([e.kind for _, e in snapped])
    values = np.array([e.value for _, e in snapped], dtype=float)

    def summed(kind):
        mask = kinds == kind
        return np.bincount(idx[mask], weights=values[mask], minlength=n)

    cgm = kinds == "cgm"
    counts = np.bincount(idx[cgm], minlength=n)
    with np.errstate(invalid="ignore", divide="ignore"):
        glucose = np.where(counts > 0, summed("cgm") / counts, np.nan)

    # stable sort keeps issue order within a slot
    basal_events = sorted([(s, e) for s, e in snapped if e.kind in ("temp_basal", "default_basal_schedule")],
                          key=lambda item: item[0])
    basal = _basal_channel(basal_events, first, n, schedule_rates(profile, timestamps))

    frame = pd.DataFrame({
        "timestamp": timestamps,
        "glucose": glucose,
        "interpolated": np.zeros(n, dtype=bool),
        "basal": basal,
        "bolus": summed("bolus"),
        "carbs": summed("carbs"),
    })
    for flag in EVENT_FLAGS:
        frame[flag] = 0
    grid = GlucoseGrid(participant_id=profile.participant_id, frame=frame, profile=profile)
    logger.debug(f"Built grid for {profile.participant_id}: {n} slots, {int((counts > 0).sum())} with CGM")
    return grid


def interpolate_glucose(grid: GlucoseGrid) -> GlucoseGrid:
    """
    Fill missing glucose between consecutive real readings, linearly in log-glucose.

    Real readings are left untouched; filled rows are flagged interpolated. Slots
    before the first or after the last real reading stay missing.
    """
    frame = grid.frame.copy()
    glucose = frame["glucose"].values.astype(float)
    real = ~np.isnan(glucose) & ~frame["interpolated"].values
    positions = np.flatnonzero(real)
    if len(positions) < 2:
        raise ValueError("Interpolation needs at least two real glucose readings")

    inner = np.arange(positions[0], positions[-1] + 1)
    fill = inner[np.isnan(glucose[inner])]
    if len(fill):
        log_values = np.interp(fill, positions, np.log(glucose[positions]))
        glucose[fill] = np.exp(log_values)
        frame["glucose"] = glucose
        interpolated = frame["interpolated"].values.copy()
        interpolated[fill] = True
        frame["interpolated"] = interpolated
    return replace(grid, frame=frame)


def grid_to_events(grid: GlucoseGrid) -> List[RawEvent]:
    """
    Events that rebuild the grid's glucose, basal, bolus and carb channels.

    Real readings become CGM events, basal deviating from the profile schedule
    becomes 5-minute temp basals, and bolus / carbs become single events per slot.
    Event flags are not carried; they come from notes.
    """
    if grid.profile is None:
        raise ValueError("grid_to_events needs the grid's profile")
    frame = grid.frame
    default = schedule_rates(grid.profile, frame["timestamp"])
    events = []
    for i, row in enumerate(frame.itertuples(index=False)):
        ts = row.timestamp
        if not np.isnan(row.glucose) and not row.interpolated:
            events.append(RawEvent(ts, "cgm", float(row.glucose)))
        if row.basal != default[i]:
            events.append(RawEvent(ts, "temp_basal", float(row.basal), duration_min=SLOT_MINUTES))
        if row.bolus > 0:
            events.append(RawEvent(ts, "bolus", float(row.bolus)))
        if row.carbs > 0:
            events.append(RawEvent(ts, "carbs", float(row.carbs)))

    # empty notes pin the grid span when its edge rows carry no event
    for ts in (frame["timestamp"].iloc[0], frame["timestamp"].iloc[-1]):
        if not any(e.timestamp == ts for e in events):
            events.append(RawEvent(ts, "note", 0.0, text=""))
    events.sort(key=lambda e: e.timestamp)
    return events
