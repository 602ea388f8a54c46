"""
Four-hour feature windows with a 5-minute-ahead glucose target.

A window ending at grid row e holds rows e-47..e and targets the glucose of row
e+1. Windows are dropped when any row in the span (target included) lies inside a
stretch of more than 30 minutes between real CGM readings, when any glucose is
missing, or when the target itself was interpolated.

Channels follow the feature table: glucose, basal, total insulin, IOB, carbs,
COB, then the broadcast channels mean basal, weight and time of day (the hour of
the final row), then any requested event flags.
"""

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from sklearn.preprocessing import StandardScaler

from src.config.channels import BASE_CHANNELS, CARB_CHANNELS, EVENT_FLAGS, INSULIN_CHANNELS, SCENARIO_TAGS
from src.config.thresholds import (
    DEFAULT_ABSORPTION_MINUTES,
    DEFAULT_DIA_MINUTES,
    EVENT_LOOKBACK_MINUTES,
    HYPER_MGDL,
    HYPO_MGDL,
    MAX_REAL_GAP_MINUTES,
    NIGHT_END_HOUR,
    NIGHT_START_HOUR,
    SLOT_MINUTES,
    WINDOW_STEPS,
)
from src.features.insulin_carbs import on_board, total_insulin
from src.ingest.build_grid import contiguous_segments

logger = logging.getLogger(__name__)

WINDOW_FORMAT_VERSION = 1
AUX_CHANNELS = ["glucose", "basal", "bolus", "carbs"]


class EmptySplitError(ValueError):
    """A train, validation or test partition ended up with no windows."""


class SchemaMismatchError(ValueError):
    """Windows do not carry the channels a model expects."""


@dataclass
class FeatureConfig:
    dia_min: float = DEFAULT_DIA_MINUTES
    absorption_min: float = DEFAULT_ABSORPTION_MINUTES
    kernel: str = "linear"
    insulin_delay_min: int = 0
    cgm_delay_min: int = 0
    max_gap_min: float = MAX_REAL_GAP_MINUTES
    night_start_hour: int = NIGHT_START_HOUR
    night_end_hour: int = NIGHT_END_HOUR

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "FeatureConfig":
        return cls(**(d or {}))


@dataclass
class FeatureWindow:
    matrix: np.ndarray              # (48, F)
    channels: List[str]
    target: float
    participant_id: str
    end_time: pd.Timestamp
    flags: np.ndarray               # (48, len(EVENT_FLAGS)) raw event flags
    aux: Dict[str, np.ndarray]      # raw grid channels, (48,) each
    tags: frozenset = frozenset()

    def channel(self, name: str) -> np.ndarray:
        return self.matrix[:, self.channels.index(name)]


def scenario_tags_arrays(final_glucose: np.ndarray, end_hour: np.ndarray, recent_carbs: np.ndarray,
                         recent_flags: np.ndarray, night_start_hour: int = NIGHT_START_HOUR,
                         night_end_hour: int = NIGHT_END_HOUR) -> Dict[str, np.ndarray]:
    """
    Vectorized scenario tags.

    Args:
        final_glucose: (N,) glucose of the final row
        end_hour: (N,) hour of the final row
        recent_carbs: (N, k) carbs over the lookback rows
        recent_flags: (N, k, len(EVENT_FLAGS)) event flags over the lookback rows

    Returns:
        tag -> (N,) boolean
    """
    tags = {
        "meal": (recent_carbs > 0).any(axis=1),
        "night": (end_hour >= night_start_hour) | (end_hour < night_end_hour),
        "high_bg": final_glucose > HYPER_MGDL,
        "low_bg": final_glucose < HYPO_MGDL,
    }
    for i, flag in enumerate(EVENT_FLAGS):
        tags[flag] = (recent_flags[:, :, i] > 0).any(axis=1)
    tags["none"] = ~np.any(np.stack(list(tags.values())), axis=0)
    return {t: tags[t] for t in SCENARIO_TAGS}


def tag_scenarios(window: FeatureWindow, cfg: Optional[FeatureConfig] = None) -> frozenset:
    """Scenario tags of one window, read from its final rows."""
    cfg = cfg or FeatureConfig()
    k = EVENT_LOOKBACK_MINUTES // SLOT_MINUTES
    tags = scenario_tags_arrays(
        np.array([window.aux["glucose"][-1]]),
        np.array([window.end_time.hour]),
        window.aux["carbs"][None, -k:],
        window.flags[None, -k:, :],
        cfg.night_start_hour, cfg.night_end_hour,
    )
    return frozenset(t for t, hit in tags.items() if hit[0])


def _shift(values: np.ndarray, slots: int) -> np.ndarray:
    """Delay a channel by whole slots, zero-filling the start."""
    if slots <= 0:
        return values
    out = np.zeros_like(values)
    out[slots:] = values[:-slots]
    return out


def grid_features(grid, cfg: FeatureConfig) -> pd.DataFrame:
    """Per-slot feature table for one grid (all base channels and event flags)."""
    frame = grid.frame
    profile = grid.profile
    if profile is None or profile.weight_kg is None:
        raise ValueError(f"Grid {grid.participant_id} needs a profile with weight for the broadcast channels")

    insulin = total_insulin(frame["basal"].values, frame["bolus"].values)
    features = pd.DataFrame({
        "glucose": frame["glucose"].values.astype(float),
        "basal": frame["basal"].values.astype(float),
        "total_insulin": insulin,
        "iob": on_board(insulin, cfg.dia_min, cfg.kernel),
        "carbs": frame["carbs"].values.astype(float),
        "cob": on_board(frame["carbs"].values, cfg.absorption_min, cfg.kernel),
        "mean_basal": float(profile.mean_basal_rate),
        "weight": float(profile.weight_kg),
        "time_of_day": (frame["timestamp"].dt.hour + frame["timestamp"].dt.minute / 60.0).values,
    })
    insulin_shift = (cfg.insulin_delay_min + cfg.cgm_delay_min) // SLOT_MINUTES
    carb_shift = cfg.cgm_delay_min // SLOT_MINUTES
    for col in INSULIN_CHANNELS:
        features[col] = _shift(features[col].values, insulin_shift)
    for col in CARB_CHANNELS:
        features[col] = _shift(features[col].values, carb_shift)
    for flag in EVENT_FLAGS:
        features[flag] = frame[flag].values.astype(float)
    return features


def _bad_rows(glucose: np.ndarray, interpolated: np.ndarray, max_gap_slots: int) -> np.ndarray:
    """Rows with missing glucose or inside an over-long stretch between real readings."""
    n = len(glucose)
    real = ~np.isnan(glucose) & ~interpolated
    idx = np.arange(n)
    prev_real = np.maximum.accumulate(np.where(real, idx, -1))
    next_real = np.minimum.accumulate(np.where(real, idx, n)[::-1])[::-1]
    long_gap = ~real & ((next_real - prev_real) > max_gap_slots)
    return np.isnan(glucose) | long_gap


@dataclass
class WindowSet:
    X: np.ndarray                    # (N, 48, F) raw-scale features
    y: np.ndarray                    # (N,) target glucose, mg/dl
    channels: List[str]
    meta: pd.DataFrame               # participant_id, end_time, one bool column per scenario tag
    flags: np.ndarray                # (N, 48, len(EVENT_FLAGS))
    aux: Dict[str, np.ndarray] = field(default_factory=dict)   # raw grid channels, (N, 48)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i: int) -> FeatureWindow:
        row = self.meta.iloc[i]
        return FeatureWindow(
            matrix=self.X[i],
            channels=list(self.channels),
            target=float(self.y[i]),
            participant_id=row["participant_id"],
            end_time=row["end_time"],
            flags=self.flags[i],
            aux={k: v[i] for k, v in self.aux.items()},
            tags=frozenset(t for t in SCENARIO_TAGS if row[t]),
        )

    @property
    def schema_hash(self) -> str:
        return schema_hash(self.channels)

    def channel(self, name: str) -> np.ndarray:
        return self.X[:, :, self.channels.index(name)]

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        if idx.size == 0:
            idx = idx.astype(int)
        return WindowSet(
            X=self.X[idx], y=self.y[idx], channels=list(self.channels),
            meta=self.meta.iloc[idx].reset_index(drop=True), flags=self.flags[idx],
            aux={k: v[idx] for k, v in self.aux.items()},
        )

    def select(self, channels: Sequence[str]) -> "WindowSet":
        """Windows restricted to the given channels, in that order."""
        missing = [c for c in channels if c not in self.channels]
        if missing:
            raise SchemaMismatchError(f"Windows lack channels {missing}")
        cols = [self.channels.index(c) for c in channels]
        return WindowSet(X=self.X[:, :, cols], y=self.y, channels=list(channels), meta=self.meta,
                         flags=self.flags, aux=self.aux)

    def drop_channels(self, channels: Iterable[str]) -> "WindowSet":
        channels = set(channels)
        return self.select([c for c in self.channels if c not in channels])

    def tagged(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.meta[tag].values)

    @staticmethod
    def concat(sets: List["WindowSet"]) -> "WindowSet":
        sets = [s for s in sets if s is not None]
        if not sets:
            raise ValueError("Nothing to concatenate")
        channels = sets[0].channels
        if any(s.channels != channels for s in sets):
            raise SchemaMismatchError("Window sets carry different channels")
        return WindowSet(
            X=np.concatenate([s.X for s in sets]),
            y=np.concatenate([s.y for s in sets]),
            channels=list(channels),
            meta=pd.concat([s.meta for s in sets], ignore_index=True),
            flags=np.concatenate([s.flags for s in sets]),
            aux={k: np.concatenate([s.aux[k] for s in sets]) for k in sets[0].aux},
        )

    def save(self, path: Union[str, Path]) -> None:
        """Binary .npz with a header, plus a JSON sidecar describing it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "version": WINDOW_FORMAT_VERSION,
            "n_channels": len(self.channels),
            "count": len(self),
            "channels": list(self.channels),
            "schema_hash": self.schema_hash,
        }
        meta = self.meta.copy()
        meta["end_time"] = pd.DatetimeIndex(meta["end_time"]).asi8
        with open(path, "wb") as f:
            np.savez_compressed(
                f, X=self.X, y=self.y, flags=self.flags,
                header=np.array(json.dumps(header, sort_keys=True)),
                meta=np.array(meta.to_json(orient="split")),
                **{f"aux_{k}": v for k, v in self.aux.items()},
            )
        with open(Path(str(path) + ".json"), "w") as f:
            json.dump(header, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "WindowSet":
        with np.load(path, allow_pickle=False) as data:
            header = json.loads(str(data["header"]))
            if header["version"] != WINDOW_FORMAT_VERSION:
                raise ValueError(f"Unsupported window file version {header['version']}")
            meta = pd.read_json(io.StringIO(str(data["meta"])), orient="split", dtype=False, convert_dates=False)
            meta["end_time"] = pd.to_datetime(meta["end_time"].astype("int64"), utc=True)
            meta["participant_id"] = meta["participant_id"].astype(str)
            for tag in SCENARIO_TAGS:
                meta[tag] = meta[tag].astype(bool)
            aux = {k[len("aux_"):]: data[k] for k in data.files if k.startswith("aux_")}
            return cls(X=data["X"], y=data["y"], channels=header["channels"], meta=meta,
                       flags=data["flags"], aux=aux)

    def to_csv(self, path: Union[str, Path]) -> None:
        """Inspection export: one row per window with the final row's features and the target."""
        out = self.meta.copy()
        out["end_time"] = out["end_time"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
        for j, c in enumerate(self.channels):
            out[f"last_{c}"] = self.X[:, -1, j]
        out["target"] = self.y
        out.to_csv(path, index=False, float_format="%.4f")


def schema_hash(channels: Sequence[str]) -> str:
    return hashlib.sha256(",".join(channels).encode()).hexdigest()[:16]


def empty_window_set(channels: List[str]) -> WindowSet:
    meta = pd.DataFrame({"participant_id": pd.Series(dtype=str),
                         "end_time": pd.Series(dtype="datetime64[ns, UTC]"),
                         **{t: pd.Series(dtype=bool) for t in SCENARIO_TAGS}})
    return WindowSet(
        X=np.zeros((0, WINDOW_STEPS, len(channels))), y=np.zeros(0), channels=channels, meta=meta,
        flags=np.zeros((0, WINDOW_STEPS, len(EVENT_FLAGS))),
        aux={k: np.zeros((0, WINDOW_STEPS)) for k in AUX_CHANNELS},
    )


def windowize(grid, cfg: Optional[FeatureConfig] = None,
              include_event_channels: Iterable[str] = EVENT_FLAGS) -> WindowSet:
    """
    All valid overlapping 48-step windows of one grid, stride one slot.

    A grid with timestamp gaps (day-filtered) is windowed per contiguous run,
    so no window spans a gap.

    Args:
        grid: Interpolated GlucoseGrid with a profile
        cfg: Feature options
        include_event_channels: Event flags appended as binary channels

    Returns:
        WindowSet in chronological order (empty for short grids)
    """
    cfg = cfg or FeatureConfig()
    include_event_channels = list(include_event_channels)
    segments = contiguous_segments(grid)
    if len(segments) > 1:
        return WindowSet.concat([windowize(s, cfg, include_event_channels) for s in segments])
    channels = BASE_CHANNELS + [f for f in EVENT_FLAGS if f in set(include_event_channels)]
    features = grid_features(grid, cfg)
    frame = grid.frame
    n = len(frame)
    if n < WINDOW_STEPS + 1:
        return empty_window_set(channels)

    glucose = features["glucose"].values
    interpolated = frame["interpolated"].values.astype(bool)
    bad = _bad_rows(glucose, interpolated, int(cfg.max_gap_min // SLOT_MINUTES))

    ends = np.arange(WINDOW_STEPS - 1, n - 1)
    bad_count = np.concatenate([[0], np.cumsum(bad)])
    # span covers rows e-47 .. e+1
    bad_in_span = bad_count[ends + 2] - bad_count[ends - WINDOW_STEPS + 1]
    valid = (bad_in_span == 0) & ~interpolated[ends + 1] & (glucose[ends + 1] > 0)

    matrix = features[channels].values
    finite_rows = np.isfinite(matrix).all(axis=1)
    finite_count = np.concatenate([[0], np.cumsum(~finite_rows)])
    valid &= (finite_count[ends + 1] - finite_count[ends - WINDOW_STEPS + 1]) == 0
    ends = ends[valid]
    if len(ends) == 0:
        return empty_window_set(channels)

    rows = ends[:, None] + np.arange(-WINDOW_STEPS + 1, 1)[None, :]
    X = matrix[rows].copy()
    X[:, :, channels.index("time_of_day")] = features["time_of_day"].values[ends][:, None]
    flags = features[EVENT_FLAGS].values[rows]
    aux = {
        "glucose": glucose[rows],
        "basal": frame["basal"].values.astype(float)[rows],
        "bolus": frame["bolus"].values.astype(float)[rows],
        "carbs": frame["carbs"].values.astype(float)[rows],
    }

    end_times = frame["timestamp"].iloc[ends].reset_index(drop=True)
    k = EVENT_LOOKBACK_MINUTES // SLOT_MINUTES
    tags = scenario_tags_arrays(glucose[ends], end_times.dt.hour.values, aux["carbs"][:, -k:],
                                flags[:, -k:, :], cfg.night_start_hour, cfg.night_end_hour)
    meta = pd.DataFrame({"participant_id": grid.participant_id, "end_time": end_times, **tags})

    logger.debug(f"{grid.participant_id}: {len(ends)} windows from {n} slots")
    return WindowSet(X=X, y=glucose[ends + 1].copy(), channels=channels, meta=meta, flags=flags, aux=aux)


def windowize_all(grids, cfg: Optional[FeatureConfig] = None,
                  include_event_channels: Iterable[str] = EVENT_FLAGS) -> WindowSet:
    include_event_channels = list(include_event_channels)
    return WindowSet.concat([windowize(g, cfg, include_event_channels) for g in grids])


@dataclass
class SplitSpec:
    train_frac: float = 0.9
    val_frac: float = 0.05
    test_frac: float = 0.05
    chronological: bool = True

    def __post_init__(self):
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if any(f < 0 or f > 1 for f in fracs) or not np.isclose(sum(fracs), 1.0):
            raise ValueError(f"Split fractions must lie in [0, 1] and sum to 1, got {fracs}")
        if not self.chronological:
            raise ValueError("Only chronological splits are supported")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "SplitSpec":
        return cls(**(d or {}))


def split(windows: WindowSet, spec: SplitSpec) -> Tuple[WindowSet, WindowSet, WindowSet]:
    """
    Chronological per-participant split into train, validation and test.

    Each participant's first train_frac of windows go to train, the next val_frac
    to validation and the rest to test. Validation and test windows whose span
    starts at or before the previous partition's last target are dropped, so no
    reading is shared across partitions.

    Raises:
        EmptySplitError: any partition is empty
    """
    span_min = (WINDOW_STEPS - 1) * SLOT_MINUTES
    parts = {"train": [], "val": [], "test": []}
    for pid, group in windows.meta.groupby("participant_id", sort=True):
        idx = group.sort_values("end_time", kind="mergesort").index.values
        n = len(idx)
        n_train = int(np.floor(n * spec.train_frac + 1e-9))
        n_val = int(np.floor(n * spec.val_frac + 1e-9))
        chunks = [idx[:n_train], idx[n_train:n_train + n_val], idx[n_train + n_val:]]

        ends = windows.meta["end_time"]
        kept = [chunks[0]]
        for chunk in chunks[1:]:
            earlier = np.concatenate(kept)
            if len(earlier) and len(chunk):
                last_target = ends.iloc[earlier].max() + pd.Timedelta(minutes=SLOT_MINUTES)
                starts = ends.iloc[chunk] - pd.Timedelta(minutes=span_min)
                chunk = chunk[(starts > last_target).values]
            kept.append(chunk)
        for name, chunk in zip(parts, kept):
            parts[name].append(chunk)
        logger.debug(f"{pid}: split {n} windows into {[len(c) for c in kept]}")

    out = []
    for name, chunks in parts.items():
        idx = np.concatenate(chunks) if chunks else np.array([], dtype=int)
        if len(idx) == 0:
            raise EmptySplitError(f"{name} partition is empty for split {asdict(spec)}")
        out.append(windows.subset(idx))
    return tuple(out)


class Normalizer:
    """Per-channel z-score fitted on training windows only (zero-variance channels keep scale 1)."""

    def __init__(self, channels: Optional[List[str]] = None):
        self.channels = list(channels) if channels is not None else None
        self.scaler = StandardScaler()

    def fit(self, X: np.ndarray, channels: Optional[List[str]] = None) -> "Normalizer":
        if channels is not None:
            self.channels = list(channels)
        self.scaler.fit(X.reshape(-1, X.shape[-1]))
        return self

    @property
    def mean(self) -> np.ndarray:
        return self.scaler.mean_

    @property
    def scale(self) -> np.ndarray:
        return self.scaler.scale_

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"channels": self.channels, "mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        norm = cls(d["channels"])
        norm.scaler.mean_ = np.asarray(d["mean"], dtype=float)
        norm.scaler.scale_ = np.asarray(d["scale"], dtype=float)
        norm.scaler.var_ = norm.scaler.scale_ ** 2
        norm.scaler.n_features_in_ = len(norm.scaler.mean_)
        return norm

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Normalizer":
        with open(path) as f:
            return cls.from_dict(json.load(f))
