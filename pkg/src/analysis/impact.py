"""
Impact curves: attribution as a function of minutes since an event.

A curve holds one value per 5-minute offset from 0 to 240 min. Offsets with no
contributing events carry NaN and n = 0.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from src.config.thresholds import SLOT_MINUTES, WINDOW_STEPS

CURVE_OFFSETS = np.arange(0, WINDOW_STEPS * SLOT_MINUTES + 1, SLOT_MINUTES)

HOUR_BANDS = [(0, 60), (60, 120), (120, 180), (180, 240)]


class GridMismatchError(ValueError):
    """Two curves are defined on different offset grids."""


@dataclass
class ImpactCurve:
    offsets: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    n_events: np.ndarray
    channel: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=float)
        self.mean = np.asarray(self.mean, dtype=float)
        self.stderr = np.asarray(self.stderr, dtype=float)
        self.n_events = np.asarray(self.n_events, dtype=int)
        if np.any(np.diff(self.offsets) <= 0):
            raise ValueError("Curve offsets must be strictly increasing")

    @property
    def valid(self) -> np.ndarray:
        return (self.n_events > 0) & np.isfinite(self.mean)

    def normalized(self) -> np.ndarray:
        """Z-scored mean impact over valid offsets; NaN elsewhere."""
        out = np.full_like(self.mean, np.nan)
        out[self.valid] = zscore(self.mean[self.valid])
        return out

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "offset_min": self.offsets.astype(int),
            "mean": self.mean,
            "stderr": self.stderr,
            "n": self.n_events,
        })

    def to_csv(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.6g")

    @classmethod
    def from_csv(cls, path: Union[str, Path], channel: str = "") -> "ImpactCurve":
        df = pd.read_csv(path)
        return cls(
            offsets=df["offset_min"].values,
            mean=df["mean"].values,
            stderr=df["stderr"].fillna(0.0).values,
            n_events=df["n"].values,
            channel=channel,
        )


def zscore(values: np.ndarray) -> np.ndarray:
    """Z-score with population sd; a constant sequence maps to zeros."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values
    sd = values.std()
    if sd == 0 or not np.isfinite(sd):
        return np.zeros_like(values)
    return (values - values.mean()) / sd


def hourly_impact(curve: ImpactCurve) -> pd.DataFrame:
    """
    Mean and standard error of a curve's mean impact in hourly bands.

    Bands are [0, 60), [60, 120), [120, 180) and [180, 240] minutes.

    Returns:
        DataFrame with columns band, mean, stderr, n_points
    """
    rows = []
    for i, (lo, hi) in enumerate(HOUR_BANDS):
        last = i == len(HOUR_BANDS) - 1
        in_band = (curve.offsets >= lo) & ((curve.offsets <= hi) if last else (curve.offsets < hi))
        values = curve.mean[in_band & curve.valid]
        n = len(values)
        rows.append({
            "band": f"{lo // 60}-{hi // 60}h",
            "mean": values.mean() if n else np.nan,
            "stderr": values.std(ddof=1) / np.sqrt(n) if n > 1 else np.nan,
            "n_points": n,
        })
    return pd.DataFrame(rows)


def sign_summary(curve: ImpactCurve) -> dict:
    """Mean raw impact over the first 2 h and over the full 4 h."""
    valid = curve.valid
    first = valid & (curve.offsets <= 120)
    return {
        "first_2h_mean": float(curve.mean[first].mean()) if first.any() else float("nan"),
        "full_4h_mean": float(curve.mean[valid].mean()) if valid.any() else float("nan"),
    }
