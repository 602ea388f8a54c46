"""
Interquartile day filtering.

Days whose total announced carbohydrate falls outside the participant's own
interquartile range of daily totals are assumed to hide unreported meals (low
tail) or logging errors (high tail), and all their rows are removed.
"""

import logging
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np
import pandas as pd

from src.config.thresholds import SLOT_MINUTES

logger = logging.getLogger(__name__)

SLOTS_PER_DAY = 24 * 60 // SLOT_MINUTES
MIN_FULL_DAYS = 4


class TooFewDaysError(ValueError):
    """Day filtering needs several complete days to estimate quartiles."""


@dataclass
class DayFilterReport:
    participant_id: str
    days: pd.DataFrame          # date, total_carbs_g, full_day, kept
    q1: float
    q3: float
    n_rows_before: int
    n_rows_after: int

    @property
    def retained_fraction(self) -> float:
        return self.n_rows_after / self.n_rows_before if self.n_rows_before else 0.0

    @property
    def removed_days(self) -> List[str]:
        return self.days.loc[~self.days["kept"], "date"].tolist()


def daily_carb_totals(grid) -> pd.DataFrame:
    """Announced carbs per calendar day (UTC) and whether the day is fully covered."""
    frame = grid.frame
    dates = frame["timestamp"].dt.strftime("%Y-%m-%d")
    days = frame.groupby(dates).agg(total_carbs_g=("carbs", "sum"), n_slots=("carbs", "size"))
    days["full_day"] = days["n_slots"] == SLOTS_PER_DAY
    return days.rename_axis("date").reset_index()[["date", "total_carbs_g", "full_day"]]


def filter_days(grid, low_tail_only: bool = False) -> Tuple[object, DayFilterReport]:
    """
    Remove every row of days with carb totals outside [Q1, Q3].

    Quartiles use linear interpolation between order statistics over the full days.
    Partial days (grid edges) cannot be judged and are removed too. Bounds are
    inclusive, so identical day totals keep every full day.

    Args:
        grid: GlucoseGrid
        low_tail_only: Only remove days below Q1

    Returns:
        (filtered grid, possibly with gaps between kept days; report)

    Raises:
        TooFewDaysError: fewer than 4 full days
    """
    days = daily_carb_totals(grid)
    full = days[days["full_day"]]
    if len(full) < MIN_FULL_DAYS:
        raise TooFewDaysError(f"{grid.participant_id}: {len(full)} full days, need at least {MIN_FULL_DAYS}")

    q1, q3 = np.percentile(full["total_carbs_g"].to_numpy(), [25, 75])
    totals = days["total_carbs_g"].to_numpy()
    kept = days["full_day"].to_numpy() & (totals >= q1)
    if not low_tail_only:
        kept &= totals <= q3
    days["kept"] = kept

    dates = grid.frame["timestamp"].dt.strftime("%Y-%m-%d")
    mask = dates.isin(set(days.loc[kept, "date"])).to_numpy()
    filtered = replace(grid, frame=grid.frame.loc[mask].reset_index(drop=True))

    report = DayFilterReport(
        participant_id=grid.participant_id,
        days=days,
        q1=float(q1),
        q3=float(q3),
        n_rows_before=len(grid),
        n_rows_after=int(mask.sum()),
    )
    logger.info(f"{grid.participant_id}: kept {int(kept.sum())}/{len(days)} days "
                f"(Q1 {q1:.1f} g, Q3 {q3:.1f} g), {report.retained_fraction:.1%} of rows")
    return filtered, report
