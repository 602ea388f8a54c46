"""
Insulin / carbohydrate coupling of a grid.

Large boluses taken with meals make the two inputs hard to separate; the
coupling statistic is the Spearman correlation between per-slot bolus and carbs.
"""

import logging
from typing import Iterable

import numpy as np

from src.statistics.nonparametric import ConstantInputError, spearman_rho

logger = logging.getLogger(__name__)


def coupling_correlation(grid) -> float:
    """
    Spearman correlation of per-slot bolus (U) and carbs (g).

    Returns:
        rho in [-1, 1]; NaN when either channel is constant (no boluses or no carbs)
    """
    bolus = grid.frame["bolus"].to_numpy(dtype=float)
    carbs = grid.frame["carbs"].to_numpy(dtype=float)
    try:
        return spearman_rho(bolus, carbs)
    except ConstantInputError:
        logger.warning(f"{grid.participant_id}: constant bolus or carb channel, coupling undefined")
        return float("nan")


def cohort_coupling(grids: Iterable) -> float:
    """Coupling over the slots of several grids pooled together."""
    grids = list(grids)
    bolus = np.concatenate([g.frame["bolus"].to_numpy(dtype=float) for g in grids])
    carbs = np.concatenate([g.frame["carbs"].to_numpy(dtype=float) for g in grids])
    try:
        return spearman_rho(bolus, carbs)
    except ConstantInputError:
        return float("nan")
