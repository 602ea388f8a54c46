"""
Insulin-on-board and carbohydrates-on-board activity channels.

Each slot's dose (insulin: basal * 5/60 + bolus, in U; carbs in g) decays with
its age. The linear kernel drops to zero at the action duration; the exponential
kernel halves every duration/2 minutes and is truncated at the duration.
"""

import numpy as np

from src.config.thresholds import DEFAULT_ABSORPTION_MINUTES, DEFAULT_DIA_MINUTES, SLOT_MINUTES

KERNELS = ("linear", "exponential")


def decay_kernel(duration_min: float, kind: str = "linear") -> np.ndarray:
    """Remaining fraction of a dose at ages 0, 5, 10, ... minutes (zero from the duration on)."""
    if duration_min <= 0:
        raise ValueError(f"Action duration must be positive, got {duration_min}")
    ages = np.arange(0, duration_min + SLOT_MINUTES, SLOT_MINUTES, dtype=float)
    if kind == "linear":
        weights = np.maximum(0.0, 1.0 - ages / duration_min)
    elif kind == "exponential":
        weights = np.exp(-ages * np.log(2) / (duration_min * 0.5))
        weights[ages >= duration_min] = 0.0
    else:
        raise ValueError(f"Unknown decay kernel '{kind}', expected one of {KERNELS}")
    return weights


def on_board(amounts: np.ndarray, duration_min: float, kind: str = "linear") -> np.ndarray:
    """
    Active amount per slot from per-slot doses.

    Args:
        amounts: Dose per slot (U or g), oldest first
        duration_min: Action duration in minutes
        kind: 'linear' or 'exponential'

    Returns:
        Array of the same length: sum over past doses of dose * kernel(age)
    """
    amounts = np.asarray(amounts, dtype=float)
    if amounts.size == 0:
        return amounts.copy()
    return np.convolve(amounts, decay_kernel(duration_min, kind))[:len(amounts)]


def total_insulin(basal: np.ndarray, bolus: np.ndarray) -> np.ndarray:
    """Insulin delivered per slot in U: basal rate over 5 minutes plus bolus."""
    return np.asarray(basal, dtype=float) * SLOT_MINUTES / 60.0 + np.asarray(bolus, dtype=float)


def compute_iob(grid, dia_min: float = DEFAULT_DIA_MINUTES, kind: str = "linear") -> np.ndarray:
    """Insulin on board per slot (U); basal counts as 5-minute micro-doses."""
    frame = grid.frame
    return on_board(total_insulin(frame["basal"].values, frame["bolus"].values), dia_min, kind)


def compute_cob(grid, absorption_min: float = DEFAULT_ABSORPTION_MINUTES, kind: str = "linear") -> np.ndarray:
    """Carbohydrates on board per slot (g)."""
    return on_board(grid.frame["carbs"].values, absorption_min, kind)
