"""
Glucose-specific mean squared error.

Squared error scaled by a penalty that rises smoothly to penalty_max for
overestimates when the true glucose is low and for underestimates when it is
high. Both the glucose bands and the direction of the error are blended with a
smoothstep over transition_width, so the penalty is differentiable everywhere
and exactly 1 inside the safe band.
"""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from src.config.thresholds import HYPER_MGDL, HYPO_MGDL


class LengthMismatchError(ValueError):
    """Targets and predictions differ in length (or are empty)."""


@dataclass(frozen=True)
class GmseConfig:
    hypo_threshold: float = HYPO_MGDL
    hyper_threshold: float = HYPER_MGDL
    penalty_max: float = 2.5
    transition_width: float = 10.0

    def __post_init__(self):
        if self.penalty_max < 1:
            raise ValueError(f"penalty_max must be >= 1, got {self.penalty_max}")
        if self.transition_width <= 0:
            raise ValueError("transition_width must be positive")
        if self.hyper_threshold - self.hypo_threshold <= self.transition_width:
            raise ValueError("Glucose thresholds must be ordered and further apart than the transition width")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "GmseConfig":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


def smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def smoothstep_slope(x: np.ndarray) -> np.ndarray:
    inside = (x > 0) & (x < 1)
    return np.where(inside, 6.0 * x * (1.0 - x), 0.0)


def _check(targets, predictions):
    g = np.asarray(targets, dtype=float).ravel()
    p = np.asarray(predictions, dtype=float).ravel()
    if len(g) != len(p) or len(g) == 0:
        raise LengthMismatchError(f"Need equal non-empty lengths, got {len(g)} targets and {len(p)} predictions")
    return g, p


def _bands(g: np.ndarray, cfg: GmseConfig):
    w = cfg.transition_width
    low = smoothstep((cfg.hypo_threshold - g) / w + 0.5)
    high = smoothstep((g - cfg.hyper_threshold) / w + 0.5)
    return low, high


def penalty(targets, predictions, cfg: Optional[GmseConfig] = None) -> np.ndarray:
    """Per-sample penalty factor in [1, penalty_max]."""
    cfg = cfg or GmseConfig()
    g, p = _check(targets, predictions)
    w = cfg.transition_width
    err = p - g
    low, high = _bands(g, cfg)
    return 1.0 + (cfg.penalty_max - 1.0) * (low * smoothstep(err / w) + high * smoothstep(-err / w))


def gmse_per_sample(targets, predictions, cfg: Optional[GmseConfig] = None) -> np.ndarray:
    g, p = _check(targets, predictions)
    return (p - g) ** 2 * penalty(g, p, cfg)


def gmse(targets, predictions, cfg: Optional[GmseConfig] = None) -> float:
    """
    Mean penalized squared error.

    Args:
        targets: True glucose, mg/dl
        predictions: Predicted glucose, mg/dl
        cfg: Penalty shape

    Returns:
        Non-negative loss; zero exactly when predictions equal targets
    """
    return float(np.mean(gmse_per_sample(targets, predictions, cfg)))


def gmse_gradient(targets, predictions, cfg: Optional[GmseConfig] = None) -> np.ndarray:
    """d gmse / d predictions, one entry per sample."""
    cfg = cfg or GmseConfig()
    g, p = _check(targets, predictions)
    w = cfg.transition_width
    err = p - g
    low, high = _bands(g, cfg)
    pen = 1.0 + (cfg.penalty_max - 1.0) * (low * smoothstep(err / w) + high * smoothstep(-err / w))
    dpen = (cfg.penalty_max - 1.0) * (low * smoothstep_slope(err / w) - high * smoothstep_slope(-err / w)) / w
    return (2.0 * err * pen + err ** 2 * dpen) / len(g)
