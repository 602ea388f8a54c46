"""
Expected-gradients attribution and learned impact curves.

For a window x and baselines b drawn from a background sample,

    attribution[t, f] = mean_b (x - b)[t, f] * integral_0^1 d model / d x[t, f] at b + a (x - b) da

with the path integral evaluated by Gauss-Legendre quadrature. Attributions
sum to model(x) - mean_b model(b).

An impact curve collects, for every event on a channel (a carb entry or a
bolus), the attribution at the event's row, bucketed by how many minutes the
event precedes the prediction time.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from src.analysis.impact import CURVE_OFFSETS, ImpactCurve
from src.config.channels import EVENT_CHANNEL_SOURCE
from src.config.thresholds import SLOT_MINUTES, WINDOW_STEPS
from src.features.windows import FeatureWindow, SchemaMismatchError, WindowSet
from src.models.base import Predictor

logger = logging.getLogger(__name__)


class NonDifferentiableModelError(ValueError):
    """Attribution needs a predictor with input gradients."""


class NoEventsError(ValueError):
    """No window in the sample carries an event on the requested channel."""


@dataclass
class AttributionConfig:
    n_background: int = 1000
    n_interpolation_steps: int = 64
    n_baselines_per_window: int = 10
    excluded_channels: Tuple[str, ...] = ()
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        self.excluded_channels = tuple(self.excluded_channels)
        for name in ("n_background", "n_interpolation_steps", "n_baselines_per_window"):
            if getattr(self, name) < 1:
                raise ValueError(f"AttributionConfig.{name} must be at least 1")

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "AttributionConfig":
        return cls(**(d or {}))


def quadrature(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [0, 1]."""
    nodes, weights = np.polynomial.legendre.leggauss(n)
    return (nodes + 1.0) / 2.0, weights / 2.0


def _check_model(model: Predictor, cfg: AttributionConfig) -> None:
    if not model.differentiable:
        raise NonDifferentiableModelError(f"{model.kind} predictor has no input gradients")
    leaked = [c for c in cfg.excluded_channels if c in model.channels]
    if leaked:
        raise SchemaMismatchError(f"Model uses excluded channels {leaked}")


def _window_attribution(model: Predictor, x: np.ndarray, baselines: np.ndarray,
                        alphas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    diff = x[None] - baselines                                            # (K, T, F)
    points = baselines[:, None] + alphas[None, :, None, None] * diff[:, None]
    _, grads = model.input_gradient(points.reshape(-1, *x.shape))
    grads = grads.reshape(len(baselines), len(alphas), *x.shape)
    path_integral = np.tensordot(weights, grads, axes=([0], [1]))        # (K, T, F)
    return (diff * path_integral).mean(axis=0)


def _chunk_attribution(model, X, baselines_idx, background, alphas, weights):
    return np.stack([_window_attribution(model, x, background[idx], alphas, weights)
                     for x, idx in zip(X, baselines_idx)])


def sample_background(windows: Union[WindowSet, np.ndarray], n: int, seed: int = 0) -> np.ndarray:
    """Seeded sample of up to n raw feature windows, without replacement."""
    X = windows.X if isinstance(windows, WindowSet) else np.asarray(windows, dtype=float)
    rng = np.random.default_rng(seed)
    if len(X) <= n:
        return X.copy()
    return X[np.sort(rng.choice(len(X), n, replace=False))]


def attribute(model: Predictor, windows, background, cfg: Optional[AttributionConfig] = None,
              progress: bool = False) -> np.ndarray:
    """
    Expected-gradients attribution of the predicted glucose.

    Args:
        model: Differentiable predictor
        windows: FeatureWindow, WindowSet or raw (N, 48, F) / (48, F) array
        background: Baseline windows (WindowSet or raw array, model channel order)
        cfg: Sample sizes and quadrature order
        progress: Progress bar over windows

    Returns:
        (48, F) for a single window, else (N, 48, F), in model channel order
    """
    cfg = cfg or AttributionConfig()
    _check_model(model, cfg)
    single = isinstance(windows, FeatureWindow) or (isinstance(windows, np.ndarray) and windows.ndim == 2)
    X = model.as_array(windows)
    bg = model.as_array(background)
    if len(bg) == 0:
        raise ValueError("Attribution needs a non-empty background sample")

    rng = np.random.default_rng(cfg.seed)
    k = cfg.n_baselines_per_window
    replace = len(bg) < k
    baselines_idx = [rng.choice(len(bg), size=k, replace=replace) for _ in range(len(X))]
    alphas, weights = quadrature(cfg.n_interpolation_steps)

    chunks = np.array_split(np.arange(len(X)), max(1, min(len(X), 8 * cfg.n_jobs)))
    jobs = (delayed(_chunk_attribution)(model, X[c], [baselines_idx[i] for i in c], bg, alphas, weights)
            for c in chunks if len(c))
    parts = Parallel(n_jobs=cfg.n_jobs)(tqdm(jobs, total=len(chunks), desc="Attribution", disable=not progress))
    out = np.concatenate(parts) if parts else np.zeros((0,) + X.shape[1:])
    return out[0] if single else out


def event_rows(windows: WindowSet, channel: str) -> Tuple[np.ndarray, np.ndarray]:
    """(window index, row) of every nonzero event on an attribution channel."""
    if channel not in EVENT_CHANNEL_SOURCE:
        raise ValueError(f"No event source for channel '{channel}', expected one of {sorted(EVENT_CHANNEL_SOURCE)}")
    source = windows.aux[EVENT_CHANNEL_SOURCE[channel]]
    return np.nonzero(source > 0)


def bucket_by_offset(values: np.ndarray, offsets_min: np.ndarray, channel: str = "",
                     meta: Optional[dict] = None) -> ImpactCurve:
    """Mean, standard error and count of values per curve offset."""
    mean = np.full(len(CURVE_OFFSETS), np.nan)
    stderr = np.full(len(CURVE_OFFSETS), np.nan)
    counts = np.zeros(len(CURVE_OFFSETS), dtype=int)
    for j, offset in enumerate(CURVE_OFFSETS):
        v = values[offsets_min == offset]
        counts[j] = len(v)
        if len(v):
            mean[j] = v.mean()
            stderr[j] = v.std(ddof=1) / np.sqrt(len(v)) if len(v) > 1 else 0.0
    return ImpactCurve(CURVE_OFFSETS, mean, stderr, counts, channel=channel, meta=meta or {})


def impact_curve(model: Predictor, channel: str, windows: WindowSet, cfg: Optional[AttributionConfig] = None,
                 background: Optional[Union[WindowSet, np.ndarray]] = None,
                 progress: bool = False) -> ImpactCurve:
    """
    Learned impact of an event channel versus minutes before the prediction.

    An event on row r of a window lies (48 - r) * 5 minutes before the
    predicted reading, so offsets run from 5 to 240 minutes; offset 0 stays empty.

    Args:
        model: Differentiable predictor
        channel: 'carbs' or 'total_insulin'
        windows: Calibration windows; those with events on the channel are attributed
        cfg: Attribution options
        background: Baselines (default: seeded sample of n_background calibration windows)
        progress: Progress bar

    Returns:
        ImpactCurve in raw attribution units (mg/dl of prediction)

    Raises:
        NoEventsError: no window carries an event on the channel
    """
    cfg = cfg or AttributionConfig()
    _check_model(model, cfg)
    if channel not in model.channels:
        raise SchemaMismatchError(f"Model has no '{channel}' channel")
    window_idx, rows = event_rows(windows, channel)
    if len(window_idx) == 0:
        raise NoEventsError(f"No {channel} events in {len(windows)} calibration windows")

    if background is None:
        background = sample_background(windows.select(model.channels), cfg.n_background, cfg.seed)
    attributed = np.unique(window_idx)
    attributions = attribute(model, windows.subset(attributed), background, cfg, progress=progress)

    position = np.searchsorted(attributed, window_idx)
    values = attributions[position, rows, model.channels.index(channel)]
    offsets = (WINDOW_STEPS - rows) * SLOT_MINUTES
    logger.info(f"{channel}: {len(values)} events in {len(attributed)} windows")
    return bucket_by_offset(values, offsets, channel=channel,
                            meta={"model": model.kind, "n_windows": int(len(attributed)),
                                  "n_background": int(len(background))})
