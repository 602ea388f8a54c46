"""Finite-difference check of reverse-mode parameter gradients."""

import logging
from typing import Optional

import numpy as np

from src.features.windows import FeatureWindow, WindowSet
from src.models.base import Predictor
from src.models.gmse import GmseConfig, gmse

logger = logging.getLogger(__name__)


def _targets(windows) -> np.ndarray:
    if isinstance(windows, FeatureWindow):
        return np.array([windows.target])
    if isinstance(windows, WindowSet):
        return windows.y
    raise TypeError("Pass a FeatureWindow or WindowSet, or give targets explicitly")


def backprop_check(model: Predictor, windows, loss_cfg: Optional[GmseConfig] = None, eps: float = 1e-4,
                   max_entries: Optional[int] = None, targets: Optional[np.ndarray] = None,
                   seed: int = 0) -> float:
    """
    Compare autodiff gMSE gradients with central finite differences.

    Args:
        model: Differentiable predictor
        windows: FeatureWindow, WindowSet or raw (N, 48, F) array
        loss_cfg: gMSE shape
        eps: Finite-difference step on the parameters (which act on z-scored inputs)
        max_entries: Entries sampled per parameter tensor (all when None)
        targets: Target glucose when windows is a raw array
        seed: Sampling seed for max_entries

    Returns:
        Largest norm-wise relative error over parameter tensors (0 for a
        predictor without parameters)
    """
    X = model.as_array(windows)
    y = np.asarray(targets, dtype=float) if targets is not None else _targets(windows)
    if not model.params:
        return 0.0

    _, grads = model.loss_and_gradients(X, y, loss_cfg)
    original = model.get_params()
    rng = np.random.default_rng(seed)
    worst = 0.0
    try:
        for name, p in model.params.items():
            size = p.data.size
            flat = np.arange(size)
            if max_entries is not None and size > max_entries:
                flat = np.sort(rng.choice(size, max_entries, replace=False))
            numeric = np.empty(len(flat))
            for j, k in enumerate(flat):
                idx = np.unravel_index(k, p.data.shape)
                base = original[name][idx]
                p.data[idx] = base + eps
                up = gmse(y, model.predict(X), loss_cfg)
                p.data[idx] = base - eps
                down = gmse(y, model.predict(X), loss_cfg)
                p.data[idx] = base
                numeric[j] = (up - down) / (2 * eps)
            analytic = grads[name].ravel()[flat]
            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            error = float(np.linalg.norm(analytic - numeric) / scale)
            logger.debug(f"{model.kind}.{name}: relative gradient error {error:.2e}")
            worst = max(worst, error)
    finally:
        model.set_params(original)
    return worst
