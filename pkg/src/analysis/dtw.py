"""
Dynamic time warping between impact curves.

Classic unconstrained alignment: squared pointwise cost, steps (1,0), (0,1) and
(1,1), total cost of the cheapest monotone path from (0,0) to (n-1,m-1).
"""

import logging
from typing import List, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from src.analysis.impact import GridMismatchError, ImpactCurve, zscore

logger = logging.getLogger(__name__)


class EmptySequenceError(ValueError):
    """DTW needs two non-empty sequences."""


def _accumulated_cost(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    cost = cdist(a[:, None], b[:, None], metric="sqeuclidean")
    n, m = cost.shape
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            acc[i, j] = cost[i - 1, j - 1] + min(acc[i - 1, j - 1], acc[i - 1, j], acc[i, j - 1])
    return acc


def _prepare(a, b, normalize: bool) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise EmptySequenceError(f"DTW needs non-empty sequences, got lengths {a.size} and {b.size}")
    if normalize:
        a, b = zscore(a), zscore(b)
    return a, b


def dtw_distance(a, b, normalize: bool = True) -> float:
    """
    Alignment cost between two sequences.

    Args:
        a, b: Real sequences (any lengths >= 1)
        normalize: Z-score both sequences first

    Returns:
        Non-negative cost; 0 when the sequences are equal
    """
    a, b = _prepare(a, b, normalize)
    return float(_accumulated_cost(a, b)[-1, -1])


def dtw_path(a, b, normalize: bool = True) -> List[Tuple[int, int]]:
    """Optimal alignment path as (i, j) pairs from (0, 0) to the last pair."""
    a, b = _prepare(a, b, normalize)
    acc = _accumulated_cost(a, b)
    i, j = len(a), len(b)
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        steps = [(acc[i - 1, j - 1], i - 1, j - 1), (acc[i - 1, j], i - 1, j), (acc[i, j - 1], i, j - 1)]
        _, i, j = min(steps, key=lambda s: s[0])
        path.append((i - 1, j - 1))
    return path[::-1]


def dynamics_error(learned: ImpactCurve, theoretical: ImpactCurve) -> float:
    """
    DTW distance between the z-scored mean impacts of two curves.

    Only offsets where both curves have a value enter the comparison (a learned
    curve has no value at offset 0, since no event is 0 minutes before a
    prediction).

    Raises:
        GridMismatchError: the curves use different offset grids
    """
    if learned.offsets.shape != theoretical.offsets.shape or not np.array_equal(learned.offsets, theoretical.offsets):
        raise GridMismatchError("Curves must share the same offset grid")
    common = learned.valid & theoretical.valid
    if not common.any():
        raise EmptySequenceError("Curves share no offset with a value")
    return dtw_distance(learned.mean[common], theoretical.mean[common], normalize=True)
