import numpy as np
import pandas as pd
import pytest

from src.config.channels import EVENT_FLAGS
from src.ingest.build_grid import GlucoseGrid
from src.ingest.parse_events import PatientProfile


def build_test_grid(glucose, basal=0.8, bolus=0.0, carbs=0.0, start="2020-01-01T00:00:00Z",
                    interpolated=None, weight_kg=70.0, participant_id="p01", flags=None):
    """GlucoseGrid straight from per-slot arrays."""
    glucose = np.asarray(glucose, dtype=float)
    n = len(glucose)
    frame = pd.DataFrame({
        "timestamp": pd.date_range(pd.Timestamp(start), periods=n, freq="5min"),
        "glucose": glucose,
        "interpolated": np.zeros(n, dtype=bool) if interpolated is None else np.asarray(interpolated, dtype=bool),
        "basal": np.broadcast_to(np.asarray(basal, dtype=float), (n,)).copy(),
        "bolus": np.broadcast_to(np.asarray(bolus, dtype=float), (n,)).copy(),
        "carbs": np.broadcast_to(np.asarray(carbs, dtype=float), (n,)).copy(),
    })
    for flag in EVENT_FLAGS:
        frame[flag] = 0
    for flag, rows in (flags or {}).items():
        frame.loc[rows, flag] = 1
    profile = PatientProfile(participant_id, [(0, 0.8)], weight_kg=weight_kg)
    return GlucoseGrid(participant_id=participant_id, frame=frame, profile=profile)


@pytest.fixture
def make_grid():
    return build_test_grid


def _response(doses, peak_slot, length):
    """Unit-mass triangular activity profile convolved with per-slot doses."""
    lags = np.arange(length, dtype=float)
    kernel = np.where(lags <= peak_slot, lags / peak_slot, (length - lags) / (length - peak_slot))
    kernel /= kernel.sum()
    return np.convolve(doses, kernel)[:len(doses)]


def build_synthetic_grid(n=1500, seed=0, participant_id="p01", start="2020-01-01T00:00:00Z"):
    """
    Grid whose glucose follows a known linear response: +3 mg/dl per g of carbs
    and -30 mg/dl per U of bolus, spread over a few hours, with mild mean reversion.
    """
    rng = np.random.default_rng(seed)
    carbs = np.where(rng.random(n) < 0.02, rng.uniform(20, 60, n), 0.0)
    bolus = np.where(rng.random(n) < 0.02, rng.uniform(1, 5, n), 0.0)
    drive = 3.0 * _response(carbs, 6, 36) - 30.0 * _response(bolus, 12, 48)
    glucose = np.empty(n)
    glucose[0] = 120.0
    for t in range(1, n):
        glucose[t] = glucose[t - 1] + drive[t - 1] + 0.02 * (120.0 - glucose[t - 1]) + rng.normal(0, 0.5)
    glucose = np.clip(glucose, 40.0, 400.0)
    return build_test_grid(glucose, basal=0.8, bolus=bolus, carbs=carbs, start=start,
                           participant_id=participant_id)


@pytest.fixture(scope="session")
def synthetic_windows():
    from src.features.windows import windowize
    return windowize(build_synthetic_grid())


@pytest.fixture(scope="session")
def synthetic_splits(synthetic_windows):
    from src.features.windows import SplitSpec, split
    return split(synthetic_windows, SplitSpec(0.7, 0.15, 0.15))
