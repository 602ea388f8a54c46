import numpy as np
import pandas as pd
import pytest

from src.config.channels import BASE_CHANNELS, EVENT_FLAGS
from src.features.insulin_carbs import compute_cob, compute_iob, decay_kernel, on_board
from src.features.windows import (
    EmptySplitError,
    FeatureConfig,
    Normalizer,
    SchemaMismatchError,
    SplitSpec,
    WindowSet,
    split,
    tag_scenarios,
    windowize,
)


def impulses(n, **at):
    out = np.zeros(n)
    for slot, value in at.items():
        out[int(slot.lstrip("t"))] = value
    return out


# activity channels

def test_iob_linear_midpoint(make_grid):
    grid = make_grid(np.full(60, 120.0), basal=0.0, bolus=impulses(60, t0=1.0))
    assert compute_iob(grid)[24] == pytest.approx(0.5)


def test_iob_zero_without_insulin(make_grid):
    grid = make_grid(np.full(60, 120.0), basal=0.0)
    assert np.all(compute_iob(grid) == 0)


def test_iob_sums_doses(make_grid):
    grid = make_grid(np.full(60, 120.0), basal=0.0, bolus=impulses(60, t0=2.0, t12=1.0))
    assert compute_iob(grid)[24] == pytest.approx(1.75)


def test_cob_linear(make_grid):
    grid = make_grid(np.full(60, 120.0), carbs=impulses(60, t0=40.0))
    assert compute_cob(grid)[12] == pytest.approx(30.0)
    grid = make_grid(np.full(60, 120.0), carbs=impulses(60, t0=40.0, t24=20.0))
    assert compute_cob(grid)[36] == pytest.approx(25.0)


def test_cob_zero_without_carbs(make_grid):
    assert np.all(compute_cob(make_grid(np.full(30, 120.0))) == 0)


def test_basal_counts_as_micro_doses(make_grid):
    grid = make_grid(np.full(100, 120.0), basal=1.2)
    # steady state: 0.1 U per slot times the kernel mass
    assert compute_iob(grid)[-1] == pytest.approx(0.1 * decay_kernel(240).sum())


def test_iob_is_additive():
    rng = np.random.default_rng(0)
    a = np.where(rng.random(200) < 0.1, rng.uniform(0, 5, 200), 0.0)
    b = np.where(rng.random(200) < 0.1, rng.uniform(0, 5, 200), 0.0)
    np.testing.assert_allclose(on_board(a + b, 240), on_board(a, 240) + on_board(b, 240))


def test_activity_zero_beyond_horizon():
    amounts = impulses(100, t0=3.0)
    assert np.all(on_board(amounts, 240)[48:] == 0)
    assert np.all(on_board(amounts, 240, "exponential")[48:] == 0)


def test_exponential_kernel_halves_at_half_duration():
    kernel = decay_kernel(240, "exponential")
    assert kernel[0] == 1.0
    assert kernel[24] == pytest.approx(0.5)


def test_unknown_kernel():
    with pytest.raises(ValueError):
        decay_kernel(240, "gamma")


# windows

def test_single_window_from_49_slots(make_grid):
    glucose = np.linspace(100, 148, 49)
    windows = windowize(make_grid(glucose))
    assert len(windows) == 1
    assert windows.X.shape == (1, 48, len(BASE_CHANNELS) + len(EVENT_FLAGS))
    assert windows.y[0] == glucose[-1]
    np.testing.assert_array_equal(windows.channel("glucose")[0], glucose[:48])


def test_short_grid_gives_no_windows(make_grid):
    assert len(windowize(make_grid(np.full(48, 120.0)))) == 0


def interpolated_gap(make_grid, first, last, n=120):
    glucose = np.full(n, 120.0)
    interpolated = np.zeros(n, dtype=bool)
    interpolated[first:last + 1] = True
    return make_grid(glucose, interpolated=interpolated)


def test_long_outage_excludes_windows(make_grid):
    # real readings at slots 59 and 66: 35 minutes apart
    windows = windowize(interpolated_gap(make_grid, 60, 65))
    assert len(windows) == 18
    ends = (windows.meta["end_time"] - pd.Timestamp("2020-01-01T00:00:00Z")) // pd.Timedelta(minutes=5)
    assert ((ends < 59) | (ends > 112)).all()


def test_short_outage_keeps_windows(make_grid):
    # 20-minute outage, filled by interpolation
    windows = windowize(interpolated_gap(make_grid, 60, 62))
    assert len(windows) == 72 - 3
    assert windows.aux["glucose"].size > 0


def test_missing_glucose_excludes_windows(make_grid):
    glucose = np.full(100, 120.0)
    glucose[70] = np.nan
    windows = windowize(make_grid(glucose))
    assert len(windows) == 22
    assert np.isfinite(windows.X).all()


def test_time_of_day_is_broadcast_from_final_row(make_grid):
    windows = windowize(make_grid(np.full(60, 120.0), start="2020-01-01T20:00:00Z"))
    tod = windows.channel("time_of_day")
    assert np.all(tod == tod[:, -1:])
    first_end = windows.meta["end_time"].iloc[0]
    assert tod[0, 0] == pytest.approx(first_end.hour + first_end.minute / 60)


def test_event_channels_are_optional(make_grid):
    windows = windowize(make_grid(np.full(60, 120.0)), include_event_channels=[])
    assert windows.channels == BASE_CHANNELS


def test_feature_delays_shift_insulin_and_carbs(make_grid):
    grid = make_grid(np.full(60, 120.0), basal=0.0, bolus=impulses(60, t10=2.0), carbs=impulses(60, t10=30.0))
    cfg = FeatureConfig(insulin_delay_min=10, cgm_delay_min=5)
    windows = windowize(grid, cfg)
    insulin = windows.channel("total_insulin")[0]
    carbs = windows.channel("carbs")[0]
    assert insulin[13] == pytest.approx(2.0) and insulin[10] == 0
    assert carbs[11] == pytest.approx(30.0) and carbs[10] == 0
    np.testing.assert_array_equal(windows.channel("glucose")[0], np.full(48, 120.0))


# scenario tags

def tags_of_last_window(grid):
    windows = windowize(grid)
    return tag_scenarios(windows[len(windows) - 1])


def test_low_bg_tag(make_grid):
    glucose = np.full(60, 120.0)
    glucose[-2] = 65.0
    assert "low_bg" in tags_of_last_window(make_grid(glucose))


def test_night_tag(make_grid):
    # last window ends at 22:00
    grid = make_grid(np.full(60, 120.0), start="2020-01-01T17:10:00Z")
    windows = windowize(grid)
    assert windows.meta["end_time"].iloc[-1].hour == 22
    assert "night" in tag_scenarios(windows[len(windows) - 1])


def test_no_tag_applies(make_grid):
    grid = make_grid(np.full(60, 150.0), start="2020-01-01T09:00:00Z")
    assert tags_of_last_window(grid) == frozenset({"none"})


def test_meal_and_exercise_tags(make_grid):
    grid = make_grid(np.full(60, 150.0), carbs=impulses(60, t55=30.0), start="2020-01-01T09:00:00Z",
                     flags={"exercise": [56], "exercise_hi": [56]})
    tags = tags_of_last_window(grid)
    assert {"meal", "exercise", "exercise_hi"} <= tags
    assert "none" not in tags


def test_meta_tags_match_tag_scenarios(make_grid):
    rng = np.random.default_rng(1)
    glucose = rng.uniform(50, 250, 200)
    grid = make_grid(glucose, carbs=np.where(rng.random(200) < 0.05, 20.0, 0.0), start="2020-01-01T18:00:00Z")
    windows = windowize(grid)
    for i in range(0, len(windows), 17):
        assert windows[i].tags == tag_scenarios(windows[i])


# splits

@pytest.fixture
def thousand_windows(make_grid):
    return windowize(make_grid(np.full(1048, 120.0)))


def test_split_90_5_5(thousand_windows):
    assert len(thousand_windows) == 1000
    train, val, test = split(thousand_windows, SplitSpec(0.9, 0.05, 0.05))
    assert (len(train), len(val), len(test)) == (900, 2, 2)
    assert train.meta["end_time"].max() < val.meta["end_time"].min()
    assert val.meta["end_time"].max() < test.meta["end_time"].min()


def test_split_leaves_no_shared_readings(thousand_windows):
    train, val, test = split(thousand_windows, SplitSpec(0.5, 0.05, 0.45))
    span = pd.Timedelta(minutes=235)
    last_train_target = train.meta["end_time"].max() + pd.Timedelta(minutes=5)
    assert (val.meta["end_time"] - span > last_train_target).all()
    last_val_target = val.meta["end_time"].max() + pd.Timedelta(minutes=5)
    assert (test.meta["end_time"] - span > last_val_target).all()
    assert (len(train), len(val), len(test)) == (500, 2, 402)


def test_split_is_per_participant(make_grid):
    windows = WindowSet.concat([
        windowize(make_grid(np.full(248, 120.0), participant_id="a")),
        windowize(make_grid(np.full(248, 120.0), participant_id="b", start="2020-03-01T00:00:00Z")),
    ])
    train, val, test = split(windows, SplitSpec(0.5, 0.25, 0.25))
    assert set(train.meta["participant_id"]) == {"a", "b"}
    assert set(test.meta["participant_id"]) == {"a", "b"}


def test_degenerate_split_raises(thousand_windows):
    with pytest.raises(EmptySplitError):
        split(thousand_windows, SplitSpec(1.0, 0.0, 0.0))


def test_split_fractions_validated():
    with pytest.raises(ValueError):
        SplitSpec(0.9, 0.2, 0.1)


# normalization and persistence

def test_normalizer_uses_train_statistics(thousand_windows):
    train, val, _ = split(thousand_windows, SplitSpec(0.9, 0.05, 0.05))
    norm = Normalizer().fit(train.X, train.channels)
    weight = train.channels.index("weight")
    assert norm.scale[weight] == 1.0
    assert norm.mean[weight] == 70.0
    restored = Normalizer.from_dict(norm.to_dict())
    np.testing.assert_allclose(restored.transform(val.X), norm.transform(val.X))


def test_select_missing_channel(thousand_windows):
    with pytest.raises(SchemaMismatchError):
        thousand_windows.select(["glucose", "heart_rate"])


def test_window_file_preserves_windows(tmp_path, make_grid):
    windows = windowize(make_grid(np.linspace(90, 200, 80), carbs=impulses(80, t70=25.0)))
    path = tmp_path / "windows.npz"
    windows.save(path)
    loaded = WindowSet.load(path)
    np.testing.assert_array_equal(loaded.X, windows.X)
    np.testing.assert_array_equal(loaded.y, windows.y)
    assert loaded.channels == windows.channels
    pd.testing.assert_frame_equal(loaded.meta, windows.meta, check_dtype=False)
    assert (tmp_path / "windows.npz.json").exists()
