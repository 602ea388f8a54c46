import json
import logging

import numpy as np
import pandas as pd
import pytest

from src.ingest.build_grid import (
    build_grid,
    grid_to_events,
    interpolate_glucose,
    snap_to_grid,
    slot_of,
    slot_timestamp,
)
from src.ingest.label_events import NutrientEntry, classify_note, label_events, match_nutrient
from src.ingest.parse_events import (
    MissingProfileFieldError,
    NegativeValueError,
    ParseError,
    PatientProfile,
    RawEvent,
    UnknownKindError,
    apply_cohort_filters,
    parse_events,
    parse_profile,
)

T0 = pd.Timestamp("2020-01-01T12:00:00Z")


def ts(minutes):
    return T0 + pd.Timedelta(minutes=minutes)


def jsonl(*records):
    return "\n".join(json.dumps(r) for r in records).encode()


@pytest.fixture
def profile():
    return PatientProfile(participant_id="p01", default_basal_schedule=[(0, 0.8)], weight_kg=70.0)


# parsing

def test_parse_cgm_row():
    events, report = parse_events(jsonl({"kind": "cgm", "ts": "2020-01-01T12:00:00Z", "value": 120}))
    assert events == [RawEvent(T0, "cgm", 120.0)]
    assert report.n_events == 1


def test_negative_bolus_names_row():
    stream = jsonl({"kind": "cgm", "timestamp": "2020-01-01T12:00:00Z", "value": 120},
                   {"kind": "bolus", "timestamp": "2020-01-01T12:05:00Z", "value": -1})
    with pytest.raises(NegativeValueError) as err:
        parse_events(stream)
    assert err.value.row == 2


def test_events_sorted_by_timestamp():
    stream = jsonl(
        {"kind": "cgm", "timestamp": "2020-01-01T12:10:00Z", "value": 130},
        {"kind": "bolus", "timestamp": "2020-01-01T12:07:00Z", "value": 2},
        {"kind": "cgm", "timestamp": "2020-01-01T12:00:00Z", "value": 120},
        {"kind": "cgm", "timestamp": "2020-01-01T12:05:00Z", "value": 125},
    )
    events, _ = parse_events(stream)
    assert len(events) == 4
    assert [e.timestamp for e in events] == sorted(e.timestamp for e in events)


def test_unknown_kind_strict_and_lenient():
    stream = jsonl({"kind": "cgm", "timestamp": "2020-01-01T12:00:00Z", "value": 120},
                   {"kind": "smbg", "timestamp": "2020-01-01T12:05:00Z", "value": 110})
    with pytest.raises(UnknownKindError):
        parse_events(stream)
    events, report = parse_events(stream, strict=False)
    assert len(events) == 1
    assert report.n_rows == 2
    assert report.malformed[0][0] == 2


def test_parse_csv_stream():
    text = (
        "timestamp,kind,value,duration_min,text\n"
        "2020-01-01T12:00:00Z,cgm,120,,\n"
        "2020-01-01T12:00:00Z,temp_basal,0.5,30,\n"
        "2020-01-01T12:10:00Z,note,,,black coffee\n"
    )
    events, _ = parse_events(text.encode(), fmt="csv")
    assert [e.kind for e in events] == ["cgm", "temp_basal", "note"]
    assert events[1].duration_min == 30
    assert events[2].text == "black coffee"


def test_temp_basal_requires_duration():
    with pytest.raises(ParseError):
        parse_events(jsonl({"kind": "temp_basal", "timestamp": "2020-01-01T12:00:00Z", "value": 0.5}))


def test_duration_only_for_temp_basal():
    with pytest.raises(ParseError):
        parse_events(jsonl({"kind": "bolus", "timestamp": "2020-01-01T12:00:00Z", "value": 1,
                            "duration_min": 30}))


def test_implausible_cgm_treated_as_missing():
    events, report = parse_events(jsonl(
        {"kind": "cgm", "timestamp": "2020-01-01T12:00:00Z", "value": 700},
        {"kind": "cgm", "timestamp": "2020-01-01T12:05:00Z", "value": 15},
        {"kind": "cgm", "timestamp": "2020-01-01T12:10:00Z", "value": 100},
    ))
    assert len(events) == 1
    assert report.n_cgm_out_of_range == 2


def test_profile_parsing():
    profile = parse_profile({
        "participant_id": "p01",
        "default_basal_schedule": [{"time": "00:00", "rate": 0.6}, {"time": "06:30", "rate": 0.9}],
    })
    assert profile.weight_kg is None
    rates = profile.half_hour_rates()
    assert rates[12] == 0.6 and rates[13] == 0.9 and rates[47] == 0.9
    assert profile.mean_basal_rate == pytest.approx(rates.mean())


def test_profile_missing_field():
    with pytest.raises(MissingProfileFieldError):
        parse_profile({"default_basal_schedule": [{"time": "00:00", "rate": 0.6}]})
    with pytest.raises(MissingProfileFieldError):
        parse_profile({"participant_id": "p01"})


def test_profile_schedule_must_use_half_hours():
    with pytest.raises(ValueError):
        PatientProfile("p01", [(0, 0.8), (45, 1.0)])


# cohort filters

def test_cohort_rejects_missing_demographics():
    profile = PatientProfile("p01", [(0, 0.8)], hcls_system="AndroidAPS", basal_log_style="androidaps")
    decision = apply_cohort_filters(profile, requires_demographics=True)
    assert not decision.accepted and decision.reason == "demographics"


def test_cohort_accepts_complete_profile():
    profile = PatientProfile("p01", [(0, 0.8)], weight_kg=70, hcls_system="AndroidAPS",
                             basal_log_style="androidaps")
    decision = apply_cohort_filters(profile, True, True, True)
    assert decision.accepted


def test_cohort_flags_off_accept_anything():
    assert apply_cohort_filters(PatientProfile("p01", [(0, 0.8)])).accepted


def test_cohort_rejects_non_hcls():
    decision = apply_cohort_filters(PatientProfile("p01", [(0, 0.8)], weight_kg=70), requires_hcls=True)
    assert decision.reason == "hcls"


# gridding

@pytest.mark.parametrize("offset, expected", [
    (pd.Timedelta(minutes=1), 0),
    (pd.Timedelta(minutes=2, seconds=30), 5),
    (pd.Timedelta(minutes=3), 5),
    (pd.Timedelta(minutes=2, seconds=29), 0),
])
def test_snap_to_grid(offset, expected):
    [(slot, _)] = snap_to_grid([RawEvent(T0 + offset, "cgm", 100.0)])
    assert slot_timestamp(slot) == ts(expected)


def test_temp_basal_fills_its_duration(profile):
    events = [RawEvent(ts(0), "cgm", 100.0), RawEvent(ts(10), "temp_basal", 0.5, duration_min=30),
              RawEvent(ts(60), "cgm", 100.0)]
    basal = build_grid(events, profile).frame["basal"].values
    np.testing.assert_allclose(basal[2:8], 0.5)
    assert basal[1] == 0.8 and basal[8] == 0.8


def test_boluses_in_one_slot_are_summed(profile):
    events = [RawEvent(ts(0), "bolus", 1.5), RawEvent(ts(1), "bolus", 2.0), RawEvent(ts(10), "cgm", 100.0)]
    frame = build_grid(events, profile).frame
    assert frame["bolus"].iloc[0] == pytest.approx(3.5)
    assert frame["bolus"].iloc[1:].sum() == 0


def test_default_schedule_rate_without_basal_event():
    profile = PatientProfile("p01", [(0, 0.5), (12 * 60, 0.8)], weight_kg=70.0)
    frame = build_grid([RawEvent(ts(0), "cgm", 100.0), RawEvent(ts(30), "cgm", 110.0)], profile).frame
    np.testing.assert_allclose(frame["basal"], 0.8)


def test_overlapping_temp_basals_later_wins(profile, caplog):
    events = [RawEvent(ts(0), "temp_basal", 0.5, duration_min=30),
              RawEvent(ts(10), "temp_basal", 1.5, duration_min=10),
              RawEvent(ts(60), "cgm", 100.0)]
    with caplog.at_level(logging.WARNING):
        basal = build_grid(events, profile).frame["basal"].values
    np.testing.assert_allclose(basal[:2], 0.5)
    np.testing.assert_allclose(basal[2:4], 1.5)
    assert basal[4] == 0.8
    assert any("Overlapping temp basals" in r.message for r in caplog.records)


def test_default_basal_record_holds_until_next_record(profile):
    events = [RawEvent(ts(0), "default_basal_schedule", 1.2), RawEvent(ts(20), "temp_basal", 0.0, duration_min=10),
              RawEvent(ts(60), "cgm", 100.0)]
    basal = build_grid(events, profile).frame["basal"].values
    np.testing.assert_allclose(basal[:4], 1.2)
    np.testing.assert_allclose(basal[4:6], 0.0)
    np.testing.assert_allclose(basal[6:], 0.8)


def test_grid_spacing_and_alignment(profile):
    events = [RawEvent(ts(1), "cgm", 100.0), RawEvent(ts(47), "cgm", 140.0)]
    grid = build_grid(events, profile)
    grid.validate()
    assert grid.start == ts(0)
    assert len(grid) == 10


# interpolation

def grid_with_readings(profile, readings):
    return build_grid([RawEvent(ts(m), "cgm", g) for m, g in readings], profile)


def test_log_interpolation_midpoint(profile):
    grid = interpolate_glucose(grid_with_readings(profile, [(0, 100.0), (10, 200.0)]))
    assert grid.frame["glucose"].iloc[1] == pytest.approx(141.42, abs=0.01)
    assert list(grid.frame["interpolated"]) == [False, True, False]


def test_log_interpolation_two_fills(profile):
    grid = interpolate_glucose(grid_with_readings(profile, [(0, 80.0), (15, 160.0)]))
    np.testing.assert_allclose(grid.frame["glucose"].iloc[1:3], [100.79, 126.99], atol=0.01)


def test_no_gap_no_change(profile):
    grid = grid_with_readings(profile, [(0, 150.0), (5, 150.0)])
    filled = interpolate_glucose(grid)
    pd.testing.assert_frame_equal(filled.frame, grid.frame)


def test_no_extrapolation_at_edges(profile):
    events = [RawEvent(ts(0), "bolus", 1.0), RawEvent(ts(10), "cgm", 100.0), RawEvent(ts(20), "cgm", 120.0),
              RawEvent(ts(35), "carbs", 20.0)]
    frame = interpolate_glucose(build_grid(events, profile)).frame
    assert frame["glucose"].iloc[:2].isna().all()
    assert frame["glucose"].iloc[5:].isna().all()


def test_interpolation_needs_two_readings(profile):
    with pytest.raises(ValueError):
        interpolate_glucose(grid_with_readings(profile, [(0, 100.0)]))


# pipeline invariants on fuzzed streams

def fuzzed_events(rng, n_events=10_000):
    minutes = np.sort(rng.uniform(0, n_events * 2.2, size=n_events))
    kinds = rng.choice(["cgm", "cgm", "cgm", "cgm", "bolus", "carbs", "temp_basal"], size=n_events)
    events = []
    for m, kind in zip(minutes, kinds):
        when = (T0 + pd.Timedelta(seconds=int(m * 60)))
        if kind == "cgm":
            events.append(RawEvent(when, "cgm", float(rng.integers(40, 400))))
        elif kind == "temp_basal":
            events.append(RawEvent(when, "temp_basal", float(rng.uniform(0, 3)),
                                   duration_min=int(rng.integers(0, 120))))
        else:
            events.append(RawEvent(when, kind, float(rng.uniform(0.1, 60))))
    return events


@pytest.mark.parametrize("seed", [0, 1])
def test_fuzzed_streams_keep_grid_invariants(profile, seed):
    events = fuzzed_events(np.random.default_rng(seed))
    raw = build_grid(events, profile)
    grid = interpolate_glucose(raw)
    grid.validate()
    frame = grid.frame

    steps = np.diff(frame["timestamp"].values).astype("timedelta64[s]").astype(int)
    assert np.all(steps == 300)
    assert frame["bolus"].sum() == pytest.approx(sum(e.value for e in events if e.kind == "bolus"), rel=1e-9)
    assert frame["carbs"].sum() == pytest.approx(sum(e.value for e in events if e.kind == "carbs"), rel=1e-9)

    real = ~frame["interpolated"] & frame["glucose"].notna()
    np.testing.assert_array_equal(frame["glucose"][real].values, raw.frame["glucose"][real].values)
    assert not frame["interpolated"][raw.frame["glucose"].notna()].any()

    prev_real = frame["glucose"].where(real).ffill()
    next_real = frame["glucose"].where(real).bfill()
    filled = frame["interpolated"] & (prev_real != next_real)
    lo = np.minimum(prev_real, next_real)[filled]
    hi = np.maximum(prev_real, next_real)[filled]
    values = frame["glucose"][filled]
    assert ((values > lo) & (values < hi)).all()


def test_build_grid_is_idempotent(profile):
    events = fuzzed_events(np.random.default_rng(7), n_events=2000)
    grid = build_grid(events, profile)
    rebuilt = build_grid(grid_to_events(grid), profile)
    for col in ("glucose", "basal", "bolus", "carbs"):
        np.testing.assert_allclose(rebuilt.frame[col].values, grid.frame[col].values, equal_nan=True)
    assert rebuilt.start == grid.start and len(rebuilt) == len(grid)


# note labelling

@pytest.fixture
def table():
    return [
        NutrientEntry("cheese", protein_g_per_100g=10.0, fat_g_per_100g=33.0, composition_pct=100),
        NutrientEntry("coffee", caffeine_mg_per_100g=40.0, composition_pct=100),
        NutrientEntry("black coffee", caffeine_mg_per_100g=40.0, composition_pct=100),
        NutrientEntry("beer", alcohol_g_per_100g=3.9, composition_pct=100),
        NutrientEntry("toast", protein_g_per_100g=9.0, fat_g_per_100g=3.2, composition_pct=100),
        NutrientEntry("toast", protein_g_per_100g=14.0, fat_g_per_100g=3.2, composition_pct=40),
    ]


def test_run_note_is_high_intensity_exercise(table):
    assert classify_note("30 min run", table) == {"exercise", "exercise_hi"}


def test_walk_note_is_low_intensity_exercise(table):
    assert classify_note("Walking the dog", table) == {"exercise", "exercise_lo"}


def test_cheese_is_high_fat(table):
    assert classify_note("cheese", table) == {"high_fat"}


def test_black_coffee_prefers_longest_pattern(table):
    assert match_nutrient("black coffee", table).name_pattern == "black coffee"
    assert classify_note("black coffee", table) == {"caffeine"}


def test_composition_pct_breaks_ties(table):
    assert match_nutrient("toast", table).composition_pct == 100
    assert classify_note("toast", table) == set()


def test_unmatched_note(table):
    assert classify_note("feeling tired", table) is None


def test_label_events_sets_flags_on_note_slot(profile, table):
    events = [RawEvent(ts(0), "cgm", 100.0), RawEvent(ts(30), "cgm", 110.0)]
    grid = build_grid(events, profile)
    notes = [RawEvent(ts(11), "note", text="evening run"), RawEvent(ts(20), "note", text="two beers"),
             RawEvent(ts(25), "note", text="felt dizzy")]
    labelled, unmatched = label_events(grid, notes, table)
    frame = labelled.frame
    assert frame.loc[2, ["exercise", "exercise_hi", "exercise_lo"]].tolist() == [1, 1, 0]
    assert frame.loc[4, "alcohol"] == 1
    assert unmatched == ["felt dizzy"]
    assert frame["exercise"].sum() == 1
    # intensity subflags imply the exercise flag
    assert ((frame["exercise_hi"] + frame["exercise_lo"]) <= frame["exercise"]).all()
    # input grid untouched
    assert grid.frame["exercise"].sum() == 0


def test_slot_of_is_absolute():
    assert slot_of(T0) == slot_of(ts(1))
    assert slot_of(ts(5)) == slot_of(T0) + 1
