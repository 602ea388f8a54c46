import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from src.analysis.conformance import conformance_report, theoretical_curve
from src.analysis.coupling import coupling_correlation
from src.augment.relabel import RelabelConfig, relabel_meals
from src.bench.evaluate import OVERALL, evaluate, sample_plan
from src.bench.experiment import StageError, augment_grids, learned_curves, load_data, run_experiment
from src.bench.synthetic import Confounders, SynthConfig, generate_synthetic, simulate_patient, write_cohort
from src.config.paths import BUNDLE_FILES, SYNTH_FILES
from src.features.windows import windowize_all
from src.ingest.build_grid import build_grid
from src.ingest.parse_events import parse_raw
from src.models.baselines import PersistenceModel
from src.simulation.hovorka import HovorkaParams, InputSchedule, find_equilibrium, integrate


class OraclePredictor:
    """Returns the target plus a fixed offset."""

    def __init__(self, offset=0.0):
        self.offset = offset

    def predict(self, windows):
        return windows.y + self.offset


def small_config(**overrides):
    base = {"n_patients": 1, "days_per_patient": 3, "seed": 0, "exercise_per_week": 7.0}
    return SynthConfig.from_dict({**base, **overrides})


# Synthetic cohorts

def test_synth_config_validation():
    with pytest.raises(ValueError):
        Confounders(unreported_meal_prob=1.5)
    with pytest.raises(ValueError):
        SynthConfig(cgm_noise=-0.1)
    with pytest.raises(ValueError):
        SynthConfig(basal_policy="pid")
    with pytest.raises(ValueError):
        SynthConfig.from_dict({"patients": 3})
    cfg = SynthConfig.from_dict({"confounders": {"unreported_meal_prob": 0.2}, "weight_range_kg": [70, 80]})
    assert cfg.confounders.unreported_meal_prob == 0.2
    assert cfg.confounders.carb_misestimation_bias == pytest.approx(0.40)
    assert cfg.weight_range_kg == (70.0, 80.0)


def test_no_confounders_announce_true_carbs():
    patient = simulate_patient(small_config(confounders=Confounders.none()), 0)
    truth = patient.truth
    assert truth["carbs"].sum() > 0
    assert np.array_equal(truth["carbs"].to_numpy(), truth["announced_carbs"].to_numpy())
    assert patient.meals["reported"].all()


def test_all_meals_unreported():
    conf = Confounders(unreported_meal_prob=1.0, unreported_hypo_treatment=False)
    patient = simulate_patient(small_config(confounders=conf), 0)
    assert patient.truth["announced_carbs"].sum() == 0
    assert not any(e.kind == "carbs" for e in patient.events)
    assert len(patient.meals) > 0
    assert patient.meals["true_carbs_g"].sum() == pytest.approx(patient.truth["carbs"].sum())


def test_misestimation_bias_scales_announced_carbs():
    conf = Confounders(carb_misestimation_bias=0.4, insulin_carb_coupling=True)
    meals = simulate_patient(small_config(confounders=conf), 0).meals
    expected = np.round(meals["true_carbs_g"] * 1.4)
    assert np.allclose(meals["announced_carbs_g"], expected)


def test_coupling_toggle():
    coupled = simulate_patient(small_config(days_per_patient=30, confounders=Confounders(insulin_carb_coupling=True)), 0)
    uncoupled = simulate_patient(small_config(days_per_patient=30, confounders=Confounders(insulin_carb_coupling=False)), 0)
    assert coupling_correlation(build_grid(coupled.events, coupled.profile)) > 0.3
    assert coupling_correlation(build_grid(uncoupled.events, uncoupled.profile)) < 0.1


def test_sidecar_replays_noise_free_glucose():
    cfg = small_config(basal_policy="closed_loop", confounders=Confounders(unreported_hypo_treatment=True))
    patient = simulate_patient(cfg, 0)
    params = HovorkaParams().with_weight(patient.profile.weight_kg)
    state0, _ = find_equilibrium(params, patient.initial_glucose)
    truth = patient.truth
    schedule = InputSchedule(basal=truth["basal"].to_numpy()[:-1], bolus=truth["bolus"].to_numpy()[:-1],
                             carbs=truth["carbs"].to_numpy()[:-1])
    replay = integrate(state0, params, schedule, step=cfg.step).glucose
    assert np.allclose(replay, truth["glucose"].to_numpy(), rtol=0, atol=1e-6)


def test_cgm_noise_is_multiplicative():
    truth = simulate_patient(small_config(cgm_noise=0.05), 0).truth
    log_ratio = np.log(truth["cgm"] / truth["glucose"])
    assert abs(log_ratio.mean()) < 0.01
    assert log_ratio.std() == pytest.approx(0.05, abs=0.01)
    exact = simulate_patient(small_config(cgm_noise=0.0), 0).truth
    assert np.allclose(exact["cgm"], exact["glucose"], atol=0.05)


def test_generation_is_deterministic():
    cfg = small_config(n_patients=2, days_per_patient=2)
    first = generate_synthetic(cfg)
    second = generate_synthetic(cfg)
    for a, b in zip(first, second):
        pd.testing.assert_frame_equal(a.truth, b.truth)
    assert first[0].profile.weight_kg != first[1].profile.weight_kg


def test_written_cohort_ingests(tmp_path):
    cfg = small_config(basal_policy="closed_loop")
    patients = generate_synthetic(cfg)
    write_cohort(patients, tmp_path)
    pid = patients[0].profile.participant_id
    for key in SYNTH_FILES.values():
        assert (tmp_path / key.format(pid=pid)).exists()
    events, profile, _ = parse_raw(tmp_path / SYNTH_FILES["EVENTS"].format(pid=pid),
                                   tmp_path / SYNTH_FILES["PROFILE"].format(pid=pid))
    grid = build_grid(events, profile)
    truth = patients[0].truth
    assert len(grid) == len(truth)
    assert grid.frame["carbs"].sum() == pytest.approx(truth["announced_carbs"].sum())
    assert grid.frame["bolus"].sum() == pytest.approx(truth["bolus"].sum())
    assert np.allclose(grid.frame["basal"], truth["basal"])
    assert profile.weight_kg == patients[0].profile.weight_kg


def test_exercise_notes_share_high_intensity():
    patient = simulate_patient(small_config(days_per_patient=60, high_intensity_share=1.0, meal_note_prob=0.0), 0)
    notes = [e.text for e in patient.events if e.kind == "note"]
    assert len(notes) > 20
    assert all(n in ("running", "cycling", "swimming", "football", "hiit") for n in notes)


# Evaluation

PLAN = {"none": 100, "meal": 30, "night": 80}


def test_oracle_has_zero_median(synthetic_windows):
    report = evaluate({"oracle": OraclePredictor()}, synthetic_windows, PLAN)
    assert (report.box["median"] == 0).all()
    assert (report.scores["loss"] == 0).all()


def test_samples_are_paired(synthetic_windows):
    methods = {"oracle": OraclePredictor(1.0), "persistence": PersistenceModel()}
    report = evaluate(methods, synthetic_windows, PLAN)
    for tag, group in report.scores.groupby("tag"):
        sets = [tuple(g["sample"]) for _, g in group.groupby("method")]
        assert sets[0] == sets[1]
    assert report.sampled == {tag: min(n, report.available[tag]) for tag, n in PLAN.items()}
    assert set(report.sample_hashes) == set(PLAN) | {OVERALL}


def test_sampling_is_seeded(synthetic_windows):
    a = sample_plan(synthetic_windows, PLAN, seed=3)
    b = sample_plan(synthetic_windows, PLAN, seed=3)
    c = sample_plan(synthetic_windows, PLAN, seed=4)
    assert all(np.array_equal(a[t], b[t]) for t in PLAN)
    assert not np.array_equal(a["none"], c["none"])
    for tag, idx in a.items():
        assert len(np.unique(idx)) == len(idx)
        assert synthetic_windows.meta[tag].values[idx].all()


def test_shortfall_is_reported(synthetic_windows):
    available = len(synthetic_windows.tagged("meal"))
    report = evaluate({"oracle": OraclePredictor()}, synthetic_windows, {"meal": available + 50})
    assert report.shortfalls == {"meal": {"requested": available + 50, "sampled": available}}
    assert report.to_dict()["tags"]["meal"]["shortfall"] is True


def test_unknown_tag(synthetic_windows):
    with pytest.raises(ValueError):
        evaluate({"oracle": OraclePredictor()}, synthetic_windows, {"breakfast": 5})


def test_better_method_wins(synthetic_windows):
    methods = {"oracle": OraclePredictor(0.1), "persistence": PersistenceModel()}
    report = evaluate(methods, synthetic_windows, PLAN)
    assert report.median(OVERALL, "oracle") < report.median(OVERALL, "persistence")
    overall = report.friedman[report.friedman["tag"] == OVERALL].iloc[0]
    assert overall["p_value"] < 0.05
    pair = report.pairwise[report.pairwise["tag"] == OVERALL].iloc[0]
    assert pair["significant"]


def test_absolute_error_metric(synthetic_windows):
    report = evaluate({"oracle": OraclePredictor(-2.0)}, synthetic_windows, PLAN, metric="abs")
    assert np.allclose(report.scores["loss"], 2.0)
    with pytest.raises(ValueError):
        evaluate({"oracle": OraclePredictor()}, synthetic_windows, PLAN, metric="rmse")


def test_report_is_strict_json(synthetic_windows):
    methods = {"oracle": OraclePredictor(0.5), "persistence": PersistenceModel()}
    doc = evaluate(methods, synthetic_windows, PLAN).to_dict()
    text = json.dumps(doc, allow_nan=False, sort_keys=True)
    assert json.loads(text)["tags"]["none"]["n"] == 100


# Experiments

def test_library_import_leaves_root_logger_alone():
    code = ("import logging, src.bench.experiment, src.bench.evaluate, src.analysis.conformance; "
            "print(len(logging.getLogger().handlers))")
    result = subprocess.run([sys.executable, "-c", code], cwd=Path(__file__).resolve().parent.parent,
                            capture_output=True, text=True, check=True)
    assert result.stdout.strip() == "0"


def tiny_spec(**overrides):
    spec = {
        "name": "tiny",
        "seed": 0,
        "data": {"source": "synth", "synth": {"n_patients": 2, "days_per_patient": 6,
                                              "confounders": {"insulin_carb_coupling": False}}},
        "split": {"train_frac": 0.7, "val_frac": 0.1, "test_frac": 0.2},
        "models": {"hybrid": {"train": {"max_epochs": 1, "batch_size": 256}, "max_train_windows": 1000}},
        "baselines": ["persistence"],
        "evaluation": {"sampling_plan": {"none": 50, "meal": 20}, "bootstrap_samples": 200},
        "attribution": {"model": "hybrid", "max_windows": 10, "n_background": 10,
                        "n_interpolation_steps": 4, "n_baselines_per_window": 2},
    }
    spec.update(overrides)
    return spec


@pytest.fixture(scope="module")
def tiny_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("bundles") / "tiny"
    return run_experiment(tiny_spec(), out)


def test_bundle_layout(tiny_bundle):
    files = {p.name for p in tiny_bundle.out_dir.iterdir()}
    assert set(BUNDLE_FILES.values()) <= files
    manifest = json.loads((tiny_bundle.out_dir / BUNDLE_FILES["MANIFEST"]).read_text())
    assert set(manifest["data_sha256"]) == {"synth000", "synth001"}
    assert manifest["sample_hashes"] == tiny_bundle.report.sample_hashes
    report = json.loads((tiny_bundle.out_dir / BUNDLE_FILES["REPORT"]).read_text())
    assert set(report["methods"]) == {"hybrid", "persistence"}
    boxes = pd.read_csv(tiny_bundle.out_dir / BUNDLE_FILES["FIG1_BOXSTATS"])
    assert set(boxes["tag"]) == {"none", "meal", OVERALL}
    conformance = json.loads((tiny_bundle.out_dir / BUNDLE_FILES["CONFORMANCE"]).read_text())
    assert set(conformance) == {"carbs", "total_insulin"}
    curve = pd.read_csv(tiny_bundle.out_dir / BUNDLE_FILES["IMPACT_CARBS"])
    assert list(curve.columns) == ["offset_min", "mean", "stderr", "n"]


def test_rerun_is_byte_identical(tiny_bundle, tmp_path):
    again = run_experiment(tiny_spec(), tmp_path / "again")
    for name in BUNDLE_FILES.values():
        assert (again.out_dir / name).read_bytes() == (tiny_bundle.out_dir / name).read_bytes(), name


def test_stage_error_leaves_nothing(tmp_path):
    out = tmp_path / "broken"
    with pytest.raises(StageError) as info:
        run_experiment(tiny_spec(baselines=["oracle"]), out)
    assert info.value.stage == "train"
    assert not out.exists()
    assert not (tmp_path / "broken.partial").exists()

    with pytest.raises(StageError) as info:
        run_experiment(tiny_spec(data={"source": "cloud"}), out)
    assert info.value.stage == "data"


@pytest.mark.slow
def test_augmentation_table(tmp_path):
    spec = tiny_spec(augmentation=["none", "filtering", "relabelling"],
                     data={"source": "synth", "synth": {"n_patients": 2, "days_per_patient": 8,
                                                        "confounders": {"unreported_meal_prob": 0.3}}})
    result = run_experiment(spec, tmp_path / "aug")
    for channel, name in (("carbs", "table2_carbs.csv"), ("total_insulin", "table2_insulin.csv")):
        table = pd.read_csv(result.out_dir / name)
        assert table["augmentation"].tolist() == ["none", "filtering", "relabelling"]
        assert {"dynamics_error", "0-1h_mean", "3-4h_stderr"} <= set(table.columns)


@pytest.mark.slow
def test_relabelling_recovers_hidden_meals():
    cfg = SynthConfig.from_dict({
        "n_patients": 3, "days_per_patient": 20, "seed": 7, "cgm_noise": 0.0,
        "meal_carbs_range_g": [20, 50],
        "confounders": {"unreported_meal_prob": 0.3, "carb_misestimation_bias": 0.0,
                        "insulin_carb_coupling": True},
    })
    recovered, hidden = 0, 0
    for patient in generate_synthetic(cfg):
        grid = build_grid(patient.events, patient.profile)
        _, changes = relabel_meals(grid, HovorkaParams())
        missing = patient.meals[~patient.meals["reported"]]
        for meal in missing.itertuples(index=False):
            hidden += 1
            close = changes[(abs(changes["timestamp"] - meal.timestamp) <= pd.Timedelta(minutes=15))
                            & (abs(changes["added_carbs_g"] - meal.true_carbs_g) <= 15)]
            recovered += len(close) > 0
    assert hidden > 20
    assert recovered / hidden >= 0.8


@pytest.mark.slow
def test_trained_models_beat_persistence(tmp_path):
    spec = tiny_spec(
        data={"source": "synth", "synth": {"n_patients": 3, "days_per_patient": 20,
                                           "confounders": {"unreported_meal_prob": 0.0,
                                                           "carb_misestimation_bias": 0.0,
                                                           "insulin_carb_coupling": False}}},
        models={"hybrid": {"train": {"max_epochs": 15, "batch_size": 128, "learning_rate": 0.002}},
                "dilated": {"train": {"max_epochs": 15, "batch_size": 128, "learning_rate": 0.002},
                            "model": {"hidden": 16}}},
        evaluation={"sampling_plan": {"none": 500, "meal": 500, "night": 500, "high_bg": 500, "low_bg": 500}},
    )
    report = run_experiment(spec, tmp_path / "eval").report
    for kind in ("hybrid", "dilated"):
        assert report.median(OVERALL, kind) < report.median(OVERALL, "persistence")
    overall = report.friedman[report.friedman["tag"] == OVERALL].iloc[0]
    assert overall["p_value"] < 0.05


def clean_or_confounded_spec(seed, confounders, days=60, patients=5):
    return tiny_spec(
        seed=seed,
        data={"source": "synth", "synth": {"n_patients": patients, "days_per_patient": days,
                                           "confounders": confounders}},
        split={"train_frac": 0.9, "val_frac": 0.05, "test_frac": 0.05},
        models={"dilated": {"train": {"max_epochs": 10, "batch_size": 256, "learning_rate": 0.002, "seed": seed},
                            "model": {"hidden": 16}, "max_train_windows": 20000}},
        attribution={"model": "dilated", "max_windows": 200, "n_background": 100,
                     "n_interpolation_steps": 16, "n_baselines_per_window": 3, "seed": seed},
    )


def curves_for(spec, variant, tmp_path):
    grids = load_data(spec["data"], spec["seed"], tmp_path)
    params = HovorkaParams()
    grids = augment_grids(grids, variant, params, RelabelConfig())
    return learned_curves(windowize_all(grids), spec), params


@pytest.mark.slow
def test_clean_data_curves_have_physiological_signs(tmp_path):
    clean = {"unreported_meal_prob": 0.0, "carb_misestimation_bias": 0.0,
             "insulin_carb_coupling": False, "unreported_hypo_treatment": False}
    agree = 0
    for seed in range(10):
        curves, _ = curves_for(clean_or_confounded_spec(seed, clean), "none", tmp_path / str(seed))
        carbs, insulin = curves["carbs"], curves["total_insulin"]
        carb_early = (carbs.offsets <= 120) & carbs.valid
        insulin_late = (insulin.offsets >= 30) & insulin.valid
        agree += carbs.mean[carb_early].mean() > 0 and insulin.mean[insulin_late].mean() < 0
    assert agree >= 9


@pytest.mark.slow
def test_augmentation_reduces_dynamics_error(tmp_path):
    confounded = {"unreported_meal_prob": 0.3, "carb_misestimation_bias": 0.4,
                  "insulin_carb_coupling": True}
    relabel_wins, filter_wins = 0, 0
    for seed in range(10):
        spec = clean_or_confounded_spec(seed, confounded, days=30, patients=3)
        errors = {}
        for variant in ("none", "filtering", "relabelling"):
            curves, params = curves_for(spec, variant, tmp_path / f"{seed}_{variant}")
            errors[variant] = {channel: conformance_report(curve, theoretical_curve(channel, params))["dynamics_error"]
                               for channel, curve in curves.items()}
        relabel_wins += errors["relabelling"]["carbs"] < errors["none"]["carbs"]
        filter_wins += errors["filtering"]["total_insulin"] < errors["none"]["total_insulin"]
    assert relabel_wins >= 7
    assert filter_wins >= 7
