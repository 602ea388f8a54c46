"""
Declarative experiment runs producing a report bundle.

An experiment spec (JSON) names a data source, feature and split options, the
predictors to train, the evaluation sampling plan, attribution options and,
optionally, augmentation variants or an event-label ablation:

    {
      "name": "experiment-i", "seed": 0,
      "data": {"source": "synth", "synth": {...SynthConfig}}
            | {"source": "grids", "paths": [...], "profiles_dir": null}
            | {"source": "raw", "participants": [{"events": ..., "profile": ...}]},
      "features": {...FeatureConfig}, "event_channels": [...],
      "split": {...SplitSpec},
      "models": {"dilated": {"train": {...}, "model": {...}, "max_train_windows": N}, ...},
      "loss": {...GmseConfig},
      "baselines": ["persistence", "hovorka"],
      "evaluation": {"sampling_plan": {...}, "metric": "gmse", "seed": 0},
      "attribution": {"model": "dilated", "exclude_channels": ["iob", "cob"],
                      "max_windows": 300, ...AttributionConfig},
      "augmentation": ["none", "filtering", "relabelling"],
      "event_labels": false,
      "relabel": {...RelabelConfig}
    }

Stages run in order (data, features, train, evaluate, attribute, conformance,
augment, write). The bundle is assembled in a staging directory and moved into
place only when every stage succeeds.
"""

import hashlib
import json
import logging
import platform
import shutil
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import pandas as pd
import scipy
import sklearn
import statsmodels

from src.analysis.attribution import AttributionConfig, event_rows, impact_curve
from src.analysis.conformance import conformance_report, theoretical_curve
from src.analysis.coupling import cohort_coupling
from src.analysis.impact import ImpactCurve, hourly_impact
from src.augment.filter_days import filter_days
from src.augment.relabel import RelabelConfig, relabel_meals
from src.bench.evaluate import ScenarioReport, evaluate
from src.bench.synthetic import SynthConfig, generate_synthetic, write_cohort
from src.config.channels import ACTIVITY_CHANNELS, EVENT_FLAGS
from src.config.paths import BUNDLE_FILES, HOVORKA_PARAMS_JSON, NUTRIENTS_CSV, SYNTH_FILES
from src.features.build_windows import load_grids
from src.features.windows import FeatureConfig, SplitSpec, WindowSet, split, windowize_all
from src.ingest.run_ingest import ingest_participant
from src.models.baselines import HovorkaPredictor, PersistenceModel
from src.models.train_model import fit_from_config
from src.simulation.hovorka import HovorkaParams

logger = logging.getLogger(__name__)

AUGMENTATIONS = ("none", "filtering", "relabelling")
IMPACT_CHANNELS = {"carbs": "IMPACT_CARBS", "total_insulin": "IMPACT_INSULIN"}
AUGMENTATION_TABLE_FILES = {"carbs": "table2_carbs.csv", "total_insulin": "table2_insulin.csv"}


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"Stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage(name: str):
    logger.info(f"Stage: {name}")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@dataclass
class ExperimentResult:
    out_dir: Path
    report: ScenarioReport
    curves: Dict[str, ImpactCurve]
    conformance: Dict[str, dict]
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    coupling: float = float("nan")
    manifest: dict = field(default_factory=dict)


def load_spec(path: Union[str, Path]) -> dict:
    with open(path) as f:
        spec = json.load(f)
    for key in ("data", "models"):
        if key not in spec:
            raise ValueError(f"Experiment spec {path} lacks '{key}'")
    return spec


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def grid_hash(grid) -> str:
    frame = grid.frame.copy()
    frame["timestamp"] = frame["timestamp"].dt.strftime("%Y-%m-%dT%H:%M:%SZ")
    return _sha256(frame.to_csv(index=False, float_format="%.6g").encode())


def load_data(data: dict, seed: int, work_dir: Path) -> List:
    """Grids for the spec's data section; synthetic cohorts go through the full ingest path."""
    source = data.get("source")
    if source == "synth":
        cfg = SynthConfig.from_dict({"seed": seed, **data.get("synth", {})})
        patients = generate_synthetic(cfg, n_jobs=int(data.get("n_jobs", 1)))
        write_cohort(patients, work_dir)
        pairs = [(work_dir / SYNTH_FILES["EVENTS"].format(pid=p.profile.participant_id),
                  work_dir / SYNTH_FILES["PROFILE"].format(pid=p.profile.participant_id)) for p in patients]
    elif source == "raw":
        pairs = [(Path(p["events"]), Path(p["profile"])) for p in data["participants"]]
    elif source == "grids":
        return load_grids(data["paths"], data.get("profiles_dir"))
    else:
        raise ValueError(f"Unknown data source '{source}', expected synth, raw or grids")

    grids = []
    for events_path, profile_path in pairs:
        grid, decision, _, _ = ingest_participant(events_path, profile_path, data.get("nutrients", NUTRIENTS_CSV),
                                                  strict=False)
        if grid is None:
            logger.info(f"Skipping {events_path.name}: {decision.reason}")
            continue
        grids.append(grid)
    if not grids:
        raise ValueError("No participant passed ingest")
    return grids


def augment_grids(grids: List, variant: str, params: HovorkaParams, relabel_cfg: RelabelConfig) -> List:
    if variant == "none":
        return grids
    if variant == "filtering":
        return [filter_days(g)[0] for g in grids]
    if variant == "relabelling":
        return [relabel_meals(g, params, relabel_cfg)[0] for g in grids]
    raise ValueError(f"Unknown augmentation '{variant}', expected one of {AUGMENTATIONS}")


def _train(kind: str, windows: WindowSet, model_cfg: dict, spec: dict):
    config = {"split": spec.get("split"), "loss": spec.get("loss"), **model_cfg}
    model, _, _, _ = fit_from_config(kind, windows, config)
    return model


def _calibration_subset(windows: WindowSet, channel: str, max_windows: Optional[int], seed: int) -> WindowSet:
    idx = np.unique(event_rows(windows, channel)[0])
    if max_windows and len(idx) > max_windows:
        idx = np.sort(np.random.default_rng(seed).choice(idx, size=int(max_windows), replace=False))
    return windows.subset(idx)


def learned_curves(windows: WindowSet, spec: dict) -> Dict[str, ImpactCurve]:
    """Train the attribution model on the windows and attribute both event channels."""
    attribution = dict(spec.get("attribution", {}))
    kind = attribution.pop("model", "dilated")
    max_windows = attribution.pop("max_windows", None)
    exclude = attribution.pop("exclude_channels", ACTIVITY_CHANNELS)
    model_cfg = {**spec["models"].get(kind, {}), "exclude_channels": list(exclude)}
    model = _train(kind, windows, model_cfg, spec)
    _, _, test = split(windows, SplitSpec.from_dict(spec.get("split")))
    cfg = AttributionConfig.from_dict(attribution)
    return {channel: impact_curve(model, channel, _calibration_subset(test, channel, max_windows, cfg.seed), cfg)
            for channel in IMPACT_CHANNELS}


def augmentation_table(rows: Dict[str, Dict[str, ImpactCurve]], conformance: Dict[str, Dict[str, dict]], channel: str) -> pd.DataFrame:
    """One row per augmentation: dynamics error plus hourly mean and standard error."""
    out = []
    for variant, curves in rows.items():
        row = {"augmentation": variant, "dynamics_error": conformance[variant][channel]["dynamics_error"]}
        for band in hourly_impact(curves[channel]).itertuples(index=False):
            row[f"{band.band}_mean"] = band.mean
            row[f"{band.band}_stderr"] = band.stderr
        out.append(row)
    return pd.DataFrame(out)


def _write_json(obj, path: Path) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _environment() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "statsmodels": statsmodels.__version__,
    }


def run_experiment(spec: dict, out_dir: Union[str, Path], progress: bool = False) -> ExperimentResult:
    """
    Execute an experiment spec and write its bundle.

    Args:
        spec: Parsed experiment spec
        out_dir: Bundle directory (replaced on success)
        progress: Progress bars during training

    Returns:
        ExperimentResult

    Raises:
        StageError: naming the failed stage; nothing is left at out_dir
    """
    out_dir = Path(out_dir)
    seed = int(spec.get("seed", 0))
    staging = out_dir.with_name(out_dir.name + ".partial")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)

    try:
        with tempfile.TemporaryDirectory() as work:
            with stage("data"):
                grids = load_data(spec["data"], seed, Path(work))
                params = HovorkaParams.from_json(spec.get("hovorka_params", HOVORKA_PARAMS_JSON))
                coupling = cohort_coupling(grids)

            with stage("features"):
                feature_cfg = FeatureConfig.from_dict(spec.get("features"))
                event_channels = spec.get("event_channels", EVENT_FLAGS)
                windows = windowize_all(grids, feature_cfg, event_channels)
                _, _, test = split(windows, SplitSpec.from_dict(spec.get("split")))
                logger.info(f"{len(windows)} windows, {len(test)} test windows")

            methods = {}
            with stage("train"):
                for kind, model_cfg in spec["models"].items():
                    methods[kind] = _train(kind, windows, model_cfg, spec)
                    if spec.get("event_labels"):
                        methods[f"{kind}_no_labels"] = _train(
                            kind, windows, {**model_cfg, "exclude_channels": EVENT_FLAGS}, spec)
                for name in spec.get("baselines", ["persistence"]):
                    if name == "persistence":
                        methods[name] = PersistenceModel()
                    elif name == "hovorka":
                        methods[name] = HovorkaPredictor(params)
                    else:
                        raise ValueError(f"Unknown baseline '{name}'")

            with stage("evaluate"):
                evaluation = spec.get("evaluation", {})
                report = evaluate(methods, test, evaluation.get("sampling_plan"),
                                  seed=int(evaluation.get("seed", seed)),
                                  metric=evaluation.get("metric", "gmse"),
                                  bootstrap_samples=int(evaluation.get("bootstrap_samples", 2000)))

            variants = spec.get("augmentation") or ["none"]
            relabel_cfg = RelabelConfig.from_dict(spec.get("relabel"))
            curves_by_variant, conformance_by_variant = {}, {}
            for variant in variants:
                with stage(f"augment:{variant}"):
                    variant_windows = windows if variant == "none" else windowize_all(
                        augment_grids(grids, variant, params, relabel_cfg), feature_cfg, event_channels)
                with stage(f"attribute:{variant}"):
                    curves_by_variant[variant] = learned_curves(variant_windows, spec)
                with stage(f"conformance:{variant}"):
                    conformance_by_variant[variant] = {
                        channel: conformance_report(curve, theoretical_curve(channel, params), channel)
                        for channel, curve in curves_by_variant[variant].items()
                    }

            with stage("write"):
                primary = variants[0]
                curves = curves_by_variant[primary]
                conformance = conformance_by_variant[primary]
                report_doc = {**report.to_dict(), "experiment": spec.get("name", ""),
                              "data": {"n_participants": len(grids), "n_windows": len(windows),
                                       "n_test_windows": len(test),
                                       "coupling": None if np.isnan(coupling) else coupling}}
                _write_json(report_doc, staging / BUNDLE_FILES["REPORT"])
                for channel, key in IMPACT_CHANNELS.items():
                    curves[channel].to_csv(staging / BUNDLE_FILES[key])
                _write_json(conformance, staging / BUNDLE_FILES["CONFORMANCE"])
                report.box.to_csv(staging / BUNDLE_FILES["FIG1_BOXSTATS"], index=False, float_format="%.6f")

                tables = {}
                if len(variants) > 1:
                    for channel, name in AUGMENTATION_TABLE_FILES.items():
                        tables[channel] = augmentation_table(curves_by_variant, conformance_by_variant, channel)
                        tables[channel].to_csv(staging / name, index=False, float_format="%.4f")

                manifest = {
                    "experiment": spec.get("name", ""),
                    "seed": seed,
                    "spec": spec,
                    "spec_sha256": _sha256(json.dumps(spec, sort_keys=True).encode()),
                    "data_sha256": {g.participant_id: grid_hash(g) for g in grids},
                    "sample_hashes": report.sample_hashes,
                    "environment": _environment(),
                    "files": {p.name: _sha256(p.read_bytes()) for p in sorted(staging.iterdir())},
                }
                _write_json(manifest, staging / BUNDLE_FILES["MANIFEST"])
    except Exception:
        shutil.rmtree(staging, ignore_errors=True)
        raise

    if out_dir.exists():
        shutil.rmtree(out_dir)
    staging.rename(out_dir)
    logger.info(f"Bundle written to {out_dir}")
    return ExperimentResult(out_dir=out_dir, report=report, curves=curves, conformance=conformance,
                            tables=tables, coupling=coupling, manifest=manifest)
