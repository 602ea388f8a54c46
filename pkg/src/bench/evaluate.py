"""
Scenario-sliced, paired evaluation of glucose predictors.

For every scenario tag a seeded sample of test windows is drawn without
replacement; every method predicts the same samples, so the per-sample losses
are paired. Per tag the report holds box statistics, a bootstrap interval of the
median, a Friedman test across methods and pairwise Wilcoxon comparisons. The
'overall' slice pools every sampled window once.

Usage:
    python -m src.bench.evaluate --windows outputs/test.npz --models outputs/models/hybrid.npz outputs/models/dilated.npz --out outputs/eval
"""

import argparse
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np
import pandas as pd

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.config.channels import SCENARIO_TAGS
from src.config.thresholds import DEFAULT_SAMPLING_PLAN
from src.features.windows import WindowSet
from src.models.gmse import GmseConfig, gmse_per_sample
from src.statistics.bootstrap_ci import summarize_groups
from src.statistics.create_summary_tables import create_box_table
from src.statistics.nonparametric import DegenerateInputError, friedman_test, pairwise_wilcoxon

logger = logging.getLogger(__name__)

OVERALL = "overall"
SCORE_COLUMNS = ["tag", "method", "sample", "loss"]
METRICS = ("gmse", "abs")


def sample_hash(windows: WindowSet, idx: np.ndarray) -> str:
    """SHA-256 over the (participant, end time) keys of the sampled windows."""
    meta = windows.meta.iloc[np.sort(idx)]
    keys = (meta["participant_id"].astype(str) + "|"
            + pd.to_datetime(meta["end_time"], utc=True).dt.strftime("%Y-%m-%dT%H:%M:%SZ"))
    return hashlib.sha256("\n".join(keys).encode()).hexdigest()


def sample_plan(windows: WindowSet, plan: Mapping[str, int], seed: int = 0) -> Dict[str, np.ndarray]:
    """
    Seeded sample of window indices per tag, without replacement.

    A tag with fewer tagged windows than requested contributes all of them.
    """
    samples = {}
    for tag, n in plan.items():
        if tag not in SCENARIO_TAGS:
            raise ValueError(f"Unknown scenario tag '{tag}'")
        tagged = windows.tagged(tag)
        rng = np.random.default_rng([seed, SCENARIO_TAGS.index(tag)])
        if len(tagged) < n:
            logger.warning(f"Tag {tag}: {len(tagged)} windows available, {n} requested")
            chosen = tagged
        else:
            chosen = rng.choice(tagged, size=int(n), replace=False)
        samples[tag] = np.sort(chosen)
    return samples


def per_sample_loss(targets: np.ndarray, predictions: np.ndarray, metric: str = "gmse",
                    loss_cfg: Optional[GmseConfig] = None) -> np.ndarray:
    if metric == "gmse":
        return gmse_per_sample(targets, predictions, loss_cfg)
    if metric == "abs":
        return np.abs(np.asarray(predictions, dtype=float) - np.asarray(targets, dtype=float))
    raise ValueError(f"Unknown metric '{metric}', expected one of {METRICS}")


def _finite_or_none(value):
    if isinstance(value, (float, np.floating)):
        return float(value) if np.isfinite(value) else None
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _records(df: pd.DataFrame) -> List[dict]:
    return [{k: _finite_or_none(v) for k, v in row.items()} for row in df.to_dict(orient="records")]


@dataclass
class ScenarioReport:
    metric: str
    seed: int
    methods: List[str]
    plan: Dict[str, int]
    available: Dict[str, int]
    sample_hashes: Dict[str, str]
    scores: pd.DataFrame        # SCORE_COLUMNS, one row per tag x method x sample
    box: pd.DataFrame           # BOX_COLUMNS, overall slice included
    intervals: pd.DataFrame     # tag, method, median, ci_lower, ci_upper, n
    friedman: pd.DataFrame      # tag, n, statistic, p_value
    pairwise: pd.DataFrame      # tag + pairwise_wilcoxon columns

    @property
    def sampled(self) -> Dict[str, int]:
        counts = self.scores.groupby("tag")["sample"].nunique()
        return {tag: int(counts.get(tag, 0)) for tag in self.plan}

    @property
    def shortfalls(self) -> Dict[str, dict]:
        sampled = self.sampled
        return {tag: {"requested": int(n), "sampled": sampled[tag]}
                for tag, n in self.plan.items() if sampled[tag] < n}

    def overall_scores(self) -> pd.DataFrame:
        pooled = self.scores.drop_duplicates(["method", "sample"]).copy()
        pooled["tag"] = OVERALL
        return pooled

    def median(self, tag: str, method: str) -> float:
        row = self.box[(self.box["tag"] == tag) & (self.box["method"] == method)]
        return float(row["median"].iloc[0]) if len(row) else float("nan")

    def to_dict(self) -> dict:
        sampled = self.sampled
        tags = {}
        for tag in list(self.plan) + [OVERALL]:
            friedman = self.friedman[self.friedman["tag"] == tag]
            tags[tag] = {
                "requested": int(self.plan[tag]) if tag in self.plan else None,
                "available": self.available.get(tag),
                "n": sampled.get(tag, int(self.overall_scores()["sample"].nunique())),
                "shortfall": tag in self.shortfalls,
                "sample_hash": self.sample_hashes.get(tag),
                "box": {r["method"]: {k: v for k, v in r.items() if k not in ("tag", "method")}
                        for r in _records(self.box[self.box["tag"] == tag])},
                "median_ci": {r["method"]: {k: r[k] for k in ("median", "ci_lower", "ci_upper")}
                              for r in _records(self.intervals[self.intervals["tag"] == tag])},
                "friedman": _records(friedman.drop(columns="tag"))[0] if len(friedman) else None,
                "pairwise": _records(self.pairwise[self.pairwise["tag"] == tag].drop(columns="tag")),
            }
        return {"metric": self.metric, "seed": self.seed, "methods": list(self.methods), "tags": tags}

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def _slice_statistics(tag: str, frame: pd.DataFrame, methods: Sequence[str], alpha: float):
    wide = frame.pivot(index="sample", columns="method", values="loss")[list(methods)]
    friedman = {"tag": tag, "n": len(wide), "statistic": np.nan, "p_value": np.nan}
    if len(methods) >= 2:
        try:
            friedman["statistic"], friedman["p_value"] = friedman_test(wide.to_numpy().T)
        except DegenerateInputError as e:
            logger.warning(f"Tag {tag}: Friedman test skipped ({e})")
    pairwise = pairwise_wilcoxon({m: wide[m].to_numpy() for m in methods}, alpha=alpha)
    pairwise.insert(0, "tag", tag)
    return friedman, pairwise


def evaluate(methods: Mapping[str, object], windows: WindowSet, sampling_plan: Optional[Mapping[str, int]] = None,
             seed: int = 0, metric: str = "gmse", loss_cfg: Optional[GmseConfig] = None,
             alpha: float = 0.05, bootstrap_samples: int = 2000) -> ScenarioReport:
    """
    Paired per-scenario evaluation of several predictors.

    Args:
        methods: name -> predictor (anything with predict(WindowSet))
        windows: Test windows with scenario tags and raw channels
        sampling_plan: tag -> windows to sample (default: the 500/100/20 tiers)
        seed: Sampling seed
        metric: 'gmse' (per-sample gMSE) or 'abs' (absolute error)
        loss_cfg: gMSE shape
        alpha: FDR level for pairwise comparisons
        bootstrap_samples: Resamples for the median intervals

    Returns:
        ScenarioReport; shortfalls are reported, never raised
    """
    if metric not in METRICS:
        raise ValueError(f"Unknown metric '{metric}', expected one of {METRICS}")
    plan = {tag: int(n) for tag, n in (sampling_plan or DEFAULT_SAMPLING_PLAN).items()}
    names = sorted(methods)
    samples = sample_plan(windows, plan, seed)
    union = np.unique(np.concatenate([np.asarray(s, dtype=int) for s in samples.values()] + [np.zeros(0, int)]))

    losses = {}
    if len(union):
        subset = windows.subset(union)
        for name in names:
            losses[name] = per_sample_loss(subset.y, methods[name].predict(subset), metric, loss_cfg)
            logger.info(f"{name}: {len(union)} windows scored")
    position = {int(i): k for k, i in enumerate(union)}

    rows = []
    for tag, idx in samples.items():
        for name in names:
            values = losses[name][[position[int(i)] for i in idx]] if len(idx) else np.zeros(0)
            rows.extend({"tag": tag, "method": name, "sample": int(i), "loss": float(v)} for i, v in zip(idx, values))
    scores = pd.DataFrame(rows, columns=SCORE_COLUMNS)

    hashes = {tag: sample_hash(windows, idx) for tag, idx in samples.items()}
    hashes[OVERALL] = sample_hash(windows, union)
    report = ScenarioReport(
        metric=metric, seed=seed, methods=names, plan=plan,
        available={tag: int(len(windows.tagged(tag))) for tag in plan},
        sample_hashes=hashes, scores=scores,
        box=pd.DataFrame(), intervals=pd.DataFrame(), friedman=pd.DataFrame(), pairwise=pd.DataFrame(),
    )

    everything = pd.concat([scores, report.overall_scores()], ignore_index=True)
    report.box = create_box_table(everything)
    report.intervals = summarize_groups(everything, B=bootstrap_samples)
    friedman_rows, pairwise_tables = [], []
    for tag, frame in everything.groupby("tag", sort=True):
        friedman, pairwise = _slice_statistics(tag, frame, names, alpha)
        friedman_rows.append(friedman)
        pairwise_tables.append(pairwise)
    report.friedman = pd.DataFrame(friedman_rows, columns=["tag", "n", "statistic", "p_value"])
    report.pairwise = (pd.concat(pairwise_tables, ignore_index=True) if pairwise_tables
                       else pd.DataFrame(columns=["tag"]))

    for tag, info in report.shortfalls.items():
        logger.warning(f"Sampling shortfall for {tag}: {info['sampled']} of {info['requested']}")
    return report


def main():
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    from src.models.baselines import PersistenceModel
    from src.models.checkpoint import load_checkpoint

    parser = argparse.ArgumentParser(description='Scenario-sliced paired evaluation of trained predictors')
    parser.add_argument('--windows', type=str, required=True, help='Test window file (.npz)')
    parser.add_argument('--models', type=str, nargs='+', required=True, help='Checkpoints to evaluate')
    parser.add_argument('--plan', type=str, default=None, help='Sampling plan JSON (tag -> n)')
    parser.add_argument('--metric', type=str, choices=list(METRICS), default='gmse')
    parser.add_argument('--seed', type=int, default=0)
    parser.add_argument('--no-persistence', action='store_true', help='Skip the persistence baseline')
    parser.add_argument('--out', type=str, required=True, help='Output directory')
    args = parser.parse_args()

    windows = WindowSet.load(args.windows)
    methods = {Path(p).stem: load_checkpoint(p) for p in args.models}
    if not args.no_persistence:
        methods["persistence"] = PersistenceModel()
    plan = None
    if args.plan:
        with open(args.plan) as f:
            plan = json.load(f)

    report = evaluate(methods, windows, plan, seed=args.seed, metric=args.metric)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    report.write_json(out_dir / "report.json")
    report.scores.to_csv(out_dir / "scores.csv", index=False, float_format='%.6f')
    report.box.to_csv(out_dir / "boxstats.csv", index=False, float_format='%.4f')

    print("\n=== Summary ===")
    for _, row in report.box[report.box["tag"] == OVERALL].iterrows():
        print(f"  {row['method']}: median {row['median']:.2f}, IQR {row['iqr']:.2f} (n={row['n']})")
    overall = report.friedman[report.friedman["tag"] == OVERALL]
    if len(overall):
        print(f"Friedman (overall): chi2 = {overall['statistic'].iloc[0]:.3f}, p = {overall['p_value'].iloc[0]:.4g}")
    if report.shortfalls:
        print(f"Shortfalls: {report.shortfalls}")
    print(f"Saved report to {out_dir}")


if __name__ == '__main__':
    main()
