"""
Augment one participant's grid.

Modes:
- filter: drop days whose announced carbs fall outside the participant's IQR
  (writes <out stem>_days.csv with the per-day decision)
- relabel: add best-fitting unreported meals at divergence onsets
  (writes <out stem>_changes.csv: timestamp,added_carbs_g,objective_before,objective_after)

Usage:
    python -m src.augment.run_augment --mode relabel --grid grids/p01.csv --out augmented/p01.csv
"""

import argparse
import json
import logging
from pathlib import Path

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.augment.filter_days import TooFewDaysError, filter_days
from src.augment.relabel import RelabelConfig, meals_per_day, relabel_meals, write_changelog
from src.config.paths import HOVORKA_PARAMS_JSON
from src.ingest.build_grid import GlucoseGrid
from src.ingest.parse_events import parse_profile
from src.simulation.hovorka import HovorkaParams

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description='Filter days or relabel unreported meals in a glucose grid')
    parser.add_argument('--mode', type=str, choices=['filter', 'relabel'], required=True)
    parser.add_argument('--grid', type=str, required=True, help='Input grid CSV')
    parser.add_argument('--profile', type=str, default=None,
                        help='Participant profile JSON (default: <grid stem>_profile.json next to the grid)')
    parser.add_argument('--params', type=str, default=str(HOVORKA_PARAMS_JSON), help='Hovorka parameter JSON')
    parser.add_argument('--config', type=str, default=None, help='Relabel config JSON')
    parser.add_argument('--low-tail-only', action='store_true', help='filter: only drop days below Q1')
    parser.add_argument('--out', type=str, required=True, help='Output grid CSV')
    args = parser.parse_args()

    grid_path = Path(args.grid)
    profile_path = Path(args.profile) if args.profile else grid_path.with_name(f"{grid_path.stem}_profile.json")
    profile = parse_profile(profile_path) if profile_path.exists() else None
    if profile is None:
        logger.warning(f"No profile at {profile_path}; using the parameter file's body weight")
    grid = GlucoseGrid.from_csv(grid_path, profile=profile)
    out_path = Path(args.out)

    print("\n=== Summary ===")
    if args.mode == 'filter':
        try:
            filtered, report = filter_days(grid, low_tail_only=args.low_tail_only)
        except TooFewDaysError as e:
            raise SystemExit(str(e))
        filtered.to_csv(out_path)
        days_path = out_path.with_name(out_path.stem + "_days.csv")
        report.days.to_csv(days_path, index=False, float_format='%.4f')
        print(f"Quartiles of daily carbs: Q1 {report.q1:.1f} g, Q3 {report.q3:.1f} g")
        print(f"Kept {int(report.days['kept'].sum())}/{len(report.days)} days, "
              f"{report.retained_fraction:.1%} of rows")
        print(f"Saved day decisions to {days_path}")
    else:
        cfg = RelabelConfig()
        if args.config:
            with open(args.config) as f:
                cfg = RelabelConfig.from_dict(json.load(f))
        params = HovorkaParams.from_json(args.params)
        before = meals_per_day(grid)
        relabelled, changes = relabel_meals(grid, params, cfg)
        relabelled.to_csv(out_path)
        changes_path = out_path.with_name(out_path.stem + "_changes.csv")
        write_changelog(changes, changes_path)
        print(f"Added meals: {len(changes)} ({changes['added_carbs_g'].sum():.0f} g)")
        print(f"Meals per day: {before:.2f} -> {meals_per_day(relabelled):.2f}")
        print(f"Saved change log to {changes_path}")
    print(f"Saved grid to {out_path}")


if __name__ == '__main__':
    main()
