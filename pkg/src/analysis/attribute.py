"""
Learned impact curve of one event channel for a trained predictor.

Writes the curve as CSV (offset_min,mean,stderr,n) and prints the hourly summary.

Usage:
    python -m src.analysis.attribute --model outputs/models/dilated.npz --data outputs/windows_test.npz --channel carbs --out outputs/impact_carbs.csv
"""

import argparse
import json
import logging
from pathlib import Path

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.analysis.attribution import (
    AttributionConfig,
    NoEventsError,
    NonDifferentiableModelError,
    impact_curve,
)
from src.analysis.impact import hourly_impact
from src.features.windows import SchemaMismatchError, WindowSet
from src.models.checkpoint import load_checkpoint

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description='Expected-gradients impact curve of an event channel')
    parser.add_argument('--model', type=str, required=True, help='Checkpoint (.npz)')
    parser.add_argument('--data', type=str, required=True, help='Calibration window file')
    parser.add_argument('--channel', choices=['carbs', 'total_insulin'], required=True,
                        help='Event channel')
    parser.add_argument('--out', type=str, required=True, help='Output curve CSV')
    parser.add_argument('--config', type=str, default=None, help='AttributionConfig JSON')
    parser.add_argument('--n-jobs', type=int, default=None, help='Parallel workers')
    parser.add_argument('--quiet', action='store_true', help='No progress bars')
    args = parser.parse_args()

    options = {}
    if args.config:
        with open(args.config) as f:
            options = json.load(f)
    if args.n_jobs is not None:
        options["n_jobs"] = args.n_jobs
    cfg = AttributionConfig.from_dict(options)

    model = load_checkpoint(args.model)
    windows = WindowSet.load(args.data)
    print(f"Loaded {model.kind} model and {len(windows)} calibration windows")

    try:
        curve = impact_curve(model, args.channel, windows, cfg, progress=not args.quiet)
    except (NoEventsError, NonDifferentiableModelError, SchemaMismatchError) as e:
        raise SystemExit(f"Attribution failed: {e}")

    curve.to_csv(args.out)
    logger.info(f"Saved impact curve to {args.out}")

    print("\n=== Summary ===")
    print(f"Channel: {args.channel}, events: {int(curve.n_events.sum())}")
    for row in hourly_impact(curve).itertuples(index=False):
        print(f"  {row.band}: {row.mean:+.4f} ± {row.stderr:.4f} ({row.n_points} offsets)")


if __name__ == '__main__':
    main()
