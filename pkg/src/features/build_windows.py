"""
Build model-ready windows from ingested grids.

Each grid CSV needs its participant profile (for weight and mean basal), looked
up as <profiles>/<grid stem>_profile.json.

Usage:
    python -m src.features.build_windows --grids outputs/grids --profiles data/raw --out outputs/windows.npz
"""

import argparse
import json
import logging
from pathlib import Path

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.config.channels import EVENT_FLAGS
from src.features.windows import FeatureConfig, WindowSet, windowize
from src.ingest.build_grid import GlucoseGrid
from src.ingest.parse_events import parse_profile

logger = logging.getLogger(__name__)


def load_grids(grids, profiles_dir):
    """Grid CSV paths (files or directories) -> GlucoseGrid list with profiles attached."""
    paths = []
    for item in grids:
        item = Path(item)
        paths.extend(sorted(item.glob("*.csv")) if item.is_dir() else [item])
    out = []
    for path in paths:
        profile_path = Path(profiles_dir or path.parent) / f"{path.stem}_profile.json"
        if not profile_path.exists():
            raise FileNotFoundError(f"No profile for grid {path} (looked for {profile_path})")
        profile = parse_profile(profile_path)
        out.append(GlucoseGrid.from_csv(path, participant_id=profile.participant_id, profile=profile))
    return out


def main():
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description='Cut 4-hour feature windows from glucose grids')
    parser.add_argument('--grids', nargs='+', required=True,
                        help='Grid CSV files or directories of them')
    parser.add_argument('--profiles', type=str, default=None,
                        help='Directory of <participant>_profile.json files (default: next to each grid)')
    parser.add_argument('--out', type=str, required=True,
                        help='Output window file (.npz)')
    parser.add_argument('--config', type=str, default=None,
                        help='JSON with feature options (kernel, durations, delays)')
    parser.add_argument('--no-event-channels', action='store_true',
                        help='Leave the event-label channels out')
    parser.add_argument('--csv', type=str, default=None,
                        help='Also export one row per window for inspection')
    args = parser.parse_args()

    cfg = FeatureConfig()
    if args.config:
        with open(args.config) as f:
            cfg = FeatureConfig.from_dict(json.load(f))
    events = [] if args.no_event_channels else EVENT_FLAGS

    try:
        grids = load_grids(args.grids, args.profiles)
    except (FileNotFoundError, ValueError) as e:
        raise SystemExit(str(e))
    print(f"Loaded {len(grids)} grids")

    sets = []
    for grid in grids:
        windows = windowize(grid, cfg, events)
        print(f"  {grid.participant_id}: {len(grid)} slots -> {len(windows)} windows")
        sets.append(windows)
    windows = WindowSet.concat(sets)
    windows.save(args.out)
    if args.csv:
        windows.to_csv(args.csv)

    print("\n=== Summary ===")
    print(f"Windows: {len(windows)} ({len(windows.channels)} channels)")
    tag_counts = windows.meta.drop(columns=["participant_id", "end_time"]).sum()
    for tag, count in tag_counts.items():
        print(f"  {tag}: {int(count)}")
    print(f"Saved to {args.out}")


if __name__ == '__main__':
    main()
