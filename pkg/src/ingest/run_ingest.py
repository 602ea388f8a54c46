"""
Ingest one participant: raw events + profile -> labelled, interpolated 5-minute grid.

Outputs:
- grid CSV (timestamp,glucose,interpolated,basal,bolus,carbs,<event flags>)
- <out stem>_unmatched_notes.txt: notes needing manual review, one per line

Usage:
    python -m src.ingest.run_ingest --raw p01_events.jsonl --profile p01_profile.json --out grids/p01.csv
"""

import argparse
import logging
from pathlib import Path

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.config.paths import NUTRIENTS_CSV
from src.ingest.build_grid import build_grid, interpolate_glucose
from src.ingest.label_events import label_events, load_nutrient_table, write_unmatched
from src.ingest.parse_events import ParseError, MissingProfileFieldError, apply_cohort_filters, parse_raw

logger = logging.getLogger(__name__)


def ingest_participant(raw_path, profile_path, nutrients_path, fmt=None, strict=False,
                       requires_hcls=False, requires_androidaps_style_basal_log=False,
                       requires_demographics=False):
    """
    Run the full ingest chain for one participant.

    Returns:
        (grid or None when rejected, cohort decision, parse report, unmatched notes)
    """
    raw_path = Path(raw_path)
    fmt = fmt or ("csv" if raw_path.suffix.lower() == ".csv" else "jsonl")
    events, profile, report = parse_raw(raw_path, Path(profile_path), fmt=fmt, strict=strict)
    decision = apply_cohort_filters(
        profile,
        requires_hcls=requires_hcls,
        requires_androidaps_style_basal_log=requires_androidaps_style_basal_log,
        requires_demographics=requires_demographics,
    )
    if not decision.accepted:
        logger.info(f"Participant {profile.participant_id} rejected: {decision.reason}")
        return None, decision, report, []

    grid = interpolate_glucose(build_grid(events, profile))
    notes = [e for e in events if e.kind == "note"]
    grid, unmatched = label_events(grid, notes, load_nutrient_table(nutrients_path))
    grid.validate()
    return grid, decision, report, unmatched


def main():
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description='Build a 5-minute glucose grid from raw device events')
    parser.add_argument('--raw', type=str, required=True, help='Event stream (.jsonl or .csv)')
    parser.add_argument('--profile', type=str, required=True, help='Participant profile JSON')
    parser.add_argument('--nutrients', type=str, default=str(NUTRIENTS_CSV), help='Nutrient table CSV')
    parser.add_argument('--out', type=str, required=True, help='Output grid CSV')
    parser.add_argument('--format', type=str, choices=['jsonl', 'csv'], default=None,
                        help='Stream format (default: from file extension)')
    parser.add_argument('--strict', action='store_true', help='Abort on the first malformed row')
    parser.add_argument('--filter-hcls', action='store_true', help='Require a hybrid closed-loop system')
    parser.add_argument('--filter-basal-log', action='store_true',
                        help='Require an AndroidAPS-style basal log')
    parser.add_argument('--filter-demographics', action='store_true', help='Require demographic data')
    args = parser.parse_args()

    try:
        grid, decision, report, unmatched = ingest_participant(
            args.raw, args.profile, args.nutrients, fmt=args.format, strict=args.strict,
            requires_hcls=args.filter_hcls,
            requires_androidaps_style_basal_log=args.filter_basal_log,
            requires_demographics=args.filter_demographics,
        )
    except (ParseError, MissingProfileFieldError, ValueError) as e:
        raise SystemExit(str(e))

    print("\n=== Summary ===")
    print(f"Parse: {report.summary()}")
    for row, message in report.malformed[:10]:
        print(f"  {message}")
    if grid is None:
        print(f"Rejected by cohort filter: {decision.reason}")
        return

    out_path = Path(args.out)
    grid.to_csv(out_path)
    unmatched_path = out_path.with_name(out_path.stem + "_unmatched_notes.txt")
    write_unmatched(unmatched, unmatched_path)

    frame = grid.frame
    print(f"Grid: {len(frame)} slots from {frame['timestamp'].iloc[0]} to {frame['timestamp'].iloc[-1]}")
    print(f"Real readings: {int((frame['glucose'].notna() & ~frame['interpolated']).sum())}, "
          f"interpolated: {int(frame['interpolated'].sum())}")
    print(f"Unmatched notes: {len(unmatched)} -> {unmatched_path}")
    print(f"Saved grid to {out_path}")


if __name__ == '__main__':
    main()
