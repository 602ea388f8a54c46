"""
Conformance of a learned impact curve to a theoretical one.

Report JSON: {channel, dynamics_error, sign_summary {first_2h_mean, full_4h_mean}}.
Without --theoretical the reference is the Hovorka response to a unit impulse on
the same channel.

Usage:
    python -m src.analysis.conformance --learned outputs/impact_carbs.csv --channel carbs --out outputs/conformance.json
"""

import argparse
import json
import logging
from pathlib import Path
from typing import Optional

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.analysis.dtw import EmptySequenceError, dynamics_error
from src.analysis.impact import GridMismatchError, ImpactCurve, sign_summary
from src.config.paths import HOVORKA_PARAMS_JSON
from src.simulation.hovorka import HovorkaParams, theoretical_activity_curves

logger = logging.getLogger(__name__)


def theoretical_curve(channel: str, params: Optional[HovorkaParams] = None) -> ImpactCurve:
    """Hovorka reference curve for 'carbs' or 'total_insulin'."""
    params = params or HovorkaParams.from_json(HOVORKA_PARAMS_JSON)
    carb, insulin = theoretical_activity_curves(params)
    if channel == "carbs":
        return carb
    if channel == "total_insulin":
        return insulin
    raise ValueError(f"No theoretical curve for channel '{channel}'")


def conformance_report(learned: ImpactCurve, theoretical: ImpactCurve, channel: str = "") -> dict:
    return {
        "channel": channel or learned.channel,
        "dynamics_error": dynamics_error(learned, theoretical),
        "sign_summary": sign_summary(learned),
    }


def main():
    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    parser = argparse.ArgumentParser(description='Dynamics error of a learned impact curve')
    parser.add_argument('--learned', type=str, required=True, help='Learned curve CSV')
    parser.add_argument('--theoretical', type=str, default=None,
                        help='Reference curve CSV (default: Hovorka impulse response)')
    parser.add_argument('--channel', choices=['carbs', 'total_insulin'], default='carbs',
                        help='Event channel of the curves')
    parser.add_argument('--params', type=str, default=str(HOVORKA_PARAMS_JSON),
                        help='Hovorka parameter JSON for the default reference')
    parser.add_argument('--out', type=str, default=None, help='Report JSON (default: stdout only)')
    args = parser.parse_args()

    learned = ImpactCurve.from_csv(args.learned, channel=args.channel)
    if args.theoretical:
        theoretical = ImpactCurve.from_csv(args.theoretical, channel=args.channel)
    else:
        theoretical = theoretical_curve(args.channel, HovorkaParams.from_json(args.params))

    try:
        report = conformance_report(learned, theoretical, args.channel)
    except (GridMismatchError, EmptySequenceError) as e:
        raise SystemExit(f"Conformance failed: {e}")

    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
        logger.info(f"Saved conformance report to {out}")

    print("\n=== Summary ===")
    print(text)


if __name__ == '__main__':
    main()
