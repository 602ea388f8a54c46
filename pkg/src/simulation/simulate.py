"""
Run the Hovorka simulator on a scenario schedule.

The scenario CSV has columns time_min,basal,bolus,carbs. The simulation starts at
the equilibrium for the initial glucose and writes one row per 5 minutes with the
glucose trace and every compartment.

Usage:
    python -m src.simulation.simulate --scenario scenario.csv --out trajectory.csv
"""

import argparse
import logging
from pathlib import Path

import pandas as pd

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.config.paths import HOVORKA_PARAMS_JSON
from src.simulation.hovorka import (
    HovorkaParams,
    InputSchedule,
    NoEquilibriumError,
    NonFiniteStateError,
    find_equilibrium,
    integrate,
)

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def main():
    parser = argparse.ArgumentParser(description='Simulate a scenario with the Hovorka model')
    parser.add_argument('--params', type=str, default=str(HOVORKA_PARAMS_JSON),
                        help='Parameter JSON')
    parser.add_argument('--scenario', type=str, required=True,
                        help='Scenario CSV: time_min,basal,bolus,carbs')
    parser.add_argument('--out', type=str, required=True, help='Output trajectory CSV')
    parser.add_argument('--weight', type=float, default=70.0, help='Body weight (kg)')
    parser.add_argument('--initial-glucose', type=float, default=120.0,
                        help='Starting glucose (mg/dl), within [90, 180]')
    parser.add_argument('--duration', type=float, default=None,
                        help='Minutes to simulate (default: whole scenario)')
    parser.add_argument('--step', type=float, default=1.0, help='Integrator step (min)')
    args = parser.parse_args()

    params = HovorkaParams.from_json(args.params, weight_kg=args.weight)
    scenario = pd.read_csv(args.scenario)
    schedule = InputSchedule.from_frame(scenario, duration_min=args.duration)

    try:
        state0, eq_basal = find_equilibrium(params, args.initial_glucose)
        trajectory = integrate(state0, params, schedule, step=args.step)
    except (NoEquilibriumError, NonFiniteStateError, ValueError) as e:
        raise SystemExit(str(e))

    output_path = Path(args.out)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    trajectory.to_frame().to_csv(output_path, index=False, float_format='%.6f')
    logger.info(f"Saved {len(trajectory.times)} samples to {output_path}")

    print("\n=== Summary ===")
    print(f"Equilibrium basal at {args.initial_glucose:.0f} mg/dl: {eq_basal:.4f} U/h")
    print(f"Glucose range: {trajectory.glucose.min():.1f} - {trajectory.glucose.max():.1f} mg/dl")
    print(f"Clamped state components: {trajectory.n_clamped}")


if __name__ == '__main__':
    main()
