"""
Benchmark entry point.

    python -m src.bench.run_bench run --spec configs/experiments/experiment_i.json --out outputs/experiment_i
    python -m src.bench.run_bench synth --config configs/synth_clean.json --out data/synthetic/clean

`run` executes an experiment spec and writes its report bundle; `synth` writes a
synthetic cohort (events, profiles, truth and meal sidecars).
"""

import argparse
import logging
from pathlib import Path

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.analysis.coupling import coupling_correlation
from src.bench.experiment import StageError, load_spec, run_experiment
from src.bench.synthetic import SynthConfig, generate_synthetic, write_cohort
from src.config.paths import HOVORKA_PARAMS_JSON
from src.ingest.build_grid import build_grid
from src.simulation.hovorka import HovorkaParams

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def cmd_run(args):
    try:
        spec = load_spec(args.spec)
        result = run_experiment(spec, args.out, progress=not args.quiet)
    except StageError as e:
        raise SystemExit(str(e))
    except (OSError, ValueError) as e:
        raise SystemExit(f"Cannot run {args.spec}: {e}")

    report = result.report
    print("\n=== Summary ===")
    print(f"Experiment: {spec.get('name', Path(args.spec).stem)}")
    overall = report.box[report.box["tag"] == "overall"]
    for _, row in overall.iterrows():
        print(f"  {row['method']}: median {report.metric} {row['median']:.2f} (n={row['n']})")
    friedman = report.friedman[report.friedman["tag"] == "overall"]
    if len(friedman):
        print(f"Friedman (overall): p = {friedman['p_value'].iloc[0]:.4g}")
    for channel, doc in result.conformance.items():
        print(f"Dynamics error ({channel}): {doc['dynamics_error']:.3f}")
    if report.shortfalls:
        print(f"Sampling shortfalls: {report.shortfalls}")
    print(f"Saved bundle to {result.out_dir}")


def cmd_synth(args):
    try:
        cfg = SynthConfig.from_json(args.config) if args.config else SynthConfig()
        params = HovorkaParams.from_json(args.params)
    except (OSError, ValueError) as e:
        raise SystemExit(f"Invalid synthetic config: {e}")
    patients = generate_synthetic(cfg, params, n_jobs=args.n_jobs, progress=not args.quiet)
    written = write_cohort(patients, args.out)

    print("\n=== Summary ===")
    print(f"Participants: {len(patients)} x {cfg.days_per_patient} days")
    for p in patients:
        meals = p.meals
        hidden = int((~meals["reported"].astype(bool)).sum())
        coupling = coupling_correlation(build_grid(p.events, p.profile))
        print(f"  {p.profile.participant_id}: {len(meals)} carb intakes ({hidden} unreported), "
              f"bolus/carb coupling {coupling:.2f}")
    print(f"Saved {len(written)} event streams to {args.out}")


def main():
    parser = argparse.ArgumentParser(description='Synthetic cohorts and experiment runs')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Execute an experiment spec')
    run.add_argument('--spec', type=str, required=True, help='Experiment spec JSON')
    run.add_argument('--out', type=str, required=True, help='Bundle directory')
    run.add_argument('--quiet', action='store_true', help='No progress bars')
    run.set_defaults(func=cmd_run)

    synth = sub.add_parser('synth', help='Generate a synthetic cohort')
    synth.add_argument('--config', type=str, default=None, help='SynthConfig JSON (default: built-in)')
    synth.add_argument('--params', type=str, default=str(HOVORKA_PARAMS_JSON), help='Hovorka parameter JSON')
    synth.add_argument('--out', type=str, required=True, help='Output directory')
    synth.add_argument('--n-jobs', type=int, default=1, help='Parallel participants')
    synth.add_argument('--quiet', action='store_true', help='No progress bars')
    synth.set_defaults(func=cmd_synth)

    args = parser.parse_args()
    args.func(args)


if __name__ == '__main__':
    main()
