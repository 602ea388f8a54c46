"""
Bootstrap 95% confidence intervals for per-sample predictor errors.

Computes median and 95% CI (percentile method) of the per-sample loss for each
scenario tag and method of an evaluation run.
"""

import argparse
import logging
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

logger = logging.getLogger(__name__)

BOOTSTRAP_SEED = 42


def bootstrap_ci(data: np.ndarray, B: int = 2000, alpha: float = 0.05, seed: int = BOOTSTRAP_SEED) -> tuple:
    """
    Compute bootstrap confidence interval of the median using the percentile method.

    Args:
        data: 1D array of per-sample values
        B: Number of bootstrap resamples
        alpha: Significance level (0.05 for 95% CI)
        seed: Generator seed

    Returns:
        (median, ci_lower, ci_upper); NaN triple for fewer than 2 finite values
    """
    data = np.asarray(data, dtype=float)
    data = data[~np.isnan(data)]

    if len(data) < 2:
        return np.nan, np.nan, np.nan

    rng = np.random.default_rng(seed)
    boot_medians = np.median(rng.choice(data, size=(B, len(data)), replace=True), axis=1)

    return (
        float(np.median(data)),
        float(np.percentile(boot_medians, 100 * alpha / 2)),
        float(np.percentile(boot_medians, 100 * (1 - alpha / 2)))
    )


def summarize_groups(df: pd.DataFrame, value_col: str = 'loss',
                     group_cols: Sequence[str] = ('tag', 'method'), B: int = 2000) -> pd.DataFrame:
    """
    Bootstrap CI of the median for every group of a long score table.

    Returns:
        DataFrame with group columns plus median, ci_lower, ci_upper, n
    """
    results = []
    for key, group in df.groupby(list(group_cols), sort=True):
        values = group[value_col].dropna().to_numpy()
        if len(values) < 2:
            logger.debug(f"Skipping {key}: {len(values)} values")
            continue
        median, ci_lower, ci_upper = bootstrap_ci(values, B=B)
        key = key if isinstance(key, tuple) else (key,)
        results.append({**dict(zip(group_cols, key)),
                        'median': median, 'ci_lower': ci_lower, 'ci_upper': ci_upper, 'n': len(values)})
    return pd.DataFrame(results, columns=[*group_cols, 'median', 'ci_lower', 'ci_upper', 'n'])


def main():
    parser = argparse.ArgumentParser(description='Compute bootstrap 95% CI of per-sample predictor errors')
    parser.add_argument('--scores', type=str, required=True,
                        help='Long CSV with columns tag, method, sample, loss')
    parser.add_argument('--output', type=str, default='outputs/tables/bootstrap_ci_summary.csv',
                        help='Output CSV path')
    parser.add_argument('--bootstrap-samples', type=int, default=2000,
                        help='Number of bootstrap samples')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    print(f"Loading scores from {args.scores}...")
    scores = pd.read_csv(args.scores)
    print(f"  Loaded {len(scores)} rows, {scores['method'].nunique()} methods")

    print(f"\nComputing bootstrap CI with B={args.bootstrap_samples}...")
    all_results = summarize_groups(scores, B=args.bootstrap_samples)

    output_path = Path(args.output)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    all_results.to_csv(output_path, index=False, float_format='%.4f')

    print(f"\nSaved {len(all_results)} rows to {output_path}")

    print("\n=== Summary ===")
    for method in all_results['method'].unique():
        method_data = all_results[all_results['method'] == method]
        print(f"  {method}: {len(method_data)} tags, "
              f"median range [{method_data['median'].min():.3f} - {method_data['median'].max():.3f}]")


if __name__ == '__main__':
    main()
