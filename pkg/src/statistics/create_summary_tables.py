"""
Create summary tables of per-sample predictor errors.

Generates tables with:
- Box statistics per scenario tag and method (median, quartiles, 1.5 x IQR whiskers)
- Median [IQR] strings for the condensed table
- 95% Bootstrap CI of the median
"""

import argparse
from pathlib import Path

import numpy as np
import pandas as pd

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

from src.statistics.bootstrap_ci import summarize_groups

BOX_COLUMNS = ['tag', 'method', 'n', 'median', 'mean', 'q1', 'q3', 'iqr', 'whisker_low', 'whisker_high']


def box_stats(values) -> dict:
    """
    Box-plot statistics with whiskers at the most extreme values within 1.5 x IQR.

    Quartiles use linear interpolation between order statistics.
    """
    values = np.asarray(values, dtype=float)
    values = values[~np.isnan(values)]
    if len(values) == 0:
        return {'n': 0, 'median': np.nan, 'mean': np.nan, 'q1': np.nan, 'q3': np.nan,
                'iqr': np.nan, 'whisker_low': np.nan, 'whisker_high': np.nan}
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return {
        'n': int(len(values)),
        'median': float(median),
        'mean': float(values.mean()),
        'q1': float(q1),
        'q3': float(q3),
        'iqr': float(iqr),
        'whisker_low': float(inside.min()),
        'whisker_high': float(inside.max()),
    }


def format_median_iqr(values: pd.Series, decimals: int = 3) -> str:
    """Format as 'median [Q1-Q3]'."""
    if len(values) == 0:
        return "N/A"
    median = values.median()
    q1 = values.quantile(0.25)
    q3 = values.quantile(0.75)
    return f"{median:.{decimals}f} [{q1:.{decimals}f}-{q3:.{decimals}f}]"


def create_box_table(scores: pd.DataFrame, value_col: str = 'loss') -> pd.DataFrame:
    """Box statistics per (tag, method) of a long score table."""
    rows = [{'tag': tag, 'method': method, **box_stats(group[value_col])}
            for (tag, method), group in scores.groupby(['tag', 'method'], sort=True)]
    return pd.DataFrame(rows, columns=BOX_COLUMNS)


def create_condensed_summary(scores: pd.DataFrame, value_col: str = 'loss', decimals: int = 1) -> pd.DataFrame:
    """One row per tag, one 'median [Q1-Q3]' column per method."""
    results = []
    for tag, tag_scores in scores.groupby('tag', sort=True):
        row = {'Scenario': tag, 'n': tag_scores['sample'].nunique() if 'sample' in tag_scores else len(tag_scores)}
        for method, group in tag_scores.groupby('method', sort=True):
            row[method] = format_median_iqr(group[value_col].dropna(), decimals)
        results.append(row)
    return pd.DataFrame(results)


def main():
    parser = argparse.ArgumentParser(description='Create summary tables of per-sample predictor errors')
    parser.add_argument('--scores', type=str, required=True,
                        help='Long CSV with columns tag, method, sample, loss')
    parser.add_argument('--output-dir', type=str, default='outputs/tables',
                        help='Output directory')
    parser.add_argument('--bootstrap-samples', type=int, default=2000,
                        help='Number of bootstrap samples')
    args = parser.parse_args()

    output_dir = Path(args.output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)

    print("Loading data...")
    scores = pd.read_csv(args.scores)

    print("Creating box statistics table...")
    boxes = create_box_table(scores)
    box_path = output_dir / 'summary_boxstats.csv'
    boxes.to_csv(box_path, index=False, float_format='%.4f')
    print(f"Saved to {box_path}")

    print("Creating bootstrap CI table...")
    ci = summarize_groups(scores, B=args.bootstrap_samples)
    ci_path = output_dir / 'summary_bootstrap_ci.csv'
    ci.to_csv(ci_path, index=False, float_format='%.4f')
    print(f"Saved to {ci_path}")

    print("Creating condensed summary table...")
    condensed = create_condensed_summary(scores)
    condensed_path = output_dir / 'summary_condensed.csv'
    condensed.to_csv(condensed_path, index=False)
    print(f"Saved to {condensed_path}")

    print("\n=== Condensed Summary Preview ===")
    print(condensed.to_string(index=False))


if __name__ == '__main__':
    main()
