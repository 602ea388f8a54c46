"""
Rank-based tests for comparing predictors on paired per-sample errors.

- Friedman rank test across methods (scores: methods x scenarios)
- Wilcoxon signed-rank test for two paired samples
- Spearman rank correlation
- Pairwise Wilcoxon comparisons with Cliff's delta and FDR correction
  (Benjamini-Hochberg)

Small samples use exact null distributions: Friedman for up to 8 blocks and 4
methods, Wilcoxon for up to 15 nonzero differences.
"""

import argparse
import itertools
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import pandas as pd
from scipy.stats import chi2, norm, rankdata, spearmanr
from statsmodels.stats.multitest import multipletests

# Add parent to path for imports
import sys
sys.path.insert(0, str(Path(__file__).parent.parent.parent))

logger = logging.getLogger(__name__)

EXACT_FRIEDMAN_MAX_BLOCKS = 8
EXACT_FRIEDMAN_MAX_METHODS = 4
EXACT_WILCOXON_MAX_N = 15
MIN_WILCOXON_N = 5


class DegenerateInputError(ValueError):
    """Too few methods, scenarios or pairs for the test."""


class AllZeroDifferencesError(ValueError):
    """Paired samples are identical."""


class ConstantInputError(ValueError):
    """Rank correlation of a constant sequence."""


def _tie_term(ranks: np.ndarray) -> float:
    _, counts = np.unique(ranks, return_counts=True)
    return float(np.sum(counts ** 3 - counts))


def _friedman_exact_p(doubled_ranks: np.ndarray, observed: int) -> float:
    """P(sum of squared doubled rank sums >= observed) under within-block exchangeability."""
    k = doubled_ranks.shape[0]
    states = Counter({(0,) * k: 1})
    for block in doubled_ranks.T:
        perms = Counter(itertools.permutations(block.tolist()))
        nxt = Counter()
        for sums, w in states.items():
            for perm, m in perms.items():
                nxt[tuple(s + p for s, p in zip(sums, perm))] += w * m
        states = nxt
    total = sum(states.values())
    hits = sum(w for sums, w in states.items() if sum(s * s for s in sums) >= observed)
    return hits / total


def friedman_test(scores, method: str = "auto") -> Tuple[float, float]:
    """
    Friedman rank test of whether methods differ across scenarios.

    Args:
        scores: Matrix of shape (methods, scenarios); lower or higher, only ranks matter
        method: 'auto' (exact for small designs), 'exact' or 'approx' (chi-square, k-1 df)

    Returns:
        (statistic, p_value); statistic is tie-corrected, 0 when every scenario is fully tied

    Raises:
        DegenerateInputError: fewer than 2 methods or scenarios, or a fully tied
            scenario with fewer than 3 scenarios
    """
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 2 or scores.shape[0] < 2 or scores.shape[1] < 2:
        raise DegenerateInputError(f"Friedman test needs >= 2 methods and >= 2 scenarios, got shape {scores.shape}")
    k, n = scores.shape
    constant = np.all(scores == scores[0], axis=0)
    if n < 3 and constant.any():
        raise DegenerateInputError(f"{int(constant.sum())} of {n} scenarios tie all methods")

    ranks = rankdata(scores, axis=0)
    rank_sums = ranks.sum(axis=1)
    correction = 1.0 - sum(_tie_term(ranks[:, j]) for j in range(n)) / (n * (k ** 3 - k))
    if correction <= 0:
        return 0.0, 1.0
    statistic = (12.0 / (n * k * (k + 1)) * np.sum(rank_sums ** 2) - 3.0 * n * (k + 1)) / correction
    statistic = max(float(statistic), 0.0)

    exact = method == "exact" or (method == "auto" and n <= EXACT_FRIEDMAN_MAX_BLOCKS
                                  and k <= EXACT_FRIEDMAN_MAX_METHODS)
    if exact:
        doubled = np.rint(2 * ranks).astype(int)
        observed = int(np.sum(doubled.sum(axis=1) ** 2))
        return statistic, _friedman_exact_p(doubled, observed)
    return statistic, float(chi2.sf(statistic, k - 1))


def _signed_rank_null(doubled_ranks: np.ndarray) -> np.ndarray:
    """Counts of each doubled positive-rank sum over all 2^n sign assignments."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=object)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y, alternative: str = "two-sided", method: str = "auto") -> Tuple[float, float]:
    """
    Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; remaining |differences| get average ranks.

    Args:
        x, y: Paired samples of equal length
        alternative: 'two-sided', 'greater' (x tends to exceed y) or 'less'
        method: 'auto' (exact for n <= 15), 'exact' or 'approx' (normal, tie-corrected variance)

    Returns:
        (W+, p_value) where W+ is the rank sum of positive differences x - y

    Raises:
        AllZeroDifferencesError: every pair is tied
        DegenerateInputError: fewer than 5 nonzero differences
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"Paired samples differ in length: {x.shape} vs {y.shape}")
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError(f"Unknown alternative '{alternative}'")
    d = x - y
    d = d[d != 0]
    if d.size == 0:
        raise AllZeroDifferencesError("All paired differences are zero")
    n = d.size
    if n < MIN_WILCOXON_N:
        raise DegenerateInputError(f"Wilcoxon test needs >= {MIN_WILCOXON_N} nonzero differences, got {n}")

    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if method == "exact" or (method == "auto" and n <= EXACT_WILCOXON_MAX_N):
        doubled = np.rint(2 * ranks).astype(int)
        counts = _signed_rank_null(doubled)
        total = 2 ** n
        w2 = int(round(2 * w_plus))
        upper = float(sum(counts[w2:]) / total)
        lower = float(sum(counts[:w2 + 1]) / total)
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0 - _tie_term(ranks) / 48.0
        z = (w_plus - mean) / np.sqrt(var)
        upper = float(norm.sf(z))
        lower = float(norm.cdf(z))

    if alternative == "greater":
        return w_plus, upper
    if alternative == "less":
        return w_plus, lower
    return w_plus, min(1.0, 2.0 * min(upper, lower))


def spearman_rho(x, y) -> float:
    """
    Spearman rank correlation (Pearson correlation of average ranks).

    Raises:
        ConstantInputError: either sequence is constant
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 2:
        raise ValueError(f"Spearman needs two sequences of equal length >= 2, got {x.size} and {y.size}")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ConstantInputError("Rank correlation is undefined for a constant sequence")
    return float(spearmanr(x, y)[0])


def cliffs_delta(x, y) -> float:
    """
    Cliff's delta effect size in [-1, 1].

    Interpretation:
    - |d| < 0.147: negligible
    - |d| < 0.33: small
    - |d| < 0.474: medium
    - |d| >= 0.474: large
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size == 0 or y.size == 0:
        return np.nan
    return float(np.sign(x[:, None] - y[None, :]).mean())


def interpret_cliffs_delta(d: float) -> str:
    """Interpret Cliff's delta magnitude."""
    if np.isnan(d):
        return "N/A"
    abs_d = abs(d)
    if abs_d < 0.147:
        return "negligible"
    elif abs_d < 0.33:
        return "small"
    elif abs_d < 0.474:
        return "medium"
    else:
        return "large"


def pairwise_wilcoxon(samples: Dict[str, np.ndarray], alpha: float = 0.05) -> pd.DataFrame:
    """
    Wilcoxon signed-rank test for every pair of methods on paired samples.

    Args:
        samples: method -> per-sample errors, all on the same samples in the same order
        alpha: FDR level

    Returns:
        DataFrame with method_a, method_b, n, median_diff, statistic, p_value,
        cliffs_delta, effect_size, p_adjusted, significant
    """
    rows = []
    for a, b in itertools.combinations(sorted(samples), 2):
        x, y = np.asarray(samples[a], dtype=float), np.asarray(samples[b], dtype=float)
        try:
            stat, p_value = wilcoxon_signed_rank(x, y)
        except (AllZeroDifferencesError, DegenerateInputError) as e:
            logger.warning(f"{a} vs {b}: {e}")
            stat, p_value = np.nan, np.nan
        delta = cliffs_delta(x, y)
        rows.append({
            'method_a': a,
            'method_b': b,
            'n': len(x),
            'median_diff': float(np.median(x - y)) if len(x) else np.nan,
            'statistic': stat,
            'p_value': p_value,
            'cliffs_delta': delta,
            'effect_size': interpret_cliffs_delta(delta),
        })

    columns = ['method_a', 'method_b', 'n', 'median_diff', 'statistic', 'p_value',
               'cliffs_delta', 'effect_size', 'p_adjusted', 'significant']
    results = pd.DataFrame(rows, columns=columns)
    if len(results) == 0:
        return results

    results['p_adjusted'] = np.nan
    results['significant'] = False
    valid = results['p_value'].notna().to_numpy()
    if valid.any():
        reject, p_adjusted, _, _ = multipletests(results.loc[valid, 'p_value'].to_numpy(), alpha=alpha,
                                                 method='fdr_bh')
        results.loc[valid, 'p_adjusted'] = p_adjusted
        results.loc[valid, 'significant'] = reject
    return results


def main():
    parser = argparse.ArgumentParser(
        description='Friedman and pairwise Wilcoxon tests on per-sample predictor errors')
    parser.add_argument('--scores', type=str, required=True,
                        help='Long CSV with columns tag, method, sample, loss (written by src.bench.evaluate)')
    parser.add_argument('--output', type=str, default='outputs/tables/pairwise_wilcoxon.csv',
                        help='Output CSV path')
    parser.add_argument('--alpha', type=float, default=0.05,
                        help='FDR level')
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    print(f"Loading scores from {args.scores}...")
    scores = pd.read_csv(args.scores)
    print(f"  Loaded {len(scores)} rows, {scores['method'].nunique()} methods, {scores['tag'].nunique()} tags")

    wide = scores.pivot_table(index=['tag', 'sample'], columns='method', values='loss').dropna()
    results = pairwise_wilcoxon({m: wide[m].to_numpy() for m in wide.columns}, alpha=args.alpha)

    medians = wide.groupby(level='tag').median().T
    statistic, p_value = friedman_test(medians.to_numpy())

    output_path = Path(args.output)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    results.to_csv(output_path, index=False, float_format='%.4f')
    print(f"\nSaved {len(results)} comparisons to {output_path}")

    print("\n=== Summary ===")
    print(f"Friedman over {medians.shape[1]} tags: chi2 = {statistic:.3f}, p = {p_value:.4f}")
    significant = results[results['significant'] == True]
    print(f"Significant comparisons (FDR < {args.alpha}): {len(significant)} / {len(results)}")


if __name__ == '__main__':
    main()
