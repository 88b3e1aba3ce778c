"""One-sided Wilcoxon signed-rank test for paired samples."""

from __future__ import annotations

import math

import numpy as np

from ._ext import kernels

EXACT_MAX_N = 25


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _weighted_counts(weights):
    """Sign-pattern counts of sum(weights[i] for positive i), integer weights."""
    total = int(sum(weights))
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    top = 0
    for w in weights:
        top += w
        counts[w : top + 1] = counts[w : top + 1] + counts[: top + 1 - w]
    return counts


def wilcoxon_one_sided(paired_a, paired_b):
    """P-value for the alternative that ``a`` tends to be smaller than ``b``.

    Zero differences are dropped. With at most 25 non-zero pairs the null
    distribution of the positive-rank sum is computed exactly (midranks for
    ties); above that a tie-corrected normal approximation with continuity
    correction is used.
    """
    a = np.asarray(paired_a, dtype=np.float64)
    b = np.asarray(paired_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"paired samples must be equal-length vectors, got {a.shape}, {b.shape}")
    if a.size < 5:
        raise ValueError(f"need at least 5 pairs, got {a.size}")
    d = a - b
    d = d[d != 0.0]
    if d.size == 0:
        raise ValueError("all paired differences are zero; the test is undefined")
    ranks = _midranks(np.abs(d))
    n = d.size
    if n <= EXACT_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        w_obs = int(doubled[d > 0].sum())
        if np.all(doubled % 2 == 0) and np.array_equal(np.sort(doubled) // 2, np.arange(1, n + 1)):
            counts = kernels.signed_rank_counts(n)
            w_obs //= 2
        else:
            counts = _weighted_counts([int(w) for w in doubled])
        return float(counts[: w_obs + 1].sum() / counts.sum())
    w_plus = float(ranks[d > 0].sum())
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = (w_plus + 0.5 - mean) / math.sqrt(var)
    return 0.5 * math.erfc(-z / math.sqrt(2.0))
