"""AUROC and the paired comparison protocol (Wilcoxon signed-rank, Bonferroni)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata

from .kernels import signed_rank_counts

EXACT_MAX_N = 25


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class PairedSample:
    seed: int
    value_a: float
    value_b: float

    def __post_init__(self):
        if not (math.isfinite(self.value_a) and math.isfinite(self.value_b)):
            raise StatsError(f"non-finite paired value at seed {self.seed}")


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_two_sided: float
    p_corrected: float
    n_effective: int
    direction: str  # "up" (b > a), "down" or "none"
    family_size: int = 1

    __test__ = False  # not a pytest class


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape or s.ndim != 1:
        raise StatsError("scores and labels must be 1-D and the same length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise StatsError("auroc needs at least one positive and one negative label")
    if not np.all(np.isfinite(s)):
        raise StatsError("non-finite score")
    ranks = rankdata(s)  # midranks
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auroc_standard_error(a: float, n_pos: int, n_neg: int) -> float:
    """Hanley-McNeil standard error of an AUROC estimate."""
    q1 = a / (2 - a)
    q2 = 2 * a * a / (1 + a)
    var = (a * (1 - a) + (n_pos - 1) * (q1 - a * a) + (n_neg - 1) * (q2 - a * a)) / (n_pos * n_neg)
    return math.sqrt(max(var, 0.0))


def _doubled_midranks(absd: np.ndarray) -> np.ndarray:
    # midranks are multiples of 1/2, so doubling gives exact integers
    return np.rint(2 * rankdata(absd)).astype(np.int64)


def signed_rank_null_counts(doubled_ranks) -> np.ndarray:
    """Number of sign assignments giving each doubled rank-sum 0..sum(ranks)."""
    return signed_rank_counts(np.ascontiguousarray(doubled_ranks, dtype=np.int64))


def wilcoxon_signed_rank(pairs: Sequence[PairedSample], family_size: int = 1) -> TestResult:
    """Paired two-sided signed-rank test on ``value_b - value_a``.

    Zero differences are dropped. Exact null distribution up to 25 non-zero
    pairs, tie-corrected normal approximation above.
    """
    if len(pairs) < 1:
        raise StatsError("wilcoxon needs at least one pair")
    d = np.array([p.value_b - p.value_a for p in pairs], dtype=np.float64)
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        return TestResult(0.0, 1.0, 1.0, 0, "none", family_size)
    r2 = _doubled_midranks(np.abs(d))
    w2 = int(r2[d > 0].sum())
    stat = w2 / 2.0
    if n <= EXACT_MAX_N:
        counts = signed_rank_null_counts(r2)
        total = float(2 ** n)
        lower = float(counts[: w2 + 1].sum()) / total
        upper = float(counts[w2:].sum()) / total
        p = min(1.0, 2.0 * min(lower, upper))
    else:
        ranks = r2 / 2.0
        mean = ranks.sum() / 2.0
        var = (ranks ** 2).sum() / 4.0  # tie-corrected: uses the midranks themselves
        z = (stat - mean) / math.sqrt(var)
        p = min(1.0, 2.0 * float(ndtr(-abs(z))))
    mean_w = r2.sum() / 4.0
    direction = "up" if stat > mean_w else "down" if stat < mean_w else "none"
    return TestResult(stat, p, bonferroni(p, family_size), n, direction, family_size)


def bonferroni(p: float, m: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise StatsError(f"p-value out of range: {p}")
    if m < 1:
        raise StatsError("family size must be >= 1")
    return min(1.0, m * p)


def pair_by_seed(runs_a: Iterable, runs_b: Iterable) -> tuple[list[PairedSample], list]:
    """Inner join on seed. Returns (pairs sorted by seed, unmatched runs)."""
    runs_a, runs_b = list(runs_a), list(runs_b)
    by_a, by_b = {}, {}
    for side, runs, table in (("a", runs_a, by_a), ("b", runs_b, by_b)):
        for r in runs:
            if r.seed in table:
                raise StatsError(f"duplicate seed {r.seed} on side {side}")
            table[r.seed] = r
    common = sorted(set(by_a) & set(by_b))
    pairs = [PairedSample(s, by_a[s].auroc, by_b[s].auroc) for s in common]
    unmatched = [r for r in runs_a if r.seed not in by_b] + [r for r in runs_b if r.seed not in by_a]
    return pairs, unmatched


def summarize(values) -> tuple[float, float]:
    """Mean and sample standard deviation (n - 1 denominator)."""
    x = np.asarray(list(values), dtype=np.float64)
    if x.size < 2:
        raise StatsError("standard deviation undefined for fewer than 2 values")
    return float(x.mean()), float(x.std(ddof=1))
