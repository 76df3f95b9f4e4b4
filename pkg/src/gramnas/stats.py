"""Rank statistics for comparing experiment outcome samples."""
from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import groupby

EFFECT_THRESHOLDS = (
    (0.5, "large"),
    (0.3, "medium"),
    (0.1, "low"),
    (0.0, "negligible"),
)


def classify_effect_size(r: float) -> str:
    for threshold, label in EFFECT_THRESHOLDS:
        if r >= threshold:
            return label
    return "negligible"


@dataclass(frozen=True)
class MannWhitneyResult:
    u_a: float
    u_b: float
    z: float
    p_value: float
    effect_size_r: float
    effect_label: str
    n_a: int
    n_b: int


def _average_ranks(values) -> list:
    order = sorted(range(len(values)), key=values.__getitem__)
    ranks = [0.0] * len(values)
    position = 1
    for _, group in groupby(order, key=values.__getitem__):
        block = list(group)
        mean_rank = position + (len(block) - 1) / 2.0
        for index in block:
            ranks[index] = mean_rank
        position += len(block)
    return ranks


def mann_whitney_u(sample_a, sample_b) -> MannWhitneyResult:
    """Rank-based U with tie correction and a two-sided normal-approximation
    p-value. u_a counts the pairs where a beats b (ties at half weight);
    the effect size is r = |z| / sqrt(n_a + n_b)."""
    a = [float(x) for x in sample_a]
    b = [float(x) for x in sample_b]
    n_a, n_b = len(a), len(b)
    if n_a < 3 or n_b < 3:
        raise ValueError(f"samples must have at least 3 values, got {n_a} and {n_b}")
    n = n_a + n_b
    ranks = _average_ranks(a + b)
    rank_sum_a = sum(ranks[:n_a])
    u_a = rank_sum_a - n_a * (n_a + 1) / 2.0
    u_b = n_a * n_b - u_a

    tie_term = sum(t**3 - t for t in _tie_counts(a + b))
    variance = (n_a * n_b / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if variance <= 0:
        z = 0.0
    else:
        z = (u_a - n_a * n_b / 2.0) / math.sqrt(variance)
    p_value = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    r = abs(z) / math.sqrt(n)
    return MannWhitneyResult(
        u_a=u_a,
        u_b=u_b,
        z=z,
        p_value=p_value,
        effect_size_r=r,
        effect_label=classify_effect_size(r),
        n_a=n_a,
        n_b=n_b,
    )


def _tie_counts(values) -> list:
    return [len(list(group)) for _, group in groupby(sorted(values))]
