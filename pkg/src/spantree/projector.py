"""Binary tree induction over span-invariance charts.

The chart assigns every contiguous span a nonnegative invariance score (low =
the span behaves like a context-free unit).  ``greedy_project`` picks splits
top-down, minimizing the two children's chart entries at each node, and
normalizes against a uniformly random split drawn at the same node, so that
encoders whose charts are flat score near zero.  ``exact_project`` minimizes
the summed chart entries over all internal spans by dynamic programming.

Tie-breaking is always the smallest split index.  Cumulative scores sum chart
entries over internal spans including the whole-sentence span; leaf entries
are stored in charts but never enter cumulative tree scores (they appear in
every tree, so they shift all scores by the same constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import trees
from .errors import ContractViolation


@dataclass
class SplitDecision:
    """One greedy choice: ``span`` split after position ``k``."""

    span: tuple[int, int]
    k: int
    split_cost: float  # sci(i, k) + sci(k + 1, j)
    baseline: float    # same quantity at a uniformly random split


@dataclass
class ProjectionResult:
    tree: object
    cumulative_sci: float      # sum over internal spans, root included
    baseline_sum: float        # sum of per-node random-split costs
    normalized_score: float    # sum of (baseline - chosen split cost)
    split_trace: list[SplitDecision]


def _rng_of(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def greedy_project(chart, rng, samples_per_node: int = 1) -> ProjectionResult:
    """Top-down greedy projection with a random-split baseline at every node.

    At span (i, j) the chosen split minimizes sci(i, k) + sci(k + 1, j); the
    baseline is the same quantity at k drawn uniformly from [i, j - 1],
    averaged over ``samples_per_node`` independent draws.  The normalized
    score sums (baseline - chosen cost) over all internal nodes and is the
    per-sentence tree-structuredness estimate.
    """
    if samples_per_node < 1:
        raise ContractViolation("samples_per_node must be >= 1")
    rng = _rng_of(rng)
    n = chart.n
    trace: list[SplitDecision] = []

    def recurse(i: int, j: int):
        if i == j:
            return i, 0.0
        k_star, cost = _best_split(chart, i, j)
        draws = rng.integers(i, j, size=samples_per_node)
        baseline = float(
            np.mean([chart.sci(i, kb) + chart.sci(kb + 1, j) for kb in draws])
        )
        trace.append(SplitDecision((i, j), k_star, cost, baseline))
        left, score_left = recurse(i, k_star)
        right, score_right = recurse(k_star + 1, j)
        return (left, right), (baseline - cost) + score_left + score_right

    tree, normalized = recurse(0, n - 1)
    return ProjectionResult(
        tree=tree,
        cumulative_sci=cumulative_sci(chart, tree),
        baseline_sum=sum(d.baseline for d in trace),
        normalized_score=normalized,
        split_trace=trace,
    )


def _best_split(chart, i: int, j: int) -> tuple[int, float]:
    """Smallest k in [i, j) minimizing the two children's chart entries."""
    best_k, best_cost = i, np.inf
    for k in range(i, j):
        cost = chart.sci(i, k) + chart.sci(k + 1, j)
        if cost < best_cost:
            best_k, best_cost = k, cost
    return best_k, float(best_cost)


def greedy_tree(chart):
    """Just the greedy projection's tree; split choices are deterministic."""

    def recurse(i, j):
        if i == j:
            return i
        k, _ = _best_split(chart, i, j)
        return recurse(i, k), recurse(k + 1, j)

    return recurse(0, chart.n - 1)


def exact_project(chart) -> tuple[object, float]:
    """Global minimizer of cumulative chart score over all binary trees.

    best(i, i) = 0 and best(i, j) = sci(i, j) + min_k best(i, k) +
    best(k + 1, j); ties go to the smallest k.  Returns (tree, best score).
    """
    n = chart.n
    best = np.zeros((n, n))
    split = np.zeros((n, n), dtype=np.int64)
    for length in range(2, n + 1):
        for i in range(0, n - length + 1):
            j = i + length - 1
            best_cost, best_k = np.inf, i
            for k in range(i, j):
                cost = best[i, k] + best[k + 1, j]
                if cost < best_cost:
                    best_cost, best_k = cost, k
            best[i, j] = chart.sci(i, j) + best_cost
            split[i, j] = best_k

    def build(i, j):
        if i == j:
            return i
        k = int(split[i, j])
        return build(i, k), build(k + 1, j)

    return build(0, n - 1), float(best[0, n - 1])


def cumulative_sci(chart, tree) -> float:
    """Sum of chart entries over the tree's internal spans, root included."""
    return float(
        sum(chart.sci(i, j) for (i, j) in trees.brackets(tree, include_root=True))
    )


def t_score(charts, samples_per_node: int = 4, rng=0) -> float:
    """Mean over sentences of (random-split baseline - greedy split cost),
    accumulated per node.  Sentences of length <= 2 have no free split and
    contribute zero."""
    charts = list(charts)
    if not charts:
        raise ContractViolation("t_score needs at least one chart")
    rng = _rng_of(rng)
    scores = [
        greedy_project(c, rng, samples_per_node=samples_per_node).normalized_score
        for c in charts
    ]
    return float(np.mean(scores))


def expected_sci_uniform(chart) -> float:
    """Exact expectation of cumulative chart score under the uniform
    distribution over tree shapes, by enumeration.  Small n only."""
    all_trees = trees.enumerate_trees(chart.n, limit=10)
    return float(np.mean([cumulative_sci(chart, t) for t in all_trees]))


def t_score_uniform_trees(charts) -> float:
    """Slow cross-check of ``t_score``: expected cumulative score under
    uniformly enumerated trees minus the greedy tree's cumulative score,
    averaged over sentences.  Note the reference distribution differs from
    the per-node-split baseline, so the two estimators agree only in sign
    and rough magnitude, not in value."""
    charts = list(charts)
    if not charts:
        raise ContractViolation("t_score_uniform_trees needs at least one chart")
    vals = []
    for c in charts:
        vals.append(expected_sci_uniform(c) - cumulative_sci(c, greedy_tree(c)))
    return float(np.mean(vals))
