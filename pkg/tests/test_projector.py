"""Tree induction over charts: greedy vs exact, baselines, invariances."""

import numpy as np
import pytest

from spantree import projector, trees
from spantree.errors import ContractViolation
from spantree.spanrep import SciChart


def chart_from(n, entries, default=0.0, threshold=1):
    """Build a chart with given {(i, j): value} entries; leaves default too."""
    values = np.full((n, n), default)
    for (i, j), v in entries.items():
        values[i, j] = v
    return SciChart(n=n, threshold=threshold, values=np.triu(values))


def planted_chart(n, gold_tree, lo=0.0, hi=0.5):
    """Gold spans (and leaves) at lo, every other span at hi."""
    gold = trees.brackets(gold_tree, include_root=True)
    values = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            values[i, j] = lo if (i, j) in gold else hi
    return SciChart(n=n, threshold=1, values=values)


def random_chart(n, rng):
    vals = np.triu(rng.random((n, n)))
    return SciChart(n=n, threshold=1, values=vals)


def brute_force_min(chart):
    """Independent oracle: minimum cumulative score over all enumerated trees."""
    best_tree, best = None, np.inf
    for t in trees.enumerate_trees(chart.n):
        s = projector.cumulative_sci(chart, t)
        if s < best:
            best_tree, best = t, s
    return best_tree, best


# ---------------------------------------------------------------------------
# greedy projection
# ---------------------------------------------------------------------------


def test_greedy_three_token_example():
    # cheap (0,1) bracket: split after position 1 wins
    chart = chart_from(3, {(0, 1): 0.1, (1, 2): 0.3, (0, 2): 0.7})
    res = projector.greedy_project(chart, rng=0)
    assert res.tree == ((0, 1), 2)
    assert res.split_trace[0].span == (0, 2)
    assert res.split_trace[0].k == 1
    assert res.split_trace[0].split_cost == pytest.approx(0.1)


def test_greedy_recovers_planted_tree():
    rng = np.random.default_rng(0)
    for n in range(3, 11):
        for _ in range(5):
            gold = trees.random_tree(n, rng)
            res = projector.greedy_project(planted_chart(n, gold), rng=rng)
            assert res.tree == gold


def test_greedy_constant_chart_scores_zero():
    values = np.triu(np.full((5, 5), 0.4))
    chart = SciChart(n=5, threshold=1, values=values)
    res = projector.greedy_project(chart, rng=1, samples_per_node=3)
    assert res.normalized_score == pytest.approx(0.0, abs=1e-15)
    # ties resolve to the smallest split index: always peel the first token
    assert res.tree == trees.right_branching(5)


def test_greedy_single_token():
    chart = SciChart(n=1, threshold=1, values=np.zeros((1, 1)))
    res = projector.greedy_project(chart, rng=0)
    assert res.tree == 0
    assert res.normalized_score == 0.0
    assert res.split_trace == []
    assert res.cumulative_sci == 0.0


def test_greedy_trace_is_consistent():
    rng = np.random.default_rng(2)
    chart = random_chart(7, rng)
    res = projector.greedy_project(chart, rng=rng, samples_per_node=2)
    # one decision per internal node
    assert len(res.split_trace) == 6
    assert res.baseline_sum == pytest.approx(sum(d.baseline for d in res.split_trace))
    assert res.normalized_score == pytest.approx(
        sum(d.baseline - d.split_cost for d in res.split_trace)
    )
    # recorded costs match the chart
    for d in res.split_trace:
        i, j = d.span
        assert d.split_cost == pytest.approx(chart.sci(i, d.k) + chart.sci(d.k + 1, j))


def test_greedy_samples_per_node_contract():
    chart = random_chart(4, np.random.default_rng(3))
    with pytest.raises(ContractViolation):
        projector.greedy_project(chart, rng=0, samples_per_node=0)


def test_greedy_tree_matches_greedy_project():
    rng = np.random.default_rng(4)
    for _ in range(20):
        chart = random_chart(6, rng)
        assert projector.greedy_tree(chart) == projector.greedy_project(chart, rng).tree


# ---------------------------------------------------------------------------
# exact projection
# ---------------------------------------------------------------------------


def test_exact_matches_brute_force_enumeration():
    rng = np.random.default_rng(5)
    for n in range(2, 9):
        for _ in range(10):
            chart = random_chart(n, rng)
            tree, score = projector.exact_project(chart)
            oracle_tree, oracle_score = brute_force_min(chart)
            assert score == pytest.approx(oracle_score, abs=1e-12)
            assert projector.cumulative_sci(chart, tree) == pytest.approx(
                score, abs=1e-12
            )
            # random continuous charts have no ties in practice
            assert tree == oracle_tree


def test_exact_never_worse_than_greedy():
    rng = np.random.default_rng(6)
    for _ in range(300):
        n = int(rng.integers(3, 13))
        chart = random_chart(n, rng)
        _, exact_score = projector.exact_project(chart)
        greedy_score = projector.cumulative_sci(chart, projector.greedy_tree(chart))
        assert exact_score <= greedy_score + 1e-12


def test_exact_recovers_planted_tree_with_zero_gold_cost():
    rng = np.random.default_rng(7)
    for n in range(3, 9):
        gold = trees.random_tree(n, rng)
        tree, score = projector.exact_project(planted_chart(n, gold))
        assert tree == gold
        assert score == 0.0


def test_exact_tie_breaks_to_smallest_split():
    values = np.triu(np.full((4, 4), 1.0))
    chart = SciChart(n=4, threshold=1, values=values)
    tree, _ = projector.exact_project(chart)
    assert tree == trees.right_branching(4)


# ---------------------------------------------------------------------------
# invariances
# ---------------------------------------------------------------------------


def test_shift_and_rescale_leave_trees_unchanged():
    rng = np.random.default_rng(8)
    for _ in range(20):
        n = int(rng.integers(3, 9))
        chart = random_chart(n, rng)
        shifted = SciChart(n=n, threshold=1, values=chart.values + 0.75)
        scaled = SciChart(n=n, threshold=1, values=chart.values * 13.0)
        base_exact, _ = projector.exact_project(chart)
        base_greedy = projector.greedy_tree(chart)
        assert projector.exact_project(shifted)[0] == base_exact
        assert projector.exact_project(scaled)[0] == base_exact
        assert projector.greedy_tree(shifted) == base_greedy
        assert projector.greedy_tree(scaled) == base_greedy


def test_cumulative_sci_excludes_leaves_includes_root():
    chart = chart_from(3, {(0, 1): 0.1, (1, 2): 0.3, (0, 2): 0.7}, default=100.0)
    # leaf diagonal set to 100 must not leak into the sum
    chart.values[np.diag_indices(3)] = 100.0
    assert projector.cumulative_sci(chart, ((0, 1), 2)) == pytest.approx(0.8)
    assert projector.cumulative_sci(chart, (0, (1, 2))) == pytest.approx(1.0)


# ---------------------------------------------------------------------------
# t_score
# ---------------------------------------------------------------------------


def test_t_score_zero_for_all_zero_charts():
    charts = [SciChart(n=5, threshold=1, values=np.zeros((5, 5))) for _ in range(3)]
    assert projector.t_score(charts, rng=0) == 0.0


def test_t_score_zero_for_constant_charts():
    charts = [SciChart(n=4, threshold=1, values=np.triu(np.full((4, 4), 0.9)))]
    assert projector.t_score(charts, rng=0) == pytest.approx(0.0, abs=1e-15)


def test_t_score_positive_for_planted_charts():
    gold = ((0, 1), 2)
    charts = [planted_chart(3, gold) for _ in range(16)]
    assert projector.t_score(charts, samples_per_node=4, rng=0) > 0.0


def test_t_score_short_sentences_contribute_zero():
    charts = [
        SciChart(n=1, threshold=1, values=np.zeros((1, 1))),
        SciChart(n=2, threshold=1, values=np.triu(np.full((2, 2), 0.3))),
    ]
    # n=1 has no split at all; n=2 has exactly one, so baseline == chosen
    assert projector.t_score(charts, rng=0) == pytest.approx(0.0, abs=1e-15)


def test_t_score_empty_dataset_rejected():
    with pytest.raises(ContractViolation):
        projector.t_score([])


def test_t_score_estimator_converges_to_analytic_mean():
    # planted ((0 1) 2): root split costs are 0 (k=1) and 0.5 (k=0), so the
    # per-node baseline averages 0.25 and the chosen cost is 0
    chart = planted_chart(3, ((0, 1), 2))
    rng = np.random.default_rng(9)
    draws = [
        projector.greedy_project(chart, rng=rng, samples_per_node=1).normalized_score
        for _ in range(4000)
    ]
    assert abs(float(np.mean(draws)) - 0.25) < 0.02  # 5 sigma of the SE
    assert set(np.round(draws, 10)) == {0.0, 0.5}


def test_t_score_uniform_tree_cross_check_agrees_in_sign():
    gold = ((0, 1), (2, 3))
    charts = [planted_chart(4, gold) for _ in range(8)]
    fast = projector.t_score(charts, samples_per_node=8, rng=10)
    slow = projector.t_score_uniform_trees(charts)
    assert fast > 0 and slow > 0


def test_expected_sci_uniform_hand_value():
    # n=3: two trees, cumulative scores 0.1+0.7 and 0.3+0.7 -> mean 0.9
    chart = chart_from(3, {(0, 1): 0.1, (1, 2): 0.3, (0, 2): 0.7})
    assert projector.expected_sci_uniform(chart) == pytest.approx(0.9)
