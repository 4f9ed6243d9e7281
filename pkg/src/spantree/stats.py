"""Rank correlation and unequal-variance location tests.

Both statistics are computed longhand (average ranks for ties, Welch's
Satterthwaite degrees of freedom); only the Student-t tail probability is
delegated to the regularized incomplete beta function.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import betainc

from .errors import ContractViolation


def average_ranks(xs) -> np.ndarray:
    """1-based ranks; tied values share the average of their rank block."""
    xs = np.asarray(xs, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    ranks = np.empty(len(xs), dtype=np.float64)
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _student_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isnan(t):
        return float("nan")
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def spearman(xs, ys) -> tuple[float, float]:
    """Spearman rank correlation with a t-approximation p-value.

    Returns (rho, two-sided p).  Ties get average ranks.  A constant series
    has no defined rank correlation: returns (nan, nan).
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ContractViolation("spearman needs two equal-length 1-d series")
    n = len(xs)
    if n < 3:
        raise ContractViolation(f"spearman needs n >= 3, got {n}")
    rx = average_ranks(xs)
    ry = average_ranks(ys)
    sx = rx.std()
    sy = ry.std()
    if sx == 0.0 or sy == 0.0:
        return float("nan"), float("nan")
    # Perfectly concordant / discordant rank vectors are exactly +-1; the
    # covariance arithmetic below would land a few ulps short of that.
    if np.array_equal(rx, ry):
        return 1.0, 0.0
    if np.array_equal(rx, (n + 1.0) - ry):
        return -1.0, 0.0
    rho = float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))
    rho = min(1.0, max(-1.0, rho))
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    return rho, _student_sf_two_sided(t, n - 2)


def welch_ttest(a, b, sides: int = 2) -> tuple[float, float]:
    """Welch's unequal-variance t-test.

    Returns (t, p).  ``sides=2`` tests a difference in either direction;
    ``sides=1`` tests mean(a) > mean(b).  Each sample needs >= 2 points.
    Two constant samples with equal means give (0, 1) by convention; with
    different means the difference is infinitely significant: (+-inf, 0).
    """
    if sides not in (1, 2):
        raise ContractViolation("sides must be 1 or 2")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ContractViolation("welch_ttest needs >= 2 points per sample")
    ma, mb = float(a.mean()), float(b.mean())
    va, vb = float(a.var(ddof=1)), float(b.var(ddof=1))
    if va == 0.0 and vb == 0.0:
        if ma == mb:
            return 0.0, 1.0
        t = math.inf if ma > mb else -math.inf
        return t, 0.0
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / (
        (va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1)
    )
    p2 = _student_sf_two_sided(t, df)
    if sides == 2:
        return t, p2
    return t, p2 / 2.0 if t > 0 else 1.0 - p2 / 2.0
