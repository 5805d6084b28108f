"""Independent oracles used by the test suite.

Everything here is deliberately written without importing the package under
test: plain fractions/stdlib arithmetic that the tests trust as ground truth.
"""

from __future__ import annotations

import math
from fractions import Fraction

TOLERANCE = Fraction(1, 10**6)


def rational_equivalent(
    a_value: Fraction,
    b_value: Fraction,
    a_inexact: bool,
    b_inexact: bool,
) -> bool:
    """Exact-rational comparator with the declared decimal tolerance rule.

    Exact vs exact compares exactly. A decimal (inexact) side is accepted
    within 1e-6 relative to the exact side's magnitude (floored at 1); two
    inexact sides use the larger magnitude.
    """
    if not a_inexact and not b_inexact:
        return a_value == b_value
    if a_inexact and b_inexact:
        scale = max(Fraction(1), abs(a_value), abs(b_value))
    else:
        exact = b_value if a_inexact else a_value
        scale = max(Fraction(1), abs(exact))
    return abs(a_value - b_value) <= TOLERANCE * scale


def binomial_pmf(n: int, p: float, k: int) -> float:
    return math.comb(n, k) * (p**k) * ((1.0 - p) ** (n - k))


def binomial_tail_at_least(n: int, p: float, k: int) -> float:
    """P[Binomial(n, p) >= k]."""
    return sum(binomial_pmf(n, p, i) for i in range(k, n + 1))


def binomial_sigma(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 1e-12) / n)


def pass_at_k_closed_form(p: float, k: int) -> float:
    """Mean of "any of K i.i.d. Bernoulli(p) trials succeeds"."""
    return 1.0 - (1.0 - p) ** k


def schedule_success_closed_form(p: float, attempts: int) -> float:
    """P[at least one success in `attempts` independent tries at rate p]."""
    return 1.0 - (1.0 - p) ** attempts


def single_round_accuracy_closed_form(
    a: float, d_correct: float, d_flaw: float, h: float, p_keep: float
) -> float:
    """Accuracy of one critique+refinement round over an i.i.d. actor."""
    return a * (d_correct + (1.0 - d_correct) * p_keep) + (1.0 - a) * d_flaw * h


def per_query_solution_rate(p: float, n_samples: int, l_critiques: int, d: float, h: float) -> float:
    """Expected correct solutions per query under flag-gated critique+refine.

    Each of the N samples is correct w.p. p; each incorrect sample receives
    L critiques, each flagged w.p. d and then fixed w.p. h.
    """
    return n_samples * (p + (1.0 - p) * l_critiques * d * h)


def coverage_closed_form(p_effective: float, n_samples: int) -> float:
    """P[>= 1 correct solution for a query] with per-sample success p_effective."""
    return 1.0 - (1.0 - p_effective) ** n_samples


def vote_margin_distribution(n: int, p_win: float, p_lose: float):
    """Exact distribution of (#win - #lose) over n trials, third outcome absorbs the rest.

    Returns a list indexed by margin+n with P[margin = idx-n]. Uses numpy
    convolution; n=1000 is instant.
    """
    import numpy as np

    p_other = 1.0 - p_win - p_lose
    if p_other < -1e-12:
        raise ValueError("p_win + p_lose > 1")
    kernel = np.array([p_lose, max(p_other, 0.0), p_win], dtype=np.float64)
    dist = np.array([1.0], dtype=np.float64)
    for _ in range(n):
        dist = np.convolve(dist, kernel)
    return dist


def prob_strictly_ahead(n: int, p_win: float, p_lose: float) -> float:
    """P[#win > #lose] among n multinomial trials (exact, via margin DP)."""
    dist = vote_margin_distribution(n, p_win, p_lose)
    # margin m stored at index m + n
    return float(dist[n + 1 :].sum())
