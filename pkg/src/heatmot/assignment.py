"""Rectangular minimum-cost assignment with infeasible entries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unmatched_rows: list[int]
    unmatched_cols: list[int]
    total_cost: float = 0.0


def hungarian_match(cost: np.ndarray) -> Assignment:
    """Optimal assignment over the finite entries of ``cost``.

    Non-finite entries (``inf``/``nan``) are infeasible. Among all matchings
    using only feasible entries, the result has the largest number of pairs
    and, subject to that, the smallest total cost. Pairs are sorted by row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    n, m = cost.shape
    feasible = np.isfinite(cost)
    if not feasible.any():
        return Assignment([], list(range(n)), list(range(m)))
    vals = cost[feasible]
    # any matching that uses one more feasible pair is cheaper than one that does not
    big = (np.abs(vals).max() + 1.0) * (min(n, m) + 1) * 2.0
    padded = np.where(feasible, cost, big)
    rows, cols = linear_sum_assignment(padded)
    pairs = [(int(r), int(c)) for r, c in zip(rows, cols) if feasible[r, c]]
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_rows=[i for i in range(n) if i not in used_r],
        unmatched_cols=[j for j in range(m) if j not in used_c],
        total_cost=float(sum(cost[r, c] for r, c in pairs)),
    )
