"""Rectangular linear assignment with cost-threshold rejection.

Entries above ``reject_above`` are never matched. Among the remaining
one-to-one matchings the solver first maximizes the number of pairs and then
minimizes their summed cost. Internally this is reduced to an ordinary
min-cost assignment by subtracting a constant larger than any achievable total
from every feasible entry and handed to scipy's rectangular solver.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from segfield.errors import InvalidInputError


@dataclass
class PartialAssignment:
    """One-to-one matching that may leave rows and columns unmatched."""

    pairs: list[tuple[int, int]] = field(default_factory=list)
    unmatched_rows: list[int] = field(default_factory=list)
    unmatched_cols: list[int] = field(default_factory=list)
    total_cost: float = 0.0

    def as_dict(self) -> dict[int, int]:
        return dict(self.pairs)


def _validate(costs: np.ndarray, reject_above: float) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidInputError(f"cost matrix must be 2D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise InvalidInputError("cost matrix contains non-finite entries")
    if c.size and (c.min() < 0.0 or c.max() > 1.0):
        raise InvalidInputError("cost entries must lie in [0, 1]")
    if not (0.0 <= reject_above <= 1.0):
        raise InvalidInputError(f"reject_above must lie in [0, 1], got {reject_above}")
    return c


def solve_assignment(costs, reject_above: float = 0.7) -> PartialAssignment:
    """Maximum-cardinality, minimum-cost matching over entries <= ``reject_above``.

    Args:
        costs: (rows, cols) matrix with entries in [0, 1].
        reject_above: Entries strictly greater than this are forbidden.

    Returns:
        The matching, with pairs sorted by row index.

    Raises:
        InvalidInputError: On non-finite or out-of-range entries.
    """
    c = _validate(costs, reject_above)
    n_rows, n_cols = c.shape
    if n_rows == 0 or n_cols == 0:
        return PartialAssignment([], list(range(n_rows)), list(range(n_cols)), 0.0)

    feasible = c <= reject_above
    # Any single extra pair outweighs every possible cost saving.
    big = float(min(n_rows, n_cols)) + 1.0
    shifted = np.where(feasible, c - big, 0.0)

    rows, cols = linear_sum_assignment(shifted)
    pairs = sorted((int(i), int(j)) for i, j in zip(rows, cols) if feasible[i, j])
    rows_used = {i for i, _ in pairs}
    cols_used = {j for _, j in pairs}
    total = float(sum(c[i, j] for i, j in pairs))
    return PartialAssignment(
        pairs,
        [i for i in range(n_rows) if i not in rows_used],
        [j for j in range(n_cols) if j not in cols_used],
        total,
    )
