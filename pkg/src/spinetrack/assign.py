"""Optimal bipartite assignment with forbidden cells and threshold gating."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .model import ValidationError


@dataclass(frozen=True, eq=False)
class CostMatrix:
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]
    costs: np.ndarray
    forbidden: np.ndarray = None

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=float).reshape(len(self.row_ids), len(self.col_ids))
        if self.forbidden is None:
            forbidden = np.zeros(costs.shape, dtype=bool)
        else:
            forbidden = np.asarray(self.forbidden, dtype=bool)
        if forbidden.shape != costs.shape:
            raise ValidationError(f"forbidden mask shape {forbidden.shape} != costs shape {costs.shape}")
        if not np.all(np.isfinite(costs[~forbidden])):
            raise ValidationError("non-finite cost in an allowed cell")
        if len(set(self.row_ids)) != len(self.row_ids) or len(set(self.col_ids)) != len(self.col_ids):
            raise ValidationError("duplicate row or column id")
        object.__setattr__(self, "row_ids", tuple(self.row_ids))
        object.__setattr__(self, "col_ids", tuple(self.col_ids))
        object.__setattr__(self, "costs", costs)
        object.__setattr__(self, "forbidden", forbidden)

    @classmethod
    def from_array(cls, costs, row_ids: Sequence[str] | None = None, col_ids: Sequence[str] | None = None):
        """Wrap a plain array; non-finite entries become forbidden cells."""
        costs = np.atleast_2d(np.asarray(costs, dtype=float))
        if costs.size == 0:
            costs = costs.reshape(len(row_ids or ()), len(col_ids or ()))
        n, m = costs.shape
        row_ids = tuple(row_ids) if row_ids is not None else tuple(f"r{i}" for i in range(n))
        col_ids = tuple(col_ids) if col_ids is not None else tuple(f"c{j}" for j in range(m))
        forbidden = ~np.isfinite(costs)
        return cls(row_ids, col_ids, np.where(forbidden, 0.0, costs), forbidden)

    @property
    def shape(self) -> tuple[int, int]:
        return self.costs.shape


@dataclass
class MatchResult:
    pairs: list[tuple[str, str, float]] = field(default_factory=list)
    unmatched_rows: list[str] = field(default_factory=list)
    unmatched_cols: list[str] = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.pairs))

    def as_dict(self) -> dict[str, str]:
        return {r: c for r, c, _ in self.pairs}


def _solve_indices(costs: np.ndarray, forbidden: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-cardinality, minimum-cost matching over allowed cells."""
    n, m = costs.shape
    if n == 0 or m == 0 or forbidden.all():
        return []
    allowed = costs[~forbidden]
    lo, hi = allowed.min(), allowed.max()
    k = min(n, m)
    # a penalty above k * range makes one extra allowed pair always worth more
    # than any cost difference among allowed pairs
    penalty = k * (hi - lo) + 1.0
    work = np.where(forbidden, penalty, costs - lo)
    rows, cols = linear_sum_assignment(work)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if not forbidden[r, c]]


def solve(matrix: CostMatrix) -> MatchResult:
    """Minimum-cost maximum matching; forbidden cells are never matched.

    Rows and columns are ordered by id before solving, so ties between
    equal-cost optima resolve the same way regardless of input order.
    """
    row_order = sorted(range(len(matrix.row_ids)), key=lambda i: matrix.row_ids[i])
    col_order = sorted(range(len(matrix.col_ids)), key=lambda j: matrix.col_ids[j])
    costs = matrix.costs[np.ix_(row_order, col_order)] if row_order and col_order else matrix.costs
    forbidden = matrix.forbidden[np.ix_(row_order, col_order)] if row_order and col_order else matrix.forbidden

    matched = _solve_indices(costs, forbidden)
    pairs = []
    used_rows, used_cols = set(), set()
    for r, c in matched:
        i, j = row_order[r], col_order[c]
        used_rows.add(i)
        used_cols.add(j)
        pairs.append((i, j))
    pairs.sort()
    return MatchResult(
        pairs=[(matrix.row_ids[i], matrix.col_ids[j], float(matrix.costs[i, j])) for i, j in pairs],
        unmatched_rows=[rid for i, rid in enumerate(matrix.row_ids) if i not in used_rows],
        unmatched_cols=[cid for j, cid in enumerate(matrix.col_ids) if j not in used_cols],
    )


def solve_gated(matrix: CostMatrix, threshold: float, mode: str = "post") -> MatchResult:
    """Solve, then discard pairs whose cost is strictly above ``threshold``.

    With ``mode="pre"`` the over-threshold cells are forbidden before solving
    instead, which can yield a different (larger) matching.
    """
    if mode == "pre":
        gated = CostMatrix(
            matrix.row_ids,
            matrix.col_ids,
            matrix.costs,
            matrix.forbidden | (matrix.costs > threshold),
        )
        return solve(gated)
    if mode != "post":
        raise ValueError(f"unknown gate mode {mode!r}")

    result = solve(matrix)
    kept = []
    rows, cols = set(result.unmatched_rows), set(result.unmatched_cols)
    for r, c, cost in result.pairs:
        if cost > threshold:
            rows.add(r)
            cols.add(c)
        else:
            kept.append((r, c, cost))
    return MatchResult(
        pairs=kept,
        unmatched_rows=[r for r in matrix.row_ids if r in rows],
        unmatched_cols=[c for c in matrix.col_ids if c in cols],
    )
