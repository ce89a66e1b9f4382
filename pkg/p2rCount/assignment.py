#assignment.py

"""
One-to-one assignment between pixels (rows) and points (columns).

Rows outnumber columns in this application (thousands of pixels, tens to
hundreds of points), so both solvers work on the rectangular matrix
directly and assign every column to a distinct row.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import permutations
from typing import List, Optional, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import MatchMatrix
from .exceptions import AssignmentError, ShapeMismatchError

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_COLUMNS = 7
BRUTE_FORCE_MAX_ROWS = 10


@dataclass(frozen=True)
class CostMatrix:
    """
    ``n x m`` cost matrix with an optional forbidden-entry mask.

    Forbidden entries stand for the infinite costs of region-restricted
    matching; their ``values`` are never used in arithmetic.
    """

    values: np.ndarray
    forbidden: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f"cost matrix must be 2-D, got shape {values.shape}")
        forbidden = self.forbidden
        if forbidden is not None:
            forbidden = np.asarray(forbidden, dtype=bool)
            if forbidden.shape != values.shape:
                raise ShapeMismatchError(
                    f"forbidden mask shape {forbidden.shape} does not match costs {values.shape}"
                )
            values = np.where(forbidden, 0.0, values)
        admissible = ~forbidden if forbidden is not None else np.ones(values.shape, dtype=bool)
        if not np.all(np.isfinite(values[admissible])):
            raise AssignmentError("cost matrix contains non-finite admissible entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "forbidden", forbidden)

    @classmethod
    def masked(cls, values, admissible) -> "CostMatrix":
        return cls(values, forbidden=~np.asarray(admissible, dtype=bool))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def has_forbidden(self) -> bool:
        return self.forbidden is not None and bool(self.forbidden.any())


@dataclass(frozen=True)
class AssignmentResult:
    match: MatchMatrix
    total_cost: float
    pairs: List[Tuple[int, int]]


def assignment_total(cost: CostMatrix, match: MatchMatrix) -> float:
    """Correctly rounded total cost of an assignment, independent of summation order."""
    rows = match.matched_rows()
    return math.fsum(cost.values[rows, match.row_assignment[rows]].tolist())


def _check_solvable(cost: CostMatrix) -> Tuple[int, int]:
    n, m = cost.shape
    if n < m:
        raise AssignmentError(f"assignment needs at least as many rows as columns, got {n}x{m}")
    if cost.has_forbidden:
        raise AssignmentError("assignment solvers accept finite costs only")
    return n, m


def _result(cost: CostMatrix, rows, cols) -> AssignmentResult:
    n, m = cost.shape
    match = MatchMatrix.from_pairs(n, m, rows, cols)
    pairs = sorted(zip((int(r) for r in rows), (int(c) for c in cols)), key=lambda pair: pair[1])
    return AssignmentResult(match=match, total_cost=assignment_total(cost, match), pairs=pairs)


def hungarian_assign(cost: CostMatrix) -> AssignmentResult:
    """
    Minimum-cost assignment of every column to a distinct row.

    Uses the rectangular shortest-augmenting-path Hungarian solver from
    scipy, O(n*m^2) for an n x m matrix with n >= m.
    """
    n, m = _check_solvable(cost)
    if m == 0:
        return _result(cost, [], [])
    rows, cols = linear_sum_assignment(cost.values)
    logger.debug("hungarian assignment on %dx%d matrix", n, m)
    return _result(cost, rows, cols)


@lru_cache(maxsize=None)
def _selections(n: int, m: int) -> np.ndarray:
    """All ordered selections of m distinct rows out of n, one per row of the result."""
    return np.array(list(permutations(range(n), m)), dtype=np.int16).reshape(-1, m)


def brute_force_assign(cost: CostMatrix) -> AssignmentResult:
    """Exhaustive oracle over every ordered selection of m distinct rows."""
    n, m = _check_solvable(cost)
    if m > BRUTE_FORCE_MAX_COLUMNS or n > BRUTE_FORCE_MAX_ROWS:
        raise AssignmentError(
            f"brute force limited to {BRUTE_FORCE_MAX_ROWS}x{BRUTE_FORCE_MAX_COLUMNS}, got {n}x{m}"
        )
    if m == 0:
        return _result(cost, [], [])
    selections = _selections(n, m)
    totals = cost.values[selections, np.arange(m)].sum(axis=1)
    best = selections[int(np.argmin(totals))]
    return _result(cost, best, np.arange(m))
