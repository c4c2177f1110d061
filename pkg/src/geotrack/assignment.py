"""Optimal assignment on score matrices (maximization form).

Wraps the shortest-augmenting-path kernel from ``_kernels`` and adds the
tie rule used throughout the package: among assignments with exactly equal
total score, the lexicographically smallest (row, column) pairing wins.
Tie resolution only ever triggers on exact score ties (certified through
zero reduced costs), so the common case stays a single O(k^3) solve.
"""

from dataclasses import dataclass, field

import numpy as np

from ._kernels import solve_lap_min
from .errors import InfeasibleAssignmentError

__all__ = ["AssignmentResult", "solve_max", "hungarian"]


@dataclass
class AssignmentResult:
    """Partition of tracks and detections produced by one assignment."""

    matches: list = field(default_factory=list)  # (track_index, detection_index)
    unmatched_tracks: list = field(default_factory=list)
    unmatched_detections: list = field(default_factory=list)
    total_score: float = 0.0


def _total(score, assign):
    m = assign.shape[0]
    if m == 0:
        return 0.0
    return float(np.sum(score[np.arange(m), assign]))


def _lex_refine(score, cost, assign, u, v):
    """Swap toward the lexicographically smallest exactly-tied assignment."""
    m, n_cols = cost.shape
    best_total = _total(score, assign)
    assign = assign.copy()
    fixed = set()
    for i in range(m):
        for j in range(int(assign[i])):
            if j in fixed:
                continue
            if score[i, j] == -np.inf:
                continue
            if cost[i, j] - u[i] - v[j] != 0.0:
                continue
            rest_rows = list(range(i + 1, m))
            sub_cols = [c for c in range(n_cols) if c != j and c not in fixed]
            candidate = assign.copy()
            candidate[i] = j
            if rest_rows:
                try:
                    sub_assign, _, _ = solve_lap_min(cost[np.ix_(rest_rows, sub_cols)])
                except ValueError:
                    continue
                for r, c_idx in zip(rest_rows, sub_assign):
                    candidate[r] = sub_cols[c_idx]
            if _total(score, candidate) == best_total:
                assign = candidate
                break
        fixed.add(int(assign[i]))
    return assign


def solve_max(score):
    """Maximize the total score of a complete row assignment.

    ``score`` is (m, n_cols) with m <= n_cols; -inf marks forbidden pairs.
    Returns (col4row, total_score).
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise InfeasibleAssignmentError("score matrix must be 2-D")
    m, n_cols = score.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    if m > n_cols:
        raise InfeasibleAssignmentError(
            f"{m} rows cannot all be assigned among {n_cols} columns"
        )
    if np.isnan(score).any() or (score == np.inf).any():
        raise InfeasibleAssignmentError("scores must be finite or -inf")
    cost = -score
    try:
        col4row, u, v = solve_lap_min(cost)
    except ValueError as exc:
        raise InfeasibleAssignmentError(str(exc)) from exc
    if not np.isfinite(score[np.arange(m), col4row]).all():
        raise InfeasibleAssignmentError("only forbidden entries available")
    col4row = _lex_refine(score, cost, col4row, u, v)
    return col4row, _total(score, col4row)


def hungarian(score):
    """Assignment over a tracking score matrix of shape (m, n + m).

    Columns 0..n-1 are detections, column n+i is the null option of track
    i. Rows matched to a null column become unmatched tracks; detection
    columns that no row takes become unmatched detections.
    """
    score = np.asarray(score, dtype=np.float64)
    m = score.shape[0] if score.ndim == 2 else 0
    if score.ndim != 2 or score.shape[1] < m:
        raise InfeasibleAssignmentError(
            f"tracking score matrix must be (m, n + m); got {score.shape}"
        )
    n = score.shape[1] - m
    col4row, total = solve_max(score) if m else (np.zeros(0, dtype=np.int64), 0.0)
    result = AssignmentResult(total_score=total)
    taken = set()
    for i in range(m):
        j = int(col4row[i])
        if j < n:
            result.matches.append((i, j))
            taken.add(j)
        else:
            result.unmatched_tracks.append(i)
    result.unmatched_detections = [j for j in range(n) if j not in taken]
    return result
