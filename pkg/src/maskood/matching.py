"""Minimum-cost bipartite assignment with a deterministic tie-break."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MatchResult:
    assignment: tuple  # assignment[row] = column
    total_cost: float


def _solve(cost: list[list[float]]):
    """Shortest-augmenting-path Hungarian method on a square matrix.

    Returns (row -> column, row potentials u, column potentials v) with
    cost[i][j] - u[i] - v[j] >= 0 and equality on the matched edges.
    """
    n = len(cost)
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    match_col = [0] * (n + 1)  # column j -> row (1-based; 0 = free)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while True:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = [0] * n
    for j in range(1, n + 1):
        assign[match_col[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _lexicographic(assign, tight):
    """Lexicographically smallest perfect matching inside the tight-edge graph."""
    n = len(assign)
    row_of = [0] * n
    for r, c in enumerate(assign):
        row_of[c] = r
    assign = list(assign)

    def augment(r, banned_rows, seen, target_col):
        # find an alternating path from row r to target_col among unfixed rows
        for c in tight[r]:
            if c in seen:
                continue
            seen.add(c)
            if c == target_col:
                return [(r, c)]
            r2 = row_of[c]
            if r2 in banned_rows:
                continue
            path = augment(r2, banned_rows, seen, target_col)
            if path is not None:
                return [(r, c)] + path
        return None

    fixed: set[int] = set()
    for i in range(n):
        fixed.add(i)
        for j in tight[i]:
            if j == assign[i]:
                break
            if row_of[j] in fixed:
                continue
            # give j to i; the displaced row must reach assign[i]
            r = row_of[j]
            path = augment(r, fixed, {j}, assign[i])
            if path is None:
                continue
            freed = assign[i]
            assign[i], row_of[j] = j, i
            for pr, pc in path:
                assign[pr] = pc
                row_of[pc] = pr
            assert row_of[freed] != i
            break
    return assign


def hungarian_match(cost) -> MatchResult:
    """Optimal assignment of rows to columns of a square cost matrix.

    Among optimal assignments the lexicographically smallest (by column of
    row 0, then row 1, ...) is returned.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost must be square, got {c.shape}")
    if not np.isfinite(c).all():
        raise ValueError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return MatchResult((), 0.0)
    rows = c.tolist()
    assign, u, v = _solve(rows)
    tol = 1e-9 * max(1.0, float(np.abs(c).max()))
    reduced = c - np.asarray(u)[:, None] - np.asarray(v)[None, :]
    tight = [sorted(np.nonzero(reduced[i] <= tol)[0].tolist()) for i in range(n)]
    for i in range(n):
        if assign[i] not in tight[i]:
            tight[i] = sorted(tight[i] + [assign[i]])
    assign = _lexicographic(assign, tight)
    total = float(sum(c[i, assign[i]] for i in range(n)))
    return MatchResult(tuple(assign), total)
