"""Minimum-cost one-to-one assignment of ground truths to queries."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError


@dataclass(frozen=True)
class MatchResult:
    gt_indices: np.ndarray     # [G] ground-truth rows, ascending
    query_indices: np.ndarray  # [G] matched query column per row
    total_cost: float

    def as_dict(self) -> dict[int, int]:
        return {int(g): int(q) for g, q in zip(self.gt_indices, self.query_indices)}


def _solve(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shortest augmenting path Hungarian method for n rows <= m columns.

    Returns the column of every row and the row/column potentials.
    """
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)    # p[j]: row (1-based) owning column j, 0 if free
    way = np.zeros(m + 1, dtype=np.intp)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0] - u[i0] - v
            free = ~used
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            cand[0] = inf
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign, u[1:], v[1:]


def _total(cost: np.ndarray, assign: np.ndarray) -> float:
    total = 0.0
    for g, q in enumerate(assign):
        total += float(cost[g, q])
    return total


def _has_alternative(cost: np.ndarray, assign: np.ndarray, u: np.ndarray, v: np.ndarray, tol: float) -> bool:
    reduced = cost - u[:, None] - v[None, :]
    tight = np.abs(reduced) <= tol
    tight[np.arange(len(assign)), assign] = False
    return bool(tight.any())


def hungarian_match(cost) -> MatchResult:
    """Minimum-total-cost injective map from rows (ground truths) to columns (queries).

    Among equally cheap assignments the lexicographically smallest column
    sequence (in ground-truth order) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost must be 2-d, got shape {cost.shape}")
    G, Q = cost.shape
    if G > Q:
        raise ContractError(f"more ground truths ({G}) than queries ({Q})")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")
    if G == 0:
        return MatchResult(np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), 0.0)
    assign, u, v = _solve(cost)
    best = _total(cost, assign)
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-12 * scale * G
    if _has_alternative(cost, assign, u, v, 1e-9 * scale):
        assign = _lexicographic(cost, best, tol)
        best = _total(cost, assign)
    return MatchResult(np.arange(G), assign, best)


def _lexicographic(cost: np.ndarray, best: float, tol: float) -> np.ndarray:
    """Fix rows in order to the smallest column that still admits an optimal completion."""
    G, Q = cost.shape
    fixed: list[int] = []
    for g in range(G):
        taken = set(fixed)
        for q in range(Q):
            if q in taken:
                continue
            head = float(np.sum([cost[r, c] for r, c in enumerate(fixed)])) + cost[g, q]
            rest_rows = list(range(g + 1, G))
            if rest_rows:
                cols = [c for c in range(Q) if c not in taken and c != q]
                sub = cost[np.ix_(rest_rows, cols)]
                sub_assign, _, _ = _solve(sub)
                head += _total(sub, sub_assign)
            if head <= best + tol:
                fixed.append(q)
                break
    return np.asarray(fixed, dtype=np.intp)


def brute_force_match(cost) -> tuple[np.ndarray, float]:
    """Exhaustive minimum over all injective assignments (reference oracle)."""
    from itertools import permutations

    cost = np.asarray(cost, dtype=np.float64)
    G, Q = cost.shape
    best, best_assign = np.inf, None
    for perm in permutations(range(Q), G):
        total = 0.0
        for g, q in enumerate(perm):
            total += float(cost[g, q])
        if total < best:
            best, best_assign = total, perm
    return np.asarray(best_assign, dtype=np.intp), best
