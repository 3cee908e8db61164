"""Compiled dynamic-programming kernels for DTW."""

import numba
import numpy as np


@numba.njit(cache=True)
def accumulate(cost):
    """Accumulated cost of the cheapest monotone continuous path to each cell."""
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, 0] = cost[0, 0]
    for j in range(1, m):
        acc[0, j] = acc[0, j - 1] + cost[0, j]
    for i in range(1, n):
        acc[i, 0] = acc[i - 1, 0] + cost[i, 0]
        for j in range(1, m):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = best + cost[i, j]
    return acc


@numba.njit(cache=True)
def backtrack(acc):
    """Walk back from the last cell.

    Ties between predecessors resolve diagonal first, then the step that
    advanced the reference index, then the step that advanced the target.
    """
    n, m = acc.shape
    i, j = n - 1, m - 1
    ri = np.empty(n + m - 1, dtype=np.int64)
    ti = np.empty(n + m - 1, dtype=np.int64)
    p = 0
    ri[p] = i
    ti[p] = j
    while i > 0 or j > 0:
        if i == 0:
            j -= 1
        elif j == 0:
            i -= 1
        else:
            d = acc[i - 1, j - 1]
            r = acc[i - 1, j]
            t = acc[i, j - 1]
            if d <= r and d <= t:
                i -= 1
                j -= 1
            elif r <= t:
                i -= 1
            else:
                j -= 1
        p += 1
        ri[p] = i
        ti[p] = j
    return ri[: p + 1][::-1].copy(), ti[: p + 1][::-1].copy()
