"""Hungarian algorithm (shortest augmenting path with potentials), O(n^3)."""

from __future__ import annotations

import numpy as np

from ..errors import SchemaError


def linear_sum_assignment(cost) -> np.ndarray:
    """Return ``perm`` minimizing ``sum(cost[j, perm[j]])`` for a square cost."""
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise SchemaError(f"cost must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise SchemaError("cost matrix must be finite")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=int)

    inf = np.inf
    # 1-based bookkeeping; index 0 is the virtual start column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[col] = row matched to col
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cols = np.nonzero(free)[0] + 1
            cur = c[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            k = int(np.argmin(minv[cols]))
            j1 = int(cols[k])
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[cols] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1

    perm = np.zeros(n, dtype=int)
    for j in range(1, n + 1):
        perm[owner[j] - 1] = j - 1
    return perm
