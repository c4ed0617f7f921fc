"""Compiled inner loops for span division.

Both kernels are plain loops over small arrays; numba compiles them when it is
installed, otherwise they run as ordinary Python with identical results.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


@njit(cache=True)
def nms_ranked(starts, ends, phi):
    """Greedy suppression over candidates already sorted by rank; returns kept positions."""
    n = starts.shape[0]
    alive = np.ones(n, dtype=np.bool_)
    out = np.empty(n, dtype=np.int64)
    k = 0
    for i in range(n):
        if not alive[i]:
            continue
        out[k] = i
        k += 1
        a = starts[i]
        b = ends[i]
        la = float(b - a + 1)
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            inter = min(b, ends[j]) + 1 - max(a, starts[j])
            if inter <= 0:
                continue
            i2 = float(inter) * float(inter)
            lb = float(ends[j] - starts[j] + 1)
            if i2 / (la * la + lb * lb - i2) > phi:
                alive[j] = False
    return out[:k]


@njit(cache=True)
def claim_runs(starts, ends, n):
    """Each span in turn takes its longest unclaimed run (leftmost on ties); -1 when nothing is free."""
    claimed = np.zeros(n, dtype=np.bool_)
    rs = np.full(starts.shape[0], -1, dtype=np.int64)
    re = np.full(starts.shape[0], -1, dtype=np.int64)
    for k in range(starts.shape[0]):
        best_len = 0
        best_at = -1
        run = 0
        for t in range(starts[k], ends[k] + 2):
            if t <= ends[k] and not claimed[t]:
                run += 1
            else:
                if run > best_len:
                    best_len = run
                    best_at = t - run
                run = 0
        if best_len > 0:
            rs[k] = best_at
            re[k] = best_at + best_len - 1
            for t in range(best_at, best_at + best_len):
                claimed[t] = True
    return rs, re
