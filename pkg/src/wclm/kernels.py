"""Hot inner-loop kernels with a numba fast path and a pure-Python fallback.

The jitted versions are selected by default. Setting ``WCLM_NO_NUMBA=1`` in
the environment (or running without numba installed) selects the fallbacks.
Both backends implement identical integer arithmetic, so backend choice never
changes results, only speed; ``benchmarks/bench_kernels.py`` compares them.
"""

import os

import numpy as np

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "levenshtein",
    "kendall_counts",
    "merge_pair",
    "py_levenshtein",
    "py_kendall_counts",
    "py_merge_pair",
]


def py_levenshtein(a: np.ndarray, b: np.ndarray) -> int:
    """Edit distance between two int sequences (two-row DP)."""
    n, m = a.size, b.size
    if n == 0:
        return m
    if m == 0:
        return n
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            best = prev[j] + 1
            if cur[j - 1] + 1 < best:
                best = cur[j - 1] + 1
            if prev[j - 1] + cost < best:
                best = prev[j - 1] + cost
            cur[j] = best
        prev, cur = cur, prev
    return int(prev[m])


def py_kendall_counts(x: np.ndarray, y: np.ndarray) -> tuple[int, int, int, int]:
    """Pair counts for tau-b: (concordant, discordant, ties in x, ties in y).

    Pairs tied in both vectors count toward both tie totals.
    """
    n = x.size
    conc = disc = ties_x = ties_y = 0
    for i in range(n):
        for j in range(i + 1, n):
            dx = x[i] - x[j]
            dy = y[i] - y[j]
            if dx == 0.0:
                ties_x += 1
            if dy == 0.0:
                ties_y += 1
            if dx != 0.0 and dy != 0.0:
                if dx * dy > 0.0:
                    conc += 1
                else:
                    disc += 1
    return conc, disc, ties_x, ties_y


def py_merge_pair(ids: np.ndarray, left: int, right: int, new_id: int) -> np.ndarray:
    """Replace non-overlapping (left, right) adjacencies left-to-right."""
    n = ids.size
    out = np.empty(n, dtype=np.int64)
    i = 0
    k = 0
    while i < n:
        if i + 1 < n and ids[i] == left and ids[i + 1] == right:
            out[k] = new_id
            i += 2
        else:
            out[k] = ids[i]
            i += 1
        k += 1
    return out[:k].copy()


_want_numba = os.environ.get("WCLM_NO_NUMBA", "") != "1"
HAS_NUMBA = False

if _want_numba:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

if HAS_NUMBA:
    levenshtein = njit(cache=True)(py_levenshtein)
    kendall_counts = njit(cache=True)(py_kendall_counts)
    merge_pair = njit(cache=True)(py_merge_pair)
else:
    levenshtein = py_levenshtein
    kendall_counts = py_kendall_counts
    merge_pair = py_merge_pair

BACKEND = "numba" if HAS_NUMBA else "python"
