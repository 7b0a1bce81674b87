"""Hot numeric kernels: numba-jitted fast paths with pure-numpy fallbacks.

The backend is fixed once at import time from the ``SELFLABEL_BACKEND``
environment variable:

* ``numba``  - force the jitted path (ImportError if numba is missing)
* ``numpy``  - force the pure-numpy fallback
* unset / ``auto`` - use numba when it is importable, numpy otherwise

Both implementations of every kernel stay importable (``*_numpy`` /
``*_numba``) so the benchmark script can time them side by side. The two
backends agree to floating-point roundoff but are not bitwise identical
(different summation orders); all determinism contracts in this package hold
within a single backend.
"""

from __future__ import annotations

import os

import numpy as np

_INT_INF = np.iinfo(np.int64).max // 4

_requested = os.environ.get("SELFLABEL_BACKEND", "auto").strip().lower()
if _requested not in ("", "auto", "numba", "numpy"):
    raise ValueError(
        f"SELFLABEL_BACKEND={_requested!r} not recognized (use numba, numpy or auto)"
    )

if _requested == "numpy":
    HAVE_NUMBA = False
else:
    try:
        from numba import njit

        HAVE_NUMBA = True
    except ImportError:
        if _requested == "numba":
            raise ImportError("SELFLABEL_BACKEND=numba but numba is not installed")
        HAVE_NUMBA = False


def active_backend() -> str:
    """Name of the kernel backend selected at import time."""
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# nearest-centroid assignment (the k-means inner loop)
# ---------------------------------------------------------------------------


def assign_points_numpy(x: np.ndarray, centroids: np.ndarray):
    """Nearest centroid per row of ``x``.

    Returns ``(labels, mind2)`` where ``mind2[i]`` is the squared distance of
    row i to its winning centroid. Ties go to the lowest centroid index.
    """
    # ||x-c||^2 expanded around a GEMM; cancellation can leave a tiny negative
    # residue, which is clamped so downstream sums stay nonnegative.
    d2 = (
        (x * x).sum(axis=1)[:, None]
        - 2.0 * (x @ centroids.T)
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    labels = np.argmin(d2, axis=1).astype(np.int64)
    mind2 = np.maximum(d2[np.arange(x.shape[0]), labels], 0.0)
    return labels, mind2


def sq_residuals_numpy(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray):
    """Per-row squared distance to the assigned centroid."""
    diff = x - centroids[labels]
    return (diff * diff).sum(axis=1)


# ---------------------------------------------------------------------------
# Hungarian algorithm, square integer min-cost assignment, O(n^3)
# ---------------------------------------------------------------------------


def hungarian_numpy(cost: np.ndarray) -> np.ndarray:
    """Solve the square min-cost assignment problem exactly.

    ``cost`` must be an int64 matrix. Returns ``row_for_col`` with
    ``row_for_col[j] = i`` meaning row i is matched to column j. Uses the
    classic potentials-and-slack formulation; all arithmetic is integer, so
    results are exact. Inner slack updates are vectorized over columns.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1, dtype=np.int64)
    v = np.zeros(n + 1, dtype=np.int64)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j] = row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, _INT_INF, dtype=np.int64)
        used = np.zeros(n + 1, dtype=np.bool_)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1, :] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            free_idx = np.nonzero(free)[0]
            j1 = int(free_idx[np.argmin(minv[1:][free_idx])]) + 1
            delta = minv[j1]
            # rows touched so far are distinct, so fancy-index += is safe
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = int(way[j0])
            p[j0] = p[j1]
            j0 = j1
    return p[1:] - 1


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def assign_points_numba(x, centroids):  # pragma: no cover - exercised via dispatch
        n, d = x.shape
        k = centroids.shape[0]
        labels = np.empty(n, dtype=np.int64)
        mind2 = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = 0
            bestd = np.inf
            for c in range(k):
                s = 0.0
                for j in range(d):
                    t = x[i, j] - centroids[c, j]
                    s += t * t
                if s < bestd:
                    bestd = s
                    best = c
            labels[i] = best
            mind2[i] = bestd
        return labels, mind2

    @njit(cache=True, nogil=True)
    def sq_residuals_numba(x, centroids, labels):  # pragma: no cover
        n, d = x.shape
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            s = 0.0
            c = labels[i]
            for j in range(d):
                t = x[i, j] - centroids[c, j]
                s += t * t
            out[i] = s
        return out

    @njit(cache=True, nogil=True)
    def hungarian_numba(cost):  # pragma: no cover
        n = cost.shape[0]
        u = np.zeros(n + 1, dtype=np.int64)
        v = np.zeros(n + 1, dtype=np.int64)
        p = np.zeros(n + 1, dtype=np.int64)
        way = np.zeros(n + 1, dtype=np.int64)
        minv = np.empty(n + 1, dtype=np.int64)
        used = np.empty(n + 1, dtype=np.bool_)
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = _INT_INF
                used[j] = False
            while True:
                used[j0] = True
                i0 = p[j0]
                delta = _INT_INF
                j1 = 0
                for j in range(1, n + 1):
                    if not used[j]:
                        cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                        if cur < minv[j]:
                            minv[j] = cur
                            way[j] = j0
                        if minv[j] < delta:
                            delta = minv[j]
                            j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while j0 != 0:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
        return p[1:] - 1

    assign_points = assign_points_numba
    sq_residuals = sq_residuals_numba
    hungarian_min_cost = hungarian_numba
else:
    assign_points_numba = None
    sq_residuals_numba = None
    hungarian_numba = None

    assign_points = assign_points_numpy
    sq_residuals = sq_residuals_numpy
    hungarian_min_cost = hungarian_numpy
