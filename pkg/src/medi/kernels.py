"""Hot numeric kernels: Lloyd iterations and top-k index-set comparison.

Each kernel has a numba ``@njit`` build and a pure-numpy twin with identical
semantics (nearest-centroid ties to the lowest index, deterministic
farthest-point reseeding of empty clusters). Setting the environment
variable ``MEDI_NO_NUMBA=1`` selects the numpy path; ``backend_name()``
reports which one is active so runs can record it.

fastmath stays off: replayed runs must be bitwise reproducible.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("MEDI_NO_NUMBA", "") not in ("", "0")

if not _DISABLED:
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is a declared dependency
        _DISABLED = True

USE_NUMBA = not _DISABLED


def backend_name():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# Lloyd k-means iterations
# ---------------------------------------------------------------------------

def _lloyd_np(X, centroids, max_iter):
    n, _ = X.shape
    k = centroids.shape[0]
    C = centroids.copy()
    labels = np.full(n, -1, dtype=np.int64)
    iters = 0
    for _ in range(max_iter):
        iters += 1
        d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        # reseed each empty cluster with the point farthest from its centroid
        for j in range(k):
            if not np.any(new_labels == j):
                worst = int(np.argmax(d2[np.arange(n), new_labels]))
                C[j] = X[worst]
                new_labels[worst] = j
                d2[:, j] = ((X - C[j]) ** 2).sum(axis=1)
        changed = not np.array_equal(new_labels, labels)
        labels = new_labels
        for j in range(k):
            members = labels == j
            if np.any(members):
                C[j] = X[members].mean(axis=0)
        if not changed:
            break
    d2 = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(n), labels].sum())
    return labels.astype(np.int64), C, inertia, iters


if USE_NUMBA:

    @njit(cache=True)
    def _lloyd_nb(X, centroids, max_iter):  # pragma: no cover - jit body
        n, dim = X.shape
        k = centroids.shape[0]
        C = centroids.copy()
        labels = np.full(n, -1, dtype=np.int64)
        new_labels = np.empty(n, dtype=np.int64)
        best_d = np.empty(n)
        iters = 0
        for _ in range(max_iter):
            iters += 1
            for i in range(n):
                bj = 0
                bd = 0.0
                for d in range(dim):
                    diff = X[i, d] - C[0, d]
                    bd += diff * diff
                for j in range(1, k):
                    dist = 0.0
                    for d in range(dim):
                        diff = X[i, d] - C[j, d]
                        dist += diff * diff
                    if dist < bd:
                        bd = dist
                        bj = j
                new_labels[i] = bj
                best_d[i] = bd
            for j in range(k):
                count = 0
                for i in range(n):
                    if new_labels[i] == j:
                        count += 1
                if count == 0:
                    worst = 0
                    wd = best_d[0]
                    for i in range(1, n):
                        if best_d[i] > wd:
                            wd = best_d[i]
                            worst = i
                    for d in range(dim):
                        C[j, d] = X[worst, d]
                    new_labels[worst] = j
                    best_d[worst] = 0.0
            changed = False
            for i in range(n):
                if new_labels[i] != labels[i]:
                    changed = True
                labels[i] = new_labels[i]
            for j in range(k):
                count = 0
                for d in range(dim):
                    C[j, d] = 0.0
                for i in range(n):
                    if labels[i] == j:
                        count += 1
                        for d in range(dim):
                            C[j, d] += X[i, d]
                if count > 0:
                    for d in range(dim):
                        C[j, d] /= count
            if not changed:
                break
        inertia = 0.0
        for i in range(n):
            bj = 0
            bd = 0.0
            for d in range(dim):
                diff = X[i, d] - C[0, d]
                bd += diff * diff
            for j in range(1, k):
                dist = 0.0
                for d in range(dim):
                    diff = X[i, d] - C[j, d]
                    dist += diff * diff
                if dist < bd:
                    bd = dist
                    bj = j
            labels[i] = bj
            inertia += bd
        return labels, C, inertia, iters


def lloyd(X, init_centroids, max_iter=300):
    """Run Lloyd iterations from given centroids.

    Returns (labels, centroids, inertia, iterations).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    C0 = np.ascontiguousarray(init_centroids, dtype=np.float64)
    if USE_NUMBA:
        return _lloyd_nb(X, C0, max_iter)
    return _lloyd_np(X, C0, max_iter)


# ---------------------------------------------------------------------------
# Pairwise equality of top-k index sets
# ---------------------------------------------------------------------------

def _pair_rows_equal_np(sets):
    return np.all(sets[:, None, :] == sets[None, :, :], axis=2).astype(np.uint8)


if USE_NUMBA:

    @njit(cache=True)
    def _pair_rows_equal_nb(sets):  # pragma: no cover - jit body
        n, k = sets.shape
        out = np.zeros((n, n), dtype=np.uint8)
        for i in range(n):
            out[i, i] = 1
            for j in range(i + 1, n):
                same = True
                for t in range(k):
                    if sets[i, t] != sets[j, t]:
                        same = False
                        break
                if same:
                    out[i, j] = 1
                    out[j, i] = 1
        return out


def pair_rows_equal(sets):
    """uint8 (N, N) matrix: 1 where two rows of ``sets`` are identical."""
    sets = np.ascontiguousarray(sets, dtype=np.int64)
    if USE_NUMBA:
        return _pair_rows_equal_nb(sets)
    return _pair_rows_equal_np(sets)
