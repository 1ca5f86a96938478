"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``SIESTA_NUMBA=0`` to force
the numpy path (also used automatically when numba cannot be imported).
Both paths compute squared distances as a plain per-coordinate sum of
squared differences, so they agree on argmin except for exact ties.
"""
import os

import numpy as np

_WANT_NUMBA = os.environ.get("SIESTA_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")

try:
    if not _WANT_NUMBA:
        raise ImportError("numba disabled by SIESTA_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

# rows per chunk for the numpy path; bounds the (chunk, k, dim) temporary
_CHUNK = 2048


# ---------------------------------------------------------------- numpy path

def nearest_centroid_numpy(x, centroids):
    """Index of and squared distance to the nearest centroid for each row of ``x``."""
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    dist = np.empty(n, dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        diff = x[lo:hi, None, :] - centroids[None, :, :]
        d2 = np.einsum("nkd,nkd->nk", diff, diff)
        j = np.argmin(d2, axis=1)
        idx[lo:hi] = j
        dist[lo:hi] = d2[np.arange(hi - lo), j]
    return idx, dist


def pq_encode_numpy(x, codebooks):
    n_books, _, sub = codebooks.shape
    codes = np.empty((x.shape[0], n_books), dtype=np.uint8)
    for m in range(n_books):
        codes[:, m], _ = nearest_centroid_numpy(
            np.ascontiguousarray(x[:, m * sub:(m + 1) * sub]), codebooks[m])
    return codes


def pq_decode_numpy(codes, codebooks):
    n_books, _, sub = codebooks.shape
    out = np.empty((codes.shape[0], n_books * sub), dtype=np.float64)
    for m in range(n_books):
        out[:, m * sub:(m + 1) * sub] = codebooks[m][codes[:, m]]
    return out


def min_sq_dist_update_numpy(x, c, d2):
    """d2 <- min(d2, |x - c|^2) row-wise, in place."""
    diff = x - c
    np.minimum(d2, np.einsum("nd,nd->n", diff, diff), out=d2)
    return d2


def lloyd_update_numpy(x, labels, k):
    """Cluster sums and counts for a Lloyd centroid update."""
    counts = np.bincount(labels, minlength=k).astype(np.int64)
    sums = np.zeros((k, x.shape[1]), dtype=np.float64)
    np.add.at(sums, labels, x)
    return sums, counts


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def nearest_centroid_numba(x, centroids):
        n, dim = x.shape
        k = centroids.shape[0]
        idx = np.empty(n, dtype=np.int64)
        dist = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = np.inf
            bj = 0
            for j in range(k):
                s = 0.0
                for t in range(dim):
                    diff = x[i, t] - centroids[j, t]
                    s += diff * diff
                if s < best:
                    best = s
                    bj = j
            idx[i] = bj
            dist[i] = best
        return idx, dist

    @njit(cache=True)
    def pq_encode_numba(x, codebooks):
        n = x.shape[0]
        n_books, k, sub = codebooks.shape
        codes = np.empty((n, n_books), dtype=np.uint8)
        for i in range(n):
            for m in range(n_books):
                off = m * sub
                best = np.inf
                bj = 0
                for j in range(k):
                    s = 0.0
                    for t in range(sub):
                        diff = x[i, off + t] - codebooks[m, j, t]
                        s += diff * diff
                    if s < best:
                        best = s
                        bj = j
                codes[i, m] = bj
        return codes

    @njit(cache=True)
    def pq_decode_numba(codes, codebooks):
        n = codes.shape[0]
        n_books, _, sub = codebooks.shape
        out = np.empty((n, n_books * sub), dtype=np.float64)
        for i in range(n):
            for m in range(n_books):
                c = codes[i, m]
                for t in range(sub):
                    out[i, m * sub + t] = codebooks[m, c, t]
        return out

    @njit(cache=True)
    def min_sq_dist_update_numba(x, c, d2):
        n, dim = x.shape
        for i in range(n):
            s = 0.0
            for t in range(dim):
                diff = x[i, t] - c[t]
                s += diff * diff
            if s < d2[i]:
                d2[i] = s
        return d2

    @njit(cache=True)
    def lloyd_update_numba(x, labels, k):
        n, dim = x.shape
        sums = np.zeros((k, dim), dtype=np.float64)
        counts = np.zeros(k, dtype=np.int64)
        for i in range(n):
            c = labels[i]
            counts[c] += 1
            for t in range(dim):
                sums[c, t] += x[i, t]
        return sums, counts


# ---------------------------------------------------------------- dispatch

def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def nearest_centroid(x, centroids):
    x, centroids = _f64(x), _f64(centroids)
    if HAVE_NUMBA:
        return nearest_centroid_numba(x, centroids)
    return nearest_centroid_numpy(x, centroids)


def pq_encode(x, codebooks):
    """Per-subspace nearest-centroid codes, shape (n, n_codebooks), uint8."""
    x, codebooks = _f64(x), _f64(codebooks)
    if HAVE_NUMBA:
        return pq_encode_numba(x, codebooks)
    return pq_encode_numpy(x, codebooks)


def pq_decode(codes, codebooks):
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    codebooks = _f64(codebooks)
    if HAVE_NUMBA:
        return pq_decode_numba(codes, codebooks)
    return pq_decode_numpy(codes, codebooks)


def min_sq_dist_update(x, c, d2):
    x, c = _f64(x), _f64(c)
    if HAVE_NUMBA:
        return min_sq_dist_update_numba(x, c, d2)
    return min_sq_dist_update_numpy(x, c, d2)


def lloyd_update(x, labels, k):
    x = _f64(x)
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    if HAVE_NUMBA:
        return lloyd_update_numba(x, labels, k)
    return lloyd_update_numpy(x, labels, k)
