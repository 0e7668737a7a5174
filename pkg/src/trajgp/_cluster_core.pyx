# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled agglomeration kernels: pairwise squared distances and the
nearest-neighbor-chain merge loop for ward / average linkage.

Semantics match trajgp._cluster_core_np exactly; that module is the
pure-Python fallback used when this extension is unavailable.
"""

from libc.math cimport INFINITY, sqrt

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND = "compiled"

METHOD_WARD = 0
METHOD_AVERAGE = 1


def pairwise_sq_matrix(double[:, ::1] x):
    """Dense matrix of squared Euclidean distances, +inf on the diagonal."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m = x.shape[1]
    out_arr = np.empty((n, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc, diff
    for i in range(n):
        out[i, i] = INFINITY
        for j in range(i + 1, n):
            acc = 0.0
            for k in range(m):
                diff = x[i, k] - x[j, k]
                acc += diff * diff
            out[i, j] = acc
            out[j, i] = acc
    return out_arr


def nn_chain(double[:, ::1] dist, int method):
    """Agglomerate via the nearest-neighbor chain on a working measure matrix.

    ``dist`` holds squared distances for ward and plain distances for average
    linkage (diagonal +inf); it is consumed in place.  Returns an
    (n-1, 4) array of rows [slot_x, slot_y, height, new_size] in discovery
    order, where slots are original point indices representing their current
    clusters.  Ward heights are square roots of the merge measure.
    """
    cdef Py_ssize_t n = dist.shape[0]
    merges_arr = np.empty((max(n - 1, 0), 4), dtype=np.float64)
    cdef double[:, ::1] merges = merges_arr
    if n <= 1:
        return merges_arr

    size_arr = np.ones(n, dtype=np.intp)
    cdef Py_ssize_t[::1] size = size_arr
    active_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] active = active_arr
    chain_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] chain = chain_arr

    cdef Py_ssize_t chain_len = 0, n_merges = 0
    cdef Py_ssize_t x, y, z, prev, keep, gone
    cdef double dmin, dxy, sx, sy, sz, total, height

    while n_merges < n - 1:
        if chain_len == 0:
            for z in range(n):
                if active[z]:
                    chain[0] = z
                    chain_len = 1
                    break
        while True:
            x = chain[chain_len - 1]
            prev = chain[chain_len - 2] if chain_len > 1 else -1
            if prev >= 0:
                y = prev
                dmin = dist[x, prev]
            else:
                y = -1
                dmin = INFINITY
            for z in range(n):
                if active[z] and z != x and dist[x, z] < dmin:
                    dmin = dist[x, z]
                    y = z
            if y == prev and prev >= 0:
                chain_len -= 2
                break
            chain[chain_len] = y
            chain_len += 1

        # Merge clusters at slots x and y into slot min(x, y).
        keep = x if x < y else y
        gone = y if x < y else x
        dxy = dist[x, y]
        sx = <double> size[x]
        sy = <double> size[y]
        height = sqrt(dxy) if method == METHOD_WARD else dxy
        merges[n_merges, 0] = <double> x
        merges[n_merges, 1] = <double> y
        merges[n_merges, 2] = height
        merges[n_merges, 3] = sx + sy

        for z in range(n):
            if not active[z] or z == x or z == y:
                continue
            sz = <double> size[z]
            if method == METHOD_WARD:
                total = sx + sy + sz
                dmin = ((sx + sz) * dist[x, z] + (sy + sz) * dist[y, z]
                        - sz * dxy) / total
            else:
                dmin = (sx * dist[x, z] + sy * dist[y, z]) / (sx + sy)
            dist[keep, z] = dmin
            dist[z, keep] = dmin
        active[gone] = 0
        dist[keep, keep] = INFINITY
        size[keep] = size[x] + size[y]
        n_merges += 1

    return merges_arr
