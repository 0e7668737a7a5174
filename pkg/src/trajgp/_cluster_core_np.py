"""Pure-numpy fallback for the compiled agglomeration kernels.

Implements the identical nearest-neighbor-chain algorithm and Lance-Williams
updates as trajgp._cluster_core, with row-vectorized scans instead of C
loops.  Selected at import time when the extension is missing or when
TRAJGP_CLUSTER_BACKEND=python is set.
"""

from __future__ import annotations

import numpy as np

BACKEND = "python"

METHOD_WARD = 0
METHOD_AVERAGE = 1


def pairwise_sq_matrix(x: np.ndarray) -> np.ndarray:
    """Dense matrix of squared Euclidean distances, +inf on the diagonal."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    sq = np.sum(x * x, axis=1)
    out = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(out, 0.0, out=out)
    np.fill_diagonal(out, np.inf)
    return out


def nn_chain(dist: np.ndarray, method: int) -> np.ndarray:
    """Agglomerate via the nearest-neighbor chain; see the compiled twin.

    ``dist`` is consumed in place.  Returns (n-1, 4) rows
    [slot_x, slot_y, height, new_size] in discovery order.
    """
    n = dist.shape[0]
    merges = np.empty((max(n - 1, 0), 4), dtype=np.float64)
    if n <= 1:
        return merges

    size = np.ones(n, dtype=np.intp)
    active = np.ones(n, dtype=bool)
    chain: list[int] = []
    n_merges = 0

    while n_merges < n - 1:
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        while True:
            x = chain[-1]
            prev = chain[-2] if len(chain) > 1 else -1
            row = np.where(active, dist[x], np.inf)
            row[x] = np.inf
            if prev >= 0:
                dmin = row[prev]
                y = prev
            else:
                dmin = np.inf
                y = -1
            z = int(np.argmin(row))
            if row[z] < dmin:
                dmin = row[z]
                y = z
            if y == prev and prev >= 0:
                del chain[-2:]
                break
            chain.append(y)

        keep, gone = (x, y) if x < y else (y, x)
        dxy = dist[x, y]
        sx = float(size[x])
        sy = float(size[y])
        height = np.sqrt(dxy) if method == METHOD_WARD else dxy
        merges[n_merges] = (x, y, height, sx + sy)

        upd = active.copy()
        upd[x] = upd[y] = False
        sz = size[upd].astype(np.float64)
        if method == METHOD_WARD:
            new_row = ((sx + sz) * dist[x, upd] + (sy + sz) * dist[y, upd]
                       - sz * dxy) / (sx + sy + sz)
        else:
            new_row = (sx * dist[x, upd] + sy * dist[y, upd]) / (sx + sy)
        dist[keep, upd] = new_row
        dist[upd, keep] = new_row
        active[gone] = False
        dist[keep, keep] = np.inf
        size[keep] = size[x] + size[y]
        n_merges += 1

    return merges
