"""Trajectory profiles and the clustering stage.

Each patient's model outputs (latent coordinates, predictive mean, predictive
variance) are resampled onto a fixed grid over normalized visit time; the
flattened profiles are compared under the L2 norm by four methods
(agglomerative ward and average linkage, k-means, diagonal-covariance GMM)
across a grid of cluster counts, with validity and stability metrics driving
the final selection.

The agglomeration inner loop runs on a compiled kernel when available; set
TRAJGP_CLUSTER_BACKEND=python (or =compiled) to force a backend.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from trajgp import rng as rng_mod

_FORCED_BACKEND = os.environ.get("TRAJGP_CLUSTER_BACKEND", "")
if _FORCED_BACKEND == "python":
    from trajgp import _cluster_core_np as _core
elif _FORCED_BACKEND == "compiled":
    from trajgp import _cluster_core as _core
else:
    try:
        from trajgp import _cluster_core as _core
    except ImportError:  # pragma: no cover - build without the extension
        from trajgp import _cluster_core_np as _core

LINKAGE_METHODS = {"ward": _core.METHOD_WARD, "average": _core.METHOD_AVERAGE}
ALL_METHODS = ("ward", "average", "kmeans", "gmm")
DEFAULT_C_GRID = (2, 3, 4, 5)
IMBALANCE_FRACTION = 0.01


def cluster_backend() -> str:
    return _core.BACKEND


# ---------------------------------------------------------------------------
# Trajectory profiles
# ---------------------------------------------------------------------------

@dataclass
class PatientTrajectory:
    """Per-record model outputs for one patient, in visit order."""

    patient_id: str
    times: np.ndarray          # (T,) strictly increasing
    latents: np.ndarray        # (T, m)
    means: np.ndarray          # (T,)
    variances: np.ndarray      # (T,)


@dataclass
class TrajectoryProfile:
    patient_id: str
    grid: np.ndarray           # (G,) in [0, 1]
    channels: np.ndarray       # (m + 2, G): latents, mean, log variance

    @property
    def vector(self) -> np.ndarray:
        return self.channels.reshape(-1)


def build_profiles(trajectories, grid_points: int = 32,
                   log_variance: bool = True):
    """Fixed-grid linear resampling of each trajectory's channels.

    Visit times are min-max normalized per patient; single-visit patients
    broadcast their value across the grid.  The variance channel is
    log-transformed by default so its spread does not dominate the geometry.
    """
    grid = np.linspace(0.0, 1.0, grid_points)
    profiles = []
    for traj in trajectories:
        times = np.asarray(traj.times, dtype=np.float64)
        t = times.size
        if t < 1:
            raise ValueError(f"{traj.patient_id}: empty trajectory")
        var = np.asarray(traj.variances, dtype=np.float64)
        var_channel = np.log(var) if log_variance else var
        channels_in = np.column_stack(
            [np.atleast_2d(traj.latents).reshape(t, -1),
             np.asarray(traj.means).reshape(t, 1),
             var_channel.reshape(t, 1)])
        if t == 1:
            channels = np.repeat(channels_in.T, grid_points, axis=1)
        else:
            span = times[-1] - times[0]
            tnorm = (times - times[0]) / span
            channels = np.stack(
                [np.interp(grid, tnorm, channels_in[:, j])
                 for j in range(channels_in.shape[1])])
        if not np.all(np.isfinite(channels)):
            raise ValueError(f"{traj.patient_id}: non-finite profile")
        profiles.append(TrajectoryProfile(traj.patient_id, grid, channels))
    return profiles


def profile_matrix(profiles) -> np.ndarray:
    return np.stack([p.vector for p in profiles])


# ---------------------------------------------------------------------------
# Linkage plumbing shared by both backends
# ---------------------------------------------------------------------------

def _relabel(merges: np.ndarray, n: int) -> np.ndarray:
    """Discovery-order merge rows -> height-sorted linkage matrix.

    Rows become [child_a, child_b, height, size] where children below n are
    original points and row k creates cluster n + k; a stable sort keeps
    equal-height merges in discovery order.
    """
    order = np.argsort(merges[:, 2], kind="stable")
    parent = list(range(2 * n - 1))
    size = [1] * n + [0] * (n - 1)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    out = np.empty_like(merges)
    for k, row_idx in enumerate(order):
        sx, sy, height, _ = merges[row_idx]
        rx, ry = find(int(sx)), find(int(sy))
        if rx > ry:
            rx, ry = ry, rx
        new = n + k
        out[k] = (rx, ry, height, size[rx] + size[ry])
        parent[rx] = parent[ry] = new
        size[new] = size[rx] + size[ry]
    return out


def cut_linkage(linkage: np.ndarray, n: int, c: int) -> np.ndarray:
    """Labels from applying all but the last c - 1 merges; label ids are
    assigned by first patient occurrence, so the output is deterministic."""
    parent = list(range(2 * n - 1))

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for k in range(n - c):
        a, b, _, _ = linkage[k]
        new = n + k
        parent[find(int(a))] = new
        parent[find(int(b))] = new
    roots = {}
    labels = np.empty(n, dtype=np.intp)
    for i in range(n):
        root = find(i)
        labels[i] = roots.setdefault(root, len(roots))
    return labels


@dataclass
class ClusterResult:
    labels: np.ndarray
    c: int
    method: str
    sizes: list

    @classmethod
    def from_labels(cls, labels, c, method):
        labels = np.asarray(labels, dtype=np.intp)
        sizes = np.bincount(labels, minlength=c).tolist()
        return cls(labels=labels, c=c, method=method, sizes=sizes)


def linkage_matrix(x: np.ndarray, linkage: str) -> np.ndarray:
    method = LINKAGE_METHODS[linkage]
    work = _core.pairwise_sq_matrix(np.ascontiguousarray(x, np.float64))
    if linkage == "average":
        work = np.sqrt(work)
    merges = _core.nn_chain(np.ascontiguousarray(work), method)
    return _relabel(merges, x.shape[0])


def agglomerative_cluster(x: np.ndarray, c: int,
                          linkage: str = "ward") -> ClusterResult:
    """Hierarchical merging under the Lance-Williams recurrence with
    Euclidean distances, cut at c clusters; fully deterministic."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    n = x.shape[0]
    if linkage not in LINKAGE_METHODS:
        raise ValueError(f"linkage must be one of {sorted(LINKAGE_METHODS)}")
    if not 1 <= c <= n:
        raise ValueError(f"cannot cut {n} points into {c} clusters")
    if c == n:
        return ClusterResult.from_labels(np.arange(n), c, linkage)
    labels = cut_linkage(linkage_matrix(x, linkage), n, c)
    return ClusterResult.from_labels(labels, c, linkage)


# ---------------------------------------------------------------------------
# K-means and GMM
# ---------------------------------------------------------------------------

def _sq_dists_to(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d = (np.sum(x * x, axis=1)[:, None] + np.sum(centers * centers, axis=1)
         - 2.0 * x @ centers.T)
    return np.maximum(d, 0.0)


def _kmeans_pp_init(x, c, rng):
    n = x.shape[0]
    centers = np.empty((c, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    closest = _sq_dists_to(x, centers[:1])[:, 0]
    for k in range(1, c):
        total = float(closest.sum())
        if total <= 0.0:
            centers[k:] = x[int(rng.integers(n))]
            break
        probs = closest / total
        centers[k] = x[int(rng.choice(n, p=probs))]
        closest = np.minimum(closest, _sq_dists_to(x, centers[k:k + 1])[:, 0])
    return centers


def functional_kmeans(x: np.ndarray, c: int, seed: int, max_iter: int = 100,
                      tol: float = 1e-6) -> ClusterResult:
    """Seeded k-means++ / Lloyd iterations on flattened profiles.

    Empty clusters are re-seeded at the point farthest from its assigned
    center.  Deterministic given (inputs, seed)."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    n = x.shape[0]
    if not 1 <= c <= n:
        raise ValueError(f"cannot form {c} clusters from {n} points")
    rng = rng_mod.stream(seed, "kmeans")
    centers = _kmeans_pp_init(x, c, rng)
    labels = np.zeros(n, dtype=np.intp)
    for _ in range(max_iter):
        dists = _sq_dists_to(x, centers)
        labels = np.argmin(dists, axis=1)
        for k in range(c):
            if not np.any(labels == k):
                farthest = int(np.argmax(dists[np.arange(n), labels]))
                centers[k] = x[farthest]
                labels[farthest] = k
        new_centers = np.stack([x[labels == k].mean(axis=0) for k in range(c)])
        movement = float(np.max(np.linalg.norm(new_centers - centers, axis=1)))
        centers = new_centers
        if movement < tol:
            break
    labels = np.argmin(_sq_dists_to(x, centers), axis=1)
    return ClusterResult.from_labels(labels, c, "kmeans")


def kmeans_objective(x, labels) -> float:
    total = 0.0
    for k in np.unique(labels):
        pts = x[labels == k]
        total += float(np.sum((pts - pts.mean(axis=0)) ** 2))
    return total


def gmm_cluster(x: np.ndarray, c: int, seed: int, max_iter: int = 200,
                tol: float = 1e-6, var_floor: float = 1e-6):
    """Diagonal-covariance Gaussian mixture fit by EM, k-means initialized.

    Returns (ClusterResult, log-likelihood trace).  Labels are the argmax
    responsibilities; collapsing variances are floored."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    n, d = x.shape
    if not 1 <= c <= n:
        raise ValueError(f"cannot form {c} clusters from {n} points")
    init = functional_kmeans(x, c, seed).labels
    fallback_var = np.full(d, max(float(x.var()), var_floor))
    means = np.stack([x[init == k].mean(axis=0) if np.any(init == k)
                      else x.mean(axis=0) for k in range(c)])
    variances = np.stack([
        np.maximum(x[init == k].var(axis=0), var_floor)
        if np.sum(init == k) > 1 else fallback_var for k in range(c)])
    weights = np.maximum(np.bincount(init, minlength=c) / n, 1e-12)

    trace = []
    prev_ll = -np.inf
    resp = np.zeros((n, c))
    for _ in range(max_iter):
        log_prob = np.empty((n, c))
        for k in range(c):
            diff = x - means[k]
            log_prob[:, k] = (-0.5 * np.sum(diff * diff / variances[k], axis=1)
                              - 0.5 * np.sum(np.log(2.0 * np.pi * variances[k]))
                              + np.log(max(weights[k], 1e-300)))
        norm = np.logaddexp.reduce(log_prob, axis=1)
        ll = float(np.sum(norm))
        trace.append(ll)
        resp = np.exp(log_prob - norm[:, None])

        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ x) / np.maximum(nk, 1e-12)[:, None]
        for k in range(c):
            diff = x - means[k]
            variances[k] = np.maximum(
                (resp[:, k][:, None] * diff * diff).sum(axis=0)
                / max(nk[k], 1e-12), var_floor)
        if abs(ll - prev_ll) < tol * max(abs(prev_ll), 1.0):
            break
        prev_ll = ll
    labels = np.argmax(resp, axis=1).astype(np.intp)
    return ClusterResult.from_labels(labels, c, "gmm"), trace


def gmm_params(x, labels, var_floor=1e-6):
    """Diagonal MLE parameters for a given hard assignment (test oracle)."""
    means, variances = [], []
    for k in np.unique(labels):
        pts = x[labels == k]
        means.append(pts.mean(axis=0))
        variances.append(np.maximum(pts.var(axis=0), var_floor))
    return np.stack(means), np.stack(variances)


# ---------------------------------------------------------------------------
# Validity and agreement metrics
# ---------------------------------------------------------------------------

@dataclass
class ValidityReport:
    silhouette: float
    davies_bouldin: float
    calinski_harabasz: float
    sizes: list

    def to_json(self):
        return dict(self.__dict__)


def validity_metrics(x: np.ndarray, labels) -> ValidityReport:
    """Textbook silhouette / Davies-Bouldin / Calinski-Harabasz with
    Euclidean distances; singleton-cluster points take silhouette 0."""
    x = np.atleast_2d(np.asarray(x, np.float64))
    labels = np.asarray(labels, dtype=np.intp)
    n = x.shape[0]
    uniq = np.unique(labels)
    c = uniq.size
    if c < 2:
        raise ValueError("validity metrics need at least two clusters")
    if np.any(np.bincount(labels, minlength=c) == 0):
        raise ValueError("every cluster must be non-empty")

    dmat = np.sqrt(_core.pairwise_sq_matrix(x))
    np.fill_diagonal(dmat, 0.0)
    sizes = np.array([int(np.sum(labels == k)) for k in uniq])
    sil = np.zeros(n)
    mean_to_cluster = np.stack(
        [dmat[:, labels == k].mean(axis=1) for k in uniq], axis=1)
    for i in range(n):
        ki = int(np.flatnonzero(uniq == labels[i])[0])
        if sizes[ki] == 1:
            sil[i] = 0.0
            continue
        a = mean_to_cluster[i, ki] * sizes[ki] / (sizes[ki] - 1)
        b = np.min(np.delete(mean_to_cluster[i], ki))
        sil[i] = (b - a) / max(a, b)

    centroids = np.stack([x[labels == k].mean(axis=0) for k in uniq])
    scatter = np.array([
        float(np.mean(np.linalg.norm(x[labels == k] - centroids[j], axis=1)))
        for j, k in enumerate(uniq)])
    sep = np.sqrt(_sq_dists_to(centroids, centroids))
    db_terms = []
    for i in range(c):
        ratios = [(scatter[i] + scatter[j]) / sep[i, j]
                  for j in range(c) if j != i]
        db_terms.append(max(ratios))
    davies_bouldin = float(np.mean(db_terms))

    overall = x.mean(axis=0)
    between = float(sum(sizes[j] * np.sum((centroids[j] - overall) ** 2)
                        for j in range(c)))
    within = float(sum(np.sum((x[labels == k] - centroids[j]) ** 2)
                       for j, k in enumerate(uniq)))
    calinski = (between / (c - 1)) / (within / (n - c)) if within > 0 \
        else float("inf")

    return ValidityReport(silhouette=float(np.mean(sil)),
                          davies_bouldin=davies_bouldin,
                          calinski_harabasz=float(calinski),
                          sizes=sizes.tolist())


def _contingency(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    ua, ia = np.unique(a, return_inverse=True)
    ub, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ua.size, ub.size), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)
    return table


def adjusted_rand_index(a, b) -> float:
    table = _contingency(a, b)
    n = table.sum()
    if n < 2:
        return 1.0
    comb = lambda v: v * (v - 1) / 2.0
    sum_cells = comb(table.astype(np.float64)).sum()
    sum_rows = comb(table.sum(axis=1).astype(np.float64)).sum()
    sum_cols = comb(table.sum(axis=0).astype(np.float64)).sum()
    expected = sum_rows * sum_cols / comb(float(n))
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def normalized_mutual_information(a, b) -> float:
    table = _contingency(a, b).astype(np.float64)
    n = table.sum()
    pij = table / n
    pi = pij.sum(axis=1)
    pj = pij.sum(axis=0)
    nz = pij > 0
    mi = float(np.sum(pij[nz] * (np.log(pij[nz])
                                 - np.log(np.outer(pi, pj)[nz]))))
    hi = float(-np.sum(pi[pi > 0] * np.log(pi[pi > 0])))
    hj = float(-np.sum(pj[pj > 0] * np.log(pj[pj > 0])))
    if hi == 0.0 and hj == 0.0:
        return 1.0
    if hi == 0.0 or hj == 0.0:
        return 0.0
    return mi / (0.5 * (hi + hj))


# ---------------------------------------------------------------------------
# Stability and model selection
# ---------------------------------------------------------------------------

@dataclass
class StabilityReport:
    nmi_mean: float
    nmi_std: float
    ari_mean: float
    ari_std: float
    n_runs: int

    def to_json(self):
        return dict(self.__dict__)


def _run_method(x, method, c, seed):
    if method in LINKAGE_METHODS:
        return agglomerative_cluster(x, c, linkage=method)
    if method == "kmeans":
        return functional_kmeans(x, c, seed)
    if method == "gmm":
        return gmm_cluster(x, c, seed)[0]
    raise ValueError(f"unknown clustering method '{method}'")


def stability_protocol(x: np.ndarray, method: str, c: int, seed: int,
                       n_runs: int = 100,
                       subsample: float = 0.9) -> StabilityReport:
    """Agreement between consecutive runs' labelings.

    Stochastic methods re-run with fresh initialization streams; the
    deterministic linkages are perturbed by bootstrap subsampling (labels
    compared on the index intersection).  ``subsample=1.0`` makes the
    deterministic runs identical, so agreement is exactly 1.
    """
    if n_runs < 2:
        raise ValueError("stability requires at least two runs")
    x = np.atleast_2d(np.asarray(x, np.float64))
    n = x.shape[0]
    deterministic = method in LINKAGE_METHODS
    runs = []
    for r in range(n_runs):
        rng = rng_mod.stream(seed, "stability", r)
        if deterministic and subsample < 1.0:
            idx = np.sort(rng.choice(n, size=max(int(round(subsample * n)), c),
                                     replace=False))
        else:
            idx = np.arange(n)
        run_seed = int(rng.integers(2 ** 31 - 1))
        labels = _run_method(x[idx], method, c, run_seed).labels
        runs.append((idx, labels))

    nmis, aris = [], []
    for (idx_a, lab_a), (idx_b, lab_b) in zip(runs, runs[1:]):
        common, pos_a, pos_b = np.intersect1d(idx_a, idx_b,
                                              return_indices=True)
        if common.size < 2:
            continue
        nmis.append(normalized_mutual_information(lab_a[pos_a], lab_b[pos_b]))
        aris.append(adjusted_rand_index(lab_a[pos_a], lab_b[pos_b]))
    return StabilityReport(
        nmi_mean=float(np.mean(nmis)), nmi_std=float(np.std(nmis)),
        ari_mean=float(np.mean(aris)), ari_std=float(np.std(aris)),
        n_runs=n_runs)


@dataclass
class SelectionRow:
    method: str
    c: int
    silhouette: float
    davies_bouldin: float
    sizes: list
    imbalanced: bool

    def to_json(self):
        return dict(self.__dict__)


def model_select(x: np.ndarray, seed: int, methods=ALL_METHODS,
                 c_grid=DEFAULT_C_GRID, jobs: int = 1):
    """Run every (method, cluster count) pair and pick the operating point.

    Solutions whose smallest cluster holds under 1% of the patients are
    flagged imbalanced and excluded from selection; among the rest the best
    silhouette wins, ties broken by lower Davies-Bouldin.  Runs execute in
    parallel up to ``jobs`` threads (each run is deterministic, so the
    outcome does not depend on scheduling).  Returns (chosen method,
    chosen c, rows, winning ClusterResult).
    """
    x = np.atleast_2d(np.asarray(x, np.float64))
    n = x.shape[0]
    combos = [(m, c) for m in methods for c in c_grid if c <= n]

    def run(combo):
        method, c = combo
        result = _run_method(x, method, c, seed)
        if len(np.unique(result.labels)) < 2:
            # Collapsed solution (e.g. a mixture that empties components):
            # validity is undefined, rank it last and flag it.
            row = SelectionRow(method=method, c=c, silhouette=-1.0,
                               davies_bouldin=float("inf"),
                               sizes=sorted(result.sizes, reverse=True),
                               imbalanced=True)
            return row, result
        report = validity_metrics(x, result.labels)
        row = SelectionRow(
            method=method, c=c, silhouette=report.silhouette,
            davies_bouldin=report.davies_bouldin,
            sizes=sorted(report.sizes, reverse=True),
            imbalanced=bool(min(report.sizes) < IMBALANCE_FRACTION * n))
        return row, result

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run, combos))
    else:
        outcomes = [run(combo) for combo in combos]
    rows = [row for row, _ in outcomes]
    results = {(r.method, r.c): result for r, result in outcomes}
    candidates = [r for r in rows if not r.imbalanced] or rows
    best = max(candidates, key=lambda r: (r.silhouette, -r.davies_bouldin))
    return best.method, best.c, rows, results[(best.method, best.c)]
