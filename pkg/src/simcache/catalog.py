"""Object catalog, dissimilarity metrics and the augmented-catalog ranking.

Ids are 0-based throughout the package. In the augmented catalog, id ``i``
(``0 <= i < N``) is the local copy of object ``i`` and id ``i + N`` its remote
copy, whose serving cost is shifted by the fetch cost.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

METRICS = ("sqeuclidean", "l1")

_METRIC_ALIASES = {
    "sqeuclidean": "sqeuclidean",
    "squared-euclidean": "sqeuclidean",
    "squared_euclidean": "sqeuclidean",
    "l1": "l1",
    "manhattan": "l1",
}


def canonical_metric(name: str) -> str:
    try:
        return _METRIC_ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; expected one of {METRICS}") from None


def _as_points(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1)
    return a


def dissimilarity(r, o, metric: str = "sqeuclidean") -> float:
    """Dissimilarity cost between a request and an object embedding."""
    r = _as_points(r)
    o = _as_points(o)
    if r.shape != o.shape:
        raise ValueError(f"dimension mismatch: {r.shape} vs {o.shape}")
    diff = r - o
    if canonical_metric(metric) == "l1":
        return float(np.abs(diff).sum())
    return float(diff @ diff)


def pairwise_dissimilarity(r, points: np.ndarray, metric: str) -> np.ndarray:
    """Dissimilarity from one request to every row of ``points``."""
    r = _as_points(r)
    if r.shape[0] != points.shape[1]:
        raise ValueError(f"dimension mismatch: request has d={r.shape[0]}, catalog d={points.shape[1]}")
    diff = points - r
    if canonical_metric(metric) == "l1":
        return np.abs(diff).sum(axis=1)
    return np.einsum("ij,ij->i", diff, diff)


def metric_distance(cost, metric: str):
    """Map a dissimilarity cost back to a true metric distance.

    Squared euclidean costs violate the triangle inequality, so geometric
    arguments (ball containment) must work on the square root.
    """
    if canonical_metric(metric) == "sqeuclidean":
        return np.sqrt(cost)
    return cost


class Catalog:
    """An ordered set of N object embeddings sharing one dimension and metric."""

    def __init__(self, objects, metric: str = "sqeuclidean"):
        pts = np.asarray(objects, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts.reshape(-1, 1)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("catalog needs at least one object")
        if not np.all(np.isfinite(pts)):
            raise ValueError("catalog embeddings must be finite")
        pts.setflags(write=False)
        self.points = pts
        self.metric = canonical_metric(metric)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self) -> int:
        return self.n

    def __repr__(self) -> str:
        return f"Catalog(n={self.n}, dim={self.dim}, metric={self.metric!r})"

    def distances(self, r) -> np.ndarray:
        return pairwise_dissimilarity(r, self.points, self.metric)

    def barycenter(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def neighbor_cost(self, i: int) -> float:
        """Average dissimilarity from each object to its i-th closest other object.

        Used to calibrate the fetch cost to the catalog geometry.
        """
        if not 1 <= i < self.n:
            raise ValueError(f"neighbor order must be in [1, {self.n - 1}]")
        out = np.empty(self.n)
        for j in range(self.n):
            d = self.distances(self.points[j])
            d[j] = np.inf
            out[j] = np.partition(d, i - 1)[i - 1]
        return float(out.mean())


@dataclass(frozen=True)
class CostModel:
    k: int
    h: int
    cf: float
    metric: str = "sqeuclidean"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be a positive integer")
        if self.h < 1:
            raise ValueError("h must be a positive integer")
        if self.cf < 0:
            raise ValueError("fetch cost must be nonnegative")
        object.__setattr__(self, "metric", canonical_metric(self.metric))

    def check(self, catalog: Catalog) -> None:
        if self.h > catalog.n:
            raise ValueError(f"cache capacity h={self.h} exceeds catalog size {catalog.n}")
        if self.k > catalog.n:
            raise ValueError(f"answer size k={self.k} exceeds catalog size {catalog.n}")
        if self.metric != catalog.metric:
            raise ValueError(f"cost model metric {self.metric!r} differs from catalog metric {catalog.metric!r}")


def augmented_cost(r, i: int, catalog: Catalog, cost: CostModel) -> float:
    n = catalog.n
    if not 0 <= i < 2 * n:
        raise IndexError(f"augmented id {i} out of range [0, {2 * n})")
    if i < n:
        return dissimilarity(r, catalog.points[i], catalog.metric)
    return dissimilarity(r, catalog.points[i - n], catalog.metric) + cost.cf


@dataclass(frozen=True)
class AugmentedRank:
    """The cost-sorted augmented catalog for one request.

    ``perm`` holds augmented ids in nondecreasing cost order. Unless built
    with ``full=True`` it is truncated after position ``K`` (1-based), the
    point where the k-th remote copy appears; nothing past it affects cost
    or gain.

    ``sigma[i]`` counts remote ids among ``perm[:i + 1]`` and
    ``alphas[i] = costs[i + 1] - costs[i]`` for ``i < K - 1``.
    """

    perm: np.ndarray
    costs: np.ndarray
    sigma: np.ndarray
    K: int
    alphas: np.ndarray
    n: int
    k: int

    @property
    def is_remote(self) -> np.ndarray:
        return self.perm >= self.n

    def object_ids(self) -> np.ndarray:
        return np.where(self.perm >= self.n, self.perm - self.n, self.perm)

    def prefix_values(self, y: np.ndarray) -> np.ndarray:
        """State values along the permutation, with y[i + N] = 1 - y[i]."""
        p = self.perm[: self.K]
        remote = p >= self.n
        vals = y[np.where(remote, p - self.n, p)]
        return np.where(remote, 1.0 - vals, vals)

    def server_cost(self) -> float:
        """Cost of answering entirely from the server: top-k plus k fetches."""
        head = slice(0, self.K)
        return float(self.costs[head][self.perm[head] >= self.n].sum())


def _sorted_augmented(d: np.ndarray, local: np.ndarray, remote: np.ndarray, cf: float, n: int):
    ids = np.concatenate([local, remote + n])
    costs = np.concatenate([d[local], d[remote] + cf])
    flags = np.concatenate([np.zeros(local.size, dtype=np.int8), np.ones(remote.size, dtype=np.int8)])
    objs = np.concatenate([local, remote])
    # primary: cost, then local before remote, then object id
    order = np.lexsort((objs, flags, costs))
    return ids[order], costs[order]


def rank_from_distances(d: np.ndarray, cost: CostModel, full: bool = False) -> AugmentedRank:
    n = d.shape[0]
    k = cost.k
    if k > n:
        raise ValueError(f"k={k} exceeds catalog size {n}")
    if full:
        everything = np.arange(n)
        perm, costs = _sorted_augmented(d, everything, everything, cost.cf, n)
    else:
        kth = np.partition(d, k - 1)[k - 1]
        # the k nearest objects with ties broken by id
        near = np.flatnonzero(d <= kth)
        near = near[np.lexsort((near, d[near]))][:k]
        threshold = d[near[-1]] + cost.cf
        local = np.flatnonzero(d <= threshold)
        perm, costs = _sorted_augmented(d, local, near, cost.cf, n)
    remote = perm >= n
    sigma = np.cumsum(remote)
    K = int(np.searchsorted(sigma, k) + 1)
    if not full:
        assert K == perm.size, "truncated rank must end at the k-th remote copy"
    alphas = np.diff(costs[:K])
    return AugmentedRank(perm=perm, costs=costs, sigma=sigma, K=K, alphas=alphas, n=n, k=k)


def rank(r, catalog: Catalog, cost: CostModel, full: bool = False) -> AugmentedRank:
    """Sort the augmented catalog by serving cost for request ``r``.

    Ties are broken local-before-remote, then by ascending object id.
    """
    return rank_from_distances(catalog.distances(r), cost, full=full)


# --- embedding files -------------------------------------------------------

def load_csv(path) -> np.ndarray:
    path = Path(path)
    rows = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise ValueError(f"{path}: no embeddings")
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise ValueError(f"{path}: rows have differing dimensions {sorted(dims)}")
    return np.asarray(rows, dtype=np.float64)


def save_csv(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    with Path(path).open("w") as fh:
        for row in points:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_fvecs(path) -> np.ndarray:
    """Read little-endian records of an int32 dimension followed by float32 values."""
    raw = np.fromfile(path, dtype="<i4")
    if raw.size == 0:
        raise ValueError(f"{path}: empty fvecs file")
    d = int(raw[0])
    if d <= 0 or raw.size % (d + 1) != 0:
        raise ValueError(f"{path}: inconsistent record layout")
    recs = raw.reshape(-1, d + 1)
    if not np.all(recs[:, 0] == d):
        raise ValueError(f"{path}: records have differing dimensions")
    return recs[:, 1:].copy().view("<f4").astype(np.float64)


def save_fvecs(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype="<f4")
    n, d = points.shape
    out = np.empty((n, d + 1), dtype="<i4")
    out[:, 0] = d
    out[:, 1:] = points.view("<i4")
    out.tofile(path)


def load_catalog(path, metric: str = "sqeuclidean", fmt: str | None = None) -> Catalog:
    path = Path(path)
    fmt = fmt or ("fvecs" if path.suffix in (".fvecs", ".bin") else "csv")
    if fmt == "fvecs":
        return Catalog(load_fvecs(path), metric)
    if fmt == "csv":
        return Catalog(load_csv(path), metric)
    raise ValueError(f"unknown catalog format {fmt!r}")
