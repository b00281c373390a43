"""kNN indexes over catalog subsets and dual-index request serving."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .catalog import Catalog, CostModel, pairwise_dissimilarity


class Index:
    """Abstract kNN index over a subset of catalog objects.

    Implementations answer ``knn`` with member ids in ascending dissimilarity,
    ties broken by id. Approximate backends may return a different set.
    """

    catalog: Catalog

    def knn(self, r, k: int) -> np.ndarray:
        raise NotImplementedError

    def knn_with_distances(self, r, k: int, d: np.ndarray | None = None):
        ids = np.asarray(self.knn(r, k), dtype=np.intp)
        dist = d[ids] if d is not None else pairwise_dissimilarity(r, self.catalog.points[ids], self.catalog.metric)
        return ids, dist

    def add(self, ids: Iterable[int]) -> None:
        raise NotImplementedError

    def remove(self, ids: Iterable[int]) -> None:
        raise NotImplementedError


class LinearScanIndex(Index):
    """Exact kNN by scanning every member."""

    def __init__(self, catalog: Catalog, members: Iterable[int] | None = None):
        self.catalog = catalog
        self._mask = np.zeros(catalog.n, dtype=bool)
        if members is None:
            self._mask[:] = True
        else:
            self.add(members)

    @classmethod
    def from_state(cls, catalog: Catalog, x) -> "LinearScanIndex":
        return cls(catalog, np.flatnonzero(np.asarray(x) > 0.5))

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self._mask)

    def __len__(self) -> int:
        return int(self._mask.sum())

    def __contains__(self, i) -> bool:
        return bool(self._mask[i])

    def _check(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.catalog.n):
            raise IndexError("object id outside the catalog")

    def add(self, ids) -> None:
        ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.intp)
        self._check(ids)
        self._mask[ids] = True

    def remove(self, ids) -> None:
        ids = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.intp)
        self._check(ids)
        self._mask[ids] = False

    def set_state(self, x) -> None:
        self._mask[:] = np.asarray(x) > 0.5

    def knn_with_distances(self, r, k: int, d: np.ndarray | None = None):
        if k < 1:
            raise ValueError("k must be positive")
        ids = self.members
        if ids.size == 0:
            return ids, np.empty(0)
        if d is not None:
            dist = d[ids]
        elif ids.size == self.catalog.n:
            dist = self.catalog.distances(r)
        else:
            dist = pairwise_dissimilarity(r, self.catalog.points[ids], self.catalog.metric)
        if ids.size > k:
            kth = np.partition(dist, k - 1)[k - 1]
            keep = dist <= kth
            ids, dist = ids[keep], dist[keep]
        order = np.lexsort((ids, dist))[:k]
        return ids[order], dist[order]

    def knn(self, r, k: int) -> np.ndarray:
        return self.knn_with_distances(r, k)[0]


LOCAL = "local"
REMOTE = "remote"


@dataclass
class Answer:
    entries: list = field(default_factory=list)  # (object id, origin, served cost)

    @property
    def total_cost(self) -> float:
        return float(sum(c for _, _, c in self.entries))

    @property
    def ids(self) -> list:
        return [i for i, _, _ in self.entries]

    def n_remote(self) -> int:
        return sum(1 for _, o, _ in self.entries if o == REMOTE)


def serve(local: Index, remote: Index, r, cost: CostModel, d: np.ndarray | None = None) -> Answer:
    """Compose the cheapest k-object answer from local and remote candidates.

    Local candidates cost their dissimilarity, remote ones add the fetch cost.
    An object found by both indexes is kept once, as local.
    """
    k = cost.k
    if k > remote.catalog.n:
        raise ValueError(f"cannot answer with k={k} objects from a catalog of {remote.catalog.n}")
    loc_ids, loc_d = local.knn_with_distances(r, k, d)
    rem_ids, rem_d = remote.knn_with_distances(r, k, d)
    if len(loc_ids) + len(rem_ids) < k:
        raise ValueError("not enough candidates to form an answer")
    local_set = set(int(i) for i in loc_ids)
    cands = [(float(c), 0, int(i)) for i, c in zip(loc_ids, loc_d)]
    cands += [(float(c) + cost.cf, 1, int(i)) for i, c in zip(rem_ids, rem_d) if int(i) not in local_set]
    cands.sort()
    return Answer([(i, REMOTE if flag else LOCAL, c) for c, flag, i in cands[:k]])
