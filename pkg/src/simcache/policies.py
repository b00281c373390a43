"""Caching policies driven one request at a time.

Every policy exposes ``step(t, request) -> PolicyEvent``: it serves the
request with its current physical state, then updates that state.
"""
from __future__ import annotations

import hashlib
from collections import deque
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import oma
from .catalog import AugmentedRank, Catalog, CostModel, metric_distance, rank_from_distances
from .gain import RankBatch, gain_from_rank
from .knn_index import Answer, LinearScanIndex, serve
from .rounding import Rounder, RoundingConfig, fetched_count, make_rng

NATIVE = "native"
INDEX = "index"


class Request(NamedTuple):
    key: object  # object id for catalog requests, raw bytes otherwise
    vector: np.ndarray


@dataclass
class PolicyEvent:
    t: int
    key: object
    gain: float
    fetched: int
    occupancy: int
    hit: bool | None = None
    answer: Answer | None = None
    digest: str = ""


def state_digest(x) -> str:
    bits = np.packbits(np.asarray(x) > 0.5)
    return hashlib.blake2b(bits.tobytes(), digest_size=8).hexdigest()


class RankCache:
    """Memoizes per-request distances, ranks and single-request gain tables."""

    def __init__(self, catalog: Catalog, cost: CostModel, max_size: int = 1 << 16):
        cost.check(catalog)
        self.catalog = catalog
        self.cost = cost
        self.max_size = max_size
        self._store: dict = {}

    def _entry(self, req: Request):
        key = req.key if req.key is not None else np.asarray(req.vector, dtype=np.float64).tobytes()
        hit = self._store.get(key)
        if hit is None:
            d = self.catalog.distances(req.vector)
            rk = rank_from_distances(d, self.cost)
            hit = [d, rk, None]
            if len(self._store) >= self.max_size:
                self._store.pop(next(iter(self._store)))
            self._store[key] = hit
        return hit

    def distances(self, req: Request) -> np.ndarray:
        return self._entry(req)[0]

    def rank(self, req: Request) -> AugmentedRank:
        return self._entry(req)[1]

    def batch(self, req: Request) -> RankBatch:
        e = self._entry(req)
        if e[2] is None:
            e[2] = RankBatch([e[1]])
        return e[2]

    def server_cost(self, req: Request) -> float:
        return self.rank(req).server_cost()


class Policy:
    name = "policy"

    def __init__(self, catalog: Catalog, cost: CostModel, ranks: RankCache | None = None,
                 keep_answers: bool = False):
        cost.check(catalog)
        self.catalog = catalog
        self.cost = cost
        self.ranks = ranks or RankCache(catalog, cost)
        self.keep_answers = keep_answers

    def state(self) -> np.ndarray:
        """Physical 0/1 allocation over the catalog."""
        raise NotImplementedError

    def step(self, t: int, req: Request) -> PolicyEvent:
        raise NotImplementedError

    def _index_answer(self, req: Request, x) -> Answer:
        local = LinearScanIndex.from_state(self.catalog, x)
        remote = LinearScanIndex(self.catalog)
        return serve(local, remote, req.vector, self.cost, d=self.ranks.distances(req))


class StaticPolicy(Policy):
    """A fixed allocation; useful as a reference and for oracles."""

    name = "static"

    def __init__(self, catalog, cost, x, ranks=None, keep_answers=False):
        super().__init__(catalog, cost, ranks, keep_answers)
        self.x = np.asarray(x, dtype=np.float64).copy()

    def state(self):
        return self.x

    def step(self, t, req):
        x = self.x
        g = gain_from_rank(self.ranks.rank(req), x)
        ans = self._index_answer(req, x) if self.keep_answers else None
        return PolicyEvent(t, req.key, g, 0, int(x.sum()), answer=ans, digest=state_digest(x))


class AcaiPolicy(Policy):
    """Mirror ascent on a fractional state plus randomized rounding to a physical one."""

    name = "acai"

    def __init__(self, catalog, cost, mirror: str = oma.NEGENTROPY, schedule: oma.Schedule | None = None,
                 rounding: RoundingConfig | None = None, rng=None, ranks=None, keep_answers=False):
        super().__init__(catalog, cost, ranks, keep_answers)
        self.ascent = oma.MirrorAscent(catalog.n, cost.h, mirror, schedule)
        self.rounder = Rounder(rounding or RoundingConfig(), make_rng(rng))
        self.rounder.start(self.ascent.y)
        self.local = LinearScanIndex.from_state(catalog, self.rounder.x)

    @property
    def y(self) -> np.ndarray:
        return self.ascent.y

    def state(self):
        return self.rounder.x

    def step(self, t, req):
        x = self.rounder.x
        g = gain_from_rank(self.ranks.rank(req), x)
        ans = None
        if self.keep_answers:
            ans = serve(self.local, LinearScanIndex(self.catalog), req.vector, self.cost,
                        d=self.ranks.distances(req))
        digest = state_digest(x)
        y_old = self.ascent.y
        grad = self.ranks.batch(req).subgradient(y_old)
        y_new = self.ascent.step(grad)
        if y_new is y_old:
            x_new = x
        else:
            x_new = self.rounder.update(t, y_old, y_new)
        fetched = fetched_count(x, x_new)
        if x_new is not x:
            self.local.set_state(x_new)
        return PolicyEvent(t, req.key, g, fetched, int(x.sum()), answer=ans, digest=digest)


# --- key-value baselines ---------------------------------------------------------

class _Entry:
    __slots__ = ("key", "values", "history")

    def __init__(self, key, values, history_cap=0):
        self.key = np.asarray(key, dtype=np.float64)
        self.values = values
        self.history = deque([self.key], maxlen=history_cap) if history_cap else None


class KeyValuePolicy(Policy):
    """LRU list of (past request, its k' nearest catalog objects) pairs.

    ``serving="native"`` answers hits from the entry values alone and misses
    from the server. ``serving="index"`` keeps the same cache updates but
    serves through the dual-index mechanism on the stored objects.
    """

    name = "kv"
    history_cap = 0

    def __init__(self, catalog, cost, kprime: int | None = None, serving: str = NATIVE,
                 ranks=None, keep_answers=False):
        super().__init__(catalog, cost, ranks, keep_answers)
        self.kprime = cost.k if kprime is None else int(kprime)
        if self.kprime < cost.k:
            raise ValueError("k' must be at least k")
        if self.kprime > catalog.n:
            raise ValueError("k' exceeds the catalog size")
        self.capacity = cost.h // self.kprime
        if self.capacity < 1:
            raise ValueError(f"cache of {cost.h} slots cannot hold one entry of {self.kprime} objects")
        if serving not in (NATIVE, INDEX):
            raise ValueError(f"unknown serving mode {serving!r}")
        self.serving = serving
        self.entries: list[_Entry] = []  # front of the list = most recent
        self.counts = np.zeros(catalog.n, dtype=np.int64)

    def state(self):
        return (self.counts > 0).astype(np.float64)

    def occupancy(self) -> int:
        return int(np.count_nonzero(self.counts))

    def _nearest_catalog(self, vector, m, d=None):
        if d is None:
            d = self.catalog.distances(vector)
        near = np.argpartition(d, m - 1)[:m] if m < d.size else np.arange(d.size)
        return near[np.lexsort((near, d[near]))]

    def _store(self, entry: _Entry) -> int:
        fetched = int(np.count_nonzero(self.counts[entry.values] == 0))
        self.counts[entry.values] += 1
        self.entries.insert(0, entry)
        while len(self.entries) > self.capacity:
            old = self.entries.pop()
            self.counts[old.values] -= 1
        return fetched

    def _replace_values(self, entry: _Entry, values) -> int:
        self.counts[entry.values] -= 1
        fetched = int(np.count_nonzero(self.counts[values] == 0))
        self.counts[values] += 1
        entry.values = values
        return fetched

    def _touch(self, idxs) -> None:
        idxs = sorted(set(idxs))
        moved = [self.entries[i] for i in idxs]
        rest = [e for i, e in enumerate(self.entries) if i not in set(idxs)]
        self.entries = moved + rest

    def _key_distances(self, vector) -> np.ndarray:
        keys = np.stack([e.key for e in self.entries])
        diff = keys - vector
        if self.catalog.metric == "l1":
            return np.abs(diff).sum(axis=1)
        return np.einsum("ij,ij->i", diff, diff)

    def lookup(self, req: Request):
        """Decide hit/miss. Returns (hit, answer ids, contributing entry positions)."""
        raise NotImplementedError

    def on_hit(self, req: Request, positions) -> int:
        self._touch(positions)
        return 0

    def on_miss(self, req: Request) -> int:
        values = self._nearest_catalog(req.vector, self.kprime, self.ranks.distances(req))
        return self._store(_Entry(req.vector, values, self.history_cap))

    def step(self, t, req):
        x = self.state()
        occ = self.occupancy()
        digest = state_digest(x)
        d = self.ranks.distances(req)
        if self.entries:
            hit, ans_ids, positions = self.lookup(req)
        else:
            hit, ans_ids, positions = False, None, ()
        answer = None
        if self.serving == INDEX:
            gain = gain_from_rank(self.ranks.rank(req), x)
            if self.keep_answers:
                answer = self._index_answer(req, x)
        else:
            server = self.ranks.server_cost(req)
            if hit:
                ans_ids = np.asarray(ans_ids)
                gain = server - float(d[ans_ids].sum())
                if self.keep_answers:
                    answer = Answer([(int(i), "local", float(d[i])) for i in ans_ids])
            else:
                gain = 0.0
                if self.keep_answers:
                    top = self._nearest_catalog(req.vector, self.cost.k, d)
                    answer = Answer([(int(i), "remote", float(d[i]) + self.cost.cf) for i in top])
        fetched = self.on_hit(req, positions) if hit else self.on_miss(req)
        return PolicyEvent(t, req.key, gain, fetched, occ, hit=hit, answer=answer, digest=digest)

    def _best_of(self, d, candidates):
        candidates = np.unique(np.asarray(candidates))
        return candidates[np.lexsort((candidates, d[candidates]))][: self.cost.k]


class LruPolicy(KeyValuePolicy):
    """Exact-match key-value cache: only identical requests hit."""

    name = "lru"

    def __init__(self, catalog, cost, serving=NATIVE, ranks=None, keep_answers=False):
        super().__init__(catalog, cost, cost.k, serving, ranks, keep_answers)

    def lookup(self, req):
        v = np.asarray(req.vector, dtype=np.float64)
        for pos, e in enumerate(self.entries):
            if np.array_equal(e.key, v):
                return True, e.values[: self.cost.k], (pos,)
        return False, None, ()


class SimLruPolicy(KeyValuePolicy):
    """Approximate hit when the closest stored key is within ``ctheta``."""

    name = "sim-lru"

    def __init__(self, catalog, cost, kprime=None, ctheta=1.0, serving=NATIVE, ranks=None, keep_answers=False):
        super().__init__(catalog, cost, kprime, serving, ranks, keep_answers)
        if ctheta < 0:
            raise ValueError("threshold must be nonnegative")
        self.ctheta = float(ctheta)

    def accept(self, dist: float) -> bool:
        if self.ctheta == 0:
            return dist == 0.0
        return dist < self.ctheta

    def lookup(self, req):
        dk = self._key_distances(req.vector)
        pos = int(np.argmin(dk))
        if not self.accept(float(dk[pos])):
            return False, None, ()
        d = self.ranks.distances(req)
        return True, self._best_of(d, self.entries[pos].values), (pos,)


class RndLruPolicy(SimLruPolicy):
    """Miss with probability min(1, dist / ctheta) to the closest stored key."""

    name = "rnd-lru"

    def __init__(self, catalog, cost, kprime=None, ctheta=1.0, rng=None, serving=NATIVE, ranks=None,
                 keep_answers=False):
        super().__init__(catalog, cost, kprime, ctheta, serving, ranks, keep_answers)
        if self.ctheta <= 0:
            raise ValueError("RND-LRU needs a positive threshold")
        self.rng = make_rng(rng)

    def miss_probability(self, dist: float) -> float:
        return min(1.0, dist / self.ctheta)

    def accept(self, dist):
        return self.rng.random() >= self.miss_probability(dist)


class ClsLruPolicy(SimLruPolicy):
    """SIM-LRU whose keys drift toward the medoid of the requests they served."""

    name = "cls-lru"

    def __init__(self, catalog, cost, kprime=None, ctheta=1.0, history_cap=32, serving=NATIVE,
                 ranks=None, keep_answers=False):
        super().__init__(catalog, cost, kprime, ctheta, serving, ranks, keep_answers)
        if history_cap < 1:
            raise ValueError("history capacity must be positive")
        self.history_cap = int(history_cap)

    def on_hit(self, req, positions):
        (pos,) = positions
        e = self.entries[pos]
        e.history.append(np.asarray(req.vector, dtype=np.float64))
        hist = np.stack(e.history)
        pts = self.catalog.points[e.values]
        if self.catalog.metric == "l1":
            cost = np.abs(pts[:, None, :] - hist[None, :, :]).sum(axis=(1, 2))
        else:
            diff = pts[:, None, :] - hist[None, :, :]
            cost = np.einsum("ijk,ijk->i", diff, diff)
        best = int(e.values[int(np.argmin(cost))])
        fetched = 0
        if not np.array_equal(self.catalog.points[best], e.key):
            e.key = self.catalog.points[best].copy()
            fetched = self._replace_values(e, self._nearest_catalog(e.key, self.kprime))
        self._touch(positions)
        return fetched


class QCachePolicy(KeyValuePolicy):
    """Merges the values of the l closest keys; hits when a ball-containment
    certificate proves at least two answer objects belong to the true top-k."""

    name = "qcache"

    def __init__(self, catalog, cost, l: int | None = None, serving=NATIVE, ranks=None, keep_answers=False):
        super().__init__(catalog, cost, cost.k, serving, ranks, keep_answers)
        self.l = self.capacity if l is None else int(l)
        if self.l < 1:
            raise ValueError("l must be positive")
        self.radius: dict[int, float] = {}

    def on_miss(self, req):
        fetched = super().on_miss(req)
        e = self.entries[0]
        d = self.ranks.distances(req)
        self.radius[id(e)] = float(metric_distance(d[e.values[-1]], self.catalog.metric))
        live = {id(x) for x in self.entries}
        self.radius = {k: v for k, v in self.radius.items() if k in live}
        return fetched

    def lookup(self, req):
        metric = self.catalog.metric
        dk = metric_distance(self._key_distances(req.vector), metric)
        near = np.argsort(dk, kind="stable")[: self.l]
        d = self.ranks.distances(req)
        cands = np.concatenate([self.entries[i].values for i in near])
        ans = self._best_of(d, cands)
        dist_ans = metric_distance(d[ans], metric)
        certified = 0
        contributors = set()
        for o, do in zip(ans, dist_ans):
            ok = False
            for i in near:
                e = self.entries[i]
                if o in e.values:
                    contributors.add(int(i))
                    if do <= self.radius[id(e)] - dk[i]:
                        ok = True
            certified += ok
        need = min(2, self.cost.k)
        if certified >= need:
            return True, ans, tuple(sorted(contributors))
        return False, None, ()


POLICIES = ("acai", "lru", "sim-lru", "cls-lru", "rnd-lru", "qcache", "static")
