"""Serving cost and caching gain of integral and fractional cache states.

States are length-N float arrays over the catalog; the remote half of the
augmented vector is never stored (``y[i + N] == 1 - y[i]``).
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .catalog import AugmentedRank, Catalog, CostModel, rank

TOL = 1e-9
ONE_MINUS_INV_E = 1.0 - 1.0 / math.e


def check_integral(x, h: int | None = None, strict: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("integral state must be 0/1 valued")
    if strict and h is not None and int(x.sum()) != h:
        raise ValueError(f"integral state holds {int(x.sum())} objects, capacity is {h}")
    return x


def check_fractional(y, h: int | None = None, tol: float = TOL) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < -tol) or np.any(y > 1 + tol):
        raise ValueError("fractional state must lie in [0, 1]")
    if h is not None and abs(y.sum() - h) > max(tol, tol * h):
        raise ValueError(f"fractional state sums to {y.sum()!r}, expected {h}")
    return y


def empty_state(n: int) -> np.ndarray:
    return np.zeros(n)


def total_cost(r, x, catalog: Catalog, cost: CostModel, strict: bool = True,
               ranking: AugmentedRank | None = None) -> float:
    """Serving cost of an integral state: the k cheapest available copies."""
    x = check_integral(x, cost.h, strict)
    if x.shape != (catalog.n,):
        raise ValueError("state length must equal the catalog size")
    rk = ranking if ranking is not None and ranking.perm.size == 2 * catalog.n else rank(r, catalog, cost, full=True)
    n = catalog.n
    total = 0.0
    served = 0
    for pid, c in zip(rk.perm, rk.costs):
        avail = x[pid] if pid < n else 1.0 - x[pid - n]
        if avail and served < cost.k:
            total += c
            served += 1
    return total


def server_only_cost(r, catalog: Catalog, cost: CostModel) -> float:
    return total_cost(r, empty_state(catalog.n), catalog, cost, strict=False)


def gain_from_rank(rk: AugmentedRank, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    K = rk.K
    if K < 2:
        return 0.0
    s = np.cumsum(rk.prefix_values(y))[: K - 1]
    sig = rk.sigma[: K - 1]
    return float(rk.alphas @ np.minimum(rk.k - sig, s - sig))


def caching_gain(r, y, catalog: Catalog, cost: CostModel, ranking: AugmentedRank | None = None) -> float:
    """Cost reduction over the all-remote state, defined for fractional states too."""
    y = check_fractional(y)
    if y.shape != (catalog.n,):
        raise ValueError("state length must equal the catalog size")
    rk = ranking if ranking is not None else rank(r, catalog, cost)
    return gain_from_rank(rk, y)


def decision_sets(rk: AugmentedRank) -> list:
    """For each prefix i < K, positions j <= i holding a local id whose twin is not yet in the prefix."""
    n = rk.n
    out = []
    seen_remote = set()
    locals_so_far = []
    for i in range(rk.K - 1):
        pid = int(rk.perm[i])
        if pid >= n:
            seen_remote.add(pid - n)
        else:
            locals_so_far.append((i, pid))
        out.append([j for j, obj in locals_so_far if obj not in seen_remote])
    return out


def aux_gain_from_rank(rk: AugmentedRank, y) -> float:
    y = np.asarray(y, dtype=np.float64)
    total = 0.0
    for i, members in enumerate(decision_sets(rk)):
        c = rk.k - rk.sigma[i]
        prod = 1.0
        for j in members:
            prod *= 1.0 - y[rk.perm[j]] / c
        total += rk.alphas[i] * c * (1.0 - prod)
    return float(total)


def aux_gain(r, y, catalog: Catalog, cost: CostModel, ranking: AugmentedRank | None = None) -> float:
    """Product-form lower bound on the gain, used to analyse randomized rounding."""
    y = check_fractional(y)
    rk = ranking if ranking is not None else rank(r, catalog, cost)
    return aux_gain_from_rank(rk, y)


def gain_sandwich_check(r, y, catalog: Catalog, cost: CostModel, ranking: AugmentedRank | None = None):
    """Return ``(lower, gain, upper)`` with lower = aux gain and upper = aux / (1 - 1/e)."""
    rk = ranking if ranking is not None else rank(r, catalog, cost)
    low = aux_gain_from_rank(rk, y)
    return low, gain_from_rank(rk, y), low / ONE_MINUS_INV_E


class RankBatch:
    """Ranks of several requests padded into rectangular arrays.

    Evaluates the (weighted) summed gain and its subgradient in one pass,
    which is what the offline optimizer and the oracles need.
    """

    def __init__(self, ranks: Sequence[AugmentedRank], weights=None):
        if not ranks:
            raise ValueError("need at least one request")
        self.ranks = list(ranks)
        self.n = ranks[0].n
        self.k = ranks[0].k
        R = len(ranks)
        Kmax = max(rk.K for rk in ranks)
        self.K = np.array([rk.K for rk in ranks])
        self.obj = np.zeros((R, Kmax), dtype=np.intp)
        self.remote = np.zeros((R, Kmax), dtype=bool)
        self.valid = np.zeros((R, Kmax), dtype=bool)
        self.costs = np.zeros((R, Kmax))
        self.sigma = np.zeros((R, Kmax))
        self.alpha = np.zeros((R, Kmax))
        self.twin_pos = np.full((R, Kmax), Kmax, dtype=np.intp)
        for row, rk in enumerate(ranks):
            K = rk.K
            p = rk.perm[:K]
            rem = p >= self.n
            objs = np.where(rem, p - self.n, p)
            self.obj[row, :K] = objs
            self.remote[row, :K] = rem
            self.valid[row, :K] = True
            self.costs[row, :K] = rk.costs[:K]
            self.costs[row, K:] = rk.costs[K - 1]
            self.sigma[row, :K] = rk.sigma[:K]
            self.sigma[row, K:] = rk.k
            self.alpha[row, : K - 1] = rk.alphas
            where = {int(o): j for j, o in enumerate(objs) if rem[j]}
            for j in np.flatnonzero(~rem):
                self.twin_pos[row, j] = where.get(int(objs[j]), K)
        w = np.ones(R) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (R,):
            raise ValueError("one weight per request expected")
        self.weights = w
        self._cols = np.arange(Kmax)

    def __len__(self) -> int:
        return len(self.ranks)

    def prefix_sums(self, y: np.ndarray) -> np.ndarray:
        vals = y[..., self.obj]
        vals = np.where(self.remote, 1.0 - vals, vals)
        vals = np.where(self.valid, vals, 0.0)
        return np.cumsum(vals, axis=-1)

    def gains(self, y: np.ndarray) -> np.ndarray:
        """Per-request gains; ``y`` may be one state or a stack of states (S, N)."""
        s = self.prefix_sums(np.asarray(y, dtype=np.float64))
        terms = np.minimum(self.k - self.sigma, s - self.sigma)
        return (terms * self.alpha).sum(axis=-1)

    def total_gain(self, y: np.ndarray):
        return self.gains(y) @ self.weights

    def subgradient(self, y: np.ndarray) -> np.ndarray:
        """Weighted sum of per-request supergradients at a single state."""
        y = np.asarray(y, dtype=np.float64)
        s = self.prefix_sums(y)
        # last position (0-based) i <= K-2 whose prefix sum stays within k
        within = (s <= self.k) & (self._cols <= (self.K - 2)[:, None])
        last = within.sum(axis=1) - 1
        istar = np.minimum(last[:, None], self.twin_pos - 1)
        active = self.valid & ~self.remote & (self._cols <= istar)
        nxt = np.take_along_axis(self.costs, np.clip(istar + 1, 0, self.costs.shape[1] - 1), axis=1)
        vals = (nxt - self.costs) * self.weights[:, None]
        return np.bincount(self.obj[active], weights=vals[active], minlength=self.n)
