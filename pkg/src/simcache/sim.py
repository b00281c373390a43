"""Request traces, the simulation loop, metrics and offline optimizers."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import optimize, sparse

from . import oma
from .catalog import Catalog, CostModel, rank_from_distances
from .gain import ONE_MINUS_INV_E, RankBatch
from .policies import Policy, Request
from .rounding import dep_round, make_rng

log = logging.getLogger(__name__)


class SimulationError(RuntimeError):
    pass


class OracleRefused(ValueError):
    """The instance is too large for an exact oracle."""


# --- traces ----------------------------------------------------------------------

@dataclass
class RequestTrace:
    """Ordered requests. ``ids[t]`` is the catalog object requested, or -1."""

    vectors: np.ndarray
    ids: np.ndarray
    timestamps: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim == 1:
            self.vectors = self.vectors.reshape(-1, 1)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (self.vectors.shape[0],):
            raise ValueError("one id (or -1) per request expected")

    @classmethod
    def from_ids(cls, catalog: Catalog, ids, timestamps=None) -> "RequestTrace":
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= catalog.n):
            raise ValueError("request id outside the catalog")
        return cls(catalog.points[ids], ids, timestamps)

    @classmethod
    def from_vectors(cls, vectors, timestamps=None) -> "RequestTrace":
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim == 1:
            vectors = vectors.reshape(-1, 1)
        return cls(vectors, np.full(vectors.shape[0], -1), timestamps)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def __iter__(self):
        for i in range(len(self)):
            yield self.request(i)

    def request(self, i: int) -> Request:
        oid = int(self.ids[i])
        return Request(oid if oid >= 0 else None, self.vectors[i])

    def head(self, T: int) -> "RequestTrace":
        ts = None if self.timestamps is None else self.timestamps[:T]
        return RequestTrace(self.vectors[:T], self.ids[:T], ts)

    def distinct(self):
        """Distinct requests with their frequencies (fractions of the trace)."""
        if np.all(self.ids >= 0):
            uniq, first, counts = np.unique(self.ids, return_index=True, return_counts=True)
        else:
            _, first, counts = np.unique(self.vectors, axis=0, return_index=True, return_counts=True)
        reqs = [self.request(int(i)) for i in first]
        return reqs, counts / len(self)


def grid_catalog(side: int) -> Catalog:
    if side < 1:
        raise ValueError("grid side must be >= 1")
    ii, jj = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    return Catalog(np.column_stack([ii.ravel(), jj.ravel()]).astype(float), metric="l1")


def grid_popularity(side: int, scale: float = 6.0) -> np.ndarray:
    """Gaussian popularity in the l1 distance from the grid center."""
    cat = grid_catalog(side)
    center = np.full(2, side / 2.0)
    d = np.abs(cat.points - center).sum(axis=1)
    w = np.exp(-d ** 2 / (2.0 * scale ** 2))
    return w / w.sum()


def irm_ids(p, T: int, rng) -> np.ndarray:
    if T < 1:
        raise ValueError("horizon T must be >= 1")
    return make_rng(rng).choice(p.size, size=T, p=p)


def gen_grid_trace(side: int = 30, T: int = 10_000, seed=None, scale: float = 6.0):
    """Lattice catalog with Gaussian IRM requests centred on the grid."""
    cat = grid_catalog(side)
    p = grid_popularity(side, scale)
    return cat, RequestTrace.from_ids(cat, irm_ids(p, T, seed))


def popularity_from_distances(d, beta: float) -> np.ndarray:
    """IRM weights proportional to d^-beta; a zero distance gets the largest finite weight."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.asarray(d, dtype=np.float64)
    w = np.zeros_like(d)
    pos = d > 0
    if not pos.any():
        return np.full(d.size, 1.0 / d.size)
    w[pos] = d[pos] ** -beta
    w[~pos] = w[pos].max()
    return w / w.sum()


def rank_popularity(catalog: Catalog, beta: float) -> np.ndarray:
    """Popularity decaying with the euclidean distance from the catalog barycenter."""
    d = np.linalg.norm(catalog.points - catalog.barycenter(), axis=1)
    return popularity_from_distances(d, beta)


def gen_rank_trace(catalog: Catalog, beta: float, T: int, seed=None) -> RequestTrace:
    p = rank_popularity(catalog, beta)
    return RequestTrace.from_ids(catalog, irm_ids(p, T, seed))


def zipf_tail_exponent(trace: RequestTrace, head: int = 10, min_count: int = 5) -> float:
    """Slope of log frequency against log rank, fitted past the head of the ranking."""
    _, counts = np.unique(trace.ids, return_counts=True)
    counts = np.sort(counts)[::-1]
    ranks = np.arange(1, counts.size + 1)
    sel = (ranks > head) & (counts >= min_count)
    if sel.sum() < 3:
        sel = counts > 0
    slope = np.polyfit(np.log(ranks[sel]), np.log(counts[sel]), 1)[0]
    return float(-slope)


# --- trace files -----------------------------------------------------------------

def save_trace(path, trace: RequestTrace) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        has_ts = trace.timestamps is not None
        if np.all(trace.ids >= 0):
            w.writerow(["t", "object_id"] + (["timestamp"] if has_ts else []))
            for t, oid in enumerate(trace.ids.tolist()):
                w.writerow([t, oid] + ([repr(float(trace.timestamps[t]))] if has_ts else []))
        else:
            d = trace.vectors.shape[1]
            w.writerow(["t"] + [f"x{i}" for i in range(d)] + (["timestamp"] if has_ts else []))
            for t, row in enumerate(trace.vectors):
                w.writerow([t] + [repr(float(v)) for v in row]
                           + ([repr(float(trace.timestamps[t]))] if has_ts else []))


def load_trace(path, catalog: Catalog | None = None) -> RequestTrace:
    """Read a trace CSV holding either an ``object_id`` column or embedding columns."""
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty trace")
    header = [c.strip() for c in rows[0]]
    body = [r for r in rows[1:] if r]
    ts = None
    if "timestamp" in header:
        col = header.index("timestamp")
        ts = np.array([float(r[col]) for r in body])
    if "object_id" in header:
        if catalog is None:
            raise ValueError("an object-id trace needs a catalog to resolve ids")
        col = header.index("object_id")
        ids = np.array([int(r[col]) for r in body], dtype=np.int64)
        return RequestTrace.from_ids(catalog, ids, ts)
    cols = [i for i, name in enumerate(header) if name not in ("t", "timestamp", "id")]
    vecs = np.array([[float(r[i]) for i in cols] for r in body])
    if catalog is not None and vecs.shape[1] != catalog.dim:
        raise ValueError(f"trace dimension {vecs.shape[1]} differs from catalog dimension {catalog.dim}")
    return RequestTrace.from_vectors(vecs, ts)


# --- simulation loop ---------------------------------------------------------------

@dataclass
class MetricsSeries:
    gain: np.ndarray
    fetched: np.ndarray
    occupancy: np.ndarray
    hits: np.ndarray
    k: int
    cf: float
    config: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.gain.size

    @property
    def scale(self) -> float:
        return self.k * self.cf

    @property
    def nag_series(self) -> np.ndarray:
        t = np.arange(1, self.T + 1)
        return np.cumsum(self.gain) / (self.scale * t)

    @property
    def nag(self) -> float:
        return float(self.gain.sum() / (self.scale * self.T))

    def steady_nag(self, tail: float = 0.2) -> float:
        """NAG over the last ``tail`` fraction of the run."""
        start = int(math.floor(self.T * (1.0 - tail)))
        return float(self.gain[start:].mean() / self.scale)

    def windows(self, size: int):
        """Per-window rows (t_end, mean gain, nag so far, fetched, mean occupancy)."""
        nag = self.nag_series
        for start in range(0, self.T, size):
            end = min(start + size, self.T)
            yield (end, float(self.gain[start:end].mean()), float(nag[end - 1]),
                   int(self.fetched[start:end].sum()), float(self.occupancy[start:end].mean()))

    def summary(self) -> dict:
        return {
            "T": self.T,
            "nag": self.nag,
            "steady_nag": self.steady_nag(),
            "total_gain": float(self.gain.sum()),
            "update_cost": int(self.fetched.sum()),
            "mean_occupancy": float(self.occupancy.mean()) if self.T else 0.0,
            "hit_ratio": float(np.mean(self.hits)) if self.hits.size else None,
            "config": self.config,
        }

    def write_csv(self, path, window: int = 1) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "gain", "nag", "fetched", "occupancy"])
            if window <= 1:
                nag = self.nag_series
                for t in range(self.T):
                    w.writerow([t + 1, repr(float(self.gain[t])), repr(float(nag[t])),
                                int(self.fetched[t]), int(self.occupancy[t])])
            else:
                for end, g, nag, f, occ in self.windows(window):
                    w.writerow([end, repr(g), repr(nag), f, repr(occ)])

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def run(policy: Policy, trace: RequestTrace, cost: CostModel | None = None, audit: bool = False,
        config: dict | None = None) -> MetricsSeries:
    """Stream the trace through the policy and collect per-step metrics.

    With ``audit`` every reported gain is recomputed from the physical state
    by the gain module (valid for policies that serve through the indexes).
    """
    from .gain import caching_gain

    cost = cost or policy.cost
    T = len(trace)
    gain = np.empty(T)
    fetched = np.empty(T, dtype=np.int64)
    occ = np.empty(T, dtype=np.int64)
    hits = []
    for t in range(T):
        req = trace.request(t)
        before = policy.state().copy() if audit else None
        try:
            ev = policy.step(t + 1, req)
        except Exception as exc:
            raise SimulationError(f"policy {policy.name!r} failed at step {t + 1}: {exc}") from exc
        if audit:
            ref = caching_gain(req.vector, before, policy.catalog, cost)
            if abs(ref - ev.gain) > 1e-9 * max(1.0, abs(ref)):
                raise SimulationError(f"step {t + 1}: reported gain {ev.gain} != recomputed {ref}")
        gain[t] = ev.gain
        fetched[t] = ev.fetched
        occ[t] = ev.occupancy
        if ev.hit is not None:
            hits.append(ev.hit)
    return MetricsSeries(gain, fetched, occ, np.asarray(hits, dtype=bool), cost.k, cost.cf, dict(config or {}))


# --- offline optimization -------------------------------------------------------------

def request_batch(requests, catalog: Catalog, cost: CostModel, weights=None) -> RankBatch:
    ranks = [rank_from_distances(catalog.distances(r.vector if isinstance(r, Request) else r), cost)
             for r in requests]
    return RankBatch(ranks, weights)


def trace_batch(trace: RequestTrace, catalog: Catalog, cost: CostModel) -> RankBatch:
    """Time-averaged gain table: distinct requests weighted by frequency."""
    cost.check(catalog)
    reqs, freq = trace.distinct()
    return request_batch(reqs, catalog, cost, freq)


@dataclass
class OfflineResult:
    y_bar: np.ndarray
    x_bar: np.ndarray
    value_y_bar: float
    value_x_bar: float
    last_y: np.ndarray


def offline_optimize(batch: RankBatch, h: int, mirror: str = oma.NEGENTROPY, iterations: int = 10_000,
                     schedule: oma.Schedule | None = None, seed=None) -> OfflineResult:
    """Run mirror ascent on the time-averaged gain and average the iterates.

    Returns the averaged fractional allocation and one rounded sample of it.
    """
    n = batch.n
    if schedule is None:
        L = max(float(batch.costs.max()), 1e-12)
        schedule = oma.Schedule("constant", eta=1.0 / L)
    y = oma.initial_state(n, h, mirror)
    acc = np.zeros(n)
    for t in range(1, iterations + 1):
        acc += y
        y = oma.oma_step(y, batch.subgradient(y), schedule(t), mirror, h)
    y_bar = acc / iterations
    x_bar = dep_round(y_bar, make_rng(seed), h=h)
    return OfflineResult(y_bar, x_bar, float(batch.total_gain(y_bar)), float(batch.total_gain(x_bar)), y)


def fractional_oracle_lp(batch: RankBatch, h: int):
    """Best fractional static allocation as a linear program.

    Per request and prefix i: u_i tracks (prefix sum - sigma_i) through a
    chain of equalities, and z_i <= min(k - sigma_i, u_i) is the epigraph
    of the concave min-term; maximize the weighted sum of alpha_i z_i.
    """
    n = batch.n
    rows, cols, vals = [], [], []
    eq_rhs = []
    obj = []
    lb, ub = [], []
    # y variables
    nvar = n
    obj += [0.0] * n
    lb += [0.0] * n
    ub += [1.0] * n
    ub_rows, ub_cols, ub_vals = [], [], []
    n_ub = 0
    n_eq = 0
    for r, rk in enumerate(batch.ranks):
        w = batch.weights[r]
        K = rk.K
        prev = None
        for i in range(K - 1):
            pid = int(rk.perm[i])
            u = nvar
            nvar += 1
            obj.append(0.0)
            lb.append(-np.inf)
            ub.append(np.inf)
            # u_i - u_{i-1} -/+ y = 0
            rows += [n_eq]
            cols += [u]
            vals += [1.0]
            if prev is not None:
                rows.append(n_eq)
                cols.append(prev)
                vals.append(-1.0)
            if pid < n:
                rows.append(n_eq)
                cols.append(pid)
                vals.append(-1.0)
            else:
                rows.append(n_eq)
                cols.append(pid - n)
                vals.append(1.0)
            eq_rhs.append(0.0)
            n_eq += 1
            prev = u
            a = rk.alphas[i]
            if a > 0:
                z = nvar
                nvar += 1
                obj.append(-w * a)
                lb.append(-np.inf)
                ub.append(float(rk.k - rk.sigma[i]))
                ub_rows += [n_ub, n_ub]
                ub_cols += [z, u]
                ub_vals += [1.0, -1.0]
                n_ub += 1
    cap_row = n_eq
    rows += [cap_row] * n
    cols += list(range(n))
    vals += [1.0] * n
    eq_rhs.append(float(h))
    A_eq = sparse.csr_matrix((vals, (rows, cols)), shape=(n_eq + 1, nvar))
    kwargs = {}
    if n_ub:
        kwargs["A_ub"] = sparse.csr_matrix((ub_vals, (ub_rows, ub_cols)), shape=(n_ub, nvar))
        kwargs["b_ub"] = np.zeros(n_ub)
    res = optimize.linprog(np.asarray(obj), A_eq=A_eq, b_eq=np.asarray(eq_rhs),
                           bounds=np.column_stack([lb, ub]), method="highs", **kwargs)
    if res.status != 0:
        raise RuntimeError(f"LP solver failed: {res.message}")
    y = np.clip(res.x[:n], 0.0, 1.0)
    return float(batch.total_gain(y)), y


def fractional_oracle_ascent(batch: RankBatch, h: int, eta0: float | None = None, window: int = 2000,
                             rtol: float = 1e-6, max_iter: int = 500_000):
    """Best fractional allocation by long-run mirror ascent with eta0/sqrt(t) steps.

    Stops once the best value seen has not improved by more than ``rtol``
    (relative) over ``window`` iterations.
    """
    n = batch.n
    y = oma.initial_state(n, h)
    if eta0 is None:
        # scale to the supergradient at the start so the first steps move y by O(1) factors
        eta0 = 5.0 / max(float(np.abs(batch.subgradient(y)).max()), 1e-12)
    best, best_y = batch.total_gain(y), y
    mark = best
    acc = np.zeros(n)
    for t in range(1, max_iter + 1):
        y = oma.oma_step(y, batch.subgradient(y), eta0 / math.sqrt(t), oma.NEGENTROPY, h)
        acc += y
        val = batch.total_gain(y)
        if val > best:
            best, best_y = val, y
        if t % window == 0:
            avg = acc / t
            val = batch.total_gain(avg)
            if val > best:
                best, best_y = val, avg
            if best - mark <= rtol * abs(best):
                break
            mark = best
    return float(best), best_y


def fractional_oracle(batch: RankBatch, h: int, method: str = "lp", max_vars: int = 2_000_000,
                      agree: float = 1e-3):
    """Optimal fractional static allocation; ``method="both"`` cross-checks the LP."""
    size = batch.n + 2 * int(batch.K.sum())
    if size > max_vars:
        raise OracleRefused(f"fractional oracle refused: {size} variables > {max_vars}")
    if method == "lp":
        return fractional_oracle_lp(batch, h)
    if method == "ascent":
        return fractional_oracle_ascent(batch, h)
    if method == "both":
        v_lp, y_lp = fractional_oracle_lp(batch, h)
        v_ma, _ = fractional_oracle_ascent(batch, h)
        if abs(v_lp - v_ma) > agree * max(abs(v_lp), 1e-12):
            raise RuntimeError(f"fractional oracles disagree: LP {v_lp!r} vs ascent {v_ma!r}")
        return v_lp, y_lp
    raise ValueError(f"unknown oracle method {method!r}")


def integral_oracle(batch: RankBatch, h: int, support=None, max_states: int = 3_000_000,
                    chunk: int = 20_000):
    """Exhaustive best integral allocation, optionally restricted to ``support`` ids."""
    n = batch.n
    ids = np.arange(n) if support is None else np.unique(np.asarray(support, dtype=np.intp))
    if ids.size < h:
        raise ValueError("support smaller than the cache")
    count = math.comb(ids.size, h)
    if count > max_states:
        raise OracleRefused(f"integral oracle refused: C({ids.size},{h}) = {count} states")
    best, best_x = -np.inf, None
    combos = itertools.combinations(ids.tolist(), h)
    while True:
        block = list(itertools.islice(combos, chunk))
        if not block:
            break
        X = np.zeros((len(block), n))
        X[np.repeat(np.arange(len(block)), h), np.asarray(block).ravel()] = 1.0
        vals = batch.gains(X) @ batch.weights
        j = int(np.argmax(vals))
        if vals[j] > best:
            best, best_x = float(vals[j]), X[j].copy()
    return best, best_x


def approximation_ratio() -> float:
    return ONE_MINUS_INV_E
