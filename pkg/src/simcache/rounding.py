"""Randomized rounding of fractional cache states to physical allocations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SNAP = 1e-9

DEPROUND = "depround"
COUPLED = "coupled"
SCHEMES = (DEPROUND, COUPLED)


@dataclass(frozen=True)
class RoundingConfig:
    scheme: str = DEPROUND
    M: int = 1
    delta: float = 0.05

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown rounding scheme {self.scheme!r}; expected one of {SCHEMES}")
        if self.M < 1:
            raise ValueError("freezing period M must be >= 1")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")


def make_rng(seed=None) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def dep_round(y, rng=None, h: int | None = None, tol: float = SNAP) -> np.ndarray:
    """Dependent rounding preserving marginals and the exact number of ones.

    Pairs of fractional components are merged left to right: one fractional
    "carry" component absorbs mass from (or gives mass to) the next one until
    one of the two becomes integral.
    """
    rng = make_rng(rng)
    y = np.asarray(y, dtype=np.float64)
    total = y.sum()
    target = int(round(total)) if h is None else h
    if abs(total - target) > max(tol, 1e-9 * y.size):
        raise ValueError(f"fractional state sums to {total!r}, not an integer capacity {target}")
    x = y.copy()
    x[x <= tol] = 0.0
    x[x >= 1.0 - tol] = 1.0
    frac = np.flatnonzero((x > 0.0) & (x < 1.0))
    if frac.size:
        vals = x[frac].tolist()
        coins = rng.random(frac.size).tolist()
        carry = 0
        for pos in range(1, len(vals)):
            a, b = vals[carry], vals[pos]
            up = min(1.0 - a, b)    # mass moved into the carry
            down = min(a, 1.0 - b)  # mass moved out of the carry
            if coins[pos] * (up + down) < down:
                a, b = a + up, b - up
            else:
                a, b = a - down, b + down
            if a <= tol or a >= 1.0 - tol:
                vals[carry] = 0.0 if a <= tol else 1.0
                vals[pos] = b
                carry = pos
            else:
                vals[carry] = a
                vals[pos] = 0.0 if b <= tol else 1.0
        # leftover carry is fractional only through accumulated float error
        vals[carry] = 1.0 if vals[carry] >= 0.5 else 0.0
        x[frac] = vals
    if int(x.sum()) != target:
        raise RuntimeError(f"rounding produced {int(x.sum())} ones, expected {target}")
    return x


def coupled_round(x_t, y_t, y_next, rng=None) -> np.ndarray:
    """Move each component independently so that E[x_next] = y_next.

    Cached objects are evicted with probability -delta/y when their mass drops;
    absent objects are inserted with probability delta/(1-y) when it grows.
    """
    rng = make_rng(rng)
    x_t = np.asarray(x_t, dtype=np.float64)
    y_t = np.asarray(y_t, dtype=np.float64)
    y_next = np.asarray(y_next, dtype=np.float64)
    if not (x_t.shape == y_t.shape == y_next.shape):
        raise ValueError("state shapes differ")
    delta = y_next - y_t
    held = x_t == 1.0
    evict = held & (delta < 0)
    insert = ~held & (delta > 0)
    if np.any(evict & (y_t <= 0)) or np.any(insert & (y_t >= 1)):
        raise ValueError("integral state inconsistent with its fractional marginals")
    u = rng.random(x_t.size)
    x = x_t.copy()
    with np.errstate(divide="ignore", invalid="ignore"):
        p_out = np.where(evict, -delta / y_t, 0.0)
        p_in = np.where(insert, delta / (1.0 - y_t), 0.0)
    x[evict & (u < p_out)] = 0.0
    x[insert & (u < p_in)] = 1.0
    return x


def independent_round(y, rng=None) -> np.ndarray:
    """One coin per component; the starting point for relaxed-capacity rounding."""
    rng = make_rng(rng)
    y = np.asarray(y, dtype=np.float64)
    return (rng.random(y.size) < y).astype(np.float64)


def should_reround(scheme: str, M: int, t: int) -> bool:
    """Whether the physical state is resampled after request ``t`` (1-based)."""
    if t < 1:
        raise ValueError("steps are numbered from 1")
    if scheme == COUPLED:
        return True
    return t % M == 0


def fetched_count(x_old, x_new) -> int:
    """Objects present in the new state but not the old one."""
    return int(np.sum((np.asarray(x_new) > 0.5) & (np.asarray(x_old) < 0.5)))


@dataclass
class OccupancyReport:
    t: np.ndarray
    occupancy: np.ndarray
    running_mean: np.ndarray
    h: int
    delta: float

    @property
    def violation_fraction(self) -> float:
        """Share of steps holding more than (1 + delta) h objects."""
        return float(np.mean(self.occupancy > (1.0 + self.delta) * self.h))

    @property
    def within_fraction(self) -> float:
        """Share of steps with occupancy inside h(1 +- delta)."""
        return float(np.mean(np.abs(self.occupancy - self.h) <= self.delta * self.h))

    @property
    def chernoff_bound(self) -> float:
        return float(np.exp(-self.delta ** 2 * self.h / 2.0))

    def rows(self):
        return zip(self.t.tolist(), self.occupancy.tolist(), self.running_mean.tolist())


def occupancy_report(states, h: int, delta: float = 0.05) -> OccupancyReport:
    occ = np.array([float(np.sum(s)) for s in states])
    t = np.arange(1, occ.size + 1)
    return OccupancyReport(t=t, occupancy=occ, running_mean=np.cumsum(occ) / t, h=h, delta=delta)


class Rounder:
    """Keeps the physical state in step with a fractional trajectory."""

    def __init__(self, config: RoundingConfig, rng=None):
        self.config = config
        self.rng = make_rng(rng)
        self.x = None

    def start(self, y) -> np.ndarray:
        self.x = dep_round(y, self.rng)
        return self.x

    def update(self, t: int, y_old, y_new) -> np.ndarray:
        if self.config.scheme == COUPLED:
            self.x = coupled_round(self.x, y_old, y_new, self.rng)
        elif should_reround(DEPROUND, self.config.M, t):
            self.x = dep_round(y_new, self.rng)
        return self.x


# --- Monte Carlo property checks ---------------------------------------------------

def _result(value, target, passed):
    return {"value": float(value), "target": target, "passed": bool(passed)}


def check_depround(draws: int = 100_000, rng=None, y=None, tol: float = 0.01, subsets: int = 20) -> dict:
    """Marginals, exact cardinality and the negative-correlation product bound."""
    rng = make_rng(rng)
    y = np.array([0.9, 0.1, 0.5, 0.5, 0.3, 0.7, 0.25, 0.75]) if y is None else np.asarray(y, dtype=float)
    h = int(round(y.sum()))
    X = np.empty((draws, y.size))
    for i in range(draws):
        X[i] = dep_round(y, rng, h)
    out = {}
    err = float(np.max(np.abs(X.mean(axis=0) - y)))
    out["depround_marginals"] = _result(err, f"<= {tol}", err <= tol)
    bad = int(np.count_nonzero(X.sum(axis=1) != h))
    out["depround_exact_sum"] = _result(bad, "== 0", bad == 0)
    worst = -np.inf
    for _ in range(subsets):
        size = int(rng.integers(2, min(5, y.size) + 1))
        S = rng.choice(y.size, size=size, replace=False)
        lhs = float(np.mean(np.prod(1.0 - X[:, S], axis=1)))
        worst = max(worst, lhs - float(np.prod(1.0 - y[S])))
        lhs = float(np.mean(np.prod(X[:, S], axis=1)))
        worst = max(worst, lhs - float(np.prod(y[S])))
    out["depround_product_bound"] = _result(worst, f"<= {tol}", worst <= tol)
    return out


def check_coupled(draws: int = 100_000, rng=None, n: int = 12, rel: float = 0.02, tol: float = 0.01) -> dict:
    """Marginals after one coupled step and E|x' - x|_1 = |y' - y|_1.

    The starting state is drawn with independent coins so that E[x] = y.
    """
    rng = make_rng(rng)
    y0 = rng.uniform(0.05, 0.95, n)
    y1 = np.clip(y0 + rng.uniform(-0.3, 0.3, n), 0.0, 1.0)
    X0 = (rng.random((draws, n)) < y0).astype(float)
    d = y1 - y0
    u = rng.random((draws, n))
    with np.errstate(divide="ignore", invalid="ignore"):
        p_out = np.where(d < 0, -d / y0, 0.0)
        p_in = np.where(d > 0, d / (1.0 - y0), 0.0)
    X1 = X0.copy()
    X1[(X0 == 1.0) & (u < p_out)] = 0.0
    X1[(X0 == 0.0) & (u < p_in)] = 1.0
    # spot-check the vectorized step against the reference implementation
    for i in range(min(draws, 200)):
        ref = coupled_round(X0[i], y0, y1, np.random.default_rng([i, 7]))
        if not np.all((ref == X0[i]) | (np.sign(ref - X0[i]) == np.sign(d))):
            raise AssertionError("coupled_round moved a component against the fractional change")
    out = {}
    err = float(np.max(np.abs(X1.mean(axis=0) - y1)))
    out["coupled_marginals"] = _result(err, f"<= {tol}", err <= tol)
    moved = float(np.abs(X1 - X0).sum(axis=1).mean())
    target = float(np.abs(d).sum())
    gap = abs(moved - target) / target
    out["coupled_movement_identity"] = _result(gap, f"<= {rel}", gap <= rel)
    return out
