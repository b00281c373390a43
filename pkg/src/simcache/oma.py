"""Online mirror ascent over the capped simplex {y in [0,1]^N : sum(y) = h}."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .catalog import Catalog, CostModel, rank
from .gain import RankBatch

NEGENTROPY = "negentropy"
EUCLIDEAN = "euclidean"
MAPS = (NEGENTROPY, EUCLIDEAN)

EXP_CLAMP = 500.0
FLOOR = 1e-300
SPARSITY_EPS = 1e-8


def canonical_map(name: str) -> str:
    key = name.lower().replace("_", "-")
    if key in ("negentropy", "negative-entropy", "entropy"):
        return NEGENTROPY
    if key in ("euclidean", "l2"):
        return EUCLIDEAN
    raise ValueError(f"unknown mirror map {name!r}; expected one of {MAPS}")


# --- mirror maps -------------------------------------------------------------

def potential(y, mirror: str) -> float:
    y = np.asarray(y, dtype=np.float64)
    if canonical_map(mirror) == NEGENTROPY:
        if np.any(y < 0):
            return math.inf
        pos = y > 0
        return float(np.sum(y[pos] * np.log(y[pos])))
    return 0.5 * float(y @ y)


def grad_potential(y, mirror: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if canonical_map(mirror) == NEGENTROPY:
        return 1.0 + np.log(y)
    return y.copy()


def inv_grad_potential(theta, mirror: str) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if canonical_map(mirror) == NEGENTROPY:
        return np.exp(np.clip(theta - 1.0, -EXP_CLAMP, EXP_CLAMP))
    return theta.copy()


def bregman_divergence(a, b, mirror: str) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if canonical_map(mirror) == NEGENTROPY:
        pos = a > 0
        out = np.sum(a[pos] * np.log(a[pos] / b[pos])) - a.sum() + b.sum()
        return float(out)
    d = a - b
    return 0.5 * float(d @ d)


# --- projections ---------------------------------------------------------------

def _check_capacity(n: int, h) -> None:
    if h > n:
        raise ValueError(f"capacity h={h} exceeds dimension {n}")
    if h <= 0:
        raise ValueError("capacity must be positive")


def project_negentropy(z, h) -> np.ndarray:
    """KL projection of a positive vector onto the capped simplex.

    The solution is ``min(1, theta * z)`` for the unique ``theta > 0`` that
    makes the sum equal ``h``. Only the top-h entries are sorted: at most
    h - 1 of them can be capped.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    _check_capacity(n, h)
    if np.any(z <= 0) or not np.all(np.isfinite(z)):
        raise ValueError("negative-entropy projection needs strictly positive finite input")
    if h == n:
        return np.ones(n)
    m = min(int(math.ceil(h)), n)
    top = np.argpartition(-z, m - 1)[:m] if m < n else np.arange(n)
    top = top[np.argsort(-z[top], kind="stable")]
    zs = z[top]
    rest = np.ones(n, dtype=bool)
    rest[top] = False
    # tail[b] = sum of all entries except the b largest; suffix sums avoid cancellation
    tail = z[rest].sum() + np.concatenate((np.cumsum(zs[::-1])[::-1], [0.0]))
    for b in range(m):
        theta = (h - b) / tail[b]
        if theta * zs[b] <= 1.0:
            y = np.minimum(1.0, theta * z)
            y[top[:b]] = 1.0
            return y
    raise RuntimeError("threshold scan failed to find a feasible scaling")


def project_negentropy_bisect(z, h, tol: float = 1e-15, max_iter: int = 2000) -> np.ndarray:
    """Same projection as :func:`project_negentropy`, by bisection on theta."""
    z = np.asarray(z, dtype=np.float64)
    _check_capacity(z.size, h)
    if np.any(z <= 0):
        raise ValueError("negative-entropy projection needs strictly positive input")
    lo, hi = 0.0, 1.0 / z.min()  # at hi every component is capped
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        if np.minimum(1.0, mid * z).sum() < h:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * hi:
            break
    theta = 0.5 * (lo + hi)
    y = np.minimum(1.0, theta * z)
    # absorb the residual into the uncapped components
    free = y < 1.0
    if free.any():
        y[free] *= (h - (~free).sum()) / y[free].sum()
    return y


def project_euclidean(z, h, iters: int = 200) -> np.ndarray:
    """Euclidean projection: ``clip(z + nu, 0, 1)`` with the sum pinned to h."""
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    _check_capacity(n, h)
    lo, hi = -z.max(), 1.0 - z.min()
    for _ in range(iters):
        nu = 0.5 * (lo + hi)
        if np.clip(z + nu, 0.0, 1.0).sum() < h:
            lo = nu
        else:
            hi = nu
    nu = 0.5 * (lo + hi)
    y = z + nu
    upper = y >= 1.0
    free = (y > 0.0) & ~upper
    if free.any():
        nu = (h - upper.sum() - z[free].sum()) / free.sum()
        y = z + nu
    return np.clip(y, 0.0, 1.0)


def bregman_project(z, h, mirror: str = NEGENTROPY) -> np.ndarray:
    if canonical_map(mirror) == NEGENTROPY:
        return project_negentropy(z, h)
    return project_euclidean(z, h)


# --- the ascent step -------------------------------------------------------------

def initial_state(n: int, h: int, mirror: str = NEGENTROPY) -> np.ndarray:
    """Minimizer of the mirror map over the capped simplex: uniform h/N for both maps."""
    canonical_map(mirror)
    _check_capacity(n, h)
    return np.full(n, h / n)


def oma_step(y, g, eta: float, mirror: str, h) -> np.ndarray:
    """Gradient step in the dual space followed by a Bregman projection."""
    y = np.asarray(y, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if canonical_map(mirror) == NEGENTROPY:
        # multiplicative update; projection is scale-invariant so shift the exponent
        expo = np.log(np.maximum(y, FLOOR)) + np.clip(eta * g, -EXP_CLAMP, EXP_CLAMP)
        z = np.exp(expo - expo.max())
        z = np.maximum(z, FLOOR)
        return np.maximum(project_negentropy(z, h), FLOOR)
    return project_euclidean(y + eta * g, h)


def subgradient(r, y, catalog: Catalog, cost: CostModel, ranking=None) -> np.ndarray:
    """A supergradient of the (concave) caching gain at ``y``."""
    rk = ranking if ranking is not None else rank(r, catalog, cost)
    return RankBatch([rk]).subgradient(np.asarray(y, dtype=np.float64))


def active_set(y, eps: float = SPARSITY_EPS) -> np.ndarray:
    """Ids whose fractional value exceeds ``eps``; the rest are negligible but kept positive."""
    return np.flatnonzero(np.asarray(y) > eps)


# --- learning-rate schedules ------------------------------------------------------

@dataclass(frozen=True)
class Schedule:
    """Learning rate as a function of the (1-based) step.

    ``constant`` uses ``eta``; ``theorem`` derives the regret-optimal constant
    rate from the horizon, catalog size and subgradient bound; ``cosine``
    decays from 4/c_f to 0 over the horizon.
    """

    kind: str = "constant"
    eta: float = 1e-2
    T: int = 1
    cf: float = 1.0
    cdk: float = 0.0
    n: int = 1
    h: int = 1

    def __post_init__(self):
        if self.kind not in ("constant", "theorem", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.T < 1:
            raise ValueError("horizon must be positive")
        if self.kind == "theorem" and self.cdk + self.cf <= 0:
            raise ValueError("theorem rate needs a positive subgradient bound")
        if self.kind == "cosine" and self.cf <= 0:
            raise ValueError("cosine rate needs a positive fetch cost")

    def __call__(self, t: int) -> float:
        if self.kind == "constant":
            return self.eta
        if self.kind == "theorem":
            return theorem_rate(self.T, self.cdk, self.cf, self.n, self.h)
        return cosine_rate(t, self.T, self.cf)


def theorem_rate(T: int, cdk: float, cf: float, n: int, h: int) -> float:
    ratio = max(n / h, 1.0 + 1e-12)
    return math.sqrt(2.0 * math.log(ratio) / T) / (cdk + cf)


def cosine_rate(t: int, T: int, cf: float) -> float:
    return (2.0 / cf) * (1.0 + math.cos(math.pi * t / T))


def estimate_cdk(requests, catalog: Catalog, k: int, limit: int = 1000) -> float:
    """Largest k-th neighbor dissimilarity over (a prefix of) the requests."""
    worst = 0.0
    for i, r in enumerate(requests):
        if i >= limit:
            break
        d = catalog.distances(r)
        worst = max(worst, float(np.partition(d, k - 1)[k - 1]))
    return worst


class MirrorAscent:
    """Fractional OMA state machine: holds y and applies one step per gradient."""

    def __init__(self, n: int, h: int, mirror: str = NEGENTROPY, schedule: Schedule | None = None):
        self.mirror = canonical_map(mirror)
        self.h = h
        self.schedule = schedule or Schedule()
        self.y = initial_state(n, h, self.mirror)
        self.t = 0

    def step(self, g) -> np.ndarray:
        self.t += 1
        eta = self.schedule(self.t)
        if eta != 0.0:
            self.y = oma_step(self.y, g, eta, self.mirror, self.h)
        return self.y
