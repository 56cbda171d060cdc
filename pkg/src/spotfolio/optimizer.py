"""Risk-adjusted portfolio selection over the market simplex.

The program is

    maximize  c.x - alpha * x V x   subject to  sum(x) = 1,  x >= 0

with ``c`` the per-market expected returns and ``V`` a PSD covariance.
:func:`solve` runs accelerated projected-gradient ascent, then snaps the
iterate onto the exact optimum of its active face by solving the KKT system
there. Convergence is certified by the Frank-Wolfe gap
``max_i grad_i - grad.x``, which bounds the distance to the optimal
objective from above for any concave objective on the simplex.
"""
from __future__ import annotations

import fnmatch
import hashlib
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    InvalidSpec,
    KOutOfRange,
    NoCandidateMarkets,
    NotConverged,
    StaleCache,
    TooManyMarkets,
    UnknownMarket,
)
from .market_data import MarketCatalog
from .risk import CovarianceMatrix, MttrEstimate, ReturnsVector

log = logging.getLogger(__name__)

WEIGHT_TRUNCATION = 1e-6
DEFAULT_GAP_TOL = 1e-10
DEFAULT_MAX_ITER = 100_000
STALL_IMPROVEMENT = 1e-10
STALL_ITERATIONS = 10


def default_alpha_grid() -> list[float]:
    """alpha = 0 plus 25 log-spaced values from 1e-3 to 1e3."""
    return [0.0] + [float(a) for a in np.logspace(-3, 3, 25)]


@dataclass(frozen=True)
class MarketConstraints:
    job_length_seconds: float | None = None
    mttr_factor: float = 2.0
    min_mttr_seconds: float | None = None
    include: tuple[str, ...] = ()
    exclude: tuple[str, ...] = ()
    min_cpu: int | None = None
    min_mem: float | None = None
    max_markets: int | None = None

    @property
    def required_mttr(self) -> float | None:
        if self.min_mttr_seconds is not None:
            return self.min_mttr_seconds
        if self.job_length_seconds is not None:
            return self.mttr_factor * self.job_length_seconds
        return None

    @property
    def is_default(self) -> bool:
        return self == MarketConstraints()


@dataclass(frozen=True, eq=False)
class PortfolioProblem:
    markets: tuple[str, ...]
    c: np.ndarray
    V: np.ndarray
    alpha: float

    def __post_init__(self):
        c = np.asarray(self.c.values if isinstance(self.c, ReturnsVector) else self.c, dtype=float)
        V = np.asarray(self.V.entries if isinstance(self.V, CovarianceMatrix) else self.V, dtype=float)
        n = len(self.markets)
        if n < 1:
            raise DimensionMismatch("a portfolio problem needs at least one market")
        if c.shape != (n,) or V.shape != (n, n):
            raise DimensionMismatch(
                f"{n} markets but c has shape {c.shape} and V has shape {V.shape}"
            )
        if not self.alpha >= 0:
            raise InvalidSpec(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "markets", tuple(self.markets))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "V", V)
        object.__setattr__(self, "alpha", float(self.alpha))

    @classmethod
    def from_stats(cls, returns: ReturnsVector, cov: CovarianceMatrix, alpha: float) -> "PortfolioProblem":
        if tuple(returns.markets) != tuple(cov.markets):
            raise DimensionMismatch("returns and covariance are indexed by different markets")
        return cls(returns.markets, returns.values, cov.entries, alpha)

    def objective(self, x: np.ndarray) -> float:
        return float(self.c @ x - self.alpha * (x @ self.V @ x))


@dataclass(frozen=True, eq=False)
class Portfolio:
    markets: tuple[str, ...]
    weights: np.ndarray
    alpha: float
    expected_return: float
    risk: float
    objective: float
    gap: float = 0.0
    iterations: int = 0

    @classmethod
    def from_weights(cls, markets, weights, c, V, alpha, gap=0.0, iterations=0) -> "Portfolio":
        w = _clean_weights(np.asarray(weights, dtype=float))
        ret = float(np.asarray(c) @ w)
        risk = float(w @ np.asarray(V) @ w) if V is not None else float("nan")
        obj = ret - alpha * risk if V is not None else float("nan")
        return cls(tuple(markets), w, float(alpha), ret, risk, obj, gap, iterations)

    def weight(self, market: str) -> float:
        try:
            return float(self.weights[self.markets.index(market)])
        except ValueError:
            raise UnknownMarket(f"market {market!r} not in portfolio") from None

    def as_dict(self, threshold: float = 0.0) -> dict[str, float]:
        return {m: float(w) for m, w in zip(self.markets, self.weights) if w > threshold}

    def truncated(self, threshold: float = WEIGHT_TRUNCATION) -> "Portfolio":
        """Zero weights below ``threshold`` and renormalise (used before allocation)."""
        w = np.where(self.weights < threshold, 0.0, self.weights)
        if w.sum() <= 0:
            w = np.zeros_like(self.weights)
            w[int(np.argmax(self.weights))] = 1.0
        w = w / w.sum()
        return Portfolio(self.markets, w, self.alpha, float("nan"), float("nan"), float("nan"))


@dataclass(frozen=True, eq=False)
class FrontierPoint:
    alpha: float
    expected_return: float
    risk: float
    weights: np.ndarray


def _clean_weights(w: np.ndarray) -> np.ndarray:
    w = np.where((w < 0) & (w >= -1e-10), 0.0, w)
    if np.any(w < 0):
        raise InvalidSpec(f"weights contain negative entries (min {w.min():.3e})")
    s = w.sum()
    if not s > 0:
        raise InvalidSpec("weights sum to zero")
    return w / s


# --------------------------------------------------------------------------
# numerical kernels


def project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto ``{x : x >= 0, sum(x) = 1}`` (sort-based)."""
    n = v.size
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.nonzero(u - css / ind > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def largest_eigenvalue(V: np.ndarray, max_iter: int = 1000, tol: float = 1e-9) -> float:
    """Power iteration estimate of the top eigenvalue of a PSD matrix."""
    n = V.shape[0]
    v = 1.0 + np.arange(n) / max(n, 1)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = V @ v
        nw = float(np.linalg.norm(w))
        if nw == 0.0:
            return 0.0
        v = w / nw
        if abs(nw - lam) <= tol * nw:
            return nw
        lam = nw
    return lam


def frank_wolfe_gap(c: np.ndarray, V: np.ndarray, alpha: float, x: np.ndarray, Vx=None) -> float:
    g = c - 2.0 * alpha * (V @ x if Vx is None else Vx)
    return max(0.0, float(g.max() - g @ x))


def _face_step(c, V, alpha, x, face):
    """Ascent step within the face: to the face optimum, or along a flat ascent ray.

    Returns ``(p, bounded)``; ``p`` is zero off ``face`` and sums to zero.
    """
    k = face.size
    p = np.zeros_like(x)
    if k < 2:
        return p, True
    # y = x_F + Z z with Z = [I; -1] spans the directions that keep the sum at one
    Vf = V[np.ix_(face, face)]
    g = c[face] - 2.0 * alpha * (Vf @ x[face])
    VZ = Vf[:, :-1] - Vf[:, -1:]
    H = 2.0 * alpha * (VZ[:-1] - VZ[-1:])
    b = g[:-1] - g[-1]
    w, Q = np.linalg.eigh((H + H.T) / 2)
    wmax = max(float(w[-1]), 0.0)
    qb = Q.T @ b
    flat = w <= 1e-12 * max(wmax, 1e-300)
    bscale = 1e-12 * (1.0 + float(np.abs(qb).max()))
    ray = flat & (np.abs(qb) > bscale)
    if np.any(ray):
        z = Q[:, ray] @ qb[ray]
        bounded = False
    else:
        keep = ~flat
        z = Q[:, keep] @ (qb[keep] / w[keep])
        bounded = True
    p[face[:-1]] = z
    p[face[-1]] = -z.sum()
    return p, bounded


def _polish(c, V, alpha, x, max_rounds=None):
    """Primal active-set refinement from the feasible point ``x``.

    Moves to each face optimum, dropping the first coordinate that would go
    negative and adding the most violated one once the face is optimal.
    Returns an improved feasible point, or None when nothing was gained.
    """
    n = c.size
    x = np.where(x > 0, x, 0.0)
    x = x / x.sum()
    active = x > 0
    rounds = max_rounds if max_rounds is not None else 4 * n + 20
    for _ in range(rounds):
        face = np.flatnonzero(active)
        p, bounded = _face_step(c, V, alpha, x, face)
        neg = p < 0
        t, block = (1.0 if bounded else math.inf), -1
        if np.any(neg):
            ratios = x[neg] / -p[neg]
            i = int(np.argmin(ratios))
            if ratios[i] < t:
                t, block = float(ratios[i]), int(np.flatnonzero(neg)[i])
        if not math.isfinite(t):
            return None
        x = x + t * p
        if block >= 0:
            x[block] = 0.0
            active[block] = False
        x = np.where(x > 0, x, 0.0)
        x = x / x.sum()
        if block >= 0:
            continue
        grad = c - 2.0 * alpha * (V @ x)
        lam = float(grad[active].mean())
        viol = np.where(active, -np.inf, grad - lam)
        j = int(np.argmax(viol))
        if viol[j] <= 1e-13 * (1.0 + float(np.abs(grad).max())):
            return x
        active[j] = True
    return x


def _vertex(problem: PortfolioProblem) -> Portfolio:
    x = np.zeros(len(problem.markets))
    x[int(np.argmax(problem.c))] = 1.0  # first index wins ties
    return Portfolio.from_weights(problem.markets, x, problem.c, problem.V, problem.alpha)


def solve(
    problem: PortfolioProblem,
    x0: np.ndarray | None = None,
    *,
    gap_tol: float = DEFAULT_GAP_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
) -> Portfolio:
    """Maximise ``c.x - alpha x V x`` over the simplex.

    ``x0`` warm-starts the iteration (it is projected onto the simplex).
    Raises :class:`NotConverged` carrying the best iterate when the
    Frank-Wolfe gap is still above ``gap_tol`` after ``max_iter`` steps.
    """
    c, V, alpha = problem.c, problem.V, problem.alpha
    n = c.size
    if n == 1:
        return Portfolio.from_weights(problem.markets, [1.0], c, V, alpha)
    if alpha == 0.0 or not np.any(V):
        return _vertex(problem)
    L = 2.0 * alpha * largest_eigenvalue(V)
    if L <= 0.0:
        return _vertex(problem)

    def f(x, Vx):
        return float(c @ x - alpha * (x @ Vx))

    x = project_simplex(np.asarray(x0, dtype=float)) if x0 is not None else np.full(n, 1.0 / n)
    Vx = V @ x
    fx = f(x, Vx)
    x_prev, Vx_prev = x, Vx
    t = 1.0
    stall = 0
    stable = 0
    support = x > 0
    next_polish = 0
    gap = frank_wolfe_gap(c, V, alpha, x, Vx)
    if gap <= gap_tol:
        return Portfolio.from_weights(problem.markets, x, c, V, alpha, gap, 0)

    for it in range(1, max_iter + 1):
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        beta = (t - 1.0) / t_next
        y = x + beta * (x - x_prev)
        Vy = Vx + beta * (Vx - Vx_prev)
        g = c - 2.0 * alpha * Vy
        fy = f(y, Vy)
        while True:
            z = project_simplex(y + g / L)
            Vz = V @ z
            fz = f(z, Vz)
            d = z - y
            if fz >= fy + g @ d - 0.5 * L * (d @ d) - 1e-14 * (1.0 + abs(fy)):
                break
            L *= 2.0
        if fz < fx:
            # momentum overshot: restart from the last accepted point
            x_prev, Vx_prev = x, Vx
            t = 1.0
            stall += 1
        else:
            stall = stall + 1 if fz - fx < STALL_IMPROVEMENT else 0
            x_prev, Vx_prev = x, Vx
            x, Vx, fx = z, Vz, fz
            t = t_next

        new_support = x > 0
        stable = stable + 1 if np.array_equal(new_support, support) else 0
        support = new_support

        if it >= next_polish and (stable >= 10 or stall >= STALL_ITERATIONS or it % 500 == 0):
            gap = frank_wolfe_gap(c, V, alpha, x, Vx)
            xp = _polish(c, V, alpha, x)
            if xp is not None:
                Vxp = V @ xp
                fxp = f(xp, Vxp)
                gap_p = frank_wolfe_gap(c, V, alpha, xp, Vxp)
                # a rounding-level objective loss is fine when the certificate improves
                if fxp >= fx or gap_p < gap:
                    x, Vx, fx, gap = xp, Vxp, fxp, gap_p
                    x_prev, Vx_prev = x, Vx
                    t = 1.0
            if gap <= gap_tol:
                return Portfolio.from_weights(problem.markets, x, c, V, alpha, gap, it)
            next_polish = it + 25
    gap = frank_wolfe_gap(c, V, alpha, x, Vx)
    best = Portfolio.from_weights(problem.markets, x, c, V, alpha, gap, max_iter)
    if gap <= gap_tol:
        return best
    raise NotConverged(best, gap, max_iter)


def brute_force_solve(problem: PortfolioProblem, grid_step: float = 1e-3) -> Portfolio:
    """Best lattice point of the simplex at spacing ``grid_step`` (test oracle, n <= 4).

    The first ``n - 2`` coordinates are enumerated outright; along the last
    free coordinate the objective is a concave quadratic, so its best
    lattice value is one of the two lattice points around the continuous
    maximiser (or an end point).
    """
    n = len(problem.markets)
    if n > 4:
        raise TooManyMarkets(f"brute force supports at most 4 markets, got {n}")
    c, V, alpha = problem.c, problem.V, problem.alpha
    if n == 1:
        return Portfolio.from_weights(problem.markets, [1.0], c, V, alpha)
    K = int(round(1.0 / grid_step))
    if K < 1 or abs(K * grid_step - 1.0) > 1e-9:
        raise InvalidSpec("grid_step must divide 1")

    outer = n - 2
    if outer == 0:
        heads = np.zeros((1, 0), dtype=np.int64)
    else:
        heads = np.indices((K + 1,) * outer).reshape(outer, -1).T
        heads = heads[heads.sum(axis=1) <= K]
    rem = K - heads.sum(axis=1)  # lattice units left for the last two coordinates

    # base point: everything left in the last coordinate
    base = np.zeros((heads.shape[0], n))
    base[:, :outer] = heads / K
    base[:, n - 1] = rem / K
    d = np.zeros(n)
    d[n - 2], d[n - 1] = 1.0, -1.0
    dc = float(d @ c)
    dVd = float(d @ V @ d)
    dVb = base @ (V @ d)
    # objective along base + s*d, s = j / K in [0, rem / K]
    if alpha * dVd > 0:
        s_star = (dc - 2.0 * alpha * dVb) / (2.0 * alpha * dVd)
        j0 = np.floor(s_star * K)
        cands = [np.clip(j0, 0, rem), np.clip(j0 + 1, 0, rem)]
    else:
        cands = [np.zeros_like(rem), rem.astype(float)]
    best_val = -np.inf
    best_x = None
    for j in cands:
        x = base + (j / K)[:, None] * d[None, :]
        vals = x @ c - alpha * np.einsum("ij,jk,ik->i", x, V, x)
        i = int(np.argmax(vals))
        if vals[i] > best_val:
            best_val = float(vals[i])
            best_x = x[i]
    return Portfolio.from_weights(problem.markets, np.clip(best_x, 0.0, None), c, V, alpha)


# --------------------------------------------------------------------------
# candidate filtering and baselines


def filter_markets(
    catalog: MarketCatalog,
    mttr_table: Mapping[str, MttrEstimate],
    constraints: MarketConstraints = MarketConstraints(),
    returns: ReturnsVector | None = None,
) -> list[str]:
    """Catalog markets that pass the MTTR, pattern and per-server size constraints."""
    missing = [m for m in catalog if m not in mttr_table]
    if missing:
        raise UnknownMarket(f"no MTTR estimate for {', '.join(missing)}")
    need = constraints.required_mttr
    out = []
    for m in catalog:
        e = catalog[m]
        if need is not None and not (mttr_table[m].censored or mttr_table[m].mttr_seconds >= need):
            continue
        if constraints.include and not any(fnmatch.fnmatchcase(m, p) for p in constraints.include):
            continue
        if any(fnmatch.fnmatchcase(m, p) for p in constraints.exclude):
            continue
        if constraints.min_cpu is not None and e.cpu < constraints.min_cpu:
            continue
        if constraints.min_mem is not None and e.mem < constraints.min_mem:
            continue
        out.append(m)
    if constraints.max_markets is not None and len(out) > constraints.max_markets:
        if returns is None:
            raise InvalidSpec("max_markets needs the returns vector to rank markets")
        ranked = sorted(out, key=lambda m: (-returns[m], m))
        out = sorted(ranked[: constraints.max_markets])
    if not out:
        raise NoCandidateMarkets("no market satisfies the constraints")
    return out


def greedy_select(returns: ReturnsVector, k: int, cov: CovarianceMatrix | None = None) -> Portfolio:
    """Equal weight on the ``k`` highest-return markets (ties by market id)."""
    n = len(returns)
    if not 1 <= k <= n:
        raise KOutOfRange(f"k must lie in [1, {n}], got {k}")
    order = sorted(range(n), key=lambda i: (-returns.values[i], returns.markets[i]))
    x = np.zeros(n)
    x[order[:k]] = 1.0 / k
    V = cov.entries if cov is not None else None
    return Portfolio.from_weights(returns.markets, x, returns.values, V, 0.0)


def lowest_cost_select(returns: ReturnsVector, cov: CovarianceMatrix | None = None) -> Portfolio:
    """Everything in the single cheapest market (highest return)."""
    return greedy_select(returns, 1, cov)


# --------------------------------------------------------------------------
# frontiers and caching


def frontier(
    returns: ReturnsVector,
    cov: CovarianceMatrix,
    alphas: Sequence[float] | None = None,
    warm_start: bool = True,
) -> list[FrontierPoint]:
    alphas = default_alpha_grid() if alphas is None else [float(a) for a in alphas]
    if any(a < 0 for a in alphas):
        raise InvalidSpec("alphas must be >= 0")
    if any(b < a for a, b in zip(alphas, alphas[1:])):
        raise InvalidSpec("alphas must be sorted ascending")
    points = []
    x0 = None
    for a in alphas:
        p = solve(PortfolioProblem.from_stats(returns, cov, a), x0=x0)
        if warm_start:
            x0 = p.weights
        points.append(FrontierPoint(a, p.expected_return, p.risk, p.weights))
    return points


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=float)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


class PortfolioCache:
    """Portfolios precomputed on an alpha grid for fixed ``(c, V)``.

    The cache keeps references to the arrays it was built from and refuses
    lookups (:class:`StaleCache`) once their contents change.
    """

    def __init__(self, returns: ReturnsVector, cov: CovarianceMatrix, alpha_grid: Sequence[float] | None = None):
        if tuple(returns.markets) != tuple(cov.markets):
            raise DimensionMismatch("returns and covariance are indexed by different markets")
        self.returns = returns
        self.cov = cov
        self._digest = _digest(returns.values, cov.entries)
        self._grid = {}
        for pt in frontier(returns, cov, sorted(default_alpha_grid() if alpha_grid is None else alpha_grid)):
            self._grid[pt.alpha] = Portfolio.from_weights(
                returns.markets, pt.weights, returns.values, cov.entries, pt.alpha
            )
        self._extra = {}

    @property
    def alphas(self) -> list[float]:
        return sorted(self._grid)

    def _check(self):
        if _digest(self.returns.values, self.cov.entries) != self._digest:
            raise StaleCache("returns or covariance changed since the cache was built; rebuild it")

    def lookup(self, alpha: float, candidates: Sequence[str] | None = None) -> Portfolio:
        """Cached portfolio for ``alpha``; a fresh (then cached) solve off-grid or on a candidate subset."""
        self._check()
        alpha = float(alpha)
        if candidates is None or tuple(candidates) == tuple(self.returns.markets):
            if alpha in self._grid:
                return self._grid[alpha]
            key = (alpha, None)
        else:
            key = (alpha, tuple(candidates))
        if key not in self._extra:
            r = self.returns if key[1] is None else self.returns.subset(key[1])
            v = self.cov if key[1] is None else self.cov.subset(key[1])
            self._extra[key] = solve(PortfolioProblem.from_stats(r, v, alpha))
        return self._extra[key]
