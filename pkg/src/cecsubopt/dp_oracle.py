"""Grid-based dynamic programming for scalar-state, scalar-control models.

Value functions live on a uniform grid and are interpolated with cubic
Hermite splines whose node slopes are fourth-order finite differences.  The
Bellman backup is split into its three parts: building the state-action
value (:func:`q_function`), minimizing it (:func:`greedy_policy`) and
plugging a policy back in (:func:`compose_value`).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

# multiples of max(1, |x|); the outer pair reaches strongly stabilizing controls
SEEDS = (-4.0, -2.0, -1.0, 0.0, 1.0, 2.0, 4.0)


@dataclass(frozen=True)
class Grid1D:
    lo: float
    hi: float
    n_points: int

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("grid needs lo < hi")
        if self.n_points < 2:
            raise ValueError("grid needs at least two points")

    @property
    def spacing(self) -> float:
        return (self.hi - self.lo) / (self.n_points - 1)

    @property
    def points(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.n_points)

    def refined(self) -> "Grid1D":
        """Same range with half the spacing."""
        return Grid1D(self.lo, self.hi, 2 * self.n_points - 1)


def hermite_slopes(table, spacing: float) -> np.ndarray:
    """Node derivatives, exact for polynomials up to degree four (needs five points)."""
    y = np.asarray(table, dtype=float)
    n = len(y)
    if n < 5:
        return np.gradient(y, spacing) if n > 2 else np.full(n, (y[-1] - y[0]) / spacing)
    d = np.empty(n)
    d[2:-2] = (y[:-4] - 8 * y[1:-3] + 8 * y[3:-1] - y[4:]) / 12.0
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / 12.0
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / 12.0
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / 12.0
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / 12.0
    return d / spacing


def interpolate(table, grid: Grid1D, x, slopes=None, warn=True):
    """C1 piecewise-cubic interpolant of ``table`` at ``x`` (float, array or dual).

    Queries outside the grid are clamped to the boundary (logged unless ``warn`` is off).
    """
    y = np.asarray(table, dtype=float)
    if slopes is None:
        slopes = hermite_slopes(y, grid.spacing)
    xv = np.asarray(ad.value_of(x), dtype=float)
    outside = (xv < grid.lo) | (xv > grid.hi)
    if np.any(outside):
        if warn:
            log.warning("clamped %d interpolation queries to [%g, %g]",
                        int(np.sum(outside)), grid.lo, grid.hi)
        x = ad.clamp(x, grid.lo, grid.hi)
        xv = np.clip(xv, grid.lo, grid.hi)
    h = grid.spacing
    s = (xv - grid.lo) / h
    r = np.rint(s)
    # queries within rounding of a node are evaluated exactly at that node
    snap = np.abs(s - r) <= 8 * np.finfo(float).eps * np.maximum(1.0, np.abs(s))
    i = np.clip(np.where(snap, r, np.floor(s)).astype(int), 0, grid.n_points - 2)
    t = (x - grid.lo) / h - i
    if np.any(snap):
        tv = np.where(snap, r - i, ad.value_of(t))
        t = t._make([tv, *t._parts()[1:]]) if isinstance(t, ad._DualBase) else tv
    t2 = t * t
    t3 = t2 * t
    y0, y1 = y[i], y[i + 1]
    m0, m1 = h * slopes[i], h * slopes[i + 1]
    return (2 * t3 - 3 * t2 + 1) * y0 + (t3 - 2 * t2 + t) * m0 + (3 * t2 - 2 * t3) * y1 + (t3 - t2) * m1


def _check_scalar(model):
    if model.n_x != 1 or model.n_u != 1:
        raise ValueError("the DP oracle supports scalar state and control only")


def q_function(V_next, model, grid: Grid1D, sigma: float):
    """State-action value ``Q(x, u) = L(x, u) + E_w V_next(f(x, u, sigma w))`` (vectorized)."""
    _check_scalar(model)
    V_next = np.asarray(V_next, dtype=float)
    slopes = hermite_slopes(V_next, grid.spacing)
    W = model.noise_support
    p = model.noise_probs

    # trial controls during minimization routinely leave the grid; only the
    # final composition counts clamped successors (see ``Q.clamped``)
    def Q(x, u, count=False):
        x2 = np.asarray(x, dtype=float)[:, None]
        u2 = u[:, None] if isinstance(u, ad._DualBase) else np.asarray(u, dtype=float)[:, None]
        total = model.stage_cost(x2, u2)
        for wi, pi in zip(W, p):
            xn = model.dynamics(x2, u2, np.broadcast_to(sigma * wi, x2.shape))[:, 0]
            if count:
                xv = np.asarray(ad.value_of(xn))
                Q.clamped += int(np.sum((xv < grid.lo) | (xv > grid.hi)))
            total = total + pi * interpolate(V_next, grid, xn, slopes, warn=False)
        return total

    Q.clamped = 0
    return Q


def _newton_1d(Q, x, u, max_iters=60, tol=1e-10):
    """Safeguarded Newton on ``u -> Q(x, u)`` for many independent points."""
    u = u.copy()
    done = np.zeros(len(u), dtype=bool)
    for _ in range(max_iters):
        out = Q(x, ad.Dual2(u, np.ones_like(u), np.zeros_like(u)))
        q, qu, quu = out.val, out.d1, out.d2
        done = np.abs(qu) <= tol * (1.0 + np.abs(q))
        if done.all():
            break
        step = np.where(quu > 0, -qu / np.where(quu > 0, quu, 1.0), -np.sign(qu) * 0.1 * (1.0 + np.abs(u)))
        step = np.where(done, 0.0, step)
        t = np.ones_like(u)
        pending = ~done
        for _ in range(40):
            with np.errstate(over="ignore", invalid="ignore"):
                qt = Q(x, u + t * step)
            ok = pending & np.isfinite(qt) & (qt <= q + 1e-14 * (1.0 + np.abs(q)))
            u = np.where(ok, u + t * step, u)
            pending &= ~ok
            if not pending.any():
                break
            t = np.where(pending, 0.5 * t, t)
        if np.all((np.abs(t * step) <= 1e-15 * (1.0 + np.abs(u))) | done):
            break
    return u, done


def _bisect_1d(Q, x, u, max_expand=60, iters=200):
    """Bracket a sign change of ``dQ/du`` around ``u`` and bisect."""

    def qu(v):
        return Q(x, ad.Dual1(v, np.ones_like(v))).deriv

    delta = 1e-3 * (1.0 + np.abs(u))
    a, b = u - delta, u + delta
    for _ in range(max_expand):
        ga, gb = qu(a), qu(b)
        ok = (ga <= 0) & (gb >= 0)
        if ok.all():
            break
        a = np.where(ga > 0, a - 2 * delta, a)
        b = np.where(gb < 0, b + 2 * delta, b)
        delta *= 2
    for _ in range(iters):
        mid = 0.5 * (a + b)
        gm = qu(mid)
        a = np.where(gm <= 0, mid, a)
        b = np.where(gm <= 0, b, mid)
        if np.all(b - a <= 1e-15 * (1.0 + np.abs(mid))):
            break
    return 0.5 * (a + b)


def greedy_policy(Q, grid: Grid1D, seeds=SEEDS, warm=None):
    """Minimizer of ``Q(x, .)`` at every grid point, multi-started.

    ``warm`` (e.g. the policy of the following stage) adds one more start.

    Returns ``(pi, failed)`` where ``failed`` lists grid indices whose chosen
    minimizer lacks a converged stationarity or positive curvature.
    """
    x = grid.points
    n = len(x)
    scale = np.maximum(1.0, np.abs(x))
    starts = [s * scale for s in seeds]
    if warm is not None:
        starts.append(np.asarray(warm, dtype=float))
    S = len(starts)
    X = np.tile(x, S)
    U0 = np.concatenate(starts)
    U, done = _newton_1d(Q, X, U0)
    if not done.all():
        U[~done] = _bisect_1d(Q, X[~done], U[~done])
    with np.errstate(over="ignore", invalid="ignore"):
        vals = Q(X, U).reshape(S, n)
    vals = np.where(np.isfinite(vals), vals, np.inf)
    best = np.argmin(vals, axis=0)
    pi = U.reshape(S, n)[best, np.arange(n)]
    out = Q(x, ad.Dual2(pi, np.ones_like(pi), np.zeros_like(pi)))
    stationary = np.abs(out.d1) <= 1e-8 * (1.0 + np.abs(out.val))
    failed = np.flatnonzero(~(stationary & (out.d2 > 0)))
    return pi, failed


def compose_value(Q, pi, grid: Grid1D) -> np.ndarray:
    """``V(x) = Q(x, pi(x))`` on the grid."""
    return np.asarray(Q(grid.points, np.asarray(pi, dtype=float), count=True), dtype=float)


def _backup(V_next, model, grid, sigma, warm=None):
    Q = q_function(V_next, model, grid, sigma)
    pi, failed = greedy_policy(Q, grid, warm=warm)
    return compose_value(Q, pi, grid), pi, failed, Q.clamped


def _policy_backup(V_next, pi_fixed, model, grid, sigma):
    Q = q_function(V_next, model, grid, sigma)
    return compose_value(Q, pi_fixed, grid), Q.clamped


def dp_backup(V_next, model, grid: Grid1D, sigma: float, warm=None):
    """One Bellman backup; returns ``(V, pi, failed_grid_indices)``."""
    return _backup(V_next, model, grid, sigma, warm)[:3]


def dp_policy_backup(V_next, pi_fixed, model, grid: Grid1D, sigma: float) -> np.ndarray:
    """Evaluation backup of a fixed policy (no minimization)."""
    return _policy_backup(V_next, pi_fixed, model, grid, sigma)[0]


def _report_clamps(grid, n, what):
    if n:
        log.warning("%s: %d successor states left [%g, %g] and were clamped", what, n, grid.lo, grid.hi)


@dataclass
class DpTables:
    grid: Grid1D
    V: list
    pi: list
    sigma: float
    kind: str
    failures: dict = field(default_factory=dict)
    clamped: int = 0

    def value(self, x, k: int = 0):
        return interpolate(self.V[k], self.grid, np.asarray(x, dtype=float))

    def policy(self, x, k: int = 0):
        return interpolate(self.pi[k], self.grid, np.asarray(x, dtype=float))

    def rows(self):
        """CSV rows ``(x, V, pi, stage, sigma, kind)``; ``pi`` is ``None`` at the last stage."""
        xs = self.grid.points
        out = []
        for k, V in enumerate(self.V):
            pi = self.pi[k] if k < len(self.pi) else None
            for j, x in enumerate(xs):
                out.append((x, V[j], None if pi is None else pi[j], k, self.sigma, self.kind))
        return out


def _terminal_table(model, grid):
    return np.asarray(model.terminal_cost(grid.points[:, None]), dtype=float)


def dp_solve(model, grid: Grid1D, sigma: float, N: int | None = None) -> DpTables:
    """Optimal value and policy tables for stages ``0..N``."""
    _check_scalar(model)
    N = model.N if N is None else N
    V = [None] * (N + 1)
    pi = [None] * N
    V[N] = _terminal_table(model, grid)
    failures, clamped = {}, 0
    for k in reversed(range(N)):
        V[k], pi[k], failed, c = _backup(V[k + 1], model, grid, sigma, pi[k + 1] if k + 1 < N else None)
        clamped += c
        if failed.size:
            failures[k] = failed.tolist()
            log.warning("stage %d: inner minimization failed at %d grid points", k, failed.size)
    _report_clamps(grid, clamped, f"optimal tables, sigma={sigma:g}")
    return DpTables(grid, V, pi, sigma, "optimal", failures, clamped)


def dp_evaluate_policy(model, grid: Grid1D, sigma: float, pi_tables) -> DpTables:
    N = len(pi_tables)
    V = [None] * (N + 1)
    V[N] = _terminal_table(model, grid)
    clamped = 0
    for k in reversed(range(N)):
        V[k], c = _policy_backup(V[k + 1], pi_tables[k], model, grid, sigma)
        clamped += c
    _report_clamps(grid, clamped, f"policy evaluation, sigma={sigma:g}")
    return DpTables(grid, V, list(pi_tables), sigma, "policy-evaluation", clamped=clamped)


def dp_evaluate_cec(model, grid: Grid1D, sigma: float, N: int | None = None,
                    nominal: DpTables | None = None) -> DpTables:
    """Value of the certainty-equivalent policy (the ``sigma = 0`` optimal policy) at level ``sigma``."""
    _check_scalar(model)
    if nominal is None:
        nominal = dp_solve(model, grid, 0.0, N)
    tables = dp_evaluate_policy(model, grid, sigma, nominal.pi)
    tables.failures = dict(nominal.failures)
    return tables
