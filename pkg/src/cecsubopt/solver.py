"""Single-shooting objectives and a matrix-free Newton-CG minimizer.

The nominal and tree-structured problems are both handled by
:class:`ShootingBatch`, which treats a batch of independent problems whose
controls sit on scenario trees (a nominal problem is a tree with a single
zero disturbance).  Gradients come from an adjoint sweep and Hessian-vector
products from a second-order adjoint sweep, both built on per-node partial
derivatives computed with :mod:`cecsubopt.autodiff`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .summation import neumaier_sum
from .tree import ScenarioTree

log = logging.getLogger(__name__)

_EPS = np.finfo(float).eps


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class SolverOptions:
    grad_tol: float = 1e-10
    max_iters: int = 200
    c1: float = 1e-4
    backtrack: float = 0.5
    cg_tol_factor: float = 0.5
    damping_floor: float = 1e-10
    max_halvings: int = 60
    max_cg_iters: int | None = None
    verbose: bool = False

    def __post_init__(self):
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if not 0 < self.c1 < 1:
            raise ValueError("c1 must lie in (0, 1)")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtracking factor must lie in (0, 1)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class NominalSolution:
    u_traj: np.ndarray
    value: float
    grad_norm: float
    iters: int
    converged: bool
    x_traj: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass
class TreeSolution:
    u_tree: np.ndarray
    value: float
    grad_norm: float
    iters: int
    converged: bool
    x_tree: np.ndarray | None = None
    nominal: NominalSolution | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def root_control(self) -> np.ndarray:
        return self.u_tree[0]


# ---------------------------------------------------------------------------
# per-node partial derivatives


def _dual2_parts(out, like):
    if isinstance(out, ad.Dual2):
        return tuple(np.broadcast_to(p, np.shape(like)) for p in (out.val, out.d1, out.d2))
    z = np.zeros(np.shape(out))
    return out, z, z


def local_derivatives(fn, args):
    """Values, Jacobians and Hessians of ``fn(*args)`` at every node.

    ``args`` are arrays of shape ``(nodes, n_a)``; the output of ``fn`` has
    shape ``(nodes, n_out)`` or ``(nodes,)``.  Returns ``val (nodes, n_out)``,
    ``jac (nodes, n_out, nz)`` and ``hess (nodes, n_out, nz, nz)`` with ``z``
    the concatenation of all arguments.  Hessians are recovered from
    directional second derivatives by polarization.
    """
    dims = [a.shape[1] for a in args]
    nz = sum(dims)
    splits = np.cumsum([0] + dims)

    def sweep(direction):
        duals = []
        for a, lo, hi in zip(args, splits[:-1], splits[1:]):
            d1 = np.broadcast_to(direction[lo:hi], a.shape)
            duals.append(ad.Dual2(a, d1, np.zeros(a.shape)))
        out = fn(*duals)
        val, d1, d2 = (np.asarray(p, dtype=float) for p in _dual2_parts(out, ad.value_of(out)))
        if val.ndim == 1:
            val, d1, d2 = val[:, None], d1[:, None], d2[:, None]
        return val, d1, d2

    eye = np.eye(nz)
    jac = hess = val = None
    diag = []
    for c in range(nz):
        val, d1, d2 = sweep(eye[c])
        if jac is None:
            jac = np.empty(val.shape + (nz,))
            hess = np.empty(val.shape + (nz, nz))
        jac[..., c] = d1
        hess[..., c, c] = d2
        diag.append(d2)
    for c in range(nz):
        for e in range(c + 1, nz):
            _, _, d2 = sweep(eye[c] + eye[e])
            off = 0.5 * (d2 - diag[c] - diag[e])
            hess[..., c, e] = off
            hess[..., e, c] = off
    return val, jac, hess


# ---------------------------------------------------------------------------
# batched shooting problems


class ShootingBatch:
    """``B`` independent single-shooting problems with controls on scenario trees.

    Stage ``k`` holds ``B * m**k`` nodes; node ``j`` of stage ``k + 1`` has
    parent ``j // m`` and branch ``j % m``, so each problem owns a contiguous
    block of every stage.  Decision vectors are packed per problem into rows
    of a ``(B, n)`` array.
    """

    def __init__(self, model, X0, horizon: int, w_eff, probs=None):
        self.model = model
        self.X0 = np.asarray(X0, dtype=float).reshape(-1, model.n_x)
        self.B = len(self.X0)
        self.H = int(horizon)
        self.W = np.asarray(w_eff, dtype=float).reshape(-1, model.n_w)
        self.m = len(self.W)
        self.p = 1.0 / self.m
        self.weights = self.p ** np.arange(self.H + 1)
        self.stage_width = [self.m ** k * model.n_u for k in range(self.H)]
        self.offsets = np.concatenate([[0], np.cumsum(self.stage_width)]).astype(int)
        self.n = int(self.offsets[-1])

    def unpack(self, U):
        n_u = self.model.n_u
        return [U[:, self.offsets[k]:self.offsets[k + 1]].reshape(-1, n_u) for k in range(self.H)]

    def pack(self, stages):
        return np.concatenate([s.reshape(self.B, -1) for s in stages], axis=1) if stages \
            else np.zeros((self.B, 0))

    def preconditioner(self):
        return self.pack([np.full((self.B * self.m ** k, self.model.n_u), self.weights[k])
                          for k in range(self.H)])

    def _noise(self, k):
        return np.tile(self.W, (self.B * self.m ** k, 1))

    def rollout(self, U):
        Us = self.unpack(U)
        Xs = [self.X0]
        for k in range(self.H):
            Xs.append(self.model.dynamics(np.repeat(Xs[-1], self.m, axis=0),
                                          np.repeat(Us[k], self.m, axis=0), self._noise(k)))
        return Xs, Us

    def node_costs(self, Xs, Us):
        """Probability-weighted cost of every node, one array per stage."""
        costs = [self.weights[k] * np.asarray(self.model.stage_cost(Xs[k], Us[k]), dtype=float)
                 for k in range(self.H)]
        costs.append(self.weights[self.H] * np.asarray(self.model.terminal_cost(Xs[self.H]), dtype=float))
        return costs

    def value(self, U):
        with np.errstate(over="ignore", invalid="ignore"):
            Xs, Us = self.rollout(np.asarray(U, dtype=float))
            stage_sums = [c.reshape(self.B, -1).sum(axis=1) for c in self.node_costs(Xs, Us)]
        return neumaier_sum(np.stack(stage_sums, axis=1), axis=1)

    def linearize(self, U):
        """Gradient at ``U`` and a Hessian-vector product closure."""
        model, m, nx = self.model, self.m, self.model.n_x
        Xs, Us = self.rollout(U)
        Fz, Lzz = [], []
        for k in range(self.H):
            noise = self._noise(k)
            _, jac, hess = local_derivatives(lambda x, u: model.dynamics(x, u, noise),
                                             [np.repeat(Xs[k], m, axis=0), np.repeat(Us[k], m, axis=0)])
            Fz.append((jac, hess))
            _, Lj, Lh = local_derivatives(model.stage_cost, [Xs[k], Us[k]])
            Lzz.append((self.weights[k] * Lj[:, 0], self.weights[k] * Lh[:, 0]))
        _, Ej, Eh = local_derivatives(model.terminal_cost, [Xs[self.H]])
        wN = self.weights[self.H]
        lam = wN * Ej[:, 0]
        Exx = wN * Eh[:, 0]
        grads = [None] * self.H
        M = [None] * self.H
        for k in reversed(range(self.H)):
            jac, hess = Fz[k]
            back = np.einsum("eoz,eo->ez", jac, lam)
            M[k] = np.einsum("eo,eozw->ezw", lam, hess)
            gz = Lzz[k][0] + back.reshape(-1, m, back.shape[1]).sum(axis=1)
            lam = gz[:, :nx]
            grads[k] = gz[:, nx:]
        g = self.pack(grads)
        Fjac = [f[0] for f in Fz]
        Lh = [l[1] for l in Lzz]

        def hvp(V):
            dUs = self.unpack(V)
            dx = np.zeros_like(self.X0)
            dz = []
            for k in range(self.H):
                z = np.concatenate([dx, dUs[k]], axis=1)
                dz.append(z)
                dx = np.einsum("eoz,ez->eo", Fjac[k], np.repeat(z, m, axis=0))
            dlam = np.einsum("nab,nb->na", Exx, dx)
            out = [None] * self.H
            for k in reversed(range(self.H)):
                ze = np.repeat(dz[k], m, axis=0)
                edge = np.einsum("eoz,eo->ez", Fjac[k], dlam) + np.einsum("ezw,ew->ez", M[k], ze)
                res = np.einsum("nzw,nw->nz", Lh[k], dz[k]) + edge.reshape(-1, m, edge.shape[1]).sum(axis=1)
                dlam = res[:, :nx]
                out[k] = res[:, nx:]
            return self.pack(out)

        return g, hvp


# ---------------------------------------------------------------------------
# Newton-CG


def _pcg(hvp, g, rows, minv, mu, opts, maxit):
    """Preconditioned CG on ``(H + mu M) d = -g`` for the selected rows.

    Returns the step and a per-row flag for detected nonpositive curvature.
    """
    B, n = g.shape
    gn = np.linalg.norm(g, axis=1)
    tol = np.minimum(opts.cg_tol_factor, np.sqrt(gn)) * gn
    d = np.zeros_like(g)
    r = np.where(rows[:, None], -g, 0.0)
    z = minv * r
    p = z.copy()
    rz = np.sum(r * z, axis=1)
    act = rows & (gn > 0)
    neg = np.zeros(B, dtype=bool)
    kappa = np.zeros(B)
    for _ in range(maxit):
        if not act.any():
            break
        p = np.where(act[:, None], p, 0.0)
        Ap = hvp(p) + mu[:, None] * p / minv
        pAp = np.sum(p * Ap, axis=1)
        pMp = np.sum(p * p / minv, axis=1)
        bad = act & ~(pAp > 0)
        if bad.any():
            neg |= bad
            kappa[bad] = np.where(np.isfinite(pAp[bad]), -pAp[bad] / np.maximum(pMp[bad], 1e-300), 1.0)
            act &= ~bad
        alpha = np.where(act, rz / np.where(act, pAp, 1.0), 0.0)
        d += alpha[:, None] * p
        r -= alpha[:, None] * Ap
        act &= np.linalg.norm(r, axis=1) > tol
        z = minv * r
        rz_new = np.sum(r * z, axis=1)
        beta = np.where(act, rz_new / np.where(rz != 0, rz, 1.0), 0.0)
        p = z + beta[:, None] * p
        rz = rz_new
    return d, neg, kappa


def _newton_direction(hvp, g, rows, minv, mu, opts):
    maxit = opts.max_cg_iters or 2 * g.shape[1] + 10
    d = np.zeros_like(g)
    todo = rows.copy()
    for _ in range(60):
        step, neg, kappa = _pcg(hvp, g, todo, minv, mu, opts, maxit)
        ok = todo & ~neg
        d[ok] = step[ok]
        todo &= neg
        if not todo.any():
            break
        mu[todo] = np.maximum.reduce([10.0 * mu[todo], np.full(todo.sum(), opts.damping_floor),
                                      2.0 * kappa[todo]])
    if todo.any():
        d[todo] = -(minv * g)[todo]
    # relax damping for rows that did not need it this time
    relax = rows & ~todo
    mu[relax] = np.where(mu[relax] > opts.damping_floor, 0.1 * mu[relax], 0.0)
    return d


def newton_cg_batch(fun, linearize, U0, opts: SolverOptions, precond=None):
    """Minimize ``B`` independent objectives simultaneously.

    ``fun(U) -> (B,)`` values; ``linearize(U) -> (grad (B, n), hvp)``.  Each
    row gets its own CG solve, damping and Armijo backtracking.  Returns a
    dict with the minimizers and per-row diagnostics.
    """
    U = np.array(U0, dtype=float, copy=True)
    B, n = U.shape
    minv = np.ones((B, n)) if precond is None else 1.0 / np.broadcast_to(precond, (B, n))
    f = fun(U)
    iters = np.zeros(B, dtype=int)
    failed = np.zeros(B, dtype=bool)
    mu = np.zeros(B)
    history = []
    gnorm = np.full(B, np.inf)
    for it in range(opts.max_iters + 1):
        if n == 0:
            gnorm = np.zeros(B)
            break
        g, hvp = linearize(U)
        gnorm = np.max(np.abs(g), axis=1)
        active = (gnorm > opts.grad_tol) & ~failed & np.isfinite(gnorm)
        failed |= ~np.isfinite(gnorm)
        if not active.any() or it == opts.max_iters:
            break
        d = _newton_direction(hvp, g, active, minv, mu, opts)
        slope = np.sum(g * d, axis=1)
        slack = 8.0 * _EPS * (1.0 + np.abs(f))
        t = np.ones(B)
        pending = active.copy()
        for _ in range(opts.max_halvings + 1):
            trial = U + (t * pending)[:, None] * d
            ft = fun(trial)
            ok = pending & np.isfinite(ft) & (ft <= f + opts.c1 * t * slope + slack)
            U[ok] = trial[ok]
            f[ok] = ft[ok]
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= opts.backtrack
        failed |= pending
        iters[active & ~pending] += 1
        if opts.verbose:
            history.append({"iter": it, "max_grad": float(np.max(gnorm[active])),
                            "min_step": float(np.min(t[active])), "max_value": float(np.max(f[active]))})
    converged = gnorm <= opts.grad_tol
    status = np.where(converged, "converged", np.where(failed, "line_search_failed", "max_iters"))
    return {"U": U, "value": f, "grad_norm": gnorm, "iters": iters,
            "converged": converged, "status": status, "history": history}


def newton_minimize(objective, u0, opts: SolverOptions | None = None):
    """Minimize an AD-transparent scalar function of a vector.

    Derivatives come from :func:`autodiff.gradient` and
    :func:`autodiff.hessian_vector`.  Returns ``(u, value, diagnostics)``;
    non-convergence is reported in the diagnostics, not raised.
    """
    opts = opts or SolverOptions()
    u0 = np.asarray(u0, dtype=float).reshape(-1)

    def fun(U):
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                return np.array([float(objective(U[0]))])
            except (ad.DomainError, OverflowError, ZeroDivisionError):
                return np.array([np.inf])

    def linearize(U):
        x = U[0].copy()
        g = ad.gradient(objective, x)
        return g[None, :], lambda V: ad.hessian_vector(objective, x, V[0])[None, :]

    res = newton_cg_batch(fun, linearize, u0[None, :], opts)
    diag = {k: (v[0].item() if isinstance(v, np.ndarray) and k != "U" else v)
            for k, v in res.items() if k not in ("U", "history")}
    diag["history"] = res["history"]
    return res["U"][0], float(res["value"][0]), diag


# ---------------------------------------------------------------------------
# objective builders (AD-transparent)


def tree_objective(model, tree: ScenarioTree, x0, sigma: float):
    """Expected cost of a control tree, as a function of the flat control vector."""
    x0 = np.asarray(x0, dtype=float).reshape(1, model.n_x)
    W = sigma * tree.w_values
    weights = tree.stage_prob

    def objective(u):
        x = x0
        total = 0.0
        for k in range(tree.N):
            lo, hi = tree.stage_offsets[k] * model.n_u, (tree.stage_offsets[k] + tree.m ** k) * model.n_u
            uk = u[lo:hi].reshape(-1, model.n_u)
            total = total + weights[k] * model.stage_cost(x, uk).sum()
            parents = np.repeat(np.arange(tree.m ** k), tree.m)
            x = model.dynamics(x[parents], uk[parents], np.tile(W, (tree.m ** k, 1)))
        return total + weights[tree.N] * model.terminal_cost(x).sum()

    return objective


def nominal_objective(model, x0, horizon: int | None = None):
    """Noise-free total cost of a control trajectory of ``horizon`` stages."""
    H = model.N if horizon is None else int(horizon)
    if H > model.N or H < 0:
        raise ValueError("horizon must lie in 0..N")
    x0 = np.asarray(x0, dtype=float).reshape(model.n_x)
    zero = np.zeros(model.n_w)

    def objective(u):
        x = x0
        total = 0.0
        for k in range(H):
            uk = u[k * model.n_u:(k + 1) * model.n_u]
            total = total + model.stage_cost(x, uk)
            x = model.dynamics(x, uk, zero)
        return total + model.terminal_cost(x)

    return objective


# ---------------------------------------------------------------------------
# solvers


def _origin_feedback_gain(model):
    from .model import RiccatiDivergence, riccati_terminal_weight

    z = [np.zeros((1, model.n_x)), np.zeros((1, model.n_u))]
    _, F, _ = local_derivatives(lambda x, u: model.dynamics(x, u, np.zeros((1, model.n_w))), z)
    _, _, Lh = local_derivatives(model.stage_cost, z)
    A, B = F[0][:, :model.n_x], F[0][:, model.n_x:]
    Q, R = Lh[0, 0][:model.n_x, :model.n_x] / 2, Lh[0, 0][model.n_x:, model.n_x:] / 2
    try:
        P = np.atleast_2d(riccati_terminal_weight(Q, R, A, B, tol=1e-10, max_iters=100_000))
    except (RiccatiDivergence, np.linalg.LinAlgError, ValueError):
        return None
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def feedback_initial_guess(model, X0, horizon: int) -> np.ndarray:
    """Controls from simulating LQR feedback designed at the origin; zeros if unavailable."""
    X0 = np.asarray(X0, dtype=float).reshape(-1, model.n_x)
    K = _origin_feedback_gain(model)
    if K is None:
        return np.zeros((len(X0), horizon * model.n_u))
    x, us = X0, []
    w = np.zeros((len(X0), model.n_w))
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(horizon):
            u = -x @ K.T
            us.append(u)
            x = model.dynamics(x, u, w)
    U = np.concatenate(us, axis=1) if us else np.zeros((len(X0), 0))
    return np.where(np.isfinite(U), U, 0.0)


_GUESS_LIMIT = 1e12


def greedy_initial_guess(model, X0, horizon: int, opts: SolverOptions | None = None) -> np.ndarray:
    """Rollout of one-step lookahead control ``argmin_u L(x, u) + E(f(x, u, 0))``.

    Stays bounded where open-loop guesses diverge; used as a last resort.
    """
    opts = opts or SolverOptions()
    X = np.asarray(X0, dtype=float).reshape(-1, model.n_x)
    w = np.zeros((len(X), model.n_w))
    us = []
    for _ in range(horizon):
        step = ShootingBatch(model, X, 1, np.zeros((1, model.n_w)))
        res = newton_cg_batch(step.value, step.linearize, feedback_initial_guess(model, X, 1), opts)
        u = np.where(np.isfinite(res["U"]), res["U"], 0.0)
        us.append(u)
        X = model.dynamics(X, u, w)
    return np.concatenate(us, axis=1) if us else np.zeros((len(X), 0))


def _robust_guess(model, prob: ShootingBatch, U_init, opts):
    """Per row, keep the first candidate guess whose cost is finite and moderate."""
    candidates = []
    if U_init is not None:
        candidates.append(lambda: np.asarray(U_init, dtype=float).reshape(prob.B, prob.n))
    candidates.append(lambda: feedback_initial_guess(model, prob.X0, prob.H))
    candidates.append(lambda: greedy_initial_guess(model, prob.X0, prob.H, opts))
    U0 = None
    bad = np.ones(prob.B, dtype=bool)
    for make in candidates:
        U = make()
        with np.errstate(over="ignore", invalid="ignore"):
            f = prob.value(U)
        good = np.isfinite(f) & (np.abs(f) < _GUESS_LIMIT)
        if U0 is None:
            U0 = U
        take = bad & good
        U0[take] = U[take]
        bad &= ~good
        if not bad.any():
            break
    return U0


def solve_nominal_batch(model, X0, horizon: int, opts: SolverOptions | None = None, U_init=None):
    """Solve the nominal problem from each row of ``X0``; returns the raw batch result.

    Without ``U_init`` the initial guess is the rollout of the origin's LQR
    feedback (a zero guess can diverge on unstable dynamics).
    """
    opts = opts or SolverOptions()
    prob = ShootingBatch(model, X0, horizon, np.zeros((1, model.n_w)))
    U0 = _robust_guess(model, prob, U_init, opts)
    res = newton_cg_batch(prob.value, prob.linearize, U0, opts)
    res["problem"] = prob
    return res


def solve_nominal(model, x0, horizon: int | None = None, opts: SolverOptions | None = None,
                  u_init=None) -> NominalSolution:
    """Nominal (noise-free) optimal control from ``x0`` over ``horizon`` stages."""
    H = model.N if horizon is None else int(horizon)
    if H < 0 or H > model.N:
        raise ValueError("horizon must lie in 0..N")
    x0 = np.asarray(x0, dtype=float).reshape(1, model.n_x)
    res = solve_nominal_batch(model, x0, H, opts, None if u_init is None else np.asarray(u_init)[None])
    u = res["U"][0].reshape(H, model.n_u)
    return NominalSolution(
        u_traj=u, value=float(res["value"][0]), grad_norm=float(res["grad_norm"][0]),
        iters=int(res["iters"][0]), converged=bool(res["converged"][0]),
        x_traj=model.simulate(x0[0], u),
        diagnostics={"status": str(res["status"][0]), "history": res["history"]},
    )


def broadcast_nominal(tree: ScenarioTree, u_traj) -> np.ndarray:
    u_traj = np.asarray(u_traj)
    return np.concatenate([np.repeat(u_traj[k:k + 1], tree.m ** k, axis=0) for k in range(tree.N)]) \
        if tree.N else np.zeros((0, u_traj.shape[-1] if u_traj.ndim > 1 else 1))


def nominal_feedback_gains(model, x_traj, u_traj):
    """Time-varying LQR gains for deviations from a nominal trajectory.

    Uses cost Hessians and dynamics Jacobians along the trajectory
    (Gauss-Newton: dynamics curvature is ignored).  Returns ``None`` if the
    backward recursion loses positive definiteness.
    """
    nx = model.n_x
    X = np.asarray(x_traj, dtype=float).reshape(-1, nx)
    U = np.asarray(u_traj, dtype=float).reshape(-1, model.n_u)
    H = len(U)
    if H == 0:
        return []
    zero = np.zeros((H, model.n_w))
    _, F, _ = local_derivatives(lambda x, u: model.dynamics(x, u, zero), [X[:H], U])
    _, _, Lh = local_derivatives(model.stage_cost, [X[:H], U])
    _, _, Eh = local_derivatives(model.terminal_cost, [X[H:]])
    P = Eh[0, 0]
    gains = [None] * H
    for k in reversed(range(H)):
        A, B = F[k][:, :nx], F[k][:, nx:]
        Hk = Lh[k, 0]
        Quu = Hk[nx:, nx:] + B.T @ P @ B
        Qux = Hk[nx:, :nx] + B.T @ P @ A
        if np.any(np.linalg.eigvalsh(0.5 * (Quu + Quu.T)) <= 0):
            return None
        K = np.linalg.solve(Quu, Qux)
        P = Hk[:nx, :nx] + A.T @ P @ A - K.T @ Quu @ K
        P = 0.5 * (P + P.T)
        gains[k] = K
    return gains


def feedback_tree_guess(model, tree: ScenarioTree, nominal: NominalSolution, sigma: float) -> np.ndarray:
    """Control tree from the nominal solution plus LQR feedback on state deviations."""
    u_nom = nominal.u_traj.reshape(tree.N, model.n_u)
    x_nom = model.simulate(nominal.x_traj[0], u_nom)
    gains = nominal_feedback_gains(model, x_nom, u_nom)
    if gains is None:
        return broadcast_nominal(tree, u_nom)
    x = x_nom[:1]
    stages = []
    W = sigma * tree.w_values
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(tree.N):
            u = u_nom[k] - (x - x_nom[k]) @ gains[k].T
            stages.append(u)
            x = model.dynamics(np.repeat(x, tree.m, axis=0), np.repeat(u, tree.m, axis=0),
                               np.tile(W, (len(x), 1)))
    guess = np.concatenate(stages)
    if not np.all(np.isfinite(guess)):
        return broadcast_nominal(tree, u_nom)
    return guess


def solve_tree(model, tree: ScenarioTree, x0, sigma: float, opts: SolverOptions | None = None,
               nominal: NominalSolution | None = None, u_init=None) -> TreeSolution:
    """Optimal closed-loop expected cost ``V*_sigma(x0)`` via the tree-structured problem.

    The default initial guess is the nominal solution with time-varying LQR
    feedback around it, rolled out on the tree; at ``sigma = 0`` this is the
    nominal solution broadcast over the tree.
    """
    opts = opts or SolverOptions()
    if tree.N != model.N:
        raise ValueError("tree horizon differs from the model horizon")
    if nominal is None:
        nominal = solve_nominal(model, x0, model.N, opts)
    prob = ShootingBatch(model, x0, tree.N, sigma * tree.w_values)
    if u_init is not None:
        U0 = np.asarray(u_init, dtype=float).reshape(1, -1)
    else:
        U0 = feedback_tree_guess(model, tree, nominal, sigma).reshape(1, -1)
    res = newton_cg_batch(prob.value, prob.linearize, U0, opts, precond=prob.preconditioner())
    u_tree = res["U"][0].reshape(-1, model.n_u)
    Xs, _ = prob.rollout(res["U"])
    return TreeSolution(
        u_tree=u_tree, value=float(res["value"][0]), grad_norm=float(res["grad_norm"][0]),
        iters=int(res["iters"][0]), converged=bool(res["converged"][0]),
        x_tree=np.concatenate(Xs, axis=0), nominal=nominal,
        diagnostics={"status": str(res["status"][0]), "history": res["history"]},
    )


def solution_diagnostics_json(sol) -> dict:
    """JSON-friendly summary of a solution's solver diagnostics."""
    return {
        "converged": bool(sol.converged),
        "grad_norm": float(sol.grad_norm),
        "iters": int(sol.iters),
        "status": sol.diagnostics.get("status"),
        "history": sol.diagnostics.get("history", []),
        "value": float(sol.value),
    }
