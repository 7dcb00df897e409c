"""Problem data: dynamics, stage and terminal cost, noise distribution.

All model callables act on arrays whose trailing axis holds the state,
control or noise components, e.g. ``dynamics(x, u, w)`` with ``x`` of shape
``(..., n_x)``.  They are written with plain operators and
:func:`cecsubopt.autodiff.sqrt`, so they accept floats, numpy arrays and dual
numbers alike.  The noise ``w`` handed to ``dynamics`` is already scaled by
the uncertainty level.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np

from . import autodiff as ad

RICCATI_TOL = 1e-12
RICCATI_MAX_ITERS = 1_000_000


class RiccatiDivergence(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Immutable optimal control problem with a finite noise distribution."""

    n_x: int
    n_u: int
    n_w: int
    dynamics: Callable
    stage_cost: Callable
    terminal_cost: Callable
    N: int
    noise_support: np.ndarray
    noise_probs: np.ndarray
    name: str = "custom"
    params: object = field(default=None, compare=False)

    def __post_init__(self):
        W = np.asarray(self.noise_support, dtype=float).reshape(-1, self.n_w)
        p = np.asarray(self.noise_probs, dtype=float).reshape(-1)
        object.__setattr__(self, "noise_support", W)
        object.__setattr__(self, "noise_probs", p)
        if len(p) != len(W):
            raise ValueError("noise_support and noise_probs differ in length")
        if self.N < 0:
            raise ValueError("horizon must be nonnegative")
        if np.any(p < 0) or abs(math.fsum(p) - 1.0) > 1e-15:
            raise ValueError("noise probabilities must be nonnegative and sum to one")
        mean = p @ W
        cov = (W * p[:, None]).T @ W
        if np.max(np.abs(mean)) > 1e-12 or np.max(np.abs(cov - np.eye(self.n_w))) > 1e-12:
            raise ValueError("noise must have zero mean and unit covariance")

    @property
    def m(self) -> int:
        return len(self.noise_probs)

    def simulate(self, x0, u_traj, w_traj=None):
        """Forward simulation; returns states of shape ``(len(u_traj) + 1, n_x)``."""
        x = np.asarray(x0, dtype=float).reshape(self.n_x)
        u_traj = np.asarray(u_traj, dtype=float).reshape(-1, self.n_u)
        xs = [x]
        for k, u in enumerate(u_traj):
            w = np.zeros(self.n_w) if w_traj is None else np.asarray(w_traj[k], dtype=float)
            x = self.dynamics(x, u, w)
            xs.append(x)
        return np.array(xs)


def symmetric_sign_noise(n_w: int = 1):
    """The product set ``{-1, 1}^n_w`` with uniform weights (zero mean, unit covariance)."""
    W = np.array(list(itertools.product((-1.0, 1.0), repeat=n_w)))
    return W, np.full(len(W), 1.0 / len(W))


def rk4_step(ode, x, u, h):
    """One classical Runge-Kutta step with ``u`` held constant."""
    if h <= 0:
        raise ValueError("step size must be positive")
    k1 = ode(x, u)
    k2 = ode(x + 0.5 * h * k1, u)
    k3 = ode(x + 0.5 * h * k2, u)
    k4 = ode(x + h * k3, u)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def benchmark_ode(x, u):
    return x + x ** 3 + u


def smoothed_penalty(x, eps):
    """Smooth overapproximation ``sqrt(x^2 + eps^2)/2 - x/2`` of ``max(0, -x)``."""
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if eps == 0 and not isinstance(x, ad._DualBase):
        return np.maximum(0.0, -np.asarray(x, dtype=float)) if np.ndim(x) else max(0.0, -x)
    return 0.5 * ad.sqrt(x * x + eps * eps) - 0.5 * x


def riccati_terminal_weight(q, r, A, B, tol=RICCATI_TOL, max_iters=RICCATI_MAX_ITERS):
    """Stabilizing DARE solution by fixed-point iteration started at ``q``.

    Scalars give a float; matrices (``A`` of shape (n, n), ``B`` of shape
    (n, m), ``q``/``r`` scalars or matrices) give a matrix.
    """
    scalar = np.ndim(A) == 0 and np.ndim(B) == 0
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, m = B.shape
    Q = q * np.eye(n) if np.ndim(q) == 0 else np.asarray(q, dtype=float)
    R = r * np.eye(m) if np.ndim(r) == 0 else np.asarray(r, dtype=float)
    if np.any(np.linalg.eigvalsh(0.5 * (R + R.T)) <= 0):
        raise ValueError("control weight must be positive definite")

    def ricc(P):
        BtPA = B.T @ P @ A
        return Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)

    P = Q.copy()
    for _ in range(max_iters):
        P_new = ricc(P)
        if not np.all(np.isfinite(P_new)):
            break
        P = 0.5 * (P_new + P_new.T)
        if np.max(np.abs(ricc(P) - P)) <= tol:
            return float(P[0, 0]) if scalar else P
    raise RiccatiDivergence("Riccati iteration did not converge; is (A, B) stabilizable?")


@dataclass(frozen=True)
class BenchmarkParams:
    T: float = 2.0
    N: int = 10
    x_lb: float = -0.1
    q: float = 5.0
    r: float = 1.0
    rho: float = 10.0
    eps: float = 1e-2

    def __post_init__(self):
        if self.T <= 0 or self.N < 1:
            raise ValueError("need T > 0 and N >= 1")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.r <= 0:
            raise ValueError("r must be positive")
        if self.q < 0 or self.rho < 0:
            raise ValueError("q and rho must be nonnegative")

    @property
    def h(self) -> float:
        return self.T / self.N

    @cached_property
    def linearization(self) -> tuple[float, float]:
        """(A, B) of the RK4 map at the origin, obtained by AD."""
        g = ad.gradient(lambda z: rk4_step(benchmark_ode, z[0], z[1], self.h), np.zeros(2))
        return float(g[0]), float(g[1])

    @cached_property
    def q_terminal(self) -> float:
        A, B = self.linearization
        return riccati_terminal_weight(self.q, self.r, A, B)


def benchmark_dynamics(x, u, w, sigma, params: BenchmarkParams | None = None):
    params = params or BenchmarkParams()
    return rk4_step(benchmark_ode, x, u, params.h) + sigma * w


def benchmark_stage_cost(x, u, params: BenchmarkParams):
    p = params
    return p.q * x * x + p.r * u * u + p.rho * smoothed_penalty(x - p.x_lb, p.eps)


def benchmark_terminal_cost(x, params: BenchmarkParams):
    p = params
    return p.q_terminal * x * x + p.rho * smoothed_penalty(x - p.x_lb, p.eps)


def make_benchmark_model(params: BenchmarkParams | None = None, noise_support=None, noise_probs=None) -> ModelSpec:
    """Scalar unstable system ``x' = x + x^3 + u`` with a soft lower state bound."""
    params = params or BenchmarkParams()
    if noise_support is None:
        noise_support, noise_probs = symmetric_sign_noise(1)
    h = params.h

    def dynamics(x, u, w):
        return rk4_step(benchmark_ode, x, u, h) + w

    def stage_cost(x, u):
        return benchmark_stage_cost(x[..., 0], u[..., 0], params)

    def terminal_cost(x):
        return benchmark_terminal_cost(x[..., 0], params)

    return ModelSpec(1, 1, 1, dynamics, stage_cost, terminal_cost, params.N,
                     noise_support, noise_probs, name="benchmark", params=params)


def make_lq_model(A, B, q, r, N, noise_support=None, noise_probs=None) -> ModelSpec:
    """Linear dynamics ``x+ = Ax + Bu + w`` with quadratic costs and a DARE terminal weight.

    ``q`` and ``r`` may be scalars (multiples of identity) or matrices.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n_x, n_u = B.shape
    if A.shape != (n_x, n_x):
        raise ValueError("A must be square and match the rows of B")
    Q = q * np.eye(n_x) if np.ndim(q) == 0 else np.asarray(q, dtype=float)
    R = r * np.eye(n_u) if np.ndim(r) == 0 else np.asarray(r, dtype=float)
    P = riccati_terminal_weight(Q, R, A, B)
    P = np.atleast_2d(P)
    At, Bt = A.T.copy(), B.T.copy()
    if noise_support is None:
        noise_support, noise_probs = symmetric_sign_noise(n_x)

    def quad(z, M):
        return ((z @ M) * z).sum(axis=-1)

    def dynamics(x, u, w):
        return x @ At + u @ Bt + w

    def stage_cost(x, u):
        return quad(x, Q) + quad(u, R)

    def terminal_cost(x):
        return quad(x, P)

    lq = {"A": A, "B": B, "Q": Q, "R": R, "P": P}
    return ModelSpec(n_x, n_u, n_x, dynamics, stage_cost, terminal_cost, int(N),
                     noise_support, noise_probs, name="lq", params=lq)


def finite_horizon_lqr(A, B, Q, R, P_N, N):
    """Backward Riccati recursion; returns (P_0..P_N, K_0..K_{N-1}) with ``u_k = -K_k x``."""
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    Q, R, P = np.atleast_2d(Q), np.atleast_2d(R), np.atleast_2d(P_N)
    Ps, Ks = [P], []
    for _ in range(N):
        K = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P = Q + A.T @ P @ (A - B @ K)
        Ps.append(P)
        Ks.append(K)
    return Ps[::-1], Ks[::-1]
