"""Closed-loop evaluation of certainty-equivalent control (shrinking-horizon nominal MPC).

Every reachable state of the scenario tree is visited; at stage ``k`` the
nominal problem over the remaining ``N - k`` steps is solved from that state
and its first control is applied.  All nodes of one stage are solved as a
single batch, each warm-started from its parent's solution shifted by one
step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .solver import SolverError, SolverOptions, solve_nominal, solve_nominal_batch
from .tree import ScenarioTree


@dataclass
class CecEvaluation:
    value: float
    root_control: np.ndarray
    states: list
    controls: list
    node_costs: list
    iters: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    sigma: float = 0.0

    def node_records(self, tree: ScenarioTree):
        """Rows ``(stage, node, x, u, cost, probability)``; ``u`` is ``None`` at the leaves."""
        rows = []
        probs = tree.stage_prob
        for k, X in enumerate(self.states):
            for i in range(len(X)):
                u = self.controls[k][i] if k < len(self.controls) else None
                rows.append((k, i + 1, X[i], u, self.node_costs[k][i], probs[k]))
        return rows


def evaluate_cec(model, tree: ScenarioTree, x0, sigma: float, opts: SolverOptions | None = None) -> CecEvaluation:
    """Expected closed-loop cost ``V^cec_sigma(x0)`` by exhaustive enumeration of the noise."""
    opts = opts or SolverOptions()
    if tree.N != model.N:
        raise ValueError("tree horizon differs from the model horizon")
    n_u, m, N = model.n_u, tree.m, tree.N
    W = sigma * tree.w_values
    X = np.asarray(x0, dtype=float).reshape(1, model.n_x)
    warm = None
    states, controls, iters, gnorms = [X], [], [], []
    for k in range(N):
        res = solve_nominal_batch(model, X, N - k, opts, warm)
        bad = np.flatnonzero(~res["converged"])
        if bad.size:
            i = int(bad[0])
            raise SolverError(f"nominal solve at stage {k}, node {i + 1} did not converge "
                              f"({res['status'][i]}, grad {res['grad_norm'][i]:.3e})")
        sol = res["U"]
        u = sol[:, :n_u]
        controls.append(u)
        iters.append(res["iters"])
        gnorms.append(res["grad_norm"])
        X = model.dynamics(np.repeat(X, m, axis=0), np.repeat(u, m, axis=0), np.tile(W, (len(X), 1)))
        states.append(X)
        warm = np.repeat(sol[:, n_u:], m, axis=0)
    probs = tree.stage_prob
    costs = [np.asarray(model.stage_cost(states[k], controls[k]), dtype=float) for k in range(N)]
    costs.append(np.asarray(model.terminal_cost(states[N]), dtype=float))
    value = math.fsum(float(probs[k]) * c for k, stage in enumerate(costs) for c in stage)
    root = controls[0][0] if N else np.zeros(n_u)
    return CecEvaluation(value, root, states, controls, costs, iters, gnorms, sigma)


def cec_root_control(model, x0, N: int | None = None, opts: SolverOptions | None = None) -> np.ndarray:
    """First control of the nominal solution from ``x0`` (independent of sigma)."""
    sol = solve_nominal(model, x0, N, opts)
    if not sol.converged:
        raise SolverError(f"nominal solve did not converge ({sol.diagnostics.get('status')})")
    return sol.u_traj[0] if len(sol.u_traj) else np.zeros(model.n_u)
