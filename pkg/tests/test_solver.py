import numpy as np
import pytest
from scipy.optimize import minimize

from cecsubopt import autodiff as ad
from cecsubopt.model import BenchmarkParams, finite_horizon_lqr, make_benchmark_model
from cecsubopt.solver import (ShootingBatch, SolverOptions, broadcast_nominal, feedback_tree_guess,
                              newton_minimize, nominal_objective, solve_nominal, solve_nominal_batch,
                              solve_tree, tree_objective)
from cecsubopt.tree import build_tree


def test_solver_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(grad_tol=0)
    with pytest.raises(ValueError):
        SolverOptions(c1=1.5)


def test_newton_minimize_rosenbrock():
    def f(z):
        return (1 - z[0]) ** 2 + 100 * (z[1] - z[0] * z[0]) ** 2

    u, val, diag = newton_minimize(f, np.array([-1.2, 1.0]))
    np.testing.assert_allclose(u, [1.0, 1.0], atol=1e-8)
    assert diag["converged"]


def test_nominal_lq_matches_riccati_recursion(lq):
    A, B, Q, R, P = (lq.params[k] for k in "ABQRP")
    Ps, Ks = finite_horizon_lqr(A, B, Q, R, P, 10)
    sol = solve_nominal(lq, [0.8])
    x = np.array([0.8])
    for k in range(10):
        u = -Ks[k] @ x
        assert sol.u_traj[k, 0] == pytest.approx(u[0], abs=1e-9)
        x = A @ x + B @ u
    assert sol.value == pytest.approx(0.8 ** 2 * Ps[0][0, 0], rel=1e-12)
    assert sol.converged and sol.grad_norm <= 1e-10


def test_tree_lq_value_has_additive_noise_term(lq, bench_tree):
    A, B, Q, R, P = (lq.params[k] for k in "ABQRP")
    Ps, _ = finite_horizon_lqr(A, B, Q, R, P, 10)
    sigma, x0 = 0.2, 0.5
    sol = solve_tree(lq, bench_tree, [x0], sigma)
    expected = x0 ** 2 * Ps[0][0, 0] + sigma ** 2 * sum(Ps[k][0, 0] for k in range(1, 11))
    assert sol.value == pytest.approx(expected, rel=1e-12)


def test_nominal_benchmark_against_scipy(bench):
    sol = solve_nominal(bench, [1.0])
    f = nominal_objective(bench, [1.0])
    start = sol.u_traj.ravel() + 0.05 * np.cos(np.arange(10))
    with np.errstate(all="ignore"):
        ref = minimize(f, start, jac=lambda u: ad.gradient(f, u), method="BFGS",
                       options={"gtol": 1e-10})
    assert sol.value == pytest.approx(ref.fun, abs=1e-10)
    assert sol.value == pytest.approx(24.351869890172892, rel=1e-12)
    np.testing.assert_allclose(sol.u_traj.ravel(), ref.x, atol=1e-5)


def test_nominal_trajectory_is_consistent(bench):
    sol = solve_nominal(bench, [1.0])
    np.testing.assert_allclose(sol.x_traj, bench.simulate([1.0], sol.u_traj), rtol=1e-14)
    assert sol.x_traj[1, 0] == pytest.approx(0.5788241748295655, rel=1e-9)


def test_nominal_at_origin_without_penalty_is_zero():
    model = make_benchmark_model(BenchmarkParams(rho=0.0))
    sol = solve_nominal(model, [0.0])
    assert np.all(sol.u_traj == 0)
    assert sol.value == 0.0


def test_nominal_horizon_zero(bench):
    sol = solve_nominal(bench, [0.3], horizon=0)
    assert sol.u_traj.shape == (0, 1)
    assert sol.value == pytest.approx(float(bench.terminal_cost(np.array([0.3]))))


def test_nominal_batch_matches_single_solves(bench):
    X0 = np.array([[0.0], [0.7], [-0.1]])
    res = solve_nominal_batch(bench, X0, 6)
    for i, x in enumerate(X0):
        single = solve_nominal(bench, x, horizon=6)
        assert res["value"][i] == pytest.approx(single.value, abs=1e-12)


def test_adjoint_gradient_and_hvp_match_forward_ad(bench):
    tree = build_tree(3, bench.noise_support)
    model = make_benchmark_model(BenchmarkParams(N=3))
    prob = ShootingBatch(model, [0.6], 3, 0.1 * tree.w_values)
    nominal = solve_nominal(model, [0.6])
    u = feedback_tree_guess(model, tree, nominal, 0.1).ravel() + 0.05 * np.cos(np.arange(7))
    f = tree_objective(model, tree, [0.6], 0.1)
    g, hvp = prob.linearize(u.reshape(1, -1))
    np.testing.assert_allclose(g[0], ad.gradient(f, u), rtol=1e-9, atol=1e-10)
    v = np.sin(np.arange(7.0))
    np.testing.assert_allclose(hvp(v.reshape(1, -1))[0], ad.hessian_vector(f, u, v), rtol=1e-7, atol=1e-8)
    assert prob.value(u.reshape(1, -1))[0] == pytest.approx(f(u), rel=1e-14)


def test_tree_at_zero_noise_equals_nominal(bench, bench_tree):
    sol = solve_tree(bench, bench_tree, [1.0], 0.0)
    nominal = solve_nominal(bench, [1.0])
    assert sol.value == pytest.approx(nominal.value, abs=1e-12)
    np.testing.assert_allclose(sol.u_tree, broadcast_nominal(bench_tree, nominal.u_traj), atol=1e-9)


def test_tree_solution_is_even_in_sigma(bench, bench_tree):
    plus = solve_tree(bench, bench_tree, [0.5], 0.1)
    minus = solve_tree(bench, bench_tree, [0.5], -0.1)
    assert plus.value == pytest.approx(minus.value, abs=1e-12)
    assert plus.root_control[0] == pytest.approx(minus.root_control[0], abs=1e-10)


def test_tree_value_exceeds_nominal(bench, bench_tree):
    # noise only adds cost on the benchmark (convex costs near the origin)
    sol = solve_tree(bench, bench_tree, [0.5], 0.1)
    assert sol.converged and sol.grad_norm <= 1e-10
    assert sol.value > solve_nominal(bench, [0.5]).value


def test_tree_horizon_mismatch(bench):
    with pytest.raises(ValueError):
        solve_tree(bench, build_tree(3, bench.noise_support), [0.0], 0.1)


def test_robust_start_from_unstable_state(bench, bench_tree):
    sol = solve_tree(bench, bench_tree, [1.5], 0.2)
    assert sol.converged
