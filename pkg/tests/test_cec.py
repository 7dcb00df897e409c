import itertools
import math

import numpy as np
import pytest
from scipy.optimize import minimize

from cecsubopt import autodiff as ad
from cecsubopt.cec import cec_root_control, evaluate_cec
from cecsubopt.model import BenchmarkParams, make_benchmark_model
from cecsubopt.solver import SolverError, SolverOptions, nominal_objective, solve_nominal, solve_tree
from cecsubopt.tree import build_tree


def _scipy_first_control(model, x, horizon):
    f = nominal_objective(model, x, horizon)
    res = minimize(f, np.zeros(horizon), jac=lambda u: ad.gradient(f, u), method="BFGS",
                   options={"gtol": 1e-11, "maxiter": 2000})
    return res.x[:1]


def test_matches_brute_force_enumeration():
    model = make_benchmark_model(BenchmarkParams(T=0.6, N=3))
    tree = build_tree(3, model.noise_support)
    sigma, x0 = 0.15, 0.4
    total = []
    for path in itertools.product((-1.0, 1.0), repeat=3):
        x, cost = np.array([x0]), []
        for k, w in enumerate(path):
            u = _scipy_first_control(model, x, 3 - k)
            cost.append(float(model.stage_cost(x, u)))
            x = model.dynamics(x, u, np.array([sigma * w]))
        cost.append(float(model.terminal_cost(x)))
        total.append(math.fsum(cost))
    ref = math.fsum(total) / 8
    ev = evaluate_cec(model, tree, [x0], sigma)
    assert ev.value == pytest.approx(ref, abs=1e-8)


def test_zero_noise_gives_nominal_value(bench, bench_tree):
    ev = evaluate_cec(bench, bench_tree, [1.0], 0.0)
    assert ev.value == pytest.approx(solve_nominal(bench, [1.0]).value, abs=1e-10)


def test_lq_certainty_equivalence(lq, bench_tree):
    ev = evaluate_cec(lq, bench_tree, [1.0], 0.2)
    opt = solve_tree(lq, bench_tree, [1.0], 0.2)
    assert ev.value - opt.value <= 1e-8 * (1 + abs(opt.value))
    assert ev.root_control[0] == pytest.approx(opt.root_control[0], abs=1e-9)


def test_cec_is_never_better_than_optimal(bench, bench_tree):
    for x in (0.0, 0.5, 1.0):
        ev = evaluate_cec(bench, bench_tree, [x], 0.1)
        opt = solve_tree(bench, bench_tree, [x], 0.1)
        assert ev.value >= opt.value - 1e-9 * (1 + abs(opt.value))


def test_root_control_is_sigma_independent(bench, bench_tree):
    a = evaluate_cec(bench, bench_tree, [0.7], 0.05).root_control
    b = evaluate_cec(bench, bench_tree, [0.7], 0.2).root_control
    assert a[0] == b[0] == cec_root_control(bench, [0.7])[0]


def test_node_records_layout(bench, bench_tree):
    ev = evaluate_cec(bench, bench_tree, [1.0], 0.2)
    rows = ev.node_records(bench_tree)
    assert len(rows) == 2047
    assert sum(1 for r in rows if r[3] is None) == 1024
    assert all(max(g) <= 1e-10 for g in ev.grad_norms)
    weighted = math.fsum(r[5] * float(r[4]) for r in rows)
    assert weighted == pytest.approx(ev.value, rel=1e-14)


def test_evenness(bench, bench_tree):
    a = evaluate_cec(bench, bench_tree, [0.5], 0.1)
    b = evaluate_cec(bench, bench_tree, [0.5], -0.1)
    assert a.value == pytest.approx(b.value, abs=1e-12)


def test_failure_names_the_node(bench, bench_tree):
    with pytest.raises(SolverError, match="stage 0, node 1"):
        evaluate_cec(bench, bench_tree, [1.0], 0.1, SolverOptions(max_iters=1))


def test_horizon_mismatch(bench):
    with pytest.raises(ValueError):
        evaluate_cec(bench, build_tree(2, bench.noise_support), [0.0], 0.1)
