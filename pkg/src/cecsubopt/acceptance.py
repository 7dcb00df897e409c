"""End-to-end acceptance checks on the benchmark and LQ models.

Each ``criterion_*`` function returns a :class:`CriterionResult`.  Expensive
intermediate results (study records, DP tables) live in a shared
:class:`AcceptanceContext` so that criteria reuse each other's solves.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from . import autodiff as ad
from .dp_oracle import Grid1D, dp_evaluate_cec, dp_solve
from .model import BenchmarkParams, make_benchmark_model, make_lq_model
from .solver import ShootingBatch, feedback_tree_guess, solve_nominal, tree_objective
from .study import (DEFAULT_SIGMAS, DEFAULT_WINDOW, GAP_BAND, MIN_R2, VALUE_BAND, FitError,
                    breakdown_scan, fit_loglog_slope, run_scaling_study)
from .tree import build_tree

log = logging.getLogger(__name__)

PROBES = tuple(np.linspace(-0.1, 1.2, 10))
ORACLE_SIGMAS = (0.0, 0.05, 0.1, 0.2)
ORACLE_TOL = 5e-4
SLOPE_X = (0.5, 1.0)
# smaller-sigma window reported next to criteria 1 and 2 for context only
SMALL_SIGMAS = tuple(np.geomspace(0.002, 0.01, 5))


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"criterion {self.number} [{verdict}] {self.name}: {self.detail.get('summary', '')}"


class AcceptanceContext:
    """Lazily computed, memoized ingredients shared by the criteria."""

    def __init__(self, workers: int = 1, grid_points: int = 2001):
        self.workers = workers
        self.grid = Grid1D(-2.0, 2.0, grid_points)
        self.model = make_benchmark_model()
        self.tree = build_tree(self.model.N, self.model.noise_support)
        self._cache = {}

    def _memo(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def records(self, x_values, sigmas, model=None, key="benchmark"):
        model = model or self.model
        out = []
        todo = [(x, s) for x in x_values for s in sigmas if (key, x, s) not in self._cache]
        if todo:
            xs = sorted({x for x, _ in todo})
            ss = sorted({s for _, s in todo})
            for r in run_scaling_study(model, xs, ss, workers=self.workers, allow_nonpositive=True):
                self._cache.setdefault((key, r.x, r.sigma), r)
        for x in x_values:
            for s in sigmas:
                out.append(self._cache[(key, x, s)])
        return out

    def dp_tables(self, sigma, grid=None):
        grid = grid or self.grid

        def build():
            nominal = self.dp_tables(0.0, grid)[0] if sigma != 0 else None
            opt = dp_solve(self.model, grid, sigma)
            cec = dp_evaluate_cec(self.model, grid, sigma, nominal=nominal or opt)
            return opt, cec

        return self._memo(("dp", sigma, grid.n_points), build)

    def lq_model(self):
        A, B = BenchmarkParams().linearization
        return self._memo("lq", lambda: make_lq_model(A, B, 5.0, 1.0, 10))


def _fmt(x):
    return f"{x:.4g}"


def _slope_criterion(ctx, number, name, attr, band):
    t0 = time.perf_counter()
    recs = ctx.records(SLOPE_X, DEFAULT_SIGMAS)
    small = ctx.records(SLOPE_X, SMALL_SIGMAS)
    fits, parts, ok = {}, [], True
    for x in SLOPE_X:
        rx = [r for r in recs if r.x == x and r.ok]
        try:
            f = fit_loglog_slope([(r.sigma, getattr(r, attr)) for r in rx], DEFAULT_WINDOW)
            good = f.within(band, MIN_R2) and f.n_points >= 5
            fits[repr(x)] = {"slope": f.slope, "r_squared": f.r_squared, "n_points": f.n_points, "pass": good}
            parts.append(f"x={x:g} slope {_fmt(f.slope)} r2 {f.r_squared:.4f}")
        except FitError as exc:
            good = False
            fits[repr(x)] = {"error": str(exc), "pass": False}
            parts.append(f"x={x:g} {exc}")
        ok &= good
        rs = [r for r in small if r.x == x and r.ok]
        try:
            g = fit_loglog_slope([(r.sigma, getattr(r, attr)) for r in rs])
            fits[repr(x)]["small_sigma_slope"] = g.slope
            fits[repr(x)]["small_sigma_window"] = list(g.window)
        except FitError:
            pass
    summary = "; ".join(parts) + f" (band {band[0]}..{band[1]}, r2 >= {MIN_R2})"
    return CriterionResult(number, name, ok, {"summary": summary, "window": list(DEFAULT_WINDOW), "fits": fits},
                           time.perf_counter() - t0)


def criterion_1(ctx):
    return _slope_criterion(ctx, 1, "fourth-order suboptimality", "delta_v", VALUE_BAND)


def criterion_2(ctx):
    return _slope_criterion(ctx, 2, "second-order control gap", "control_gap", GAP_BAND)


def criterion_3(ctx):
    t0 = time.perf_counter()
    recs = ctx.records((0.0, 0.5, 1.0), (0.05, 0.1, 0.2), model=ctx.lq_model(), key="lq")
    ok = all(r.ok for r in recs)
    worst_dv = max(r.delta_v / (1 + abs(r.v_star)) for r in recs)
    worst_gap = max(r.control_gap for r in recs)
    ok &= worst_dv <= 1e-7 and worst_gap <= 1e-7
    return CriterionResult(3, "certainty equivalence on LQ", ok,
                           {"summary": f"max rel dV {worst_dv:.2e}, max gap {worst_gap:.2e} (tol 1e-7)",
                            "max_rel_delta_v": worst_dv, "max_control_gap": worst_gap},
                           time.perf_counter() - t0)


def _oracle_errors(ctx, grid):
    errs_opt, errs_cec = [], []
    for s in ORACLE_SIGMAS:
        opt, cec = ctx.dp_tables(s, grid)
        recs = ctx.records(PROBES, (s,))
        for r in recs:
            errs_opt.append(abs(r.v_star - float(opt.value(r.x))))
            errs_cec.append(abs(r.v_cec - float(cec.value(r.x))))
    return max(errs_opt), max(errs_cec)


def criterion_4(ctx):
    t0 = time.perf_counter()
    e_opt, e_cec = _oracle_errors(ctx, ctx.grid)
    fine = ctx.grid.refined()
    f_opt, f_cec = _oracle_errors(ctx, fine)
    r_opt = e_opt / f_opt if f_opt > 0 else math.inf
    r_cec = e_cec / f_cec if f_cec > 0 else math.inf
    ok = e_opt <= ORACLE_TOL and e_cec <= ORACLE_TOL and r_opt >= 4 and r_cec >= 4
    summary = (f"max |tree - DP| {e_opt:.2e}, max |CEC - DP| {e_cec:.2e} (tol {ORACLE_TOL:g}); "
               f"refinement factors {r_opt:.1f}, {r_cec:.1f} (need >= 4)")
    return CriterionResult(4, "oracle equivalence", ok,
                           {"summary": summary, "err_optimal": e_opt, "err_cec": e_cec,
                            "refined_err_optimal": f_opt, "refined_err_cec": f_cec},
                           time.perf_counter() - t0)


def criterion_5(ctx):
    t0 = time.perf_counter()
    recs = ctx.records((0.0, 0.5, 1.0), (0.0,))
    ok = all(r.ok for r in recs)
    dv = max(abs(r.delta_v) / (1 + abs(r.v_star)) for r in recs)
    gap = max(r.control_gap for r in recs)
    ok &= dv <= 1e-9 and gap <= 1e-9
    return CriterionResult(5, "exactness at sigma = 0", ok,
                           {"summary": f"max rel |dV| {dv:.2e}, max gap {gap:.2e} (tol 1e-9)"},
                           time.perf_counter() - t0)


def criterion_6(ctx):
    t0 = time.perf_counter()
    recs = ctx.records(SLOPE_X, DEFAULT_SIGMAS)
    mirrored = ctx.records(SLOPE_X, tuple(-s for s in DEFAULT_SIGMAS))
    floor = all(r.ok and r.delta_v >= -1e-9 * (1 + abs(r.v_star)) for r in recs + mirrored)
    fields = ("v_star", "v_cec", "delta_v", "u_star_root", "u_cec_root", "control_gap")
    diff = max(abs(getattr(a, f) - getattr(b, f)) for a, b in zip(recs, mirrored) for f in fields)
    ok = floor and diff <= 1e-9
    return CriterionResult(6, "nonnegativity and sigma-evenness", ok,
                           {"summary": f"floor {'ok' if floor else 'violated'}, max |rec(sigma) - rec(-sigma)| {diff:.2e}",
                            "max_even_diff": diff}, time.perf_counter() - t0)


def criterion_7(ctx):
    t0 = time.perf_counter()
    recs = ctx.records((1.0,), DEFAULT_SIGMAS)
    scan = breakdown_scan(ctx.model, 1.0, DEFAULT_SIGMAS, records=recs)
    s = scan.flagged_sigma
    ok = s is not None and 0.05 <= s <= 0.2
    return CriterionResult(7, "breakdown of the fourth-order law", ok,
                           {"summary": f"first local slope below 3.5 at sigma {s if s is None else _fmt(s)} (band 0.05..0.2)",
                            "local_slopes": [list(t) for t in scan.slopes]}, time.perf_counter() - t0)


def criterion_8(ctx):
    t0 = time.perf_counter()
    x = ctx.grid.points
    mask = (x >= -0.1 - 1e-12) & (x <= 1.2 + 1e-12)
    opt5, cec5 = ctx.dp_tables(0.05)
    opt2, cec2 = ctx.dp_tables(0.2)
    gap5 = (cec5.V[0] - opt5.V[0])[mask]
    gap2 = (cec2.V[0] - opt2.V[0])[mask]
    bound = 0.01 * opt5.V[0][mask].max()
    sig = gap2 > 1e-9
    ok = gap5.max() <= bound and bool(np.all(gap2[sig] > gap5[sig]))
    return CriterionResult(8, "small-noise value functions nearly coincide", ok,
                           {"summary": f"max gap at 0.05 {gap5.max():.3e} <= {bound:.3e}; "
                                       f"gap at 0.2 larger at {int(np.sum(gap2[sig] > gap5[sig]))}/{int(sig.sum())} points"},
                           time.perf_counter() - t0)


def criterion_9(ctx, n_points: int = 20, sigma: float = 0.1):
    """AD directional derivatives versus central differences, plus the convergence audit."""
    t0 = time.perf_counter()
    model, tree = ctx.model, ctx.tree
    rel_errs = []
    halton = qmc.Halton(d=tree.node_count_controls + 1, scramble=False)
    samples = halton.random(n_points + 1)[1:]
    for j, row in enumerate(samples):
        x0 = -0.1 + 1.3 * row[0]
        base = feedback_tree_guess(model, tree, solve_nominal(model, [x0]), sigma).reshape(-1)
        u = base + 0.2 * (2 * row[1:] - 1)
        d = np.roll(2 * row[1:] - 1, j)
        d /= np.linalg.norm(d)
        f = tree_objective(model, tree, [x0], sigma)
        ad_dir = f(ad.Dual1(u, d)).deriv
        g, _ = ShootingBatch(model, [x0], tree.N, sigma * tree.w_values).linearize(u.reshape(1, -1))
        adj_dir = float(g[0] @ d)
        h = 1e-5
        fd = (f(u + h * d) - f(u - h * d)) / (2 * h)
        scale = max(abs(fd), 1e-12)
        rel_errs.append(max(abs(ad_dir - fd), abs(adj_dir - fd)) / scale)
    worst = max(rel_errs)
    solves = [v for k, v in ctx._cache.items() if isinstance(k, tuple) and k[0] in ("benchmark", "lq")]
    failed = [r for r in solves if not r.ok]
    ok = worst <= 1e-6 and not failed
    summary = f"max rel error {worst:.2e} over {n_points} points (tol 1e-6); {len(failed)} of {len(solves)} cached records failed to converge"
    return CriterionResult(9, "numerical hygiene", ok, {"summary": summary, "max_rel_error": worst},
                           time.perf_counter() - t0)


CRITERIA = (criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9)


def run_all(ctx: AcceptanceContext | None = None, report=print):
    ctx = ctx or AcceptanceContext()
    results = []
    for crit in CRITERIA:
        res = crit(ctx)
        results.append(res)
        if report is not None:
            report(res.line())
    return results
