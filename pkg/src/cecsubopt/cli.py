"""Command-line interface: ``cecsubopt <subcommand> [options]``.

Configuration files hold flat ``key = value`` lines; dotted prefixes group
keys (``benchmark.rho = 0``, ``solver.grad_tol = 1e-10``), ``#`` starts a
comment and lists are comma-separated.  Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import study
from .cec import evaluate_cec
from .dp_oracle import Grid1D, dp_evaluate_cec, dp_solve
from .model import BenchmarkParams, make_benchmark_model, make_lq_model
from .solver import SolverError, SolverOptions, solution_diagnostics_json, solve_nominal, solve_tree
from .tree import TreeTooLarge, build_tree

log = logging.getLogger("cecsubopt")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER, EXIT_PARTIAL = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s):
    if isinstance(s, (list, tuple)):
        return [float(v) for v in s]
    items = [t.strip() for t in str(s).split(",")]
    return [float(t) for t in items if t]


def _opt_int(s):
    return None if str(s).strip().lower() in ("", "none") else int(s)


SCHEMA = {
    "model": str,
    "out": str,
    "plot": _bool,
    "workers": int,
    "seedless": _bool,
    "sigma": _floats,
    "x": _floats,
    "benchmark.T": float,
    "benchmark.N": int,
    "benchmark.x_lb": float,
    "benchmark.q": float,
    "benchmark.r": float,
    "benchmark.rho": float,
    "benchmark.eps": float,
    "lq.A": float,
    "lq.B": float,
    "lq.q": float,
    "lq.r": float,
    "lq.N": int,
    "grid.lo": float,
    "grid.hi": float,
    "grid.n_points": int,
    "grid.refinement_check": _bool,
    "solver.grad_tol": float,
    "solver.max_iters": int,
    "solver.c1": float,
    "solver.backtrack": float,
    "solver.cg_tol_factor": float,
    "solver.max_halvings": int,
    "solver.max_cg_iters": _opt_int,
    "study.window": _floats,
    "study.breakdown_x": _floats,
}


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            out[key] = SCHEMA[key](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


@dataclass
class RunConfig:
    model: str = "benchmark"
    benchmark: BenchmarkParams = field(default_factory=BenchmarkParams)
    lq: dict = field(default_factory=dict)
    grid_lo: float = -2.0
    grid_hi: float = 2.0
    grid_points: int = 2001
    refinement_check: bool = True
    sigma: list | None = None
    x: list | None = None
    solver: SolverOptions = field(default_factory=SolverOptions)
    window: tuple = study.DEFAULT_WINDOW
    breakdown_x: tuple = (1.0,)
    out: str = "out"
    plot: bool = False
    workers: int = 1
    seedless: bool = False

    @classmethod
    def from_mapping(cls, values: dict) -> "RunConfig":
        """Build and validate; every error surfaces as :class:`ConfigError`."""
        try:
            bench = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("benchmark.")}
            solver = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("solver.")}
            lq = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith("lq.")}
            cfg = cls(
                model=values.get("model", "benchmark"),
                benchmark=BenchmarkParams(**bench),
                lq=lq,
                grid_lo=values.get("grid.lo", -2.0),
                grid_hi=values.get("grid.hi", 2.0),
                grid_points=values.get("grid.n_points", 2001),
                refinement_check=values.get("grid.refinement_check", True),
                sigma=values.get("sigma"),
                x=values.get("x"),
                solver=SolverOptions(**solver),
                window=tuple(values.get("study.window", study.DEFAULT_WINDOW)),
                breakdown_x=tuple(values.get("study.breakdown_x", (1.0,))),
                out=values.get("out", "out"),
                plot=values.get("plot", False),
                workers=values.get("workers", 1),
                seedless=values.get("seedless", False),
            )
            cfg.validate()
            return cfg
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def validate(self):
        if self.model not in ("benchmark", "lq"):
            raise ValueError(f"unknown model {self.model!r} (benchmark or lq)")
        if self.model == "lq" and self.lq.get("r", 1.0) <= 0:
            raise ValueError("lq.r must be positive")
        Grid1D(self.grid_lo, self.grid_hi, self.grid_points)
        if self.sigma is not None and not self.sigma:
            raise ValueError("sigma list is empty")
        if self.x is not None and not self.x:
            raise ValueError("x list is empty")
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if len(self.window) != 2 or not 0 < self.window[0] < self.window[1]:
            raise ValueError("study.window needs two increasing positive values")

    def build_model(self):
        if self.model == "lq":
            A0, B0 = self.benchmark.linearization
            lq = self.lq
            return make_lq_model(lq.get("A", A0), lq.get("B", B0), lq.get("q", 5.0), lq.get("r", 1.0),
                                 lq.get("N", self.benchmark.N))
        return make_benchmark_model(self.benchmark)

    @property
    def grid(self) -> Grid1D:
        return Grid1D(self.grid_lo, self.grid_hi, self.grid_points)


# ---------------------------------------------------------------------------
# output helpers


def _num(v):
    return "" if v is None else repr(float(v))


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(row)


def write_json(path, data):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, ensure_ascii=False)
        fh.write("\n")


def _tag(v) -> str:
    return f"{v:g}"


def _scalar(a):
    a = np.asarray(a, dtype=float).reshape(-1)
    return float(a[0]) if a.size == 1 else a.tolist()


# ---------------------------------------------------------------------------
# subcommands


def cmd_solve_nominal(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    diag = {}
    status = EXIT_OK
    for x0 in cfg.x or [1.0]:
        sol = solve_nominal(model, np.full(model.n_x, x0), opts=cfg.solver)
        rows = []
        for k in range(model.N + 1):
            u = sol.u_traj[k] if k < model.N else None
            rows.append([k, _num(sol.x_traj[k][0]), "" if u is None else _num(u[0])])
        write_csv(out / f"nominal_x{_tag(x0)}.csv", ("stage", "x", "u"), rows)
        diag[_tag(x0)] = solution_diagnostics_json(sol)
        if not sol.converged:
            log.error("nominal solve from x0=%g did not converge", x0)
            status = EXIT_SOLVER
    write_json(out / "nominal.json", diag)
    return status


def _tree_rows(tree, sol, sigma):
    rows = []
    probs = tree.stage_prob
    for k in range(tree.N + 1):
        xs = sol.x_tree[tree.stage_slice(k)]
        us = sol.u_tree[tree.stage_slice(k)] if k < tree.N else None
        for i in range(len(xs)):
            rows.append([k, i + 1, _num(xs[i][0]), "" if us is None else _num(us[i][0]), _num(probs[k])])
    return rows


def cmd_solve_tree(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    tree = build_tree(model.N, model.noise_support, model.noise_probs)
    diag, panels = {}, []
    status = EXIT_OK
    for x0 in cfg.x or [1.0]:
        nominal = solve_nominal(model, np.full(model.n_x, x0), opts=cfg.solver)
        for s in cfg.sigma or [0.2]:
            sol = solve_tree(model, tree, np.full(model.n_x, x0), s, cfg.solver, nominal=nominal)
            name = f"tree_x{_tag(x0)}_sigma{_tag(s)}"
            write_csv(out / f"{name}.csv", ("stage", "node", "x", "u", "probability"), _tree_rows(tree, sol, s))
            diag[name] = solution_diagnostics_json(sol)
            panels.append((f"x0={x0:g}, sigma={s:g}", tree, sol.x_tree))
            if not sol.converged:
                log.error("tree solve %s did not converge", name)
                status = EXIT_SOLVER
    write_json(out / "tree.json", diag)
    if cfg.plot:
        from .plotting import plot_tree_fans
        x_lb = cfg.benchmark.x_lb if cfg.model == "benchmark" else None
        plot_tree_fans(out / "tree_fans.svg", panels, h=cfg.benchmark.T / cfg.benchmark.N, x_lb=x_lb)
    return status


def cmd_evaluate_cec(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    tree = build_tree(model.N, model.noise_support, model.noise_probs)
    summary = {}
    for x0 in cfg.x or [1.0]:
        for s in cfg.sigma or [0.2]:
            ev = evaluate_cec(model, tree, np.full(model.n_x, x0), s, cfg.solver)
            name = f"cec_x{_tag(x0)}_sigma{_tag(s)}"
            rows = [[k, i, _num(x[0]), "" if u is None else _num(u[0]), _num(c), _num(p)]
                    for k, i, x, u, c, p in ev.node_records(tree)]
            write_csv(out / f"{name}.csv", ("stage", "node", "x", "u", "cost", "probability"), rows)
            summary[name] = {"value": ev.value, "root_control": _scalar(ev.root_control),
                             "max_grad_norm": max(float(np.max(g)) for g in ev.grad_norms) if ev.grad_norms else 0.0,
                             "nominal_solves": int(sum(len(g) for g in ev.grad_norms))}
    write_json(out / "cec.json", summary)
    return EXIT_OK


def _dp_rows(tables):
    return [[_num(x), _num(v), _num(p), k, _num(s), kind] for x, v, p, k, s, kind in tables.rows()]


def cmd_dp_tables(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    grid = cfg.grid
    sigmas = cfg.sigma or [0.05, 0.2]
    nominal = dp_solve(model, grid, 0.0)
    xs = grid.points
    mask = (xs >= -0.1 - 1e-12) & (xs <= 1.2 + 1e-12)
    summary, curves = {"grid": [grid.lo, grid.hi, grid.n_points], "sigma": {}}, {}
    for s in sigmas:
        opt = nominal if s == 0 else dp_solve(model, grid, s)
        cec = dp_evaluate_cec(model, grid, s, nominal=nominal)
        write_csv(out / f"dp_sigma{_tag(s)}.csv", ("x", "V", "pi", "stage", "sigma", "kind"),
                  _dp_rows(opt) + _dp_rows(cec))
        gap = cec.V[0] - opt.V[0]
        entry = {
            "max_gap_probe_range": float(gap[mask].max()) if mask.any() else None,
            "max_value_probe_range": float(opt.V[0][mask].max()) if mask.any() else None,
            "identical_tables": bool(all(np.array_equal(a, b) for a, b in zip(opt.V, cec.V))),
            "failed_points": {str(k): len(v) for k, v in sorted(opt.failures.items())},
        }
        summary["sigma"][_tag(s)] = entry
        curves[s] = (opt.V[0], cec.V[0])
    if cfg.refinement_check and grid.n_points >= 5:
        fine = grid.refined()
        coarse_v = dp_solve(model, grid, sigmas[-1]).V[0] if sigmas[-1] != 0 else nominal.V[0]
        fine_v = dp_solve(model, fine, sigmas[-1]).V[0]
        summary["refinement"] = {"status": "done", "sigma": sigmas[-1],
                                 "max_change": float(np.max(np.abs(coarse_v[mask] - fine_v[::2][mask])))}
    else:
        summary["refinement"] = {"status": "skipped",
                                 "reason": "disabled" if not cfg.refinement_check else "grid has fewer than 5 points"}
    write_json(out / "dp.json", summary)
    if cfg.plot:
        from .plotting import plot_value_functions
        stage = np.asarray(model.stage_cost(xs[:, None], np.zeros((len(xs), 1))), dtype=float)
        plot_value_functions(out / "value_functions.svg", xs[mask] if mask.any() else xs,
                             {s: (a[mask], b[mask]) if mask.any() else (a, b) for s, (a, b) in curves.items()},
                             stage[mask] if mask.any() else stage)
    return EXIT_OK


def cmd_scaling_study(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    sigmas = cfg.sigma or list(study.DEFAULT_SIGMAS)
    xs = cfg.x or list(study.DEFAULT_X)
    records = study.run_scaling_study(model, xs, sigmas, cfg.solver, workers=cfg.workers)
    study.write_records_csv(out / "scaling.csv", records)
    summary = study.summarize(records, cfg.window, cfg.breakdown_x)
    summary["failures"] = [{"x": r.x, "sigma": r.sigma, "error": r.error} for r in records if not r.ok]
    study.write_summary_json(out / "scaling.json", summary)
    if cfg.plot:
        from .plotting import plot_scaling
        plot_scaling(out / "scaling.svg", records)
    n_ok = sum(r.ok for r in records)
    if n_ok == 0:
        return EXIT_SOLVER
    return EXIT_PARTIAL if n_ok < len(records) else EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    from .acceptance import AcceptanceContext, run_all
    ctx = AcceptanceContext(workers=cfg.workers, grid_points=cfg.grid_points)
    results = run_all(ctx, report=print)
    write_json(out / "acceptance.json", {
        str(r.number): {"name": r.name, "passed": r.passed, "detail": r.detail} for r in results
    })
    return EXIT_OK if all(r.passed for r in results) else EXIT_PARTIAL


COMMANDS = {
    "solve-nominal": cmd_solve_nominal,
    "solve-tree": cmd_solve_tree,
    "evaluate-cec": cmd_evaluate_cec,
    "dp-tables": cmd_dp_tables,
    "scaling-study": cmd_scaling_study,
    "verify": cmd_verify,
}


@contextlib.contextmanager
def no_randomness():
    """Make any use of the global random generators fail loudly."""

    def forbidden(*args, **kwargs):
        raise RuntimeError("random number generation is disabled (--seedless)")

    targets = [(np.random, n) for n in ("default_rng", "seed", "random", "rand", "randn", "normal", "uniform")]
    targets += [(random, n) for n in ("random", "seed", "uniform", "gauss", "choice", "shuffle")]
    saved = [(mod, n, getattr(mod, n)) for mod, n in targets]
    try:
        for mod, n, _ in saved:
            setattr(mod, n, forbidden)
        yield
    finally:
        for mod, n, fn in saved:
            setattr(mod, n, fn)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cecsubopt", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="flat key = value configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--sigma", help="comma-separated noise levels")
        p.add_argument("--x", help="comma-separated initial states")
        p.add_argument("--plot", action="store_true", default=None, help="also write SVG figures")
        p.add_argument("--workers", type=int, help="worker processes for the scaling study")
        p.add_argument("--seedless", action="store_true", default=None,
                       help="fail if anything draws random numbers")
        p.add_argument("-v", "--verbose", action="store_true")
    return ap


def load_config(args) -> RunConfig:
    values = {}
    if args.config is not None:
        try:
            values = parse_config_text(args.config.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    try:
        if args.sigma is not None:
            values["sigma"] = _floats(args.sigma)
        if args.x is not None:
            values["x"] = _floats(args.x)
    except ValueError as exc:
        raise ConfigError(f"bad list: {exc}") from None
    for key in ("out", "plot", "workers", "seedless"):
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    return RunConfig.from_mapping(values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    guard = no_randomness() if cfg.seedless else contextlib.nullcontext()
    try:
        with guard:
            return COMMANDS[args.command](cfg, out)
    except (TreeTooLarge, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, ArithmeticError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
