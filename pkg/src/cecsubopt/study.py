"""Suboptimality of certainty-equivalent control over (x, sigma) grids.

Each record pairs an optimal tree solve with an exhaustive CEC evaluation
at the same state and noise level.  Log-log fits then estimate the order of
the value loss and of the root control gap as sigma shrinks.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .cec import evaluate_cec
from .solver import SolverError, SolverOptions, solve_nominal, solve_tree
from .tree import build_tree

log = logging.getLogger(__name__)

DEFAULT_SIGMAS = tuple(np.geomspace(0.01, 0.3, 12))
DEFAULT_WINDOW = (0.01, 0.05)
DEFAULT_X = (0.0, 0.5, 1.0)
BREAKDOWN_THRESHOLD = 3.5

VALUE_BAND = (3.6, 4.4)
GAP_BAND = (1.85, 2.15)
MIN_R2 = 0.98

CSV_COLUMNS = ("x", "sigma", "v_star", "v_cec", "delta_v", "u_star_root", "u_cec_root", "control_gap")


class FitError(ValueError):
    pass


@dataclass
class ScalingRecord:
    x: float
    sigma: float
    v_star: float
    v_cec: float
    delta_v: float
    u_star_root: float
    u_cec_root: float
    control_gap: float
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class SlopeFit:
    slope: float
    intercept: float
    r_squared: float
    window: tuple
    n_points: int

    def within(self, band, min_r2=MIN_R2) -> bool:
        return band[0] <= self.slope <= band[1] and self.r_squared >= min_r2


def _solve_record(model, tree, x: float, sigma: float, opts) -> ScalingRecord:
    try:
        nominal = solve_nominal(model, [x], opts=opts)
        opt = solve_tree(model, tree, [x], sigma, opts, nominal=nominal)
        if not opt.converged:
            raise SolverError(f"tree solve did not converge (grad {opt.grad_norm:.3e})")
        cec = evaluate_cec(model, tree, [x], sigma, opts)
    except (SolverError, ArithmeticError) as exc:
        log.warning("record x=%g sigma=%g failed: %s", x, sigma, exc)
        nan = float("nan")
        return ScalingRecord(x, sigma, nan, nan, nan, nan, nan, nan, error=str(exc))
    u_star = float(opt.root_control[0])
    u_cec = float(cec.root_control[0])
    return ScalingRecord(x, sigma, opt.value, cec.value, cec.value - opt.value,
                         u_star, u_cec, abs(u_cec - u_star))


# state shared with forked workers; models hold closures and do not pickle
_shared = {}


def _worker(item):
    x, sigma = item
    return _solve_record(_shared["model"], _shared["tree"], x, sigma, _shared["opts"])


def _map(items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [_worker(it) for it in items]
    if "fork" in multiprocessing.get_all_start_methods():
        pool = ProcessPoolExecutor(workers, mp_context=multiprocessing.get_context("fork"))
    else:
        pool = ThreadPoolExecutor(workers)
    with pool:
        return list(pool.map(_worker, items))


def run_scaling_study(model, x_values, sigma_values, opts: SolverOptions | None = None,
                      workers: int = 1, allow_nonpositive: bool = False) -> list:
    """One record per ``(x, sigma)``, ordered by x then sigma as given."""
    sigma_values = [float(s) for s in sigma_values]
    if not sigma_values or not x_values:
        raise ValueError("need at least one x and one sigma")
    if not allow_nonpositive and any(s <= 0 for s in sigma_values):
        raise ValueError("sigma values must be strictly positive")
    _shared.update(model=model, tree=build_tree(model.N, model.noise_support, model.noise_probs),
                   opts=opts or SolverOptions())
    try:
        items = [(float(x), s) for x in x_values for s in sigma_values]
        return _map(items, workers)
    finally:
        _shared.clear()


def fit_loglog_slope(pairs, window=None) -> SlopeFit:
    """Least-squares line through ``(log sigma, log y)`` for ``y > 0`` inside the window."""
    pts = [(float(s), float(y)) for s, y in pairs
           if window is None or window[0] * (1 - 1e-12) <= s <= window[1] * (1 + 1e-12)]
    pos = [(s, y) for s, y in pts if s > 0 and y > 0 and math.isfinite(y)]
    if pts and not pos:
        raise FitError("all values are nonpositive (noise floor?)")
    if len(pos) < 3:
        raise FitError(f"need at least 3 positive points in the window, got {len(pos)}")
    ls = np.log([s for s, _ in pos])
    ly = np.log([y for _, y in pos])
    slope, intercept = np.polyfit(ls, ly, 1)
    resid = ly - (slope * ls + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    win = window if window is not None else (pos[0][0], pos[-1][0])
    return SlopeFit(float(slope), float(intercept), r2, tuple(win), len(pos))


def policy_sensitivity_check(model, tree, x, sigma_list, opts: SolverOptions | None = None):
    """Central differences ``(pi_sigma(x) - pi_{-sigma}(x)) / (2 sigma)`` of the optimal root control."""
    sigma_list = [float(s) for s in sigma_list]
    if any(s <= 0 for s in sigma_list):
        raise ValueError("sigma levels must be strictly positive")
    if any(b >= a for a, b in zip(sigma_list, sigma_list[1:])):
        raise ValueError("sigma levels must be decreasing")
    nominal = solve_nominal(model, np.atleast_1d(x), opts=opts)
    out = []
    for s in sigma_list:
        plus = solve_tree(model, tree, np.atleast_1d(x), s, opts, nominal=nominal)
        minus = solve_tree(model, tree, np.atleast_1d(x), -s, opts, nominal=nominal)
        out.append((s, (plus.root_control - minus.root_control) / (2 * s)))
    return out


def local_slopes(sigmas, values):
    """Slopes between consecutive log-log points, as ``(sigma_lo, sigma_hi, slope)``."""
    out = []
    for (s0, y0), (s1, y1) in zip(zip(sigmas, values), zip(sigmas[1:], values[1:])):
        if y0 > 0 and y1 > 0:
            out.append((s0, s1, math.log(y1 / y0) / math.log(s1 / s0)))
        else:
            out.append((s0, s1, float("nan")))
    return out


def first_breakdown(slopes, threshold: float = BREAKDOWN_THRESHOLD):
    """Upper sigma of the first pair whose local slope falls below ``threshold``."""
    for _, s1, k in slopes:
        if math.isfinite(k) and k < threshold:
            return s1
    return None


@dataclass
class BreakdownScan:
    x: float
    sigmas: list
    delta_v: list
    slopes: list
    flagged_sigma: float | None


def breakdown_scan(model, x: float, sigma_values, opts=None, workers: int = 1, records=None) -> BreakdownScan:
    sigma_values = sorted(float(s) for s in sigma_values)
    if len(sigma_values) < 8:
        raise ValueError("breakdown scan needs at least 8 sigma values")
    if records is None:
        records = run_scaling_study(model, [x], sigma_values, opts, workers)
    recs = sorted((r for r in records if r.x == x and r.ok), key=lambda r: r.sigma)
    sig = [r.sigma for r in recs]
    dv = [r.delta_v for r in recs]
    slopes = local_slopes(sig, dv)
    return BreakdownScan(x, sig, dv, slopes, first_breakdown(slopes))


def summarize(records, window=DEFAULT_WINDOW, breakdown_x=(1.0,)) -> dict:
    """Slope fits per x with band verdicts, breakdown flags and invariant checks."""
    ok = [r for r in records if r.ok]
    xs = sorted({r.x for r in records})
    fits = {}
    for x in xs:
        rx = sorted((r for r in ok if r.x == x), key=lambda r: r.sigma)
        entry = {}
        for name, attr, band in (("delta_v", "delta_v", VALUE_BAND), ("control_gap", "control_gap", GAP_BAND)):
            try:
                f = fit_loglog_slope([(r.sigma, getattr(r, attr)) for r in rx], window)
                entry[name] = {**asdict(f), "band": list(band), "pass": f.within(band)}
            except FitError as exc:
                entry[name] = {"error": str(exc), "pass": False}
        fits[repr(x)] = entry
    breakdown = {}
    for x in breakdown_x:
        rx = sorted((r for r in ok if r.x == x), key=lambda r: r.sigma)
        if len(rx) >= 2:
            sl = local_slopes([r.sigma for r in rx], [r.delta_v for r in rx])
            breakdown[repr(x)] = {"flagged_sigma": first_breakdown(sl),
                                  "local_slopes": [list(t) for t in sl]}
    floor_ok = all(r.delta_v >= -1e-9 * (1 + abs(r.v_star)) for r in ok)
    return {
        "window": list(window),
        "n_records": len(records),
        "n_failed": len(records) - len(ok),
        "fits": fits,
        "breakdown": breakdown,
        "invariants": {"suboptimality_floor": floor_ok, "near_coincidence": _near_coincidence(ok, window)},
    }


def _near_coincidence(records, window, pair=(0.5, 1.0)):
    a = {r.sigma: r.delta_v for r in records if r.x == pair[0] and r.sigma <= window[1]}
    b = {r.sigma: r.delta_v for r in records if r.x == pair[1] and r.sigma <= window[1]}
    common = sorted(set(a) & set(b))
    if not common:
        return None
    return all(b[s] > 0 and 1 / 3 <= a[s] / b[s] <= 3 for s in common)


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([repr(float(getattr(r, c))) for c in CSV_COLUMNS])


def read_records_csv(path) -> list:
    with open(path, newline="") as fh:
        return [ScalingRecord(**{k: float(v) for k, v in row.items()}) for row in csv.DictReader(fh)]


def write_summary_json(path, summary: dict):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True, allow_nan=True)
        fh.write("\n")
