import csv
import json

import numpy as np
import pytest

from cecsubopt.cli import EXIT_CONFIG, EXIT_OK, ConfigError, RunConfig, main, no_randomness, parse_config_text


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_config_text():
    cfg = parse_config_text("""
        # comment
        model = benchmark
        benchmark.rho = 0   # trailing
        sigma = 0.01, 0.02
        plot = yes
        solver.max_cg_iters = none
    """)
    assert cfg == {"model": "benchmark", "benchmark.rho": 0.0, "sigma": [0.01, 0.02], "plot": True,
                   "solver.max_cg_iters": None}


@pytest.mark.parametrize("text", ["nonsense", "unknown.key = 1", "workers = many", "plot = maybe"])
def test_parse_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"benchmark.r": 0.0})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"model": "other"})
    with pytest.raises(ConfigError):
        RunConfig.from_mapping({"study.window": [0.05, 0.01]})
    assert RunConfig.from_mapping({}).grid.n_points == 2001


def test_solve_nominal(tmp_path):
    assert main(["solve-nominal", "--out", str(tmp_path), "--x", "1"]) == EXIT_OK
    rows = _rows(tmp_path / "nominal_x1.csv")
    assert rows[0] == ["stage", "x", "u"]
    assert len(rows) == 12
    assert sum(1 for r in rows[1:] if r[2]) == 10
    diag = json.loads((tmp_path / "nominal.json").read_text())
    assert diag["1"]["converged"]


def test_solve_nominal_zero_trajectory(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("benchmark.rho = 0\n")
    assert main(["solve-nominal", "--config", str(cfg), "--out", str(tmp_path), "--x", "0"]) == EXIT_OK
    rows = _rows(tmp_path / "nominal_x0.csv")[1:]
    assert all(float(r[1]) == 0.0 for r in rows)
    assert all(float(r[2]) == 0.0 for r in rows if r[2])


def test_bad_config_exits_before_solving(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("benchmark.r = 0\n")
    assert main(["solve-nominal", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_solve_tree_layout_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["solve-tree", "--out", str(out), "--x", "1", "--sigma", "0.2", "--plot", "--seedless"]) == 0
    rows = _rows(a / "tree_x1_sigma0.2.csv")
    assert rows[0] == ["stage", "node", "x", "u", "probability"]
    assert len(rows) == 2048
    for name in ("tree_x1_sigma0.2.csv", "tree.json", "tree_fans.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_solve_tree_zero_noise_rows_coincide(tmp_path):
    assert main(["solve-tree", "--out", str(tmp_path), "--x", "1", "--sigma", "0"]) == 0
    rows = _rows(tmp_path / "tree_x1_sigma0.csv")[1:]
    by_stage = {}
    for r in rows:
        by_stage.setdefault(r[0], set()).add((r[2], r[3]))
    assert all(len(v) == 1 for v in by_stage.values())


def test_tree_over_budget_is_refused(tmp_path):
    cfg = tmp_path / "big.cfg"
    cfg.write_text("benchmark.N = 25\n")
    assert main(["solve-tree", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_evaluate_cec(tmp_path):
    assert main(["evaluate-cec", "--out", str(tmp_path), "--x", "1", "--sigma", "0.1"]) == 0
    summary = json.loads((tmp_path / "cec.json").read_text())
    assert summary["cec_x1_sigma0.1"]["nominal_solves"] == 1023
    assert _rows(tmp_path / "cec_x1_sigma0.1.csv")[0] == ["stage", "node", "x", "u", "cost", "probability"]


def test_scaling_study_single_point_and_workers(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["scaling-study", "--out", str(a), "--x", "0.5,1", "--sigma", "0.02,0.1", "--plot"]) == 0
    assert main(["scaling-study", "--out", str(b), "--x", "0.5,1", "--sigma", "0.02,0.1", "--workers", "2"]) == 0
    assert (a / "scaling.csv").read_bytes() == (b / "scaling.csv").read_bytes()
    assert (a / "scaling.svg").exists()
    one = tmp_path / "one"
    assert main(["scaling-study", "--out", str(one), "--x", "1", "--sigma", "0.02"]) == 0
    rows = _rows(one / "scaling.csv")
    assert rows[0] == ["x", "sigma", "v_star", "v_cec", "delta_v", "u_star_root", "u_cec_root", "control_gap"]
    assert len(rows) == 2
    summary = json.loads((one / "scaling.json").read_text())
    assert summary["n_records"] == 1


def test_empty_sigma_list(tmp_path):
    assert main(["scaling-study", "--out", str(tmp_path), "--sigma", ""]) == EXIT_CONFIG


def test_dp_tables_zero_noise_and_tiny_grid(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("grid.n_points = 2\n")
    assert main(["dp-tables", "--config", str(cfg), "--out", str(tmp_path), "--sigma", "0"]) == 0
    summary = json.loads((tmp_path / "dp.json").read_text())
    assert summary["refinement"]["status"] == "skipped"
    assert summary["sigma"]["0"]["identical_tables"]
    rows = _rows(tmp_path / "dp_sigma0.csv")
    assert rows[0] == ["x", "V", "pi", "stage", "sigma", "kind"]


def test_dp_tables_with_plot(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("grid.n_points = 401\ngrid.refinement_check = false\n")
    assert main(["dp-tables", "--config", str(cfg), "--out", str(tmp_path), "--sigma", "0.05,0.2", "--plot"]) == 0
    summary = json.loads((tmp_path / "dp.json").read_text())
    s5, s2 = summary["sigma"]["0.05"], summary["sigma"]["0.2"]
    assert s5["max_gap_probe_range"] <= 0.01 * s5["max_value_probe_range"]
    assert s2["max_gap_probe_range"] > s5["max_gap_probe_range"]
    assert (tmp_path / "value_functions.svg").read_text().lstrip().startswith("<?xml")


def test_seedless_guard_blocks_rng():
    with no_randomness():
        with pytest.raises(RuntimeError):
            np.random.default_rng(0)
    assert np.random.default_rng(0) is not None
