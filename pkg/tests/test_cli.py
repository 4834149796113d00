from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import pytest
from click.testing import CliRunner

from sldp.cli import main
from sldp.config import parse_config
from sldp.errors import ConfigError

EIKONAL_SOLVE = """\
problem:
  name: eikonal1d
mesh:
  lower: [-2.0]
  upper: [2.0]
  subdivisions: [64]
time:
  N: 16
controls: {kind: list, values: [-1.0, 0.0, 1.0]}
policy: project
"""


def run(tmp_path: Path, command: str, text: str, *args: str):
    cfg = tmp_path / "run.yaml"
    cfg.write_text(text)
    out = tmp_path / "out"
    result = CliRunner().invoke(main, [command, "--config", str(cfg), "--out", str(out), *args])
    return result, out


def reason_line(result) -> str:
    lines = result.stderr.strip().splitlines()
    assert len(lines) == 1, result.stderr
    return lines[0]


# -- config ----------------------------------------------------------------


def test_unknown_key_reports_line_and_field():
    with pytest.raises(ConfigError, match=r"cfg:3: mesh.colour"):
        parse_config("problem: {name: eikonal1d}\nmesh:\n  colour: red\n  subdivisions: 4\n", "cfg")


def test_missing_field_and_bad_type():
    with pytest.raises(ConfigError, match="time.N"):
        parse_config("time: {N: many}\n")
    with pytest.raises(ConfigError, match="need values"):
        parse_config("controls: {kind: list}\n")


def test_time_block_overrides_horizon():
    cfg = parse_config("problem: {name: eikonal1d}\ntime: {T: 0.5, N: 4}\nmesh: {subdivisions: 8}\n")
    p = cfg.build_problem()
    assert p.T == 0.5 and cfg.build_grid(p).h == 0.125
    conflict = parse_config("problem: {name: eikonal1d, params: {T: 2.0}}\ntime: {T: 0.5, N: 4}\n")
    with pytest.raises(ConfigError, match="conflicts"):
        conflict.build_problem()


def test_control_dimension_checked():
    cfg = parse_config("problem: {name: eikonal2d}\ncontrols: {kind: list, values: [-1.0, 1.0]}\n")
    with pytest.raises(ConfigError, match="dimension"):
        cfg.build_controls(cfg.build_problem())


# -- solve -----------------------------------------------------------------


def test_solve_writes_files_and_terminal_row(tmp_path):
    result, out = run(tmp_path, "solve", EIKONAL_SOLVE)
    assert result.exit_code == 0, result.stderr
    for name in ("value.csv", "policy.csv", "metadata.json"):
        assert (out / name).exists()
    text = (out / "value.csv").read_text().splitlines()
    rows = list(csv.DictReader(io.StringIO("\n".join(text[1:]))))
    terminal = [r for r in rows if r["n"] == "16"]
    assert len(terminal) == 65
    assert all(float(r["value"]) == abs(float(r["x0"])) for r in terminal)
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["clamp_count"] > 0 and meta["invariance"]["ok"] is False


def test_solve_rejects_large_discount_step(tmp_path):
    text = "problem: {name: eikonal1d, params: {lam: 2.0}}\nmesh: {subdivisions: 4}\ntime: {N: 1}\n"
    result, _ = run(tmp_path, "solve", text)
    assert result.exit_code == 2
    assert "lam*h" in reason_line(result)


def test_solve_strict_escape_status(tmp_path):
    text = "problem: {name: eikonal1d, params: {half_width: 1.0}}\nmesh: {subdivisions: 8}\ntime: {N: 4}\n"
    result, out = run(tmp_path, "solve", text, "--policy", "strict")
    assert result.exit_code == 3
    assert reason_line(result).startswith("sldp: 3 invariance:")
    violations = (out / "invariance.csv").read_text().splitlines()
    assert violations[0] == "node,control,level,foot" and len(violations) == 1 + 2 * 4


def test_config_error_status(tmp_path):
    result, _ = run(tmp_path, "solve", "problem: {name: eikonal1d}\nmesh: {subdivisions: 4, colour: red}\n")
    assert result.exit_code == 2
    assert "mesh.colour" in reason_line(result)
    result, _ = run(tmp_path, "solve", "problem: [\n")
    assert result.exit_code == 2
    result, _ = run(tmp_path, "solve", "problem: {name: eikonal1d}\n")
    assert result.exit_code == 2 and "mesh" in reason_line(result)


def test_solve_byte_identical_across_workers(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, out_a = run(tmp_path / "a", "solve", EIKONAL_SOLVE, "--workers", "1")
    b, out_b = run(tmp_path / "b", "solve", EIKONAL_SOLVE, "--workers", "8")
    assert a.exit_code == b.exit_code == 0
    for name in ("value.csv", "policy.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


# -- oracle ----------------------------------------------------------------


def test_oracle_two_node_subset_passes(tmp_path):
    result, out = run(tmp_path, "oracle", "oracle: {nodes: [2]}\n")
    assert result.exit_code == 0, result.stderr
    summary = json.loads((out / "oracle.json").read_text())
    assert summary["failed"] == 0 and summary["instances"] == 12


def test_oracle_corruption_hook(tmp_path):
    result, _ = run(tmp_path, "oracle", "oracle: {nodes: [2], corrupt: 1.0e-6}\n")
    assert result.exit_code == 1
    assert "oracle_gap" in reason_line(result)


def test_oracle_guard(tmp_path):
    text = "oracle:\n  suite: none\n  instances:\n    - {nodes: 10, steps: 4, controls: 3}\n"
    result, _ = run(tmp_path, "oracle", text)
    assert result.exit_code == 4
    assert "search_space" in reason_line(result)


# -- studies ---------------------------------------------------------------


ADVECT_STUDY = """\
problem: {name: advect_lin, params: {count: 41}}
mesh: {subdivisions: [32]}
time: {N: 8}
policy: project
study:
  levels: 4
  subdomain: {lower: [-0.5], upper: [0.5]}
  min_rate: %s
"""


def test_converge_passes_and_writes_report(tmp_path):
    result, out = run(tmp_path, "converge", ADVECT_STUDY % "0.8")
    assert result.exit_code == 0, result.stderr
    rows = (out / "converge_advect_lin_c1_L4.csv").read_text().splitlines()
    assert len(rows) == 5
    meta = json.loads((out / "converge_advect_lin_c1_L4.json").read_text())
    assert meta["rate"] >= 0.8 and "wall_time_s" in meta["nondeterministic"]


def test_converge_rate_failure(tmp_path):
    result, _ = run(tmp_path, "converge", ADVECT_STUDY % "5.0")
    assert result.exit_code == 1 and " rate:" in reason_line(result)


def test_converge_single_level_insufficient(tmp_path):
    result, _ = run(tmp_path, "converge", ADVECT_STUDY % "0.8", "--levels", "1")
    assert result.exit_code == 4 and "insufficient_data" in reason_line(result)


def test_lemma1_command(tmp_path):
    text = ("problem: {name: advect_lin}\nmesh: {subdivisions: [32]}\ntime: {N: 8}\npolicy: project\n"
            "lemma1: {x: [0.3], control: [-0.5], levels: 3, min_rate: 0.9}\n")
    result, out = run(tmp_path, "lemma1", text)
    assert result.exit_code == 0, result.stderr
    assert (out / "lemma1_advect_lin_c1_L3.csv").exists()


def test_interp_check_command(tmp_path):
    text = ("interp: {function: quadratic, lower: [0.0], upper: [1.0], subdivisions: 4, levels: 4, "
            "expected_rate: 2.0}\n")
    result, out = run(tmp_path, "interp-check", text)
    assert result.exit_code == 0, result.stderr
    result, out = run(tmp_path, "interp-check", text, "--levels", "2")
    assert (out / "interp_quadratic_L2.csv").exists()


def test_interp_check_bound_failure(tmp_path):
    text = "interp: {function: abs, lower: [-1.0], upper: [1.0], subdivisions: 3, levels: 1, lipschitz: 0.1}\n"
    result, _ = run(tmp_path, "interp-check", text)
    assert result.exit_code == 1 and "interp_bound" in reason_line(result)


# -- simulate --------------------------------------------------------------


def test_simulate_command(tmp_path):
    text = ("problem: {name: eikonal1d}\nmesh: {lower: [-2.0], upper: [2.0], subdivisions: [256]}\n"
            "time: {N: 64}\npolicy: project\nsimulate: {x0: [0.8]}\n")
    result, out = run(tmp_path, "simulate", text)
    assert result.exit_code == 0, result.stderr
    rows = (out / "trajectory_0.csv").read_text().splitlines()
    assert rows[0] == "level,time,y0,u0,stage_cost,accumulated" and len(rows) == 66
    final = float(rows[-1].split(",")[2])
    assert abs(final) <= 2 * (1 / 64 + 1 / 64)


def test_simulate_bad_start(tmp_path):
    text = ("problem: {name: eikonal1d}\nmesh: {subdivisions: [16]}\ntime: {N: 4}\npolicy: project\n"
            "simulate: {x0: [[0.1, 0.2]]}\n")
    result, _ = run(tmp_path, "simulate", text)
    assert result.exit_code == 2
