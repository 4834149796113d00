"""Command-line front end.

Exit status: 0 success, 1 a checked assertion failed, 2 configuration
error, 3 inward-pointing condition violated under the strict policy,
4 search-space guard exceeded or too little data to fit a rate.  Every
failure prints one line ``sldp: <status> <reason>: <message>`` to stderr.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Any, Callable

import click
import numpy as np

from . import errors
from .config import RunConfig, load_config
from .harness import INTERP_FUNCTIONS, ConvergenceReport, bound_holds, interp_error_study, lemma1_study, run_convergence
from .mesh import BoxDomain
from .oracle import PiecewiseConstantControl, default_tiny_suite, make_tiny_instance, oracle_report, run_equivalence
from .problem import check_invariance
from .solver import policy_dump, run_metadata, solve, value_dump
from .synthesis import simulate

OK, ASSERTION, CONFIG, INVARIANCE, GUARD = 0, 1, 2, 3, 4

_STATUS = {
    errors.ConfigError: CONFIG,
    errors.RegistryError: CONFIG,
    errors.MeshError: CONFIG,
    errors.ControlSetError: CONFIG,
    errors.TimeGridError: CONFIG,
    errors.InvarianceError: INVARIANCE,
    errors.SearchSpaceError: GUARD,
    errors.InsufficientDataError: GUARD,
}


class Failure(Exception):
    """A run finished but a checked assertion did not hold."""

    def __init__(self, reason: str, message: str, status: int = ASSERTION):
        super().__init__(message)
        self.reason = reason
        self.status = status


def _fail(status: int, reason: str, message: str) -> None:
    line = " ".join(str(message).split())
    click.echo(f"sldp: {status} {reason}: {line}", err=True)
    sys.exit(status)


def _run(body: Callable[[], None]) -> None:
    try:
        body()
    except Failure as exc:
        _fail(exc.status, exc.reason, str(exc))
    except errors.SLDPError as exc:
        status = next((s for cls, s in _STATUS.items() if isinstance(exc, cls)), ASSERTION)
        _fail(status, exc.reason, str(exc))
    except OSError as exc:
        _fail(CONFIG, "output", f"{exc.filename}: {exc.strerror}")


def _load(config: str, out: str | None, workers: int | None, policy: str | None) -> RunConfig:
    cfg = load_config(config)
    updates: dict[str, Any] = {}
    if out is not None:
        updates["output"] = out
    if workers is not None:
        updates["workers"] = workers
    if policy is not None:
        updates["policy"] = policy
    return cfg.model_copy(update=updates)


def _outdir(cfg: RunConfig) -> Path:
    path = Path(cfg.output)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def _dumps(doc: Any) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o))


def _common(f):
    f = click.option("--policy", type=click.Choice(["strict", "project"]), default=None,
                     help="Foot-point policy; overrides the config.")(f)
    f = click.option("--workers", type=click.IntRange(min=1), default=None, help="Maximum worker threads.")(f)
    f = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")(f)
    f = click.option("--config", "config", required=True, type=click.Path(dir_okay=False),
                     help="YAML run configuration.")(f)
    return f


def _levels_option(f):
    return click.option("--levels", type=click.IntRange(min=1), default=None,
                        help="Number of refinement levels; overrides the config.")(f)


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Semi-Lagrangian dynamic programming for finite-horizon optimal control."""


# -- solve -------------------------------------------------------------------


def _solve_setup(cfg: RunConfig):
    problem = cfg.build_problem()
    mesh = cfg.build_mesh(problem)
    grid = cfg.build_grid(problem)
    controls = cfg.build_controls(problem)
    return problem, mesh, grid, controls


@main.command("solve")
@_common
def cmd_solve(config, out, workers, policy):
    """Run the backward recursion and write value, policy and metadata files."""

    def body():
        cfg = _load(config, out, workers, policy)
        problem, mesh, grid, controls = _solve_setup(cfg)
        report = check_invariance(problem, mesh, grid, controls)
        outdir = _outdir(cfg)
        if not report.ok and cfg.policy == "strict":
            _write(outdir / "invariance.csv", "node,control,level,foot\n" + "".join(
                f"{i},{c},{n},{' '.join(repr(v) for v in p)}\n" for i, c, n, p in report.violations))
            raise errors.InvarianceError(report.summary())
        vf, pol = solve(problem, mesh, grid, controls, policy=cfg.policy, workers=cfg.workers)
        _write(outdir / "value.csv", value_dump(vf, pol, problem, controls))
        _write(outdir / "policy.csv", policy_dump(pol, mesh, controls))
        extra = {"problem": problem.name, "params": dict(problem.params), "controls": controls.elements.tolist(),
                 "invariance": {"ok": report.ok, "violations": len(report.violations),
                                "summary": report.summary()}}
        _write(outdir / "metadata.json", run_metadata(vf, extra))

    _run(body)


# -- oracle ------------------------------------------------------------------


@main.command("oracle")
@_common
def cmd_oracle(config, out, workers, policy):
    """Compare the solver with exhaustive minimization of the discrete functional."""

    def body():
        cfg = _load(config, out, workers, policy)
        block = cfg.oracle
        if block is None:
            raise errors.ConfigError("config needs an oracle block")
        instances = []
        if block.suite == "default":
            instances = default_tiny_suite(cfg.seed, block.interior_points)
            if block.nodes is not None:
                instances = [i for i in instances if i.mesh.n_nodes in block.nodes]
        for j, spec in enumerate(block.instances):
            instances.append(make_tiny_instance(spec.nodes, spec.steps, spec.controls, spec.lam, spec.time_dependent,
                                                seed=cfg.seed + j, interior_points=spec.interior_points))
        if not instances:
            raise errors.ConfigError("oracle block selects no instances")
        rows = run_equivalence(instances, corrupt=block.corrupt, max_combinations=block.max_combinations)
        outdir = _outdir(cfg)
        _write(outdir / "oracle.csv", oracle_report(rows, block.tol))
        failed = [r for r in rows if not r.gap <= block.tol]
        worst = max(rows, key=lambda r: r.gap)
        _write(outdir / "oracle.json", _dumps({
            "instances": len(instances), "points": len(rows), "failed": len(failed), "tol": block.tol,
            "max_gap": worst.gap, "max_gap_at": {"instance": worst.instance, "x": worst.x},
            "corrupt": block.corrupt,
        }))
        if failed:
            raise Failure("oracle_gap", f"{len(failed)} of {len(rows)} points exceed tol {block.tol:g}; "
                                        f"max gap {worst.gap:.3e} at {worst.instance} x={worst.x!r}")

    _run(body)


# -- studies -----------------------------------------------------------------


def _write_report(outdir: Path, report: ConvergenceReport) -> None:
    stem = report.file_stem()
    _write(outdir / f"{stem}.csv", report.to_csv())
    _write(outdir / f"{stem}.json", report.to_json())


def _require_rate(report: ConvergenceReport) -> float:
    if report.rate is None:
        raise errors.InsufficientDataError(report.rate_note)
    return report.rate


@main.command("converge")
@_common
@_levels_option
def cmd_converge(config, out, workers, policy, levels):
    """Refinement study of the value function against the exact (or a reference) solution."""

    def body():
        cfg = _load(config, out, workers, policy)
        cfg.require("study")
        study = cfg.study
        problem = cfg.build_problem()
        domain = cfg.build_domain(problem)
        subdomain = study.subdomain.domain() if study.subdomain else domain
        lu_mode = ("sampled", study.lu_pairs) if study.lu_pairs else "auto"
        report = run_convergence(
            problem, cfg.subdivisions(domain), cfg.build_grid(problem).N, levels or study.levels, subdomain,
            norm=study.norm, domain=domain, controls=cfg.build_controls(problem), policy=cfg.policy,
            reference=study.reference, workers=cfg.workers, lu_mode=lu_mode, seed=cfg.seed,
        )
        _write_report(_outdir(cfg), report)
        finest = report.levels[-1]
        if study.error_factor is not None and not finest.error <= study.error_factor * finest.scale:
            raise Failure("error_bound", f"finest error {finest.error:.3e} > {study.error_factor:g}*(h+k) "
                                         f"= {study.error_factor * finest.scale:.3e}")
        if study.min_rate is not None:
            rate = _require_rate(report)
            if rate < study.min_rate:
                raise Failure("rate", f"fitted rate {rate:.4f} < {study.min_rate:g}")

    _run(body)


@main.command("lemma1")
@_common
@_levels_option
def cmd_lemma1(config, out, workers, policy, levels):
    """Gap between the continuous and the fully discrete cost of one fixed control."""

    def body():
        cfg = _load(config, out, workers, policy)
        cfg.require("lemma1")
        block = cfg.lemma1
        problem = cfg.build_problem()
        domain = cfg.build_domain(problem)
        N0 = cfg.build_grid(problem).N
        values = np.asarray(block.control, dtype=float).reshape(len(block.control), -1)
        if values.shape[0] == 1:
            values = np.repeat(values, N0, axis=0)
        control = PiecewiseConstantControl(0, values)
        report = lemma1_study(problem, control, block.x, levels or block.levels, cfg.subdivisions(domain), N0,
                              domain=domain, substeps=block.substeps, policy=cfg.policy,
                              terminal_discount=block.terminal_discount)
        _write_report(_outdir(cfg), report)
        finest = report.levels[-1]
        if block.gap_factor is not None and not finest.error <= block.gap_factor * finest.scale:
            raise Failure("gap_bound", f"finest gap {finest.error:.3e} > {block.gap_factor:g}*(h+k)")
        if block.min_rate is not None:
            rate = _require_rate(report)
            if rate < block.min_rate:
                raise Failure("rate", f"fitted rate {rate:.4f} < {block.min_rate:g}")

    _run(body)


@main.command("interp-check")
@_common
@_levels_option
def cmd_interp_check(config, out, workers, policy, levels):
    """Sup-norm interpolation error of a named test function under mesh refinement."""

    def body():
        cfg = _load(config, out, workers, policy)
        cfg.require("interp")
        block = cfg.interp
        g, lip = INTERP_FUNCTIONS[block.function]
        domain = BoxDomain(block.lower, block.upper)
        subs = [int(s) for s in np.atleast_1d(block.subdivisions)]
        if len(subs) == 1:
            subs = subs * domain.dim
        lipschitz = block.lipschitz if block.lipschitz is not None else lip(domain)
        report = interp_error_study(g, lipschitz, domain, levels or block.levels, subs,
                                    samples=block.samples, name=block.function)
        _write_report(_outdir(cfg), report)
        if not bound_holds(report):
            bad = next(r for r in report.levels if r.error > r.bound)
            raise Failure("interp_bound", f"level {bad.level}: error {bad.error:.3e} > L*k = {bad.bound:.3e}")
        if block.expected_rate is not None:
            rate = _require_rate(report)
            if abs(rate - block.expected_rate) > block.rate_tol:
                raise Failure("rate", f"fitted rate {rate:.4f} not within {block.rate_tol:g} "
                                      f"of {block.expected_rate:g}")

    _run(body)


# -- simulate ----------------------------------------------------------------


@main.command("simulate")
@_common
def cmd_simulate(config, out, workers, policy):
    """Solve, then run closed-loop simulations from each configured initial state."""

    def body():
        cfg = _load(config, out, workers, policy)
        cfg.require("simulate")
        problem, mesh, grid, controls = _solve_setup(cfg)
        n0 = cfg.simulate.n0
        if n0 >= grid.N:
            raise errors.ConfigError(f"simulate.n0 must be < N = {grid.N}")
        vf, _ = solve(problem, mesh, grid, controls, policy=cfg.policy, workers=cfg.workers)
        outdir = _outdir(cfg)
        summary = []
        for j, x0 in enumerate(cfg.simulate.x0):
            x = np.atleast_1d(np.asarray(x0, dtype=float))
            if x.size != mesh.dim:
                raise errors.ConfigError(f"simulate.x0[{j}] has {x.size} entries, need {mesh.dim}")
            traj = simulate(vf, x, n0, problem, controls, policy=cfg.policy)
            _write(outdir / f"trajectory_{j}.csv", traj.to_csv())
            summary.append({"x0": x.tolist(), "n0": n0, "final_state": traj.states[-1].tolist(),
                            "total": traj.total, "running": traj.running, "terminal": traj.terminal,
                            "value_at_x0": vf.at(x, n0), "clamps": traj.clamps})
        _write(outdir / "simulate.json", _dumps({"problem": problem.name, "h": grid.h, "k": mesh.k,
                                                 "trajectories": summary}))

    _run(body)


if __name__ == "__main__":  # pragma: no cover
    main()
