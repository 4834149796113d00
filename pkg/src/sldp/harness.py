"""Refinement studies and convergence-rate fitting.

Each study halves the mesh size and/or the time step level by level,
records an error measure, and fits the least-squares slope of
``log(error)`` against ``log(scale)``.  The ``scale`` is ``h + k`` for
value-function and functional studies and ``k`` for interpolation studies.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, InsufficientDataError
from .mesh import BoxDomain, build_mesh
from .oracle import NodeControlSequences, PiecewiseConstantControl, continuous_cost, discrete_functional
from .problem import ControlSet, ProblemSpec, discretize_controls
from .solver import TimeGrid, compute_Lu, solve

#: Errors at or below this are treated as exact zeros by the rate fit.
ZERO_ERROR = 1e-12


def fit_rate(pairs: Sequence[tuple[float, float]]) -> tuple[float, list[tuple[float, float]]]:
    """Least-squares slope of log(error) vs log(scale), and the excluded zero-error pairs."""
    usable = [(s, e) for s, e in pairs if s > 0 and e > ZERO_ERROR]
    excluded = [(s, e) for s, e in pairs if not (s > 0 and e > ZERO_ERROR)]
    if len(usable) < 2:
        raise InsufficientDataError(
            f"need at least 2 (scale, error) pairs with positive error, got {len(usable)} "
            f"({len(excluded)} excluded as zero)"
        )
    logs = np.log(np.array(usable))
    slope, _ = np.polyfit(logs[:, 0], logs[:, 1], 1)
    return float(slope), excluded


def estimate_rate(pairs: Sequence[tuple[float, float]]) -> float:
    return fit_rate(pairs)[0]


@dataclass
class LevelResult:
    level: int
    h: float | None
    k: float
    n_controls: int | None
    error: float
    L_u: float | None = None
    clamps: int | None = None
    bound: float | None = None
    wall_time: float = field(default=0.0, compare=False)

    @property
    def scale(self) -> float:
        return (self.h or 0.0) + self.k


@dataclass
class ConvergenceReport:
    kind: str
    levels: list[LevelResult]
    metadata: dict[str, Any] = field(default_factory=dict)
    rate: float | None = None
    rate_note: str = ""

    def __post_init__(self):
        self.levels.sort(key=lambda r: -r.scale)

    @property
    def errors(self) -> list[float]:
        return [r.error for r in self.levels]

    def lu_ratios(self) -> list[float | None]:
        out: list[float | None] = [None]
        for prev, cur in zip(self.levels, self.levels[1:]):
            if prev.L_u is None or cur.L_u is None:
                out.append(None)
            elif prev.L_u == 0:
                out.append(math.inf if cur.L_u > 0 else 1.0)
            else:
                out.append(cur.L_u / prev.L_u)
        return out

    def lu_growth_flags(self) -> list[bool]:
        """True where L_u more than doubled when the mesh size halved."""
        return [r is not None and r > 2.0 for r in self.lu_ratios()]

    def fit(self, scale: str = "h+k") -> "ConvergenceReport":
        pairs = [((r.scale if scale == "h+k" else r.k), r.error) for r in self.levels]
        try:
            self.rate, excluded = fit_rate(pairs)
            self.rate_note = f"{len(excluded)} zero-error levels excluded" if excluded else ""
        except InsufficientDataError as exc:
            self.rate, self.rate_note = None, str(exc)
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "h", "k", "U", "error", "bound", "L_u", "L_u_ratio", "L_u_growth_flag", "clamps"])
        for r, ratio, flag in zip(self.levels, self.lu_ratios(), self.lu_growth_flags()):
            w.writerow([
                r.level,
                "" if r.h is None else repr(r.h),
                repr(r.k),
                "" if r.n_controls is None else r.n_controls,
                repr(r.error),
                "" if r.bound is None else repr(r.bound),
                "" if r.L_u is None else repr(r.L_u),
                "" if ratio is None else repr(ratio),
                int(flag) if r.L_u is not None else "",
                "" if r.clamps is None else r.clamps,
            ])
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "kind": self.kind,
            "rate": self.rate,
            "rate_note": self.rate_note,
            **self.metadata,
            "nondeterministic": {"wall_time_s": [r.wall_time for r in self.levels]},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    def file_stem(self) -> str:
        coupling = self.metadata.get("coupling")
        tag = f"_c{coupling:.4g}" if isinstance(coupling, float) else ""
        return f"{self.kind}_{self.metadata.get('problem', 'custom')}{tag}_L{len(self.levels)}"


def _level_setup(problem, domain, subdivisions0, N0, level):
    factor = 2**level
    mesh = build_mesh(domain, np.asarray(subdivisions0) * factor)
    grid = TimeGrid(problem.t0, problem.T, int(N0) * factor, problem.discount)
    return mesh, grid


def run_convergence(
    problem: ProblemSpec,
    subdivisions0: Sequence[int],
    N0: int,
    levels: int,
    subdomain: BoxDomain,
    norm: str = "max",
    domain: BoxDomain | None = None,
    controls: ControlSet | None = None,
    policy: str = "project",
    reference: bool = False,
    workers: int = 1,
    lu_mode="auto",
    seed: int = 0,
) -> ConvergenceReport:
    """Solve at ``(h, k) / 2**l`` for ``l < levels`` and measure ``v^0`` against the true value.

    The error is taken over nodes inside ``subdomain``.  Without an exact
    value function, ``reference=True`` compares against a solve on a mesh
    and time grid four times finer than the finest level; that reference
    carries its own discretization error.
    """
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    if norm not in ("max", "mean"):
        raise ConfigError(f"norm must be 'max' or 'mean', got {norm!r}")
    domain = domain or problem.domain
    if domain is None:
        raise ConfigError("no domain given and the problem declares none")
    controls = controls or discretize_controls(problem.controls)
    if problem.exact_value is None and not reference:
        raise ConfigError(f"{problem.name} has no exact value function; enable the reference solve")
    if not all(lo >= dlo and hi <= dhi for lo, hi, dlo, dhi in
               zip(subdomain.lower, subdomain.upper, domain.lower, domain.upper)):
        raise ConfigError("measurement subdomain must lie inside the domain")

    ref_vf = None
    if problem.exact_value is None:
        ref_mesh, ref_grid = _level_setup(problem, domain, subdivisions0, N0, levels + 1)
        ref_vf, _ = solve(problem, ref_mesh, ref_grid, controls, policy=policy, workers=workers)

    results = []
    for level in range(levels):
        started = time.perf_counter()
        mesh, grid = _level_setup(problem, domain, subdivisions0, N0, level)
        vf, pol = solve(problem, mesh, grid, controls, policy=policy, workers=workers)
        X = mesh.vertices
        inside = subdomain.contains(X, 1e-12 * domain.diameter)
        if not np.any(inside):
            raise ConfigError(f"no mesh nodes inside the measurement subdomain at level {level}")
        truth = problem.exact_value(X[inside], grid.t) if ref_vf is None else ref_vf.at_many(X[inside], 0)
        diff = np.abs(vf.values[0][inside] - truth)
        err = float(diff.max() if norm == "max" else diff.mean())
        lu = compute_Lu(pol, mesh, controls, 0, mode=lu_mode, seed=seed)
        results.append(LevelResult(level, grid.h, mesh.k, len(controls), err, lu,
                                   vf.metadata["clamp_count"], wall_time=time.perf_counter() - started))
    h0, k0 = results[0].h, results[0].k
    meta = {
        "problem": problem.name,
        "subdomain": {"lower": list(subdomain.lower), "upper": list(subdomain.upper)},
        "norm": norm,
        "policy": policy,
        "coupling": h0 / k0,
        "truth": "exact" if ref_vf is None else "reference_4x_finer",
        "controls": controls.elements.tolist(),
    }
    return ConvergenceReport("converge", results, meta).fit("h+k")


def lemma1_study(
    problem: ProblemSpec,
    control: PiecewiseConstantControl,
    x,
    levels: int,
    subdivisions0: Sequence[int],
    N0: int,
    domain: BoxDomain | None = None,
    substeps: int = 64,
    policy: str = "project",
    terminal_discount: str = "exp",
) -> ConvergenceReport:
    """Gap between the continuous cost and the discrete functional for one fixed control.

    ``control`` is given on the coarsest time grid (``N0`` steps, starting
    at level ``control.start``); it is refined by repetition so that the
    same function of time is used at every level.  All node sequences are
    set to it.
    """
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    domain = domain or problem.domain
    if control.values.shape[0] != N0 - control.start:
        raise ConfigError(f"control must have {N0 - control.start} intervals on the coarsest grid")
    results = []
    for level in range(levels):
        started = time.perf_counter()
        mesh, grid = _level_setup(problem, domain, subdivisions0, N0, level)
        u = control.refine(2**level)
        seqs = NodeControlSequences.constant(u.start, mesh.n_nodes, u)
        discrete, traj = discrete_functional(x, seqs, problem, mesh, grid, policy=policy,
                                             terminal_discount=terminal_discount)
        reference = continuous_cost(x, u.start, u, problem, grid, substeps=substeps)
        results.append(LevelResult(level, grid.h, mesh.k, None, abs(reference - discrete), clamps=traj.clamps,
                                   wall_time=time.perf_counter() - started))
    meta = {
        "problem": problem.name,
        "x": np.asarray(x, dtype=float).ravel().tolist(),
        "substeps": substeps,
        "terminal_discount": terminal_discount,
        "coupling": results[0].h / results[0].k,
        "control": control.values.tolist(),
    }
    return ConvergenceReport("lemma1", results, meta).fit("h+k")


def sample_points(domain: BoxDomain, count: int) -> np.ndarray:
    """Deterministic tensor grid of about ``count`` points covering the domain."""
    per_axis = max(2, int(math.ceil(count ** (1.0 / domain.dim))))
    axes = [np.linspace(lo, hi, per_axis) for lo, hi in zip(domain.lower, domain.upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, domain.dim)


def interp_error_study(
    g: Callable[[np.ndarray], np.ndarray],
    lipschitz: float,
    domain: BoxDomain,
    levels: int,
    subdivisions0: Sequence[int],
    samples: int = 10_000,
    name: str = "custom",
) -> ConvergenceReport:
    """Sup-norm error of the piecewise-linear interpolant over refinement; checks ``err <= L_g k``."""
    if levels < 1:
        raise ConfigError("levels must be >= 1")
    pts = sample_points(domain, samples)
    exact = np.asarray(g(pts), dtype=float)
    results = []
    for level in range(levels):
        started = time.perf_counter()
        mesh = build_mesh(domain, np.asarray(subdivisions0) * 2**level)
        approx = mesh.interpolate(np.asarray(g(mesh.vertices), dtype=float), pts)
        err = float(np.max(np.abs(approx - exact)))
        results.append(LevelResult(level, None, mesh.k, None, err, bound=lipschitz * mesh.k,
                                   wall_time=time.perf_counter() - started))
    meta = {"problem": name, "lipschitz": lipschitz, "samples": int(pts.shape[0]),
            "domain": {"lower": list(domain.lower), "upper": list(domain.upper)}}
    return ConvergenceReport("interp", results, meta).fit("k")


def bound_holds(report: ConvergenceReport) -> bool:
    """Every level satisfies ``error <= bound`` (interpolation studies)."""
    return all(r.bound is None or r.error <= r.bound * (1 + 1e-12) for r in report.levels)


INTERP_FUNCTIONS: dict[str, tuple[Callable[[np.ndarray], np.ndarray], Callable[[BoxDomain], float]]] = {
    "abs": (lambda x: np.abs(x).sum(axis=-1), lambda dom: math.sqrt(dom.dim)),
    "norm": (lambda x: np.linalg.norm(x, axis=-1), lambda dom: 1.0),
    "quadratic": (lambda x: np.sum(x * x, axis=-1),
                  lambda dom: 2.0 * float(np.linalg.norm(np.maximum(np.abs(dom.lower), np.abs(dom.upper))))),
    "affine": (lambda x: 1.0 + np.sum((np.arange(x.shape[-1]) + 2.0) * x, axis=-1),
               lambda dom: float(np.linalg.norm(np.arange(dom.dim) + 2.0))),
}
