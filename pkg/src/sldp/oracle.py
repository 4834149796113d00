"""Independent checks of the dynamic-programming solver.

The fully discrete functional drives an interpolated Euler trajectory with
one control sequence per node::

    y_{j+1} = y_j + h * sum_i mu_i(y_j) f(x_i, u^{i,j}, t_j)
    J = h * sum_j delta^(j-n) sum_i mu_i(y_j) L(x_i, u^{i,j}, t_j) + I_k g(y_N) exp(-lam (T - t_n))

Minimizing it by exhaustive enumeration gives a value that does not use
the recursion at all.  :func:`continuous_cost` integrates the original
cost functional for a fixed piecewise-constant control with a fourth-order
method, as a reference for the time/space discretization error.
"""

from __future__ import annotations

import io
import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvarianceError, SearchSpaceError
from .mesh import TOL, BoxDomain, Mesh, build_mesh, combine
from .problem import ControlSet, ProblemSpec, check_invariance
from .solver import PolicyTable, TimeGrid, ValueFunction, solve

#: Largest number of per-node control sequence combinations the enumerator accepts.
MAX_COMBINATIONS = 10**7


@dataclass
class NodeControlSequences:
    """Controls ``values[i, s]`` applied at node ``i`` on step ``start + s``.

    ``indices`` holds the matching positions in the control set when every
    value is a member of it; ``blended`` marks values taken from the
    convex hull instead.
    """

    start: int
    values: np.ndarray  # (n_s, N - start, m)
    indices: np.ndarray | None = None
    blended: bool = False

    @property
    def steps(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, start: int, n_nodes: int, control: "PiecewiseConstantControl") -> "NodeControlSequences":
        """Broadcast one control sequence to every node."""
        vals = np.broadcast_to(control.values, (n_nodes,) + control.values.shape).copy()
        return cls(start, vals, blended=control.inadmissible_blend)

    @classmethod
    def from_indices(cls, start: int, indices, controls: ControlSet) -> "NodeControlSequences":
        idx = np.asarray(indices, dtype=np.int64)
        return cls(start, controls.elements[idx], idx)


@dataclass
class DiscreteTrajectory:
    states: np.ndarray  # (S+1, d)
    nodes: np.ndarray  # (S, d+1) containing-simplex vertices at each step
    weights: np.ndarray  # (S, d+1)
    clamps: int = 0


@dataclass
class PiecewiseConstantControl:
    """Control constant on each ``[t_l, t_{l+1})``, ``l = start..N-1``."""

    start: int
    values: np.ndarray  # (N - start, m)
    inadmissible_blend: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim == 1:
            self.values = self.values[:, None]

    def refine(self, factor: int) -> "PiecewiseConstantControl":
        """Same control on a time grid with ``factor`` times as many steps."""
        return PiecewiseConstantControl(self.start * factor, np.repeat(self.values, factor, axis=0),
                                        self.inadmissible_blend)


def _advance(problem, mesh, grid, y, node_controls, j, policy, step_label):
    """One interpolated Euler step from a single point.

    ``node_controls(nodes)`` returns the controls used at the given nodes.
    Returns the next state, the running-cost interpolant and the location.
    """
    loc_nodes, loc_w, _ = mesh.locate_many(y[None, :])
    nodes, w = loc_nodes[0], loc_w[0]
    live = w != 0.0
    nodes_live, w_live = nodes[live], w[live]
    U = node_controls(nodes_live)
    t_j = grid.times[j]
    X = mesh.vertices[nodes_live]
    fvals = problem.f(X, U, t_j)
    lvals = problem.L(X, U, t_j)
    IL = 0.0
    If = np.zeros(mesh.dim)
    for r in range(nodes_live.size):
        IL = IL + w_live[r] * lvals[r]
        If = If + w_live[r] * fvals[r]
    y_next = y + grid.h * If
    clamped = 0
    if not np.all(mesh.domain.contains(y_next, TOL * mesh.domain.diameter)):
        if policy == "strict":
            raise InvarianceError(f"discrete trajectory leaves the domain at step {step_label}: {y_next.tolist()}")
        clamped = 1
    return mesh.domain.clip(y_next), float(IL), nodes, w, clamped


def _terminal_factor(grid: TimeGrid, n: int, kind: str) -> float:
    if kind == "exp":
        return math.exp(-grid.lam * (grid.T - grid.times[n]))
    if kind == "scheme":
        return grid.delta ** (grid.N - n)
    raise ValueError(f"terminal_discount must be 'exp' or 'scheme', got {kind!r}")


def discrete_functional(
    x,
    seqs: NodeControlSequences,
    problem: ProblemSpec,
    mesh: Mesh,
    grid: TimeGrid,
    policy: str = "strict",
    terminal_discount: str = "exp",
) -> tuple[float, DiscreteTrajectory]:
    """Evaluate the fully discrete functional and its trajectory from ``x`` at level ``seqs.start``.

    ``terminal_discount="exp"`` weights the terminal cost by
    ``exp(-lam (T - t_n))``; ``"scheme"`` uses ``(1 - lam h)**(N - n)``,
    the factor the backward recursion produces.  The two agree when
    ``lam = 0``.
    """
    n = seqs.start
    y = np.asarray(x, dtype=float).reshape(mesh.dim)
    if seqs.values.shape[:2] != (mesh.n_nodes, grid.N - n):
        raise ValueError(f"sequences must have shape ({mesh.n_nodes}, {grid.N - n}, m), got {seqs.values.shape}")
    states = [y]
    all_nodes, all_w = [], []
    running = 0.0
    clamps = 0
    for s, j in enumerate(range(n, grid.N)):
        y, IL, nodes, w, c = _advance(problem, mesh, grid, y, lambda ids: seqs.values[ids, s], j, policy, j)
        running += grid.delta ** (j - n) * IL
        clamps += c
        states.append(y)
        all_nodes.append(nodes)
        all_w.append(w)
    terminal = mesh.interpolate(problem.g(mesh.vertices), y[None, :])[0]
    value = grid.h * running + terminal * _terminal_factor(grid, n, terminal_discount)
    traj = DiscreteTrajectory(np.array(states), np.array(all_nodes).reshape(-1, mesh.dim + 1),
                              np.array(all_w).reshape(-1, mesh.dim + 1), clamps)
    return float(value), traj


def brute_force_value(
    x,
    n: int,
    problem: ProblemSpec,
    mesh: Mesh,
    grid: TimeGrid,
    controls: ControlSet,
    max_combinations: int = MAX_COMBINATIONS,
    policy: str = "strict",
    terminal_discount: str = "exp",
) -> tuple[float, NodeControlSequences]:
    """Exact minimum of the discrete functional over all per-node control sequences.

    Combinations are enumerated in lexicographic order of (node, step,
    control index); the first combination within ``TOL`` of the minimum is
    returned as the minimizer.
    """
    ns, S, nu = mesh.n_nodes, grid.N - n, len(controls)
    total = nu ** (ns * S)
    if total > max_combinations:
        raise SearchSpaceError(f"{nu}^({ns}*{S}) = {total} control-sequence combinations exceed the limit {max_combinations}")
    positions = ns * S
    # weight of digit (node i, step s) in the lexicographic combination number
    place = nu ** (positions - 1 - np.arange(positions, dtype=np.int64))
    g_nodes = problem.g(mesh.vertices)
    x = np.asarray(x, dtype=float).reshape(mesh.dim)
    lower, upper = np.asarray(mesh.domain.lower), np.asarray(mesh.domain.upper)
    tol = TOL * mesh.domain.diameter
    discount_T = _terminal_factor(grid, n, terminal_discount)

    values = np.empty(total)
    chunk = 1 << 18
    for lo in range(0, total, chunk):
        combo = np.arange(lo, min(total, lo + chunk), dtype=np.int64)
        y = np.broadcast_to(x, (combo.size, mesh.dim)).copy()
        running = np.zeros(combo.size)
        for s, j in enumerate(range(n, grid.N)):
            t_j = grid.times[j]
            ftab = problem.f(mesh.vertices[:, None, :], controls.elements[None, :, :], t_j)  # (ns, nu, d)
            ltab = problem.L(mesh.vertices[:, None, :], controls.elements[None, :, :], t_j)  # (ns, nu)
            nodes, w, _ = mesh.locate_many(y)
            IL = np.zeros(combo.size)
            If = np.zeros((combo.size, mesh.dim))
            for slot in range(mesh.dim + 1):
                node = nodes[:, slot]
                cidx = (combo // place[node * S + s]) % nu
                IL = IL + w[:, slot] * ltab[node, cidx]
                If = If + w[:, slot, None] * ftab[node, cidx]
            running = running + grid.delta ** (j - n) * IL
            y = y + grid.h * If
            out = np.any((y < lower - tol) | (y > upper + tol), axis=1)
            if out.any():
                if policy == "strict":
                    raise InvarianceError(f"discrete trajectory leaves the domain at step {j} for combination {int(combo[np.argmax(out)])}")
                y = mesh.domain.clip(y)
        terminal = mesh.interpolate(g_nodes, y)
        values[lo:lo + combo.size] = grid.h * running + terminal * discount_T
    best = float(values.min())
    first = int(np.argmax(values <= best + TOL))
    digits = (first // place) % nu
    return best, NodeControlSequences.from_indices(n, digits.reshape(ns, S), controls)


def sequences_from_policy(
    x,
    n: int,
    policy: PolicyTable,
    mesh: Mesh,
    grid: TimeGrid,
    problem: ProblemSpec,
    controls: ControlSet,
    level: str = "current",
    invariance: str = "strict",
) -> NodeControlSequences:
    """Per-node control sequences built from nodal argmin controls along the discrete trajectory.

    At step ``j`` every node with nonzero weight at the current state gets
    its argmin control; nodes with zero weight get the first element of the
    control set (their value never enters the functional).  ``level``
    selects which argmin is used: ``"current"`` reads the policy at level
    ``j``, ``"start"`` reuses the level-``n`` argmin at every step.
    """
    if level not in ("current", "start"):
        raise ValueError("level must be 'current' or 'start'")
    S = grid.N - n
    idx = np.zeros((mesh.n_nodes, S), dtype=np.int64)
    y = np.asarray(x, dtype=float).reshape(mesh.dim)
    for s, j in enumerate(range(n, grid.N)):
        row = policy.indices[j if level == "current" else n]
        nodes, w, _ = mesh.locate_many(y[None, :])
        live = nodes[0][w[0] != 0.0]
        idx[live, s] = row[live]
        y, *_ = _advance(problem, mesh, grid, y, lambda ids: controls.elements[row[ids]], j, invariance, j)
    return NodeControlSequences.from_indices(n, idx, controls)


def _rk4_step(problem, y, u, s, dt):
    k1 = problem.f(y, u, s)
    k2 = problem.f(y + 0.5 * dt * k1, u, s + 0.5 * dt)
    k3 = problem.f(y + 0.5 * dt * k2, u, s + 0.5 * dt)
    k4 = problem.f(y + dt * k3, u, s + dt)
    return y + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def continuous_cost(
    x,
    n: int,
    u: PiecewiseConstantControl,
    problem: ProblemSpec,
    grid: TimeGrid,
    substeps: int = 64,
) -> float:
    """Reference value of the continuous cost functional for a piecewise-constant control.

    Each time interval is split into ``substeps`` cells.  On every cell the
    state is advanced with two classical Runge-Kutta half steps and the
    discounted running cost is integrated with Simpson's rule on the cell
    end points and midpoint.  Error is ``O((h / substeps)**4)`` for smooth
    data.
    """
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    if u.values.shape[0] != grid.N - n:
        raise ValueError(f"control has {u.values.shape[0]} intervals, expected {grid.N - n}")
    y = np.asarray(x, dtype=float).reshape(problem.dim)
    t_n = grid.times[n]
    lam = grid.lam
    dt = grid.h / substeps
    total = 0.0
    for l in range(n, grid.N):
        ul = u.values[l - n]
        t_l = grid.times[l]
        for q in range(substeps):
            s0 = t_l + q * dt
            y_mid = _rk4_step(problem, y, ul, s0, 0.5 * dt)
            y_end = _rk4_step(problem, y_mid, ul, s0 + 0.5 * dt, 0.5 * dt)
            vals = [
                float(problem.L(p, ul, s)) * math.exp(-lam * (s - t_n))
                for p, s in ((y, s0), (y_mid, s0 + 0.5 * dt), (y_end, s0 + dt))
            ]
            total += dt / 6.0 * (vals[0] + 4.0 * vals[1] + vals[2])
            y = y_end
        if not np.all(np.isfinite(y)):
            raise FloatingPointError(f"non-finite state in reference integration at interval {l}")
    return total + float(problem.g(y)) * math.exp(-lam * (grid.T - t_n))


# -- equivalence suite -------------------------------------------------------


@dataclass
class TinyInstance:
    label: str
    problem: ProblemSpec
    mesh: Mesh
    grid: TimeGrid
    controls: ControlSet
    n: int
    points: np.ndarray = field(repr=False)


@dataclass
class OracleRow:
    instance: str
    kind: str  # "node" or "interior"
    x: float
    solver: float
    brute_force: float
    policy_functional: float

    @property
    def gap(self) -> float:
        return abs(self.solver - self.brute_force)

    @property
    def policy_gap(self) -> float:
        return abs(self.solver - self.policy_functional)


def _tiny_problem(label: str, gain: float, shift: float, slope: float, gcoef, lam: float, T: float, timedep: bool):
    a, b, c = gcoef

    def f(x, u, t):
        speed = gain * (1.0 + 0.5 * np.asarray(t)) if timedep else np.asarray(gain)
        return speed[..., None] * u * (1.0 - x * x)

    def L(x, u, t):
        target = shift * np.asarray(t) if timedep else shift
        return (u[..., 0] - target) ** 2 + slope * x[..., 0]

    def g(x):
        return a * x[..., 0] ** 2 + b * np.abs(x[..., 0]) + c * x[..., 0]

    return ProblemSpec(label, 1, 1, f, L, g, discount=lam, horizon=(0.0, T), time_dependent=timedep)


def default_tiny_suite(seed: int = 0, interior_points: int = 10) -> list[TinyInstance]:
    """24 instances: 1-D, 2 or 3 nodes on [-1, 1], 1-3 remaining steps, 2 or 3 controls.

    Dynamics ``gain * u * (1 - x^2)`` vanish on the boundary, so every
    Euler step from a node stays in the domain.
    """
    rng = np.random.default_rng(seed)
    h, N = 0.25, 3
    out = []
    count = 0
    for ns in (2, 3):
        for steps in (1, 2, 3):
            for nu in (2, 3):
                for timedep in (False, True):
                    lam = 0.5 if count % 2 else 0.0
                    count += 1
                    label = f"ns{ns}-S{steps}-U{nu}-{'td' if timedep else 'ti'}-lam{lam:g}"
                    prob = _tiny_problem(
                        label,
                        gain=float(rng.uniform(0.5, 1.5)),
                        shift=float(rng.uniform(-1, 1)),
                        slope=float(rng.uniform(-0.5, 0.5)),
                        gcoef=tuple(float(v) for v in rng.uniform(-1, 1, 3)),
                        lam=lam,
                        T=h * N,
                        timedep=timedep,
                    )
                    mesh = build_mesh(BoxDomain([-1.0], [1.0]), [ns - 1])
                    grid = TimeGrid(0.0, h * N, N, lam)
                    controls = ControlSet([-1.0, 1.0] if nu == 2 else [-1.0, 0.0, 1.0])
                    pts = np.concatenate([mesh.vertices[:, 0], rng.uniform(-1, 1, interior_points)])
                    out.append(TinyInstance(label, prob, mesh, grid, controls, N - steps, pts))
    return out


def make_tiny_instance(nodes: int, steps: int, n_controls: int, lam: float = 0.0, timedep: bool = False,
                       seed: int = 0, interior_points: int = 0, h: float = 0.25) -> TinyInstance:
    """One equivalence instance of arbitrary size on [-1, 1] (same problem family as the default suite)."""
    if nodes < 2 or steps < 1 or n_controls < 1:
        raise ValueError("need nodes >= 2, steps >= 1 and n_controls >= 1")
    rng = np.random.default_rng(seed)
    label = f"ns{nodes}-S{steps}-U{n_controls}-{'td' if timedep else 'ti'}-lam{lam:g}"
    prob = _tiny_problem(label, float(rng.uniform(0.5, 1.5)), float(rng.uniform(-1, 1)),
                         float(rng.uniform(-0.5, 0.5)), tuple(float(v) for v in rng.uniform(-1, 1, 3)),
                         lam, h * steps, timedep)
    mesh = build_mesh(BoxDomain([-1.0], [1.0]), [nodes - 1])
    grid = TimeGrid(0.0, h * steps, steps, lam)
    controls = ControlSet(np.linspace(-1.0, 1.0, n_controls) if n_controls > 1 else [0.0])
    pts = np.concatenate([mesh.vertices[:, 0], rng.uniform(-1, 1, interior_points)])
    return TinyInstance(label, prob, mesh, grid, controls, 0, pts)


def run_equivalence(instances: Sequence[TinyInstance], corrupt: float = 0.0,
                    max_combinations: int = MAX_COMBINATIONS) -> list[OracleRow]:
    """Compare solver values against brute force and against the policy-built functional.

    Both functionals use the recursion's terminal discount ``(1 - lam h)**(N - n)``.

    ``corrupt`` is added to every solver value; it exists so the failure
    path of the check can itself be tested.
    """
    for inst in instances:
        total = len(inst.controls) ** (inst.mesh.n_nodes * (inst.grid.N - inst.n))
        if total > max_combinations:
            raise SearchSpaceError(f"{inst.label}: {total} combinations exceed the limit {max_combinations}")
    rows = []
    for inst in instances:
        report = check_invariance(inst.problem, inst.mesh, inst.grid, inst.controls)
        if not report.ok:
            raise InvarianceError(f"{inst.label}: {report.summary()}")
        vf, pol = solve(inst.problem, inst.mesh, inst.grid, inst.controls)
        n_nodes = inst.mesh.n_nodes
        for r, x in enumerate(inst.points):
            sv = vf.at([x], inst.n) + corrupt
            bf, _ = brute_force_value([x], inst.n, inst.problem, inst.mesh, inst.grid, inst.controls,
                                      max_combinations=max_combinations, terminal_discount="scheme")
            seqs = sequences_from_policy([x], inst.n, pol, inst.mesh, inst.grid, inst.problem, inst.controls)
            pf, _ = discrete_functional([x], seqs, inst.problem, inst.mesh, inst.grid, terminal_discount="scheme")
            rows.append(OracleRow(inst.label, "node" if r < n_nodes else "interior", float(x), sv, bf, pf))
    return rows


def oracle_report(rows: Sequence[OracleRow], tol: float = 1e-10) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["instance", "kind", "x", "solver", "brute_force", "gap", "policy_functional", "policy_gap", "pass"])
    for r in rows:
        w.writerow([r.instance, r.kind, repr(r.x), repr(r.solver), repr(r.brute_force), f"{r.gap:.3e}",
                    repr(r.policy_functional), f"{r.policy_gap:.3e}", "pass" if r.gap <= tol else "FAIL"])
    return buf.getvalue()
