"""Backward dynamic-programming recursion on a simplicial mesh.

For ``n = N-1, ..., 0`` and every node ``x_i``::

    v^n(x_i) = min_u { h L(x_i, u, t_n) + (1 - lam h) I_k v^{n+1}(x_i + h f(x_i, u, t_n)) }

with ``v^N = g`` at the nodes.  The discount factor is ``1 - lam*h``, not
``exp(-lam*h)``.
"""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import InvarianceError, NumericError, TimeGridError
from .mesh import TOL, Mesh
from .problem import ControlSet, ProblemSpec

POLICIES = ("strict", "project")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_n = t + n h`` on ``[t, T]`` with ``N`` steps."""

    t: float
    T: float
    N: int
    lam: float = 0.0

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise TimeGridError(f"N must be a positive integer, got {self.N}")
        if not self.t < self.T:
            raise TimeGridError(f"need t < T, got t={self.t}, T={self.T}")
        if self.lam < 0:
            raise TimeGridError(f"discount must be >= 0, got {self.lam}")
        if self.lam * self.h >= 1.0:
            raise TimeGridError(f"lam*h = {self.lam * self.h:g} >= 1; refine the time grid")

    @classmethod
    def for_problem(cls, problem: ProblemSpec, N: int) -> "TimeGrid":
        return cls(problem.t0, problem.T, N, problem.discount)

    @property
    def h(self) -> float:
        return (self.T - self.t) / self.N

    @property
    def delta(self) -> float:
        return 1.0 - self.lam * self.h

    @property
    def times(self) -> np.ndarray:
        ts = self.t + np.arange(self.N + 1) * self.h
        ts[-1] = self.T
        return ts


@dataclass
class PolicyTable:
    """Argmin control index for each level ``n < N`` and node."""

    indices: np.ndarray  # (N, n_s) int

    def controls_at(self, n: int, controls: ControlSet) -> np.ndarray:
        return controls.elements[self.indices[n]]


@dataclass
class ValueFunction:
    """Nodal values ``values[n, i] = v^n(x_i)`` for ``n = 0..N``."""

    values: np.ndarray  # (N+1, n_s)
    grid: TimeGrid
    mesh: Mesh
    metadata: dict[str, Any] = field(default_factory=dict)

    def at(self, x, n: int) -> float:
        """Interpolated ``v^n`` at a single point."""
        return float(self.at_many(np.reshape(np.asarray(x, dtype=float), (1, self.mesh.dim)), n)[0])

    def at_many(self, points, n: int) -> np.ndarray:
        return self.mesh.interpolate(self.values[n], np.reshape(np.asarray(points, dtype=float), (-1, self.mesh.dim)))


def bellman_candidates(problem, mesh, grid, controls, n, points, v_next, policy="strict", labels=None):
    """Candidate values ``h L(x, u, t_n) + delta I_k v_next(x + h f(x, u, t_n))`` for every control.

    Returns ``(q, clamps)`` with ``q`` of shape ``(len(points), |U|)``.
    ``labels`` names the points in error messages (node indices in the solver).
    """
    X = np.asarray(points, dtype=float)[:, None, :]
    U = controls.elements[None, :, :]
    t_n = grid.times[n]
    foot = X + grid.h * problem.f(X, U, t_n)
    lower, upper = np.asarray(mesh.domain.lower), np.asarray(mesh.domain.upper)
    tol = TOL * mesh.domain.diameter
    outside = np.any((foot < lower - tol) | (foot > upper + tol), axis=-1)
    clamps = int(outside.sum())
    if clamps and policy == "strict":
        r, c = (int(v) for v in np.argwhere(outside)[0])
        where = f"node {int(labels[r])}" if labels is not None else f"point {X[r, 0].tolist()}"
        raise InvarianceError(
            f"Euler foot point {foot[r, c].tolist()} from {where} with control index {c} "
            f"({controls[c].tolist()}) at level {n} leaves the domain"
        )
    foot = mesh.domain.clip(foot)
    m, nu = foot.shape[0], foot.shape[1]
    interp = mesh.interpolate(v_next, foot.reshape(m * nu, mesh.dim)).reshape(m, nu)
    q = grid.h * problem.L(X, U, t_n) + grid.delta * interp
    if not np.all(np.isfinite(q)):
        r, c = (int(v) for v in np.argwhere(~np.isfinite(q))[0])
        where = f"node {int(labels[r])}" if labels is not None else f"point {X[r, 0].tolist()}"
        raise NumericError(f"non-finite Bellman candidate at level {n}, {where}, control index {c}")
    return q, clamps


def _level_block(problem, mesh, grid, controls, n, nodes, v_next, policy):
    q, clamps = bellman_candidates(problem, mesh, grid, controls, n, mesh.vertices[nodes], v_next, policy, nodes)
    best = q.min(axis=1)
    arg = np.argmax(q <= best[:, None] + TOL, axis=1)
    return best, arg, clamps


def bellman_update(problem, mesh, grid, controls, n, i, v_next, policy: str = "strict") -> tuple[float, int]:
    """One node of the recursion: ``(value, lowest argmin index)``."""
    v_next = np.asarray(v_next, dtype=float)
    if v_next.shape != (mesh.n_nodes,):
        raise ValueError(f"v_next must have length {mesh.n_nodes}")
    best, arg, _ = _level_block(problem, mesh, grid, controls, n, np.array([i]), v_next, policy)
    return float(best[0]), int(arg[0])


def solve(
    problem: ProblemSpec,
    mesh: Mesh,
    grid: TimeGrid,
    controls: ControlSet,
    policy: str = "strict",
    workers: int = 1,
) -> tuple[ValueFunction, PolicyTable]:
    """Run the backward sweep and return nodal values and argmin policies.

    Within a level the nodes are split into ``workers`` contiguous blocks
    evaluated concurrently; every node's result depends only on its own
    data, so the output is bit-identical for any worker count.  Under the
    ``project`` policy escaping foot points are clamped into the domain and
    counted in ``metadata['clamp_count']``.
    """
    if policy not in POLICIES:
        raise ValueError(f"policy must be one of {POLICIES}, got {policy!r}")
    if grid.lam != problem.discount:
        raise TimeGridError(f"time grid discount {grid.lam} differs from problem discount {problem.discount}")
    started = time.perf_counter()
    N, ns = grid.N, mesh.n_nodes
    values = np.empty((N + 1, ns))
    policy_idx = np.zeros((N, ns), dtype=np.int64)
    values[N] = problem.g(mesh.vertices)
    if not np.all(np.isfinite(values[N])):
        raise NumericError(f"terminal cost is non-finite at node {int(np.argmin(np.isfinite(values[N])))}")

    workers = max(1, int(workers))
    blocks = [b for b in np.array_split(np.arange(ns), min(workers, ns)) if b.size]
    clamp_total = 0
    pool = ThreadPoolExecutor(max_workers=workers) if len(blocks) > 1 else None
    mapper = pool.map if pool else map
    try:
        for n in range(N - 1, -1, -1):
            v_next = values[n + 1]
            results = list(mapper(lambda b: _level_block(problem, mesh, grid, controls, n, b, v_next, policy), blocks))
            for b, (best, arg, clamps) in zip(blocks, results):
                values[n, b] = best
                policy_idx[n, b] = arg
                clamp_total += clamps
    finally:
        if pool:
            pool.shutdown()
    values.setflags(write=False)
    meta = {
        "policy": policy,
        "clamp_count": clamp_total,
        "nondeterministic": {"wall_time_s": time.perf_counter() - started, "workers": workers},
    }
    return ValueFunction(values, grid, mesh, meta), PolicyTable(policy_idx)


def compute_Lu(
    policy: PolicyTable,
    mesh: Mesh,
    controls: ControlSet,
    n: int,
    mode: str | tuple[str, int] = "auto",
    seed: int = 0,
) -> float:
    """Largest difference quotient ``|u_n^i - u_n^j| / |x_i - x_j|`` over node pairs.

    ``mode`` is ``"all_pairs"``, ``("sampled", P)`` or ``"auto"`` (all
    pairs up to 2000 nodes, 10**5 sampled pairs above).
    """
    ns = mesh.n_nodes
    if ns < 2:
        raise ValueError("L_u needs at least two nodes")
    if not 0 <= n < policy.indices.shape[0]:
        raise ValueError(f"level {n} has no policy (need 0 <= n < N)")
    if mode == "auto":
        mode = "all_pairs" if ns <= 2000 else ("sampled", 100_000)
    U = policy.controls_at(n, controls)
    X = mesh.vertices
    if mode == "all_pairs":
        best = 0.0
        for i in range(ns - 1):
            du = np.linalg.norm(U[i + 1:] - U[i], axis=1)
            if not du.any():
                continue
            dx = np.linalg.norm(X[i + 1:] - X[i], axis=1)
            best = max(best, float(np.max(du / dx)))
        return best
    kind, count = mode
    if kind != "sampled" or count < 1:
        raise ValueError(f"unknown L_u mode {mode!r}")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, ns, size=count)
    j = rng.integers(0, ns - 1, size=count)
    j = j + (j >= i)
    du = np.linalg.norm(U[i] - U[j], axis=1)
    dx = np.linalg.norm(X[i] - X[j], axis=1)
    return float(np.max(du / dx))


# -- dumps -----------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def value_dump(vf: ValueFunction, policy: PolicyTable, problem: ProblemSpec, controls: ControlSet) -> str:
    """Delimited-text dump of every nodal value and argmin index."""
    grid, mesh = vf.grid, vf.mesh
    buf = io.StringIO()
    header = {
        "problem": problem.name,
        "d": mesh.dim,
        "N": grid.N,
        "h": grid.h,
        "k": mesh.mesh_size,
        "lambda": grid.lam,
        "U": len(controls),
        "policy": vf.metadata.get("policy", "strict"),
    }
    buf.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "i", *[f"x{a}" for a in range(mesh.dim)], "value", "argmin"])
    for n in range(grid.N + 1):
        for i in range(mesh.n_nodes):
            arg = "" if n == grid.N else str(int(policy.indices[n, i]))
            writer.writerow([n, i, *map(_fmt, mesh.vertices[i]), _fmt(vf.values[n, i]), arg])
    return buf.getvalue()


def policy_dump(policy: PolicyTable, mesh: Mesh, controls: ControlSet) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["n", "i", "control_index", *[f"u{a}" for a in range(controls.dim)]])
    for n in range(policy.indices.shape[0]):
        for i in range(mesh.n_nodes):
            c = int(policy.indices[n, i])
            writer.writerow([n, i, c, *map(_fmt, controls[c])])
    return buf.getvalue()


def run_metadata(vf: ValueFunction, extra: dict[str, Any] | None = None) -> str:
    doc = {"mesh": vf.mesh.describe(), "grid": {"t": vf.grid.t, "T": vf.grid.T, "N": vf.grid.N,
                                                 "h": vf.grid.h, "lambda": vf.grid.lam},
           **vf.metadata, **(extra or {})}
    return json.dumps(doc, indent=2, sort_keys=True, default=_json_default)


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj).__name__}")
