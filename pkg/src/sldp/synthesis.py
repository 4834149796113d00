"""Feedback controls from a computed value function and closed-loop simulation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .mesh import TOL, Mesh
from .oracle import PiecewiseConstantControl, _advance
from .problem import ControlSet, ProblemSpec
from .solver import PolicyTable, TimeGrid, ValueFunction, bellman_candidates


def feedback_index(vf: ValueFunction, x, n: int, problem: ProblemSpec, controls: ControlSet,
                   policy: str = "strict") -> int:
    """Index of the control minimizing the one-step Bellman expression at ``x`` (lowest on ties)."""
    if not 0 <= n < vf.grid.N:
        raise ValueError(f"feedback needs 0 <= n < N, got n={n}")
    pts = np.asarray(x, dtype=float).reshape(1, vf.mesh.dim)
    q, _ = bellman_candidates(problem, vf.mesh, vf.grid, controls, n, pts, vf.values[n + 1], policy)
    best = q.min(axis=1)
    return int(np.argmax(q <= best[:, None] + TOL, axis=1)[0])


def feedback_control(vf: ValueFunction, x, n: int, problem: ProblemSpec, controls: ControlSet,
                     policy: str = "strict") -> np.ndarray:
    return controls[feedback_index(vf, x, n, problem, controls, policy)]


@dataclass
class Trajectory:
    start: int
    times: np.ndarray  # (S+1,)
    states: np.ndarray  # (S+1, d)
    controls: np.ndarray  # (S, m)
    control_indices: np.ndarray  # (S,)
    stage_costs: np.ndarray  # (S,) h * delta^(j-n0) * L(y_j, u_j, t_j)
    terminal: float  # exp(-lam (T - t_n0)) * g(y_N)
    clamps: int = 0

    @property
    def running(self) -> float:
        return float(np.sum(self.stage_costs))

    @property
    def total(self) -> float:
        return self.running + self.terminal

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d, m = self.states.shape[1], self.controls.shape[1] if self.controls.size else 0
        w.writerow(["level", "time", *[f"y{a}" for a in range(d)], *[f"u{a}" for a in range(m)],
                    "stage_cost", "accumulated"])
        acc = 0.0
        for s in range(len(self.times)):
            if s < len(self.stage_costs):
                acc += self.stage_costs[s]
                ctrl = [repr(float(v)) for v in self.controls[s]]
                stage = repr(float(self.stage_costs[s]))
            else:
                acc += self.terminal
                ctrl = [""] * m
                stage = repr(float(self.terminal))
            w.writerow([self.start + s, repr(float(self.times[s])), *[repr(float(v)) for v in self.states[s]],
                        *ctrl, stage, repr(float(acc))])
        return buf.getvalue()


def simulate(vf: ValueFunction, x0, n0: int, problem: ProblemSpec, controls: ControlSet,
             policy: str = "strict") -> Trajectory:
    """Closed-loop explicit Euler simulation with the grid-time feedback law."""
    grid, mesh = vf.grid, vf.mesh
    y = np.asarray(x0, dtype=float).reshape(mesh.dim)
    if not mesh.domain.contains(y, TOL * mesh.domain.diameter):
        raise ValueError(f"initial state {y.tolist()} outside the domain")
    states, ctrls, idxs, stages = [y], [], [], []
    clamps = 0
    tol = TOL * mesh.domain.diameter
    for j in range(n0, grid.N):
        c = feedback_index(vf, y, j, problem, controls, policy)
        u = controls[c]
        t_j = grid.times[j]
        stages.append(grid.h * grid.delta ** (j - n0) * float(problem.L(y, u, t_j)))
        y_next = y + grid.h * problem.f(y, u, t_j)
        if not mesh.domain.contains(y_next, tol):
            clamps += 1
        y = mesh.domain.clip(y_next)
        states.append(y)
        ctrls.append(u)
        idxs.append(c)
    terminal = math.exp(-grid.lam * (grid.T - grid.times[n0])) * float(problem.g(y))
    return Trajectory(n0, grid.times[n0:], np.array(states), np.array(ctrls).reshape(-1, controls.dim),
                      np.array(idxs, dtype=np.int64), np.array(stages), terminal, clamps)


def blended_control_sequence(policy: PolicyTable, x, n: int, mesh: Mesh, grid: TimeGrid, problem: ProblemSpec,
                             controls: ControlSet, level: str = "current",
                             invariance: str = "strict") -> PiecewiseConstantControl:
    """Barycentric average of the nodal argmin controls along the discrete trajectory.

    The trajectory is the one driven by the per-node argmin sequences; at
    step ``l`` the emitted control is ``sum_j mu_j(y_l) u^j``.  The result
    is flagged ``inadmissible_blend`` unless the control set samples an
    interval or box, whose convex hull contains every blend.
    """
    y = np.asarray(x, dtype=float).reshape(mesh.dim)
    out = []
    for j in range(n, grid.N):
        row = policy.indices[j if level == "current" else n]
        nodes, w, _ = mesh.locate_many(y[None, :])
        blend = np.zeros(controls.dim)
        for node, weight in zip(nodes[0], w[0]):
            if weight != 0.0:
                blend = blend + weight * controls[row[node]]
        out.append(blend)
        y, *_ = _advance(problem, mesh, grid, y, lambda ids: controls.elements[row[ids]], j, invariance, j)
    return PiecewiseConstantControl(n, np.array(out), inadmissible_blend=not controls.is_convex_sampling)
