from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sldp.errors import InvarianceError, SearchSpaceError
from sldp.mesh import BoxDomain, build_mesh
from sldp.oracle import (
    NodeControlSequences,
    PiecewiseConstantControl,
    brute_force_value,
    continuous_cost,
    default_tiny_suite,
    discrete_functional,
    make_tiny_instance,
    oracle_report,
    run_equivalence,
    sequences_from_policy,
)
from sldp.problem import ControlSet, ProblemSpec, make_problem
from sldp.solver import TimeGrid, solve

UNIT = BoxDomain([0.0], [1.0])


def _problem(f, L, g, lam=0.0, T=1.0, dim=1):
    return ProblemSpec("p", dim, 1, f, L, g, discount=lam, horizon=(0.0, T))


def _const(v):
    return lambda x, u, t: np.full(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]), float(v))


def _frozen_f(x, u, t):
    return 0.0 * x + 0.0 * u


@pytest.fixture
def hand_instance():
    """nodes {0, 1}, f = u, L = u^2, g = x, h = 0.5, N = 1."""
    p = _problem(lambda x, u, t: u + 0.0 * x, lambda x, u, t: u[..., 0] ** 2 + 0.0 * x[..., 0],
                 lambda x: x[..., 0], T=0.5)
    return p, build_mesh(UNIT, [1]), TimeGrid(0.0, 0.5, 1), ControlSet([0.0, 1.0])


# -- discrete functional ---------------------------------------------------


def test_functional_hand_values(hand_instance):
    p, m, grid, U = hand_instance
    one = NodeControlSequences.from_indices(0, [[1], [0]], U)
    zero = NodeControlSequences.from_indices(0, [[0], [0]], U)
    assert discrete_functional([0.0], one, p, m, grid)[0] == pytest.approx(1.0, abs=1e-15)
    assert discrete_functional([0.0], zero, p, m, grid)[0] == 0.0


@pytest.mark.parametrize("lam", [0.0, 0.8])
def test_functional_frozen(lam):
    gfun = lambda x: np.sin(3 * x[..., 0])
    p = _problem(_frozen_f, _const(0.0), gfun, lam=lam)
    m = build_mesh(UNIT, [5])
    grid = TimeGrid(0.0, 1.0, 4, lam)
    U = ControlSet([-1.0, 1.0])
    rng = np.random.default_rng(0)
    seqs = NodeControlSequences.from_indices(1, rng.integers(0, 2, size=(6, 3)), U)
    val, traj = discrete_functional([0.37], seqs, p, m, grid)
    expected = math.exp(-lam * (1.0 - 0.25)) * m.interpolate(gfun(m.vertices), [[0.37]])[0]
    assert val == pytest.approx(expected, abs=1e-14)
    np.testing.assert_array_equal(traj.states[:, 0], 0.37)


def test_functional_at_node_matches_single_trajectory():
    p = make_problem("advect_lin", {"count": 5})
    m = build_mesh(p.domain, [8])
    grid = TimeGrid.for_problem(p, 4)
    u = PiecewiseConstantControl(0, [0.5, -0.5, 0.25, 0.0])
    seqs = NodeControlSequences.constant(0, m.n_nodes, u)
    x0 = m.vertices[3]
    val, traj = discrete_functional(x0, seqs, p, m, grid, policy="project")
    # first step: only node 3 has weight, so the step is the plain Euler step
    first = x0 + grid.h * p.f(x0, u.values[0], 0.0)
    np.testing.assert_allclose(traj.states[1], first, atol=1e-15)


def test_trajectory_reproduced_by_reevaluation():
    p = make_problem("advect_lin", {"count": 5})
    m = build_mesh(p.domain, [8])
    grid = TimeGrid.for_problem(p, 4)
    U = ControlSet([-1.0, -0.5, 0.0, 0.5, 1.0])
    rng = np.random.default_rng(2)
    seqs = NodeControlSequences.from_indices(0, rng.integers(0, 5, size=(9, 4)), U)
    _, traj = discrete_functional([0.3], seqs, p, m, grid, policy="project")
    for j in range(4):
        nodes, w = traj.nodes[j], traj.weights[j]
        step = sum(w[r] * p.f(m.vertices[nodes[r]], seqs.values[nodes[r], j], grid.times[j]) for r in range(2))
        expected = m.domain.clip(traj.states[j] + grid.h * step)
        np.testing.assert_allclose(traj.states[j + 1], expected, atol=1e-12)


def test_functional_strict_escape():
    p = _problem(lambda x, u, t: u + 0.0 * x, _const(0.0), lambda x: x[..., 0])
    m = build_mesh(UNIT, [2])
    U = ControlSet([1.0])
    seqs = NodeControlSequences.from_indices(0, np.zeros((3, 2), dtype=int), U)
    with pytest.raises(InvarianceError, match="step 1"):
        discrete_functional([0.6], seqs, p, m, TimeGrid(0.0, 0.6, 2))


# -- brute force -----------------------------------------------------------


def test_brute_force_hand_instance(hand_instance):
    p, m, grid, U = hand_instance
    val, seqs = brute_force_value([0.0], 0, p, m, grid, U)
    assert val == 0.0
    np.testing.assert_array_equal(seqs.indices, [[0], [0]])


def test_brute_force_frozen_objective():
    gfun = lambda x: x[..., 0] ** 2
    p = _problem(_frozen_f, _const(0.0), gfun, lam=0.3)
    m = build_mesh(UNIT, [2])
    grid = TimeGrid(0.0, 1.0, 2, 0.3)
    val, seqs = brute_force_value([0.2], 0, p, m, grid, ControlSet([-1.0, 1.0]))
    assert val == pytest.approx(math.exp(-0.3) * m.interpolate(gfun(m.vertices), [[0.2]])[0], abs=1e-15)
    assert not seqs.indices.any()


def test_brute_force_guard():
    p = _problem(_frozen_f, _const(0.0), lambda x: x[..., 0])
    m = build_mesh(UNIT, [9])
    with pytest.raises(SearchSpaceError, match="exceed"):
        brute_force_value([0.5], 0, p, m, TimeGrid(0.0, 1.0, 3), ControlSet([-1.0, 0.0, 1.0]))


def test_brute_force_matches_python_enumeration():
    inst = make_tiny_instance(3, 2, 2, lam=0.5, timedep=True, seed=4)
    x = [0.31]
    val, best = brute_force_value(x, 0, inst.problem, inst.mesh, inst.grid, inst.controls)
    values = []
    for digits in itertools.product(range(2), repeat=6):
        seqs = NodeControlSequences.from_indices(0, np.reshape(digits, (3, 2)), inst.controls)
        values.append(discrete_functional(x, seqs, inst.problem, inst.mesh, inst.grid)[0])
    assert val == pytest.approx(min(values), abs=1e-14)
    first = int(np.argmax(np.asarray(values) <= min(values) + 1e-12))
    np.testing.assert_array_equal(best.indices.ravel(), np.unravel_index(first, (2,) * 6))


@given(st.integers(0, 1000))
def test_brute_force_never_above_samples(seed):
    inst = make_tiny_instance(3, 2, 3, lam=0.5, seed=seed % 7)
    rng = np.random.default_rng(seed)
    x = [float(rng.uniform(-1, 1))]
    val, _ = brute_force_value(x, 0, inst.problem, inst.mesh, inst.grid, inst.controls)
    seqs = NodeControlSequences.from_indices(0, rng.integers(0, 3, size=(3, 2)), inst.controls)
    assert val <= discrete_functional(x, seqs, inst.problem, inst.mesh, inst.grid)[0] + 1e-12


@pytest.mark.parametrize("ns,steps", [(2, 2), (3, 2), (3, 3)])
def test_brute_force_dynamic_programming_identity(ns, steps):
    """w^n(x) = min over first-step node controls of h I_k L + delta w^{n+1}(next state)."""
    inst = make_tiny_instance(ns, steps, 2, lam=0.5, timedep=True, seed=11)
    p, m, grid, U = inst.problem, inst.mesh, inst.grid, inst.controls
    for x in (-0.8, -0.35, 0.0, 0.42, 0.9):
        w0, _ = brute_force_value([x], 0, p, m, grid, U, terminal_discount="scheme")
        nodes, wts, _ = m.locate_many([[x]])
        live = [int(i) for i, w in zip(nodes[0], wts[0]) if w != 0.0]
        best = math.inf
        for choice in itertools.product(range(len(U)), repeat=len(live)):
            u = {i: U[c] for i, c in zip(live, choice)}
            IL = sum(w * float(p.L(m.vertices[i], u[i], 0.0)) for i, w in zip(nodes[0], wts[0]) if w != 0.0)
            If = sum(w * p.f(m.vertices[i], u[i], 0.0) for i, w in zip(nodes[0], wts[0]) if w != 0.0)
            y1 = np.asarray([x]) + grid.h * If
            w1, _ = brute_force_value(y1, 1, p, m, grid, U, terminal_discount="scheme")
            best = min(best, grid.h * IL + grid.delta * w1)
        assert w0 == pytest.approx(best, abs=1e-12)


# -- policy-induced sequences ----------------------------------------------


def test_policy_sequences_stationary_node():
    p = _problem(_frozen_f, lambda x, u, t: (u[..., 0] - x[..., 0]) ** 2, lambda x: x[..., 0])
    m = build_mesh(BoxDomain([-1.0], [1.0]), [2])
    grid = TimeGrid(0.0, 1.0, 2)
    U = ControlSet([-1.0, 0.0, 1.0])
    vf, pol = solve(p, m, grid, U)
    seqs = sequences_from_policy(m.vertices[2], 0, pol, m, grid, p, U)
    np.testing.assert_array_equal(seqs.indices[2], pol.indices[:, 2])
    assert discrete_functional(m.vertices[2], seqs, p, m, grid)[0] == pytest.approx(vf.values[0, 2], abs=1e-14)


@pytest.mark.parametrize("level", ["current", "start"])
def test_policy_sequences_tiny_eikonal(level):
    p = make_problem("eikonal1d", {"half_width": 1.0})
    m = build_mesh(p.domain, [2])
    grid = TimeGrid.for_problem(p, 2)
    U = ControlSet([-1.0, 0.0, 1.0])
    vf, pol = solve(p, m, grid, U, policy="project")
    for x in np.random.default_rng(5).uniform(-1, 1, 20):
        seqs = sequences_from_policy([x], 0, pol, m, grid, p, U, level=level, invariance="project")
        J, _ = discrete_functional([x], seqs, p, m, grid, policy="project")
        assert J == pytest.approx(vf.at([x], 0), abs=1e-10)


def test_zero_weight_controls_irrelevant():
    inst = make_tiny_instance(3, 3, 3, lam=0.5, timedep=True, seed=2)
    p, m, grid, U = inst.problem, inst.mesh, inst.grid, inst.controls
    _, pol = solve(p, m, grid, U)
    rng = np.random.default_rng(0)
    for x in rng.uniform(-1, 1, 10):
        seqs = sequences_from_policy([x], 0, pol, m, grid, p, U)
        base, traj = discrete_functional([x], seqs, p, m, grid)
        idx = seqs.indices.copy()
        for s in range(grid.N):
            live = set(traj.nodes[s][traj.weights[s] != 0.0].tolist())
            for i in range(m.n_nodes):
                if i not in live:
                    idx[i, s] = rng.integers(0, len(U))
        other, _ = discrete_functional([x], NodeControlSequences.from_indices(0, idx, U), p, m, grid)
        assert other == base


# -- continuous reference --------------------------------------------------


def test_continuous_cost_constant_integrand():
    p = _problem(_frozen_f, _const(1.0), lambda x: 0.0 * x[..., 0])
    grid = TimeGrid(0.0, 1.0, 4)
    assert continuous_cost([0.3], 0, PiecewiseConstantControl(0, np.zeros(4)), p, grid) == pytest.approx(1.0, abs=1e-15)


def test_continuous_cost_discounted():
    p = _problem(_frozen_f, _const(1.0), lambda x: 0.0 * x[..., 0], lam=1.0)
    grid = TimeGrid(0.0, 1.0, 4, 1.0)
    val = continuous_cost([0.3], 0, PiecewiseConstantControl(0, np.zeros(4)), p, grid, substeps=64)
    assert val == pytest.approx(1.0 - math.exp(-1.0), abs=1e-10)


def test_continuous_cost_eikonal():
    p = make_problem("eikonal1d")
    grid = TimeGrid.for_problem(p, 8)
    assert continuous_cost([1.5], 0, PiecewiseConstantControl(0, -np.ones(8)), p, grid) == pytest.approx(0.5, abs=1e-14)


def test_continuous_cost_fourth_order():
    # y' = -y, y(0) = 1, L = y^2, g = 0: J = (1 - e^{-2}) / 2
    p = _problem(lambda x, u, t: -x + 0.0 * u, lambda x, u, t: x[..., 0] ** 2 + 0.0 * u[..., 0],
                 lambda x: 0.0 * x[..., 0])
    grid = TimeGrid(0.0, 1.0, 2)
    exact = 0.5 * (1.0 - math.exp(-2.0))
    errs = [abs(continuous_cost([1.0], 0, PiecewiseConstantControl(0, np.zeros(2)), p, grid, substeps=s) - exact)
            for s in (2, 4, 8)]
    assert errs[1] < errs[0] / 12 and errs[2] < errs[1] / 12


def test_refine_repeats_values():
    u = PiecewiseConstantControl(1, [0.5, -1.0]).refine(3)
    assert u.start == 3
    np.testing.assert_array_equal(u.values[:, 0], [0.5] * 3 + [-1.0] * 3)


# -- equivalence suite -----------------------------------------------------


def test_default_suite_coverage():
    suite = default_tiny_suite()
    assert len(suite) >= 20
    assert {i.mesh.n_nodes for i in suite} == {2, 3}
    assert {i.grid.N - i.n for i in suite} == {1, 2, 3}
    assert {len(i.controls) for i in suite} == {2, 3}
    assert {i.grid.lam for i in suite} == {0.0, 0.5}
    assert {i.problem.time_dependent for i in suite} == {False, True}
    assert all(len(i.points) == i.mesh.n_nodes + 10 for i in suite)


def test_two_node_instances_are_exact():
    suite = [i for i in default_tiny_suite() if i.mesh.n_nodes == 2]
    rows = run_equivalence(suite)
    assert max(r.gap for r in rows) <= 1e-10
    assert max(r.policy_gap for r in rows) <= 1e-10


def test_corruption_hook_is_detected():
    suite = default_tiny_suite()[:2]
    rows = run_equivalence(suite, corrupt=1e-6)
    assert all(r.gap > 1e-10 for r in rows)
    assert "FAIL" in oracle_report(rows)


def test_equivalence_guard():
    with pytest.raises(SearchSpaceError):
        run_equivalence([make_tiny_instance(10, 4, 3)])


def test_oracle_report_columns():
    rows = run_equivalence(default_tiny_suite(interior_points=1)[:1])
    lines = oracle_report(rows).splitlines()
    assert lines[0] == "instance,kind,x,solver,brute_force,gap,policy_functional,policy_gap,pass"
    assert len(lines) == 1 + len(rows) and lines[1].endswith(",pass")
