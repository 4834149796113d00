"""Optimal control problem instances, finite control sets and the benchmark registry.

All problem callables are *batched*: states have shape ``(..., d)``,
controls ``(..., m)`` and times are scalars or arrays broadcastable to the
leading shape.  ``dynamics`` returns ``(..., d)``, ``running_cost`` and
``terminal_cost`` return ``(...)``.  Callables must be pure.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any, Callable, Mapping, Sequence

import numpy as np

from .errors import ControlSetError, RegistryError
from .mesh import TOL, BoxDomain, Mesh

if TYPE_CHECKING:
    from .solver import TimeGrid

Dynamics = Callable[[np.ndarray, np.ndarray, Any], np.ndarray]
RunningCost = Callable[[np.ndarray, np.ndarray, Any], np.ndarray]
TerminalCost = Callable[[np.ndarray], np.ndarray]

CONSTANT_KEYS = ("M_f", "M_L", "M_g", "L_f", "L_L", "L_g")


@dataclass(frozen=True)
class ProblemSpec:
    """A finite-horizon discounted optimal control problem.

    ``constants`` holds the bounds and Lipschitz constants of the data,
    valid on ``domain`` and on the convex hull of the default control set.
    ``exact_value(x, t)`` is the value function when it is known in closed
    form.  ``domain`` and ``controls`` are defaults that a run
    configuration may override.
    """

    name: str
    dim: int
    control_dim: int
    dynamics: Dynamics
    running_cost: RunningCost
    terminal_cost: TerminalCost
    discount: float = 0.0
    horizon: tuple[float, float] = (0.0, 1.0)
    domain: BoxDomain | None = None
    controls: Mapping[str, Any] | None = None
    constants: Mapping[str, float] = field(default_factory=dict)
    exact_value: Callable[[np.ndarray, Any], np.ndarray] | None = None
    params: Mapping[str, Any] = field(default_factory=dict)
    time_dependent: bool = False

    def __post_init__(self):
        if not self.discount >= 0:
            raise RegistryError(f"discount must be >= 0, got {self.discount}")
        t0, T = self.horizon
        if not t0 < T:
            raise RegistryError(f"horizon must satisfy t < T, got {self.horizon}")
        unknown = set(self.constants) - set(CONSTANT_KEYS)
        if unknown:
            raise RegistryError(f"unknown constants {sorted(unknown)}")

    @property
    def t0(self) -> float:
        return self.horizon[0]

    @property
    def T(self) -> float:
        return self.horizon[1]

    def f(self, x, u, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], np.shape(t))
        out = np.asarray(self.dynamics(x, u, t), dtype=float)
        return np.broadcast_to(out, lead + (self.dim,))

    def L(self, x, u, t) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        lead = np.broadcast_shapes(x.shape[:-1], u.shape[:-1], np.shape(t))
        return np.broadcast_to(np.asarray(self.running_cost(x, u, t), dtype=float), lead)

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.asarray(self.terminal_cost(x), dtype=float), x.shape[:-1])

    def with_overrides(self, **changes) -> "ProblemSpec":
        return replace(self, **changes)


class ControlSet:
    """Finite, ordered set of admissible controls.

    The position of a control in the set is its tie-breaking key.
    """

    def __init__(self, elements, convex_hull: Mapping[str, Any] | None = None):
        arr = np.asarray(elements, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        if arr.ndim != 2 or arr.shape[0] == 0:
            raise ControlSetError(f"control set must be a nonempty list of vectors, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ControlSetError("control values must be finite")
        for i in range(arr.shape[0]):
            for j in range(i):
                if np.array_equal(arr[i], arr[j]):
                    raise ControlSetError(f"duplicate control {arr[i].tolist()} at indices {j} and {i}")
        arr.setflags(write=False)
        self.elements = arr
        # description of a convex set the elements were sampled from, if any
        self.convex_hull = dict(convex_hull) if convex_hull else None

    def __len__(self) -> int:
        return self.elements.shape[0]

    def __getitem__(self, i: int) -> np.ndarray:
        return self.elements[i]

    def __iter__(self):
        return iter(self.elements)

    def __repr__(self) -> str:
        return f"ControlSet({self.elements.tolist()})"

    @property
    def dim(self) -> int:
        return self.elements.shape[1]

    @property
    def is_convex_sampling(self) -> bool:
        return self.convex_hull is not None and self.convex_hull.get("kind") in ("interval", "box")


def discretize_controls(spec) -> ControlSet:
    """Build a :class:`ControlSet` from a description.

    Accepted forms (``kind`` key):

    * ``list``: ``values`` is an explicit list of scalars or vectors.
    * ``interval`` / ``box``: ``lower``, ``upper`` (scalars or vectors) and
      ``count`` points per axis, uniformly spaced, tensor product ordered
      row-major.
    * ``sphere`` / ``circle``: ``count`` points on the sphere of radius
      ``radius`` (default 1) in dimension ``dim`` (1 or 2); in 2-D the
      angles are ``2*pi*j/count`` starting at 0.  ``include_origin`` prepends
      the zero control.
    """
    if isinstance(spec, ControlSet):
        return spec
    if hasattr(spec, "model_dump"):
        spec = spec.model_dump(exclude_none=True)
    if isinstance(spec, (list, tuple, np.ndarray)):
        spec = {"kind": "list", "values": spec}
    spec = dict(spec)
    kind = spec.get("kind")
    if kind == "list":
        return ControlSet(spec["values"])
    if kind in ("interval", "box"):
        lower = np.atleast_1d(np.asarray(spec["lower"], dtype=float))
        upper = np.atleast_1d(np.asarray(spec["upper"], dtype=float))
        count = int(spec["count"])
        if count <= 0:
            raise ControlSetError("control count must be positive")
        if lower.shape != upper.shape or np.any(lower > upper):
            raise ControlSetError(f"invalid control box {lower.tolist()} .. {upper.tolist()}")
        if count == 1:
            axes = [np.array([0.5 * (a + b)]) for a, b in zip(lower, upper)]
        else:
            axes = [np.linspace(a, b, count) for a, b in zip(lower, upper)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, lower.size)
        # avoid -0.0 from linspace on symmetric intervals
        grid = grid + 0.0
        grid[np.abs(grid) < TOL] = 0.0
        return ControlSet(grid, convex_hull={"kind": "box", "lower": lower.tolist(), "upper": upper.tolist()})
    if kind in ("sphere", "circle"):
        count = int(spec["count"])
        radius = float(spec.get("radius", 1.0))
        dim = int(spec.get("dim", 2))
        if count <= 0:
            raise ControlSetError("control count must be positive")
        if dim == 1:
            if count != 2:
                raise ControlSetError("a 0-sphere has exactly 2 points")
            pts = np.array([[radius], [-radius]])
        elif dim == 2:
            ang = 2.0 * math.pi * np.arange(count) / count
            pts = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
            pts[np.abs(pts) < TOL] = 0.0
            pts = pts + 0.0
        else:
            raise ControlSetError("sphere sampling is implemented for dim 1 and 2 only")
        if spec.get("include_origin"):
            pts = np.vstack([np.zeros((1, dim)), pts])
        return ControlSet(pts, convex_hull={"kind": "ball", "radius": radius})
    raise ControlSetError(f"unknown control-set kind {kind!r}; expected list, interval, box, sphere or circle")


@dataclass
class InvarianceReport:
    ok: bool
    violations: list[tuple[int, int, int, tuple[float, ...]]]

    def summary(self, limit: int = 5) -> str:
        if self.ok:
            return "inward-pointing condition holds"
        head = "; ".join(
            f"node {i} control {c} level {n} -> {list(p)}" for i, c, n, p in self.violations[:limit]
        )
        more = len(self.violations) - limit
        return f"{len(self.violations)} escaping Euler steps: {head}" + (f"; +{more} more" if more > 0 else "")


def check_invariance(problem: ProblemSpec, mesh: Mesh, grid: "TimeGrid", controls: ControlSet) -> InvarianceReport:
    """Check ``x_i + h f(x_i, u, t_n)`` stays in the closed domain for all nodes, controls, levels."""
    X = mesh.vertices[:, None, :]
    U = controls.elements[None, :, :]
    tol = TOL * mesh.domain.diameter
    lower, upper = np.asarray(mesh.domain.lower), np.asarray(mesh.domain.upper)
    violations = []
    for n in range(grid.N):
        foot = X + grid.h * problem.f(X, U, grid.times[n])
        bad = np.any((foot < lower - tol) | (foot > upper + tol), axis=-1)
        for i, c in zip(*np.nonzero(bad)):
            violations.append((int(i), int(c), n, tuple(float(v) for v in foot[i, c])))
    return InvarianceReport(ok=not violations, violations=violations)


def project_to_domain(x, domain: BoxDomain) -> np.ndarray:
    """Componentwise clamp into the box."""
    return domain.clip(x)


# -- benchmark registry ------------------------------------------------------

_COMMON = {"t0": 0.0, "T": 1.0}


def _merge(name: str, defaults: dict[str, Any], params: Mapping[str, Any] | None) -> dict[str, Any]:
    params = dict(params or {})
    unknown = set(params) - set(defaults)
    if unknown:
        raise RegistryError(f"{name}: unknown parameters {sorted(unknown)}; accepted {sorted(defaults)}")
    merged = {**defaults, **params}
    if not merged["t0"] < merged["T"]:
        raise RegistryError(f"{name}: need t0 < T")
    if merged.get("lam", 0.0) < 0:
        raise RegistryError(f"{name}: lam must be >= 0")
    return merged


def _eikonal1d(params):
    p = _merge("eikonal1d", {**_COMMON, "umax": 1.0, "half_width": 2.0, "lam": 0.0, "count": 3}, params)
    umax, R, lam, T = float(p["umax"]), float(p["half_width"]), float(p["lam"]), float(p["T"])
    if umax <= 0 or R <= 0:
        raise RegistryError("eikonal1d: umax and half_width must be positive")

    def exact(x, t):
        x = np.asarray(x, dtype=float)
        tau = T - np.asarray(t, dtype=float)
        return np.exp(-lam * tau) * np.maximum(np.abs(x[..., 0]) - umax * tau, 0.0)

    return ProblemSpec(
        name="eikonal1d",
        dim=1,
        control_dim=1,
        dynamics=lambda x, u, t: u + 0.0 * x,
        running_cost=lambda x, u, t: np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1])),
        terminal_cost=lambda x: np.abs(x[..., 0]),
        discount=lam,
        horizon=(float(p["t0"]), T),
        domain=BoxDomain([-R], [R]),
        controls={"kind": "interval", "lower": -umax, "upper": umax, "count": int(p["count"])},
        constants={"M_f": umax, "M_L": 0.0, "M_g": R, "L_f": 1.0, "L_L": 0.0, "L_g": 1.0},
        exact_value=exact,
        params=p,
    )


def _eikonal2d(params):
    p = _merge("eikonal2d", {**_COMMON, "umax": 1.0, "half_width": 2.0, "lam": 0.0, "count": 8}, params)
    umax, R, lam, T = float(p["umax"]), float(p["half_width"]), float(p["lam"]), float(p["T"])
    if umax <= 0 or R <= 0:
        raise RegistryError("eikonal2d: umax and half_width must be positive")

    def exact(x, t):
        x = np.asarray(x, dtype=float)
        tau = T - np.asarray(t, dtype=float)
        return np.exp(-lam * tau) * np.maximum(np.linalg.norm(x, axis=-1) - umax * tau, 0.0)

    return ProblemSpec(
        name="eikonal2d",
        dim=2,
        control_dim=2,
        dynamics=lambda x, u, t: u + 0.0 * x,
        running_cost=lambda x, u, t: np.zeros(np.broadcast_shapes(x.shape[:-1], u.shape[:-1])),
        terminal_cost=lambda x: np.linalg.norm(x, axis=-1),
        discount=lam,
        horizon=(float(p["t0"]), T),
        domain=BoxDomain([-R, -R], [R, R]),
        controls={"kind": "circle", "radius": umax, "count": int(p["count"]), "dim": 2},
        constants={"M_f": umax, "M_L": 0.0, "M_g": R * math.sqrt(2), "L_f": 1.0, "L_L": 0.0, "L_g": 1.0},
        exact_value=exact,
        params=p,
    )


def _discounted_rest(params):
    p = _merge(
        "discounted_rest",
        {**_COMMON, "c": 1.0, "g": 0.0, "g_slope": 0.0, "g_quad": 0.0, "lam": 0.5,
         "dim": 1, "umax": 1.0, "half_width": 1.0, "count": 3},
        params,
    )
    c, lam, T = float(p["c"]), float(p["lam"]), float(p["T"])
    g0, g1, g2 = float(p["g"]), float(p["g_slope"]), float(p["g_quad"])
    d, umax, R = int(p["dim"]), float(p["umax"]), float(p["half_width"])
    if d < 1 or umax < 0 or R <= 0:
        raise RegistryError("discounted_rest: need dim >= 1, umax >= 0, half_width > 0")

    def g(x):
        return g0 + g1 * np.sum(x, axis=-1) + g2 * np.sum(x * x, axis=-1)

    def exact(x, t):
        # minimum of c + |u|^2 over the control box is c (the box contains 0)
        tau = T - np.asarray(t, dtype=float)
        integral = tau if lam == 0 else -np.expm1(-lam * tau) / lam
        return c * integral + np.exp(-lam * tau) * g(np.asarray(x, dtype=float))

    return ProblemSpec(
        name="discounted_rest",
        dim=d,
        control_dim=d,
        dynamics=lambda x, u, t: np.zeros(np.broadcast_shapes(x.shape, u.shape[:-1] + (d,))),
        running_cost=lambda x, u, t: c + np.sum(u * u, axis=-1) + 0.0 * x[..., 0],
        terminal_cost=g,
        discount=lam,
        horizon=(float(p["t0"]), T),
        domain=BoxDomain([-R] * d, [R] * d),
        controls={"kind": "box", "lower": [-umax] * d, "upper": [umax] * d, "count": int(p["count"])},
        constants={
            "M_f": 0.0,
            "M_L": abs(c) + d * umax**2,
            "M_g": abs(g0) + abs(g1) * d * R + abs(g2) * d * R**2,
            "L_f": 0.0,
            "L_L": 2.0 * umax * math.sqrt(d),
            "L_g": abs(g1) * math.sqrt(d) + 2.0 * abs(g2) * R * math.sqrt(d),
        },
        exact_value=exact,
        params=p,
    )


def _advect_lin(params):
    p = _merge(
        "advect_lin",
        {**_COMMON, "a0": 0.5, "omega": 2.0, "q": 1.0, "umax": 1.0, "half_width": 2.0, "lam": 0.0, "count": 21},
        params,
    )
    a0, w, q, lam, T = float(p["a0"]), float(p["omega"]), float(p["q"]), float(p["lam"]), float(p["T"])
    umax, R = float(p["umax"]), float(p["half_width"])
    if w <= 0 or q < 0 or umax <= 0 or R <= 0:
        raise RegistryError("advect_lin: need omega > 0, q >= 0, umax > 0, half_width > 0")

    def drift(t):
        return a0 * np.cos(w * np.asarray(t, dtype=float))

    def exact(x, t):
        # linear-quadratic closed form, valid while the optimal constant
        # control q*z/(2+q*tau) stays inside [-umax, umax]
        t = np.asarray(t, dtype=float)
        tau = T - t
        z = np.asarray(x, dtype=float)[..., 0] + a0 / w * (np.sin(w * T) - np.sin(w * t))
        return q * z * z / (2.0 + q * tau)

    return ProblemSpec(
        name="advect_lin",
        dim=1,
        control_dim=1,
        dynamics=lambda x, u, t: drift(t)[..., None] + u + 0.0 * x,
        running_cost=lambda x, u, t: np.sum(u * u, axis=-1) + 0.0 * x[..., 0],
        terminal_cost=lambda x: 0.5 * q * x[..., 0] ** 2,
        discount=lam,
        horizon=(float(p["t0"]), T),
        domain=BoxDomain([-R], [R]),
        controls={"kind": "interval", "lower": -umax, "upper": umax, "count": int(p["count"])},
        constants={
            "M_f": abs(a0) + umax,
            "M_L": umax**2,
            "M_g": 0.5 * q * R**2,
            "L_f": max(abs(a0) * w, 1.0),
            "L_L": 2.0 * umax,
            "L_g": q * R,
        },
        exact_value=exact if lam == 0 else None,
        params=p,
        time_dependent=True,
    )


REGISTRY: dict[str, Callable[[Mapping[str, Any] | None], ProblemSpec]] = {
    "eikonal1d": _eikonal1d,
    "eikonal2d": _eikonal2d,
    "discounted_rest": _discounted_rest,
    "advect_lin": _advect_lin,
}


def make_problem(name: str, params: Mapping[str, Any] | None = None) -> ProblemSpec:
    """Instantiate a registered benchmark problem.

    Common parameters are ``t0``, ``T`` (horizon) and ``lam`` (discount);
    the rest are problem specific, see the factory functions.
    """
    try:
        factory = REGISTRY[name]
    except KeyError:
        raise RegistryError(f"unknown problem {name!r}; available: {', '.join(sorted(REGISTRY))}") from None
    return factory(params)
