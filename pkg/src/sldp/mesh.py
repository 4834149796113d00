"""Regular simplicial meshes of axis-aligned boxes.

Each grid cell is split into ``d!`` simplices by the Kuhn (Freudenthal)
rule: the simplex containing a point is selected by sorting the point's
fractional coordinates inside its cell.  Point location is therefore
``O(d log d)`` and needs no search structure.

Vertices are numbered in row-major (C) order over the grid multi-index,
last axis fastest.  Simplices are numbered by cell (row-major) and then
by the lexicographic rank of the axis permutation that generates them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import LocationError, MeshError

#: Absolute tolerance used for weight sums, tie-breaking and reconstruction.
TOL = 1e-12


@dataclass(frozen=True)
class BoxDomain:
    """Closed box ``[lower_0, upper_0] x ... x [lower_{d-1}, upper_{d-1}]``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __init__(self, lower: Sequence[float] | float, upper: Sequence[float] | float):
        lo = tuple(float(v) for v in np.atleast_1d(np.asarray(lower, dtype=float)))
        hi = tuple(float(v) for v in np.atleast_1d(np.asarray(upper, dtype=float)))
        if len(lo) == 0 or len(lo) != len(hi):
            raise MeshError(f"lower/upper must be nonempty and of equal length, got {lo} and {hi}")
        for axis, (a, b) in enumerate(zip(lo, hi)):
            if not (math.isfinite(a) and math.isfinite(b)) or not a < b:
                raise MeshError(f"degenerate domain on axis {axis}: lower={a} upper={b}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(np.subtract(self.upper, self.lower)))

    def contains(self, x, tol: float = 0.0) -> np.ndarray | bool:
        """Membership test, vectorized over leading axes of ``x``."""
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= np.asarray(self.lower) - tol) & (x <= np.asarray(self.upper) + tol), axis=-1)
        return bool(inside) if inside.ndim == 0 else inside

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, count: int, rng: np.random.Generator) -> np.ndarray:
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * rng.random((count, self.dim))


@dataclass(frozen=True)
class BarycentricLocation:
    """Containing simplex of a point and the point's barycentric weights.

    ``vertex_indices[j]`` is a global node index and ``weights[j]`` its
    weight.  Zero weights are kept so that the tuple always has ``d + 1``
    entries.
    """

    vertex_indices: tuple[int, ...]
    weights: np.ndarray
    simplex_index: int

    def nonzero(self):
        """Iterate over ``(node, weight)`` pairs with nonzero weight."""
        for node, w in zip(self.vertex_indices, self.weights):
            if w != 0.0:
                yield node, float(w)


class Mesh:
    """Kuhn triangulation of a box with ``subdivisions[i]`` cells along axis ``i``.

    The mesh is immutable: vertex arrays are flagged read-only and every
    query is a pure function of its arguments.
    """

    def __init__(self, domain: BoxDomain, subdivisions: Sequence[int]):
        subdivisions = tuple(int(s) for s in np.atleast_1d(subdivisions))
        if len(subdivisions) != domain.dim:
            raise MeshError(f"need {domain.dim} subdivision counts, got {len(subdivisions)}")
        if any(s < 1 for s in subdivisions):
            raise MeshError(f"subdivisions must be >= 1 on every axis, got {subdivisions}")
        self.domain = domain
        self.subdivisions = subdivisions
        self.dim = domain.dim
        self.shape = tuple(s + 1 for s in subdivisions)
        self._lower = np.asarray(domain.lower)
        self._width = np.asarray(domain.upper) - self._lower
        self._n = np.asarray(subdivisions, dtype=float)
        self.spacing = self._width / self._n
        self.mesh_size = float(np.linalg.norm(self.spacing))

        grid = np.indices(self.shape).reshape(self.dim, -1).T
        # upper faces are copied verbatim so the last vertex is exactly `upper`
        vertices = np.where(
            grid == np.asarray(subdivisions),
            np.asarray(domain.upper),
            self._lower + self._width * (grid / self._n),
        )
        vertices.setflags(write=False)
        self.vertices = vertices
        self._strides = np.array([int(np.prod(self.shape[i + 1:])) for i in range(self.dim)], dtype=np.int64)
        self._perms = list(itertools.permutations(range(self.dim)))
        self._snap = TOL * self._n
        self._outside_tol = TOL * domain.diameter

    # -- basic sizes -------------------------------------------------------

    @property
    def n_nodes(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.subdivisions))

    @property
    def n_simplices(self) -> int:
        return self.n_cells * math.factorial(self.dim)

    @property
    def k(self) -> float:
        return self.mesh_size

    def __repr__(self) -> str:
        return f"Mesh(domain={self.domain}, subdivisions={self.subdivisions}, k={self.mesh_size:.6g})"

    # -- topology ----------------------------------------------------------

    def node_index(self, multi_index: Sequence[int]) -> int:
        return int(np.dot(np.asarray(multi_index, dtype=np.int64), self._strides))

    def simplices(self) -> np.ndarray:
        """Explicit ``(m_s, d + 1)`` table of vertex indices, in simplex order."""
        out = []
        for cell in np.ndindex(*self.subdivisions):
            for perm in self._perms:
                corner = np.array(cell, dtype=np.int64)
                verts = [self.node_index(corner)]
                for axis in perm:
                    corner = corner.copy()
                    corner[axis] += 1
                    verts.append(self.node_index(corner))
                out.append(verts)
        return np.array(out, dtype=np.int64)

    # -- point location ----------------------------------------------------

    def _grid_coords(self, points: np.ndarray) -> np.ndarray:
        lo, hi = self._lower, self._lower + self._width
        below = points < lo - self._outside_tol
        above = points > hi + self._outside_tol
        if below.any() or above.any():
            bad = np.argwhere(below | above)[0]
            row, axis = int(bad[0]), int(bad[1])
            raise LocationError(
                f"point {points[row].tolist()} lies outside the domain on axis {axis}: "
                f"coordinate {points[row, axis]!r} not in [{lo[axis]}, {hi[axis]}]"
            )
        p = (points - lo) / self._width * self._n
        p = np.clip(p, 0.0, self._n)
        nearest = np.rint(p)
        snap = np.abs(p - nearest) <= self._snap
        return np.where(snap, nearest, p)

    def locate_many(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized point location.

        Returns ``(nodes, weights, simplex)`` with shapes ``(M, d+1)``,
        ``(M, d+1)`` and ``(M,)``.  Points on shared faces go to the
        lowest-indexed cell and, inside it, to the lowest-ranked simplex.
        """
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            points = points.reshape(-1, self.dim) if self.dim > 1 else points[:, None]
        if points.shape[-1] != self.dim:
            raise LocationError(f"expected points of dimension {self.dim}, got shape {points.shape}")
        p = self._grid_coords(points)
        n_int = np.asarray(self.subdivisions, dtype=np.int64)
        cell = np.clip(np.ceil(p).astype(np.int64) - 1, 0, n_int - 1)
        frac = np.clip(p - cell, 0.0, 1.0)
        # stable sort on -frac: equal fractions keep increasing axis order,
        # which is the lexicographically smallest admissible permutation
        order = np.argsort(-frac, axis=1, kind="stable")
        sorted_frac = np.take_along_axis(frac, order, axis=1)
        m = points.shape[0]
        upper = np.concatenate([np.ones((m, 1)), sorted_frac], axis=1)
        lower = np.concatenate([sorted_frac, np.zeros((m, 1))], axis=1)
        weights = upper - lower

        base = cell @ self._strides
        steps = np.cumsum(self._strides[order], axis=1)
        nodes = np.concatenate([base[:, None], base[:, None] + steps], axis=1)

        cell_index = np.ravel_multi_index(cell.T, self.subdivisions) if m else np.zeros(0, dtype=np.int64)
        simplex = cell_index * math.factorial(self.dim) + _perm_rank(order)
        return nodes, weights, simplex

    def locate(self, x) -> BarycentricLocation:
        nodes, weights, simplex = self.locate_many(np.asarray(x, dtype=float).reshape(1, self.dim))
        return BarycentricLocation(tuple(int(i) for i in nodes[0]), weights[0], int(simplex[0]))

    def interpolate(self, nodal_values, points) -> np.ndarray:
        """Evaluate the piecewise-linear interpolant of ``nodal_values`` at many points."""
        values = np.asarray(nodal_values, dtype=float)
        nodes, weights, _ = self.locate_many(points)
        return combine(values, nodes, weights)

    # -- serialization -----------------------------------------------------

    def describe(self) -> dict[str, Any]:
        return {
            "lower": list(self.domain.lower),
            "upper": list(self.domain.upper),
            "subdivisions": list(self.subdivisions),
            "n_nodes": self.n_nodes,
            "n_simplices": self.n_simplices,
            "k": self.mesh_size,
        }

    @classmethod
    def from_description(cls, doc: dict[str, Any]) -> "Mesh":
        return cls(BoxDomain(doc["lower"], doc["upper"]), doc["subdivisions"])


def _perm_rank(order: np.ndarray) -> np.ndarray:
    """Lexicographic rank of each row permutation (Lehmer code)."""
    d = order.shape[1]
    rank = np.zeros(order.shape[0], dtype=np.int64)
    for i in range(d - 1):
        smaller = np.sum(order[:, i + 1:] < order[:, i:i + 1], axis=1)
        rank += smaller * math.factorial(d - 1 - i)
    return rank


def combine(values: np.ndarray, nodes: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted sum ``sum_j weights[..., j] * values[nodes[..., j]]``.

    Accumulated slot by slot so each result depends only on its own row,
    independent of how the rows are batched.
    """
    acc = weights[..., 0] * values[nodes[..., 0]]
    for j in range(1, nodes.shape[-1]):
        acc = acc + weights[..., j] * values[nodes[..., j]]
    return acc


def build_mesh(domain: BoxDomain, subdivisions: Sequence[int] | int) -> Mesh:
    return Mesh(domain, np.atleast_1d(subdivisions))


def locate(mesh: Mesh, x) -> BarycentricLocation:
    return mesh.locate(x)


def interp_scalar(mesh: Mesh, nodal_values, x) -> float:
    """Value of the piecewise-linear interpolant ``I_k`` at a single point."""
    values = np.asarray(nodal_values, dtype=float)
    if values.shape != (mesh.n_nodes,):
        raise MeshError(f"expected {mesh.n_nodes} nodal values, got shape {values.shape}")
    loc = mesh.locate(x)
    return float(combine(values, np.asarray(loc.vertex_indices)[None], loc.weights[None])[0])


def interp_vector_with_node_controls(
    mesh: Mesh,
    func: Callable[..., Any],
    x,
    node_controls,
    time: float,
):
    """Interpolate ``func(x_j, u_j, t)`` over the simplex containing ``x``.

    ``node_controls`` is indexable by node number (an ``(n_s, m)`` array or
    a mapping).  Only nodes with nonzero weight are evaluated.
    """
    loc = mesh.locate(x)
    total = None
    for node, w in loc.nonzero():
        term = w * np.asarray(func(mesh.vertices[node], np.atleast_1d(node_controls[node]), time), dtype=float)
        total = term if total is None else total + term
    return float(total) if np.ndim(total) == 0 else total
