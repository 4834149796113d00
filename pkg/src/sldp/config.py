"""Run configuration: a YAML document validated against a strict schema.

Example::

    problem:
      name: eikonal1d
      params: {lam: 0.0}
    mesh:
      lower: [-2.0]
      upper: [2.0]
      subdivisions: [64]
    time: {N: 16}
    controls: {kind: list, values: [-1.0, 0.0, 1.0]}
    policy: project
    output: out/eikonal1d
    seed: 0

Every block except ``problem`` is optional; missing ``mesh`` and
``controls`` fall back to the problem's defaults.  Unknown keys are errors.
Validation failures are reported with the offending field path and, when
the field is present in the file, its line number.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .mesh import BoxDomain, Mesh, build_mesh
from .problem import ControlSet, ProblemSpec, discretize_controls, make_problem
from .solver import TimeGrid

Vector = list[float]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ProblemBlock(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class BoxBlock(_Strict):
    lower: Vector
    upper: Vector

    def domain(self) -> BoxDomain:
        return BoxDomain(self.lower, self.upper)


class MeshBlock(_Strict):
    lower: Optional[Vector] = None
    upper: Optional[Vector] = None
    subdivisions: Union[int, list[int]]

    @field_validator("subdivisions")
    @classmethod
    def _positive(cls, v):
        if any(s < 1 for s in np.atleast_1d(v)):
            raise ValueError("subdivisions must be >= 1")
        return v


class TimeBlock(_Strict):
    t: Optional[float] = None
    T: Optional[float] = None
    N: int = Field(ge=1)


class ControlsBlock(_Strict):
    kind: Literal["list", "interval", "box", "sphere", "circle"]
    values: Optional[list[Union[float, Vector]]] = None
    lower: Optional[Union[float, Vector]] = None
    upper: Optional[Union[float, Vector]] = None
    count: Optional[int] = None
    radius: Optional[float] = None
    dim: Optional[int] = None
    include_origin: Optional[bool] = None

    @model_validator(mode="after")
    def _required(self):
        need = {"list": ("values",), "interval": ("lower", "upper", "count"), "box": ("lower", "upper", "count"),
                "sphere": ("count",), "circle": ("count",)}[self.kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"controls of kind {self.kind!r} need {', '.join(missing)}")
        return self


class StudyBlock(_Strict):
    levels: int = Field(5, ge=1)
    subdomain: Optional[BoxBlock] = None
    norm: Literal["max", "mean"] = "max"
    reference: bool = False
    min_rate: Optional[float] = None
    error_factor: Optional[float] = Field(None, description="assert finest error <= factor * (h + k)")
    lu_pairs: Optional[int] = Field(None, ge=1, description="sample this many node pairs for L_u")


class Lemma1Block(_Strict):
    x: Vector
    control: list[Union[float, Vector]]
    levels: int = Field(5, ge=1)
    substeps: int = Field(64, ge=1)
    terminal_discount: Literal["exp", "scheme"] = "exp"
    min_rate: Optional[float] = None
    gap_factor: Optional[float] = Field(None, description="assert finest gap <= factor * (h + k)")


class SimulateBlock(_Strict):
    x0: list[Union[float, Vector]]
    n0: int = Field(0, ge=0)


class TinyBlock(_Strict):
    nodes: int = Field(ge=2)
    steps: int = Field(ge=1)
    controls: int = Field(ge=1)
    lam: float = Field(0.0, ge=0)
    time_dependent: bool = False
    interior_points: int = Field(0, ge=0)


class OracleBlock(_Strict):
    suite: Literal["default", "none"] = "default"
    nodes: Optional[list[int]] = Field(None, description="keep only suite instances with these node counts")
    interior_points: int = Field(10, ge=0)
    instances: list[TinyBlock] = Field(default_factory=list)
    tol: float = 1e-10
    max_combinations: int = Field(10**7, ge=1)
    corrupt: float = Field(0.0, description="test hook: added to every solver value")


class InterpBlock(_Strict):
    function: Literal["abs", "norm", "quadratic", "affine"]
    lower: Vector
    upper: Vector
    subdivisions: Union[int, list[int]]
    levels: int = Field(5, ge=1)
    samples: int = Field(10_000, ge=2)
    lipschitz: Optional[float] = None
    expected_rate: Optional[float] = None
    rate_tol: float = 0.1


class RunConfig(_Strict):
    problem: Optional[ProblemBlock] = None
    mesh: Optional[MeshBlock] = None
    time: Optional[TimeBlock] = None
    controls: Optional[ControlsBlock] = None
    policy: Literal["strict", "project"] = "strict"
    output: str = "out"
    seed: int = 0
    workers: int = Field(1, ge=1)
    study: Optional[StudyBlock] = None
    lemma1: Optional[Lemma1Block] = None
    simulate: Optional[SimulateBlock] = None
    oracle: Optional[OracleBlock] = None
    interp: Optional[InterpBlock] = None

    # -- resolution into library objects -------------------------------------

    def require(self, *blocks: str) -> None:
        missing = [b for b in blocks if getattr(self, b) is None]
        if missing:
            raise ConfigError(f"config is missing required block(s): {', '.join(missing)}")

    def build_problem(self) -> ProblemSpec:
        self.require("problem")
        params = dict(self.problem.params)
        if self.time is not None:
            for key, attr in (("t0", "t"), ("T", "T")):
                value = getattr(self.time, attr)
                if value is None:
                    continue
                if key in params and params[key] != value:
                    raise ConfigError(f"time.{attr}={value} conflicts with problem.params.{key}={params[key]}")
                params[key] = value
        return make_problem(self.problem.name, params)

    def build_domain(self, problem: ProblemSpec) -> BoxDomain:
        if self.mesh is not None and (self.mesh.lower is None) != (self.mesh.upper is None):
            raise ConfigError("mesh.lower and mesh.upper must be given together")
        if self.mesh is not None and self.mesh.lower is not None:
            domain = BoxDomain(self.mesh.lower, self.mesh.upper)
        elif problem.domain is not None:
            domain = problem.domain
        else:
            raise ConfigError(f"problem {problem.name} declares no domain; set mesh.lower and mesh.upper")
        if domain.dim != problem.dim:
            raise ConfigError(f"mesh has dimension {domain.dim} but {problem.name} has state dimension {problem.dim}")
        return domain

    def subdivisions(self, domain: BoxDomain) -> list[int]:
        self.require("mesh")
        subs = [int(s) for s in np.atleast_1d(self.mesh.subdivisions)]
        if len(subs) == 1 and domain.dim > 1:
            subs = subs * domain.dim
        if len(subs) != domain.dim:
            raise ConfigError(f"mesh.subdivisions needs {domain.dim} entries, got {len(subs)}")
        return subs

    def build_mesh(self, problem: ProblemSpec) -> Mesh:
        domain = self.build_domain(problem)
        return build_mesh(domain, self.subdivisions(domain))

    def build_grid(self, problem: ProblemSpec) -> TimeGrid:
        self.require("time")
        return TimeGrid.for_problem(problem, self.time.N)

    def build_controls(self, problem: ProblemSpec) -> ControlSet:
        if self.controls is not None:
            controls = discretize_controls(self.controls.model_dump(exclude_none=True))
        elif problem.controls is not None:
            controls = discretize_controls(problem.controls)
        else:
            raise ConfigError(f"problem {problem.name} declares no control set; add a controls block")
        if controls.dim != problem.control_dim:
            raise ConfigError(f"controls have dimension {controls.dim}, {problem.name} expects {problem.control_dim}")
        return controls


# -- loading -----------------------------------------------------------------


def _line_of(node: yaml.Node | None, loc: tuple[Any, ...]) -> int | None:
    """Line (1-based) of the deepest node on ``loc`` that exists in the document."""
    line = None
    for key in loc:
        if node is None:
            break
        line = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            node = next((v for k, v in node.value if k.value == key), None)
            if node is None:
                # report the key line of the enclosing mapping entry
                break
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            node = None
    else:
        if node is not None:
            line = node.start_mark.line + 1
    return line


def _format_errors(exc: ValidationError, root: yaml.Node | None, source: str) -> str:
    parts = []
    for err in exc.errors():
        loc = tuple(p for p in err["loc"] if not (isinstance(p, str) and p.startswith("function-")))
        # union members appear as extra path components; keep only real keys and indices
        path = ".".join(str(p) for p in loc if not (isinstance(p, str) and ("[" in p or p in ("int", "float"))))
        line = _line_of(root, loc)
        where = f"{source}:{line}" if line else source
        parts.append(f"{where}: {path or '<root>'}: {err['msg']}")
    return "; ".join(parts)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a YAML document; raises :class:`ConfigError` with locations."""
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, root, source)) from None


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
