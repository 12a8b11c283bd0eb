"""Problem model: time grids, grid functions, measures and assumption checks.

Everything here is immutable after construction. Coefficient arrays carry the
node index as their leading axis:

    A, Q, L     (N+1,)
    B           (N+1, l)
    C           (N+1, m)
    D           (N+1, m, l)
    R           (N+1, l, l)
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
from pydantic import ValidationError

from meanref_lq.errors import ProblemError
from meanref_lq.schema import AssumptionCheck, ProblemDocument, ValidationReport

logger = logging.getLogger(__name__)


def _frozen(values: Any) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_i = i*T/N on [0, T]."""

    T: float
    N: int

    def __post_init__(self) -> None:
        if not (np.isfinite(self.T) and self.T > 0):
            raise ProblemError(f"horizon must be positive, got {self.T}", field="T")
        if int(self.N) != self.N or self.N < 1:
            raise ProblemError(f"steps must be a positive integer, got {self.N}", field="N")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1) * self.T / self.N
        t[-1] = self.T
        return t

    def trapezoid_weights(self) -> np.ndarray:
        w = np.ones(self.N + 1)
        w[0] = w[-1] = 0.5
        return w


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Values sampled on a grid, piecewise linear in between."""

    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        values = _frozen(self.values)
        if values.ndim == 0 or values.shape[0] != self.grid.N + 1:
            raise ProblemError(
                f"grid function needs {self.grid.N + 1} nodal values, got shape {values.shape}"
            )
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, value: Any) -> "GridFunction":
        value = np.asarray(value, dtype=float)
        return cls(grid, np.broadcast_to(value, (grid.N + 1,) + value.shape))

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape[1:]

    def at(self, t: float) -> np.ndarray | float:
        if not (0.0 <= t <= self.grid.T):
            raise ValueError(f"t={t} outside [0, {self.grid.T}]")
        nodes = self.grid.nodes
        i = int(np.searchsorted(nodes, t, side="right")) - 1
        i = min(i, self.grid.N)
        if nodes[i] == t:
            out = self.values[i]
        else:
            theta = (t - nodes[i]) / (nodes[i + 1] - nodes[i])
            out = (1.0 - theta) * self.values[i] + theta * self.values[i + 1]
        return float(out) if np.ndim(out) == 0 else np.array(out)

    __call__ = at

    def resample(self, grid: TimeGrid) -> "GridFunction":
        if grid == self.grid:
            return self
        if not np.isclose(grid.T, self.grid.T):
            raise ProblemError(f"cannot resample from horizon {self.grid.T} to {grid.T}")
        flat = self.values.reshape(self.grid.N + 1, -1)
        cols = [np.interp(grid.nodes, self.grid.nodes, flat[:, j]) for j in range(flat.shape[1])]
        return GridFunction(grid, np.stack(cols, axis=1).reshape((grid.N + 1,) + self.shape))

    def refined(self) -> np.ndarray:
        """Values on the half grid (2N+1 points): nodes and interval midpoints."""
        v = self.values
        out = np.empty((2 * self.grid.N + 1,) + self.shape)
        out[0::2] = v
        out[1::2] = 0.5 * (v[:-1] + v[1:])
        return out

    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: TimeGrid
    A: GridFunction
    B: GridFunction
    C: GridFunction
    D: GridFunction
    Q: GridFunction
    R: GridFunction
    G: float
    L: GridFunction
    x: float

    def __post_init__(self) -> None:
        l, m = self.control_dim, self.noise_dim
        expected = {
            "A": (),
            "B": (l,),
            "C": (m,),
            "D": (m, l),
            "Q": (),
            "R": (l, l),
            "L": (),
        }
        for name, shape in expected.items():
            gf = getattr(self, name)
            if gf.grid != self.grid:
                raise ProblemError(f"{name} lives on a different grid", field=name)
            if gf.shape != shape:
                raise ProblemError(f"{name} has shape {gf.shape}, expected {shape}", field=name)
        R = self.R.values
        if not np.allclose(R, np.swapaxes(R, 1, 2), rtol=0.0, atol=1e-12 * (1.0 + np.abs(R).max())):
            raise ProblemError("R is not symmetric", field="R")
        object.__setattr__(self, "G", float(self.G))
        object.__setattr__(self, "x", float(self.x))

    @property
    def control_dim(self) -> int:
        return self.B.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.C.shape[0]

    def on_grid(self, grid: TimeGrid) -> "ProblemSpec":
        if grid == self.grid:
            return self
        return ProblemSpec(
            grid=grid,
            A=self.A.resample(grid),
            B=self.B.resample(grid),
            C=self.C.resample(grid),
            D=self.D.resample(grid),
            Q=self.Q.resample(grid),
            R=self.R.resample(grid),
            G=self.G,
            L=self.L.resample(grid),
            x=self.x,
        )

    @classmethod
    def from_document(cls, doc: ProblemDocument, grid_steps: int | None = None) -> "ProblemSpec":
        file_grid = TimeGrid(doc.T, doc.N)
        shapes = {
            "A": (),
            "B": (doc.l,),
            "C": (doc.m,),
            "D": (doc.m, doc.l),
            "Q": (),
            "R": (doc.l, doc.l),
            "L": (),
        }
        coeffs = {name: _coefficient(name, getattr(doc, name), shape, file_grid) for name, shape in shapes.items()}
        spec = cls(grid=file_grid, G=doc.G, x=doc.x, **coeffs)
        if grid_steps is not None and grid_steps != doc.N:
            spec = spec.on_grid(TimeGrid(doc.T, grid_steps))
        return spec


def _coefficient(name: str, raw: Any, shape: tuple[int, ...], grid: TimeGrid) -> GridFunction:
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError) as e:
        raise ProblemError(f"{name} is not a numeric array: {e}", field=name) from e
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"{name} has non-finite entries", field=name)
    n_nodes = grid.N + 1
    if arr.shape == shape or arr.ndim == 0:
        return GridFunction.constant(grid, np.broadcast_to(arr, shape))
    if arr.shape == (n_nodes,) + shape:
        return GridFunction(grid, arr)
    # nodal list for a 1-dimensional vector/matrix coefficient
    if arr.shape == (n_nodes,) and int(np.prod(shape)) == 1:
        return GridFunction(grid, arr.reshape((n_nodes,) + shape))
    raise ProblemError(
        f"{name} has shape {arr.shape}; expected a constant of shape {shape} "
        f"or {n_nodes} nodal values of that shape",
        field=name,
    )


def parse_problem(data: dict[str, Any], grid_steps: int | None = None) -> ProblemSpec:
    try:
        doc = ProblemDocument.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        field = str(err["loc"][0]) if err["loc"] else None
        raise ProblemError(f"invalid problem field {field}: {err['msg']}", field=field) from e
    return ProblemSpec.from_document(doc, grid_steps)


def load_problem(path: str | Path, grid_steps: int | None = None) -> ProblemSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ProblemError(f"cannot read problem file {path}: {e}", field="problem") from e
    except ValueError as e:
        raise ProblemError(f"problem file {path} is not valid JSON: {e}", field="problem") from e
    if not isinstance(data, dict):
        raise ProblemError("problem file must hold a JSON object", field="problem")
    spec = parse_problem(data, grid_steps)
    logger.info("loaded problem %s on %d steps (l=%d, m=%d)", path, spec.grid.N, spec.control_dim, spec.noise_dim)
    return spec


@dataclass(frozen=True, eq=False)
class Compensator:
    """Nonnegative measure on [0, T] stored as cumulative mass c(t) = mu([0, t]).

    An atom is a jump of c across one node; c(0) itself is the atom at t = 0.
    """

    cumulative: GridFunction

    def __post_init__(self) -> None:
        c = self.cumulative.values
        if c.ndim != 1:
            raise ValueError("compensator must be scalar valued")
        if c[0] < 0 or np.any(np.diff(c) < 0):
            raise ValueError("compensator must be nonnegative and nondecreasing")

    @property
    def grid(self) -> TimeGrid:
        return self.cumulative.grid

    @classmethod
    def zero(cls, grid: TimeGrid) -> "Compensator":
        return cls(GridFunction.constant(grid, 0.0))

    @classmethod
    def from_masses(cls, grid: TimeGrid, masses: np.ndarray) -> "Compensator":
        masses = np.maximum(np.asarray(masses, dtype=float), 0.0)
        return cls(GridFunction(grid, np.cumsum(masses)))

    @property
    def mass(self) -> float:
        return float(self.cumulative.values[-1])

    def increments(self) -> np.ndarray:
        """Mass carried by each node: c(0), then c(t_i) - c(t_{i-1})."""
        c = self.cumulative.values
        return np.concatenate(([c[0]], np.diff(c)))

    def integrate(self, f: np.ndarray) -> float:
        return float(np.dot(np.asarray(f, dtype=float), self.increments()))

    def cadlag(self) -> GridFunction:
        """mu_t = mu([0, t]) - mu([0, T]), so mu_T = 0."""
        c = self.cumulative.values
        return GridFunction(self.grid, c - c[-1])


def validate_spec(spec: ProblemSpec, delta: float, epsilon: float) -> ValidationReport:
    """Check the standing assumptions and report the worst-case margins."""
    R = spec.R.values
    B = spec.B.values
    r_margin = float(np.min(np.linalg.eigvalsh(R))) - delta
    q_margin = float(np.min(spec.Q.values))
    g_margin = spec.G
    b_margin = float(np.min(np.einsum("ti,ti->t", B, B))) - epsilon
    checks = [
        AssumptionCheck(
            name="R >= delta I",
            passed=r_margin >= 0,
            margin=r_margin,
            detail="control weight must be uniformly positive definite",
        ),
        AssumptionCheck(name="Q >= 0", passed=q_margin >= 0, margin=q_margin),
        AssumptionCheck(name="G >= 0", passed=g_margin >= 0, margin=g_margin),
        AssumptionCheck(
            name="B^T B >= epsilon",
            passed=b_margin >= 0,
            margin=b_margin,
            detail=(
                "" if b_margin >= 0 else
                "drift control gain degenerates; the reflected system may have many solutions "
                "and the measure is not identified"
            ),
        ),
    ]
    return ValidationReport(delta=delta, epsilon=epsilon, checks=checks)


def distance_to_cone(X: GridFunction) -> float:
    """Sup-distance from X to the cone of nonnegative functions: max_t X_-(t)."""
    return float(np.max(np.maximum(-X.values, 0.0)))


@dataclass(frozen=True)
class Complementarity:
    residual: float
    feasibility_defect: float


def complementarity_residual(m: GridFunction, L: GridFunction, mu: Compensator) -> Complementarity:
    """Integral of (m - L) against mu, pairing each increment with the midpoint value."""
    gap = m.values - L.values
    c = mu.cumulative.values
    residual = gap[0] * c[0] + float(np.dot(0.5 * (gap[:-1] + gap[1:]), np.diff(c)))
    defect = float(np.max(np.maximum(-gap, 0.0)))
    return Complementarity(residual=float(residual), feasibility_defect=defect)


def rk4_sweep(
    rhs: Callable[[int, np.ndarray], np.ndarray],
    y_start: np.ndarray | float,
    grid: TimeGrid,
    reverse: bool = False,
) -> np.ndarray:
    """Classical 4-stage integration over the grid.

    ``rhs(j, y)`` is evaluated at half-grid index j (node i is j = 2i, the
    midpoint of [t_i, t_{i+1}] is j = 2i + 1). With ``reverse`` the sweep starts
    at t_N and the returned array is still ordered by node.
    """
    N = grid.N
    y = np.asarray(y_start, dtype=float)
    out = np.empty((N + 1,) + y.shape)
    h = -grid.h if reverse else grid.h
    order = range(N, 0, -1) if reverse else range(N)
    step = -1 if reverse else 1
    out[N if reverse else 0] = y
    for i in order:
        j = 2 * i
        k1 = rhs(j, y)
        k2 = rhs(j + step, y + 0.5 * h * k1)
        k3 = rhs(j + step, y + 0.5 * h * k2)
        k4 = rhs(j + 2 * step, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        out[i + step] = y
    return out
