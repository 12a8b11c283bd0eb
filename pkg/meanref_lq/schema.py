"""Pydantic documents for problem files, run configuration and reports."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PositiveFloat, PositiveInt, model_validator

# nested lists as they come out of JSON; shapes are checked in core
Coefficient = Union[float, list[Any]]


class ProblemDocument(BaseModel):
    """Problem file contents. Scalars may be constants or N+1 nodal values."""

    model_config = ConfigDict(extra="forbid")

    T: PositiveFloat
    N: PositiveInt
    l: PositiveInt = 1
    m: PositiveInt = 1
    A: Coefficient = 0.0
    B: Coefficient
    C: Coefficient = 0.0
    D: Coefficient = 0.0
    Q: Coefficient = 0.0
    R: Coefficient
    G: float = 0.0
    L: Coefficient
    x: float


class AssumptionCheck(BaseModel):
    name: str
    passed: bool
    margin: float
    detail: str = ""


class ValidationReport(BaseModel):
    delta: float
    epsilon: float
    checks: list[AssumptionCheck]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def margins(self) -> tuple[float, ...]:
        return tuple(c.margin for c in self.checks)

    def raise_for_failure(self) -> None:
        if self.passed:
            return
        from meanref_lq.errors import AssumptionError

        failed = ", ".join(f"{c.name} (margin {c.margin:.3g})" for c in self.checks if not c.passed)
        raise AssumptionError(f"assumption check failed: {failed}", report=self)


class SolverSettings(BaseModel):
    """Knobs of the penalty loop. Defaults follow the documented schedule."""

    tol_fp: PositiveFloat = 1e-10
    max_iter: PositiveInt = 10_000
    method: Literal["newton", "picard"] = "newton"
    damping: Optional[float] = Field(default=None, gt=0.0, le=1.0)
    n0: PositiveFloat = 1e2
    ratio: float = Field(default=4.0, gt=1.0)
    stages: PositiveInt = 9
    tol_feas: PositiveFloat = 1e-4
    tol_comp: PositiveFloat = 1e-4
    # V_n exceeds the constrained value by about half the penalty mass
    tol_pen: PositiveFloat = 1e-7
    stop_early: bool = True
    delta: PositiveFloat = 1e-8
    epsilon: PositiveFloat = 1e-8

    def schedule(self) -> list[float]:
        return [self.n0 * self.ratio**j for j in range(self.stages)]

    def step_size(self) -> float:
        if self.damping is not None:
            return self.damping
        return 0.5 if self.method == "picard" else 1.0


Command = Literal["solve", "simulate", "verify", "sweep-n", "oracle-compare"]


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    command: Command
    problem: Path
    grid: Optional[PositiveInt] = None
    paths: PositiveInt = 20_000
    seed: int = Field(default=0, ge=0, lt=2**64)
    antithetic: bool = False
    workers: Optional[PositiveInt] = None
    trials: PositiveInt = 20
    monte_carlo: bool = True
    tree_steps: int = Field(default=10, ge=1, le=12)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    out: Path = Path("out")

    @model_validator(mode="after")
    def _check_problem(self) -> "RunConfig":
        if not self.problem.is_file():
            raise ValueError(f"problem file not found: {self.problem}")
        return self


class StageRow(BaseModel):
    n: float
    value: float
    penalty_mass: float
    iterations: int
    residual: float
    converged: bool


class SolveReport(BaseModel):
    value_formula: float
    value_direct: float
    value_moments: float
    value_monte_carlo: Optional[float] = None
    value_monte_carlo_se: Optional[float] = None
    unconstrained_value: float
    mu_mass: float
    atom_start: float
    first_cell_mass: float
    atom_end: float
    feasibility_defect: float
    complementarity_residual: float
    n_final: float
    converged: bool
    stages: list[StageRow]

    def render(self) -> str:
        lines = [
            "meanref-lq solve report",
            f"value (formula)        {self.value_formula:.17g}",
            f"value (direct)         {self.value_direct:.17g}",
            f"value (moments)        {self.value_moments:.17g}",
        ]
        if self.value_monte_carlo is not None:
            lines.append(
                f"value (monte carlo)    {self.value_monte_carlo:.17g} +- {self.value_monte_carlo_se:.3g}"
            )
        lines += [
            f"unconstrained value    {self.unconstrained_value:.17g}",
            f"mu mass                {self.mu_mass:.17g}",
            f"atom at start          {self.atom_start:.17g}",
            f"first cell mass        {self.first_cell_mass:.17g}",
            f"atom at end            {self.atom_end:.17g}",
            f"feasibility defect     {self.feasibility_defect:.17g}",
            f"complementarity        {self.complementarity_residual:.17g}",
            f"final penalty weight   {self.n_final:.17g}",
            f"converged              {self.converged}",
            "",
            "n, V_n, penalty_mass, iterations, residual",
        ]
        for s in self.stages:
            lines.append(f"{s.n:.17g}, {s.value:.17g}, {s.penalty_mass:.17g}, {s.iterations}, {s.residual:.3g}")
        return "\n".join(lines) + "\n"


class FuzzReport(BaseModel):
    trials: int
    admissible: int
    inadmissible: int
    violations: int
    min_gap: Optional[float] = None
    min_gap_in_se: Optional[float] = None
    gaps: list[float] = []


class CheckRow(BaseModel):
    check: str
    value: float
    bound: float
    passed: bool
