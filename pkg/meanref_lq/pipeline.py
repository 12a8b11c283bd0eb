"""Command bodies shared by the CLI and the tool server, plus their CSV tables."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from meanref_lq.core import ProblemSpec, complementarity_residual, validate_spec
from meanref_lq.montecarlo import (
    FeedbackPolicy,
    MCConfig,
    MCResult,
    duality_gap,
    parallelogram_check,
    simulate as simulate_policy,
    verification_fuzz,
)
from meanref_lq.obstacle import (
    MeanSolution,
    PenaltyTrace,
    cost_via_moments,
    direct_value,
    optimal_value,
    solve_constrained,
    solve_penalized,
)
from meanref_lq.oracle import TreeProblem, euler_moment_cost, tree_minimize
from meanref_lq.riccati import RiccatiSolution, solve_riccati
from meanref_lq.schema import CheckRow, SolverSettings, SolveReport, ValidationReport

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"


@dataclass(frozen=True, eq=False)
class SolveOutcome:
    spec: ProblemSpec
    ric: RiccatiSolution
    solution: MeanSolution
    trace: PenaltyTrace
    report: SolveReport

    @property
    def policy(self) -> FeedbackPolicy:
        return FeedbackPolicy.from_solution(self.ric, self.solution)


def validate(spec: ProblemSpec, settings: SolverSettings) -> ValidationReport:
    report = validate_spec(spec, settings.delta, settings.epsilon)
    for check in report.checks:
        logger.info("assumption %-18s margin %.4g %s", check.name, check.margin, "ok" if check.passed else "FAILED")
    report.raise_for_failure()
    return report


def solve(spec: ProblemSpec, settings: SolverSettings, mc: MCConfig | None = None) -> SolveOutcome:
    """Solve and evaluate the value by every evaluator; Monte Carlo only when `mc` is given."""
    validate(spec, settings)
    ric = solve_riccati(spec)
    sol, trace = solve_constrained(spec, ric, settings=settings)
    mc_mean = mc_se = None
    if mc is not None:
        result = simulate_policy(spec, FeedbackPolicy.from_solution(ric, sol), mc)
        mc_mean, mc_se = result.cost_mean, result.cost_se
    comp = complementarity_residual(sol.m, spec.L, sol.mu)
    P0 = float(ric.P.values[0])
    report = SolveReport(
        value_formula=optimal_value(sol, spec),
        value_direct=direct_value(spec, ric, sol.m, sol.k),
        value_moments=cost_via_moments(spec, ric, sol),
        value_monte_carlo=mc_mean,
        value_monte_carlo_se=mc_se,
        unconstrained_value=0.5 * P0 * spec.x**2,
        mu_mass=sol.mu.mass,
        atom_start=sol.atom_start,
        first_cell_mass=sol.first_cell_mass,
        atom_end=sol.atom_end,
        feasibility_defect=comp.feasibility_defect,
        complementarity_residual=comp.residual,
        n_final=sol.n_final,
        converged=sol.converged,
        stages=trace.rows,
    )
    return SolveOutcome(spec=spec, ric=ric, solution=sol, trace=trace, report=report)


def sweep(spec: ProblemSpec, settings: SolverSettings) -> PenaltyTrace:
    """Every stage of the schedule, without stopping at the tolerances."""
    validate(spec, settings)
    ric = solve_riccati(spec)
    _, trace = solve_constrained(spec, ric, settings=settings.model_copy(update={"stop_early": False}))
    return trace


def simulate(outcome: SolveOutcome, cfg: MCConfig) -> MCResult:
    result = simulate_policy(outcome.spec, outcome.policy, cfg)
    logger.info("simulated cost %.10g +- %.3g over %d paths", result.cost_mean, result.cost_se, result.paths)
    return result


def verify(outcome: SolveOutcome, cfg: MCConfig, trials: int, settings: SolverSettings) -> list[CheckRow]:
    spec, report = outcome.spec, outcome.report
    V = report.value_formula
    policy = outcome.policy
    rows = [
        CheckRow(
            check="feasibility_defect",
            value=report.feasibility_defect,
            bound=settings.tol_feas * (1.0 + spec.L.sup()),
            passed=report.feasibility_defect <= settings.tol_feas * (1.0 + spec.L.sup()),
        ),
        CheckRow(
            check="complementarity",
            value=report.complementarity_residual,
            bound=settings.tol_comp * (1.0 + abs(V)),
            passed=abs(report.complementarity_residual) <= settings.tol_comp * (1.0 + abs(V)),
        ),
    ]
    formula_gap = abs(report.value_formula - report.value_moments)
    rows.append(
        CheckRow(check="formula_vs_moments", value=formula_gap, bound=1e-6 * abs(V), passed=formula_gap <= 1e-6 * abs(V))
    )

    mc = simulate_policy(spec, policy, cfg)
    target = euler_moment_cost(spec, policy).cost
    rows.append(
        CheckRow(
            check="monte_carlo_vs_euler_moments",
            value=abs(mc.cost_mean - target),
            bound=4.0 * mc.cost_se,
            passed=abs(mc.cost_mean - target) <= 4.0 * mc.cost_se,
        )
    )

    lhs, _, gap = parallelogram_check(spec, policy, FeedbackPolicy.zero(spec.grid, spec.control_dim), cfg)
    rows.append(CheckRow(check="parallelogram_gap", value=abs(gap), bound=1e-10 * (1.0 + abs(lhs)), passed=abs(gap) <= 1e-10 * (1.0 + abs(lhs))))

    dual, dual_se = duality_gap(spec, policy, outcome.solution.mu, cfg)
    # Euler mean vs scheme mean differs by O(h) on the support of mu
    dual_bound = 3.0 * dual_se + spec.grid.h * (1.0 + report.mu_mass)
    rows.append(CheckRow(check="duality_gap", value=dual, bound=dual_bound, passed=abs(dual) <= dual_bound))

    fuzz = verification_fuzz(spec, policy, trials, cfg)
    rows.append(CheckRow(check="fuzz_violations", value=fuzz.violations, bound=0.0, passed=fuzz.violations == 0))
    rows.append(CheckRow(check="fuzz_admissible", value=fuzz.admissible, bound=float(trials), passed=fuzz.admissible > 0))
    for row in rows:
        log = logger.info if row.passed else logger.warning
        log("check %s: %.6g (bound %.3g)", row.check, row.value, row.bound)
    return rows


def oracle_compare(
    spec: ProblemSpec, settings: SolverSettings, tree_steps: int, ns: Sequence[float]
) -> list[dict[str, float]]:
    """Penalized values from the mean-system solver and from the binomial tree."""
    validate(spec, settings)
    ric = solve_riccati(spec)
    rows = []
    p = None
    for n in ns:
        stage = solve_penalized(spec, ric, n, p_init=p, settings=settings)
        p = stage.p
        tree = tree_minimize(TreeProblem(tree_steps, n), spec)
        gap = abs(stage.value - tree.objective)
        bound = 0.05 * abs(stage.value) + 1e-3
        rows.append(
            {
                "n": n,
                "V_solver": stage.value,
                "V_tree": tree.objective,
                "gap": gap,
                "bound": bound,
                "passed": gap <= bound and tree.converged,
            }
        )
        logger.info("n=%.4g: solver %.10g, tree %.10g, gap %.3g", n, stage.value, tree.objective, gap)
    return rows


def _vector_columns(name: str, values: np.ndarray) -> dict[str, np.ndarray]:
    if values.shape[1] == 1:
        return {name: values[:, 0]}
    return {f"{name}_{j + 1}": values[:, j] for j in range(values.shape[1])}


def solution_frame(outcome: SolveOutcome) -> pd.DataFrame:
    spec, sol = outcome.spec, outcome.solution
    data = {"t": spec.grid.nodes, "m": sol.m.values, "p": sol.p.values}
    data.update(_vector_columns("K", outcome.ric.K.values))
    data.update(_vector_columns("k", sol.k.values))
    data["c"] = sol.mu.cumulative.values
    data["L"] = spec.L.values
    return pd.DataFrame(data)


def trace_frame(trace: PenaltyTrace) -> pd.DataFrame:
    frame = pd.DataFrame([row.model_dump() for row in trace.rows])
    return frame.rename(columns={"value": "V_n"})


def meanpath_frame(result: MCResult, spec: ProblemSpec) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "t": spec.grid.nodes,
            "mean": result.mean_path.values,
            "se": result.mean_path_se.values,
            "L": spec.L.values,
        }
    )


def cost_summary(result: MCResult, cfg: MCConfig, outcome: SolveOutcome) -> dict[str, float | int | bool]:
    return {
        "paths": result.paths,
        "seed": cfg.seed,
        "antithetic": cfg.antithetic,
        "cost_mean": result.cost_mean,
        "cost_se": result.cost_se,
        "terminal_second_moment": result.terminal_second_moment,
        "euler_moment_cost": euler_moment_cost(outcome.spec, outcome.policy).cost,
        "value_formula": outcome.report.value_formula,
    }


def cost_frame(result: MCResult, cfg: MCConfig, outcome: SolveOutcome) -> pd.DataFrame:
    return pd.DataFrame([cost_summary(result, cfg, outcome)])


def rows_frame(rows: Sequence[CheckRow] | Sequence[dict]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() if isinstance(r, CheckRow) else r for r in rows])


def write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("wrote %s (%d rows)", path, len(frame))
    return path
