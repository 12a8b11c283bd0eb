"""Model Context Protocol tool server over the solve/simulate/sweep pipelines.

Tools take the problem document as a JSON object and never raise: failures come
back as {"error", "step", "exit_code", "trace"}. Set MEANREF_DEBUG_SAVE to keep
each request and its result as a JSON file in the working directory.
"""

from __future__ import annotations

import json
import logging
import os
import time
import traceback
from typing import Any, Callable

from mcp.server.fastmcp import FastMCP

from meanref_lq import pipeline
from meanref_lq.core import parse_problem, validate_spec
from meanref_lq.errors import MeanRefError
from meanref_lq.montecarlo import MCConfig
from meanref_lq.schema import SolverSettings

logger = logging.getLogger(__name__)

mcp = FastMCP(name="meanref-lq")


def _settings(**overrides: Any) -> SolverSettings:
    return SolverSettings(**{k: v for k, v in overrides.items() if v is not None})


def _save_debug(tool: str, problem: dict, result: dict) -> None:
    if not os.environ.get("MEANREF_DEBUG_SAVE"):
        return
    fn = f"meanref_debug_{tool}_{time.strftime('%Y%m%d-%H%M%S')}.json"
    try:
        with open(fn, "w", encoding="utf-8") as fh:
            json.dump({"problem": problem, "result": result}, fh, indent=2, default=str)
        logger.info("saved request and result to %s", fn)
    except Exception:
        logger.exception("failed to save debug payload")


def _guarded(tool: str, problem: dict, body: Callable[[], dict]) -> dict:
    log = logging.getLogger(f"mcp.tool.{tool}")
    start = time.time()
    log.info("starting %s", tool)
    try:
        result = body()
    except MeanRefError as e:
        log.exception("%s failed at step %s: %s", tool, e.step, e)
        result = e.to_payload()
        result["trace"] = traceback.format_exc()
    except Exception as e:
        log.exception("%s failed: %s", tool, e)
        result = {"error": f"{type(e).__name__}: {e}", "step": "run", "exit_code": 1, "trace": traceback.format_exc()}
    else:
        log.info("completed %s in %.3fs", tool, time.time() - start)
    _save_debug(tool, problem, result)
    return result


@mcp.tool()
def validate_problem(problem: dict, grid: int | None = None) -> dict:
    """Parse a problem document and report the assumption margins."""

    def body() -> dict:
        spec = parse_problem(problem, grid)
        settings = SolverSettings()
        report = validate_spec(spec, settings.delta, settings.epsilon)
        return {
            "passed": report.passed,
            "checks": [c.model_dump() for c in report.checks],
            "feasible_start": bool(spec.L.values[0] <= spec.x),
        }

    return _guarded("validate_problem", problem, body)


@mcp.tool()
def solve_problem(
    problem: dict,
    grid: int | None = None,
    n0: float | None = None,
    ratio: float | None = None,
    stages: int | None = None,
    paths: int | None = None,
    seed: int = 0,
) -> dict:
    """Solve the constrained problem: value, compensator diagnostics and the optimal paths.

    Give `paths` to add the Monte Carlo value to the report.
    """

    def body() -> dict:
        spec = parse_problem(problem, grid)
        mc = MCConfig(paths=paths, seed=seed, grid=spec.grid) if paths else None
        outcome = pipeline.solve(spec, _settings(n0=n0, ratio=ratio, stages=stages), mc)
        return {
            "report": outcome.report.model_dump(),
            "solution": pipeline.solution_frame(outcome).to_dict(orient="list"),
        }

    return _guarded("solve_problem", problem, body)


@mcp.tool()
def simulate_problem(
    problem: dict,
    paths: int = 10_000,
    seed: int = 0,
    antithetic: bool = False,
    grid: int | None = None,
) -> dict:
    """Monte Carlo cost and mean path of the optimal feedback."""

    def body() -> dict:
        spec = parse_problem(problem, grid)
        outcome = pipeline.solve(spec, SolverSettings())
        cfg = MCConfig(paths=paths, seed=seed, grid=spec.grid, antithetic=antithetic)
        result = pipeline.simulate(outcome, cfg)
        return {
            "cost": pipeline.cost_summary(result, cfg, outcome),
            "mean_path": pipeline.meanpath_frame(result, spec).to_dict(orient="list"),
        }

    return _guarded("simulate_problem", problem, body)


@mcp.tool()
def sweep_penalty(
    problem: dict,
    n0: float | None = None,
    ratio: float | None = None,
    stages: int | None = None,
    grid: int | None = None,
) -> dict:
    """Penalized values V_n over the whole schedule."""

    def body() -> dict:
        spec = parse_problem(problem, grid)
        trace = pipeline.sweep(spec, _settings(n0=n0, ratio=ratio, stages=stages))
        return {
            "rows": [row.model_dump() for row in trace.rows],
            "nondecreasing": trace.is_nondecreasing(),
        }

    return _guarded("sweep_penalty", problem, body)


def main() -> None:
    logging.basicConfig(
        level=os.environ.get("MEANREF_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    mcp.run(transport="stdio")


if __name__ == "__main__":
    main()
