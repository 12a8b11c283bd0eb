"""meanref-lq command line.

    meanref-lq <command> --problem FILE [--grid N] [--paths P] [--seed S]
               [--n0 X --ratio R --stages J] [--out DIR]

Artifacts are CSV files with a header row and 17 significant digits. Errors
are reported as one JSON line on stderr and mapped to the exit codes of
``meanref_lq.errors``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Sequence

from pydantic import ValidationError

from meanref_lq import pipeline
from meanref_lq.core import load_problem
from meanref_lq.errors import ConfigError, ConvergenceError, MeanRefError
from meanref_lq.montecarlo import MCConfig
from meanref_lq.schema import RunConfig, SolverSettings

logger = logging.getLogger(__name__)

COMMANDS = ("solve", "simulate", "verify", "sweep-n", "oracle-compare")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="meanref-lq",
        description="LQ stochastic control under the expected path constraint E[X_t] >= L_t.",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--problem", required=True, help="problem file (JSON)")
    parser.add_argument("--grid", type=int, default=None, help="override the number of time steps N")
    parser.add_argument("--out", default="out", help="output directory (default: out)")

    mc = parser.add_argument_group("Monte Carlo")
    mc.add_argument("--paths", type=int, default=20_000)
    mc.add_argument("--seed", type=int, default=0)
    mc.add_argument("--antithetic", action="store_true")
    mc.add_argument("--workers", type=int, default=None, help="threads (default: MEANREF_WORKERS or CPU count)")
    mc.add_argument("--no-monte-carlo", action="store_true", help="leave the Monte Carlo value out of report.txt")
    mc.add_argument("--trials", type=int, default=20, help="perturbations tried by verify")

    pen = parser.add_argument_group("penalty schedule")
    pen.add_argument("--n0", type=float, default=None)
    pen.add_argument("--ratio", type=float, default=None)
    pen.add_argument("--stages", type=int, default=None)
    pen.add_argument("--method", choices=("newton", "picard"), default=None)
    pen.add_argument("--damping", type=float, default=None)
    pen.add_argument("--tol-fp", type=float, default=None)
    pen.add_argument("--max-iter", type=int, default=None)
    pen.add_argument("--tol-feas", type=float, default=None)
    pen.add_argument("--tol-comp", type=float, default=None)
    pen.add_argument("--tol-pen", type=float, default=None)

    parser.add_argument("--tree-steps", type=int, default=10, help="binomial tree depth for oracle-compare")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {
        key: getattr(args, key)
        for key in ("n0", "ratio", "stages", "method", "damping", "tol_fp", "max_iter", "tol_feas", "tol_comp", "tol_pen")
        if getattr(args, key) is not None
    }
    try:
        return RunConfig(
            command=args.command,
            problem=args.problem,
            grid=args.grid,
            paths=args.paths,
            seed=args.seed,
            antithetic=args.antithetic,
            workers=args.workers,
            trials=args.trials,
            monte_carlo=not args.no_monte_carlo,
            tree_steps=args.tree_steps,
            solver=SolverSettings(**overrides),
            out=args.out,
        )
    except ValidationError as e:
        err = e.errors()[0]
        field = ".".join(str(p) for p in err["loc"]) or None
        where = f" {field}" if field else ""
        raise ConfigError(f"invalid option{where}: {err['msg']}", field=field) from e


def _report_error(err: MeanRefError) -> int:
    print(json.dumps(err.to_payload(), sort_keys=True), file=sys.stderr)
    return err.exit_code


def run(config: RunConfig) -> int:
    """Execute one command and write its artifacts; returns the exit code."""
    out = config.out
    try:
        spec = load_problem(config.problem, config.grid)
        settings = config.solver
        mc = MCConfig(
            paths=config.paths,
            seed=config.seed,
            grid=spec.grid,
            antithetic=config.antithetic,
            workers=config.workers,
        )

        if config.command == "sweep-n":
            trace = pipeline.sweep(spec, settings)
            pipeline.write_csv(pipeline.trace_frame(trace), out / "trace.csv")
            return 0

        if config.command == "oracle-compare":
            ns = settings.schedule()[:3]
            rows = pipeline.oracle_compare(spec, settings, config.tree_steps, ns)
            pipeline.write_csv(pipeline.rows_frame(rows), out / "compare.csv")
            return 0

        with_mc = config.command == "solve" and config.monte_carlo
        outcome = pipeline.solve(spec, settings, mc if with_mc else None)
        if config.command == "solve":
            pipeline.write_csv(pipeline.solution_frame(outcome), out / "solution.csv")
            (out / "report.txt").write_text(outcome.report.render(), encoding="utf-8")
        elif config.command == "simulate":
            result = pipeline.simulate(outcome, mc)
            pipeline.write_csv(pipeline.meanpath_frame(result, spec), out / "meanpath.csv")
            pipeline.write_csv(pipeline.cost_frame(result, mc, outcome), out / "cost.csv")
        elif config.command == "verify":
            rows = pipeline.verify(outcome, mc, config.trials, settings)
            pipeline.write_csv(pipeline.rows_frame(rows), out / "verify.csv")

        if not outcome.solution.converged:
            raise ConvergenceError(
                f"penalty schedule ended at n={outcome.solution.n_final:.4g} without meeting the tolerances",
                n_final=outcome.solution.n_final,
            )
        return 0
    except MeanRefError as e:
        return _report_error(e)
    except OSError as e:
        return _report_error(ConfigError(f"cannot write artifacts to {out}: {e}", field="out"))


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("MEANREF_LOG_LEVEL", "WARNING").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        config = config_from_args(args)
    except ConfigError as e:
        return _report_error(e)
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
