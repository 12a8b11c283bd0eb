"""Exception hierarchy shared by the solver, the CLI and the tool server.

Every error knows the exit code the CLI reports and the pipeline step it
belongs to, and renders itself as the error dict returned by the tool server.
"""

from __future__ import annotations

from typing import Any


class MeanRefError(Exception):
    exit_code = 1
    step = "run"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_payload(self) -> dict[str, Any]:
        payload: dict[str, Any] = {
            "error": self.message,
            "step": self.step,
            "exit_code": self.exit_code,
        }
        payload.update({k: v for k, v in self.context.items() if v is not None})
        return payload


class ConfigError(MeanRefError):
    exit_code = 2
    step = "config"

    def __init__(self, message: str, field: str | None = None, **context: Any):
        super().__init__(message, field=field, **context)
        self.field = field


class ProblemError(ConfigError):
    step = "load"


class AssumptionError(MeanRefError):
    exit_code = 3
    step = "validate"

    def __init__(self, message: str, report: Any = None):
        failed = None
        if report is not None:
            failed = [c.name for c in report.checks if not c.passed]
        super().__init__(message, failed=failed)
        self.report = report


class SolverError(MeanRefError):
    exit_code = 4
    step = "solve"


class RiccatiError(SolverError):
    step = "riccati"


class ConvergenceError(SolverError):
    pass


class SimulationError(SolverError):
    step = "simulate"

    def __init__(self, message: str, path_index: int | None = None):
        super().__init__(message, path_index=path_index)
        self.path_index = path_index


class InfeasibleStartError(MeanRefError):
    exit_code = 5
    step = "validate"
