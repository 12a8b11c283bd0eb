"""Constrained mean problem: penalty loop for (m, p, mu) and value evaluation.

With the Riccati gain fixed, the feedback u = -K X - k leaves only the
deterministic offset k free, and completing the square gives

    J_n(u) = 1/2 P_0 x^2 + 1/2 int k^T S k dt + n/2 int (m - L)_-^2 dt,
    dm/dt = a m + w,   w = -B^T k,   a = A - B^T K.

Minimising over k with B^T k fixed gives k^T S k = w^2 / beta, beta = B^T S^{-1} B,
so the penalized stage is a scalar deterministic problem in w. It is discretized
with Crank-Nicolson dynamics and trapezoid quadrature; p is the scaled discrete
adjoint (p_N = 0) and the measure is carried by node masses

    dc_i = n h omega_i (m_i - L_i)_-        (omega_i trapezoid weights).

Its first-order conditions are the forward/backward sweeps

    forward:  m_{i+1} (1 - h a_{i+1}/2) = m_i (1 + h a_i/2) + h/2 (w_i + w_{i+1})
    backward: p_{i-1} = (p_i - dc_i) (1 + h a_{i-1}/2) / (1 - h a_i/2)

and the value formula 1/2 (P_0 x + p_0) x + 1/2 sum L_i dc_i holds exactly at
the fixed point.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from meanref_lq.core import (
    Compensator,
    GridFunction,
    ProblemSpec,
    complementarity_residual,
    rk4_sweep,
)
from meanref_lq.errors import ConfigError, InfeasibleStartError, SolverError
from meanref_lq.riccati import RiccatiSolution, closed_loop
from meanref_lq.schema import SolverSettings, StageRow

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class _MeanSystem:
    spec: ProblemSpec
    ric: RiccatiSolution
    a: np.ndarray
    beta: np.ndarray
    omega: np.ndarray

    @classmethod
    def build(cls, spec: ProblemSpec, ric: RiccatiSolution) -> "_MeanSystem":
        if ric.P.grid != spec.grid:
            raise ConfigError("Riccati solution and problem live on different grids", field="grid")
        a, beta = closed_loop(spec, ric)
        if np.max(np.abs(a)) * spec.grid.h >= 2.0:
            raise SolverError(f"grid too coarse for closed-loop rate {np.max(np.abs(a)):.3g}; increase N")
        if np.min(beta) <= 0:
            raise SolverError("mean-control weight B^T S^-1 B vanishes; B must not degenerate")
        return cls(spec, ric, a, beta, spec.grid.trapezoid_weights())

    @property
    def h(self) -> float:
        return self.spec.grid.h

    @property
    def fwd(self) -> np.ndarray:
        return 1.0 + 0.5 * self.h * self.a

    @property
    def bwd(self) -> np.ndarray:
        return 1.0 - 0.5 * self.h * self.a

    def forward(self, w: np.ndarray) -> np.ndarray:
        h, fwd, bwd = self.h, self.fwd, self.bwd
        m = np.empty_like(w)
        m[0] = self.spec.x
        for i in range(len(w) - 1):
            m[i + 1] = (m[i] * fwd[i] + 0.5 * h * (w[i] + w[i + 1])) / bwd[i + 1]
        return m

    def masses(self, m: np.ndarray, n: float) -> np.ndarray:
        return n * self.h * self.omega * np.maximum(self.spec.L.values - m, 0.0)

    def backward(self, masses: np.ndarray) -> np.ndarray:
        """Multipliers lam_1..lam_N of the dynamics for the given node masses."""
        fwd, bwd = self.fwd, self.bwd
        N = len(masses) - 1
        lam = np.empty(N + 2)
        lam[N + 1] = 0.0
        for i in range(N, 0, -1):
            lam[i] = (lam[i + 1] * fwd[i] + masses[i]) / bwd[i]
        return lam[1 : N + 1]

    def p_from_lam(self, lam: np.ndarray) -> np.ndarray:
        p = np.zeros(len(lam) + 1)
        p[:-1] = -lam * self.fwd[:-1]
        return p

    def lam_from_p(self, p: np.ndarray) -> np.ndarray:
        return -p[:-1] / self.fwd[:-1]

    def w_from_lam(self, lam: np.ndarray) -> np.ndarray:
        s = np.zeros(len(lam) + 1)
        s[1:] += lam
        s[:-1] += lam
        return self.beta * s / (2.0 * self.omega)

    def objective(self, w: np.ndarray, n: float) -> float:
        m = self.forward(w)
        short = np.maximum(self.spec.L.values - m, 0.0)
        return 0.5 * self.h * float(np.sum(self.omega * (w**2 / self.beta + n * short**2)))

    def gradient(self, w: np.ndarray, n: float) -> np.ndarray:
        lam = self.backward(self.masses(self.forward(w), n))
        s = np.zeros_like(w)
        s[1:] += lam
        s[:-1] += lam
        return self.h * (self.omega * w / self.beta - 0.5 * s)

    def picard_map(self, p: np.ndarray, n: float) -> np.ndarray:
        w = self.w_from_lam(self.lam_from_p(p))
        return self.p_from_lam(self.backward(self.masses(self.forward(w), n)))

    def kkt_solve(self, active: np.ndarray, n: float) -> np.ndarray:
        """Exact minimiser of the stage objective with the active set frozen."""
        N = self.spec.grid.N
        h, fwd, bwd, omega = self.h, self.fwd, self.bwd, self.omega
        L = self.spec.L.values
        iw = np.arange(N + 1)
        im = N + 1 + np.arange(N)  # m_1..m_N
        il = 2 * N + 1 + np.arange(N)  # lam_1..lam_N
        nodes = np.arange(1, N + 1)
        chi = active[1:].astype(float)

        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(np.asarray(r))
            cols.append(np.asarray(c))
            vals.append(np.broadcast_to(np.asarray(v, dtype=float), np.shape(r)))

        # stationarity in w_i
        put(iw, iw, h * omega / self.beta)
        put(iw[1:], il, -0.5 * h)
        put(iw[:-1], il, -0.5 * h)
        # stationarity in m_i
        put(im, im, n * h * omega[1:] * chi)
        put(im, il, bwd[1:])
        put(im[:-1], il[1:], -fwd[1 : N])
        # dynamics of step i-1 -> i
        put(il, im, bwd[1:])
        put(il[1:], im[:-1], -fwd[1:N])
        put(il, iw[:-1], -0.5 * h)
        put(il, iw[1:], -0.5 * h)

        size = 3 * N + 1
        K = sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
        )
        rhs = np.zeros(size)
        rhs[im] = n * h * omega[nodes] * chi * L[nodes]
        rhs[il[0]] = fwd[0] * self.spec.x
        z = spsolve(K, rhs)
        if not np.all(np.isfinite(z)):
            raise SolverError("singular active-set system in the mean problem")
        return z[: N + 1]


@dataclass(frozen=True, eq=False)
class PenalizedStage:
    """Fixed point of one penalty weight."""

    n: float
    m: GridFunction
    p: GridFunction
    k: GridFunction
    mu: Compensator
    Y0: float
    w: np.ndarray
    iterations: int
    residual: float
    converged: bool
    value: float
    direct_value: float
    penalty_mass: float


@dataclass(frozen=True, eq=False)
class MeanSolution:
    m: GridFunction
    p: GridFunction
    k: GridFunction
    mu: Compensator
    n_final: float
    Y0: float
    converged: bool = True

    @property
    def atom_start(self) -> float:
        """Mass of the jump c(0) at t = 0."""
        return float(self.mu.increments()[0])

    @property
    def first_cell_mass(self) -> float:
        """Mass on [0, h], the discrete trace of an atom at t = 0."""
        return float(self.mu.cumulative.values[1])

    @property
    def atom_end(self) -> float:
        return float(self.mu.increments()[-1])


@dataclass
class PenaltyTrace:
    rows: list[StageRow] = field(default_factory=list)

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.rows])

    @property
    def penalty_masses(self) -> np.ndarray:
        return np.array([r.penalty_mass for r in self.rows])

    def is_nondecreasing(self, tol: float = 0.0) -> bool:
        return bool(np.all(np.diff(self.values) >= -tol))


def _check_start(spec: ProblemSpec) -> None:
    if spec.L.values[0] > spec.x:
        raise InfeasibleStartError(
            f"initial state x={spec.x:.6g} is below the constraint floor L_0={spec.L.values[0]:.6g}"
        )


def _stage(system: _MeanSystem, n: float, w: np.ndarray, iterations: int, converged: bool) -> PenalizedStage:
    spec, ric = system.spec, system.ric
    grid = spec.grid
    m = system.forward(w)
    masses = system.masses(m, n)
    p = system.p_from_lam(system.backward(masses))
    residual = float(np.max(np.abs(system.picard_map(p, n) - p)))
    B, S = spec.B.values, ric.S.values
    k = -np.linalg.solve(S, B[..., None])[..., 0] * (w / system.beta)[:, None]
    P0 = float(ric.P.values[0])
    Y0 = P0 * spec.x + p[0]
    L = spec.L.values
    short = np.maximum(L - m, 0.0)
    penalty_mass = float(n * grid.h * np.sum(system.omega * short**2))
    value = 0.5 * Y0 * spec.x + 0.5 * float(np.dot(L, masses))
    direct = direct_value(spec, ric, GridFunction(grid, m), GridFunction(grid, k), n)
    return PenalizedStage(
        n=n,
        m=GridFunction(grid, m),
        p=GridFunction(grid, p),
        k=GridFunction(grid, k),
        mu=Compensator.from_masses(grid, masses),
        Y0=float(Y0),
        w=w,
        iterations=iterations,
        residual=residual,
        converged=converged,
        value=float(value),
        direct_value=float(direct),
        penalty_mass=penalty_mass,
    )


def solve_penalized(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    n: float,
    p_init: GridFunction | np.ndarray | None = None,
    damping: float | None = None,
    settings: SolverSettings | None = None,
) -> PenalizedStage:
    """Solve the penalized forward-backward system for one weight n >= 0."""
    settings = settings or SolverSettings()
    if n < 0:
        raise ConfigError(f"penalty weight must be nonnegative, got {n}", field="n")
    step = damping if damping is not None else settings.step_size()
    if not 0.0 < step <= 1.0:
        raise ConfigError(f"damping must lie in (0, 1], got {step}", field="damping")
    _check_start(spec)
    system = _MeanSystem.build(spec, ric)

    p = np.zeros(spec.grid.N + 1)
    if p_init is not None:
        p = np.array(p_init.values if isinstance(p_init, GridFunction) else p_init, dtype=float)
        p[-1] = 0.0
    w = system.w_from_lam(system.lam_from_p(p))

    converged = False
    best = (np.inf, w)
    iterations = 0
    with np.errstate(over="raise", invalid="raise"):
        try:
            for iterations in range(1, settings.max_iter + 1):
                if settings.method == "picard":
                    p_new = system.picard_map(p, n)
                    change = step * float(np.max(np.abs(p_new - p)))
                    p = (1.0 - step) * p + step * p_new
                    w = system.w_from_lam(system.lam_from_p(p))
                else:
                    w, change = _newton_step(system, w, n, step)
                logger.debug("n=%.4g iteration %d: change %.3e", n, iterations, change)
                if change < best[0]:
                    best = (change, w)
                if change <= settings.tol_fp:
                    converged = True
                    break
        except FloatingPointError as e:
            raise SolverError(f"non-finite values in the mean system at n={n:.4g}: {e}") from e

    if not converged:
        logger.warning("penalized stage n=%.4g did not converge in %d iterations", n, iterations)
        w = best[1]
    return _stage(system, n, w, iterations, converged)


def _newton_step(system: _MeanSystem, w: np.ndarray, n: float, step: float) -> tuple[np.ndarray, float]:
    m = system.forward(w)
    active = m < system.spec.L.values
    d = system.kkt_solve(active, n) - w
    phi0 = system.objective(w, n)
    slope = float(np.dot(system.gradient(w, n), d))
    slack = 1e-14 * (1.0 + abs(phi0))
    s = step
    while system.objective(w + s * d, n) > phi0 + 1e-4 * s * min(slope, 0.0) + slack and s > 1e-12:
        s *= 0.5
    w_new = w + s * d
    p_old = system.p_from_lam(system.backward(system.masses(m, n)))
    p_new = system.p_from_lam(system.backward(system.masses(system.forward(w_new), n)))
    return w_new, float(np.max(np.abs(p_new - p_old)))


def solve_constrained(
    spec: ProblemSpec,
    ric: RiccatiSolution,
    schedule: Sequence[float] | None = None,
    settings: SolverSettings | None = None,
) -> tuple[MeanSolution, PenaltyTrace]:
    """Run the penalty schedule with warm starts and build the compensator."""
    settings = settings or SolverSettings()
    schedule = list(schedule) if schedule is not None else settings.schedule()
    if not schedule or np.any(np.diff(schedule) <= 0) or schedule[0] <= 0:
        raise ConfigError("penalty schedule must be positive and strictly increasing", field="schedule")
    _check_start(spec)

    trace = PenaltyTrace()
    L_scale = 1.0 + spec.L.sup()
    p = None
    stage = None
    met = False
    for n in schedule:
        stage = solve_penalized(spec, ric, n, p_init=p, settings=settings)
        p = stage.p
        trace.rows.append(
            StageRow(
                n=n,
                value=stage.value,
                penalty_mass=stage.penalty_mass,
                iterations=stage.iterations,
                residual=stage.residual,
                converged=stage.converged,
            )
        )
        comp = complementarity_residual(stage.m, spec.L, stage.mu)
        V_scale = 1.0 + abs(stage.value)
        met = (
            comp.feasibility_defect <= settings.tol_feas * L_scale
            and abs(comp.residual) <= settings.tol_comp * V_scale
            and stage.penalty_mass <= settings.tol_pen * V_scale
        )
        logger.info(
            "stage n=%.4g: V_n=%.12g penalty=%.3e defect=%.3e iterations=%d",
            n, stage.value, stage.penalty_mass, comp.feasibility_defect, stage.iterations,
        )
        if met and settings.stop_early:
            break

    if not met:
        logger.warning("penalty schedule exhausted before meeting the feasibility, complementarity and penalty tolerances")
    sol = MeanSolution(
        m=stage.m,
        p=stage.p,
        k=stage.k,
        mu=stage.mu,
        n_final=stage.n,
        Y0=stage.Y0,
        converged=bool(met and stage.converged),
    )
    return sol, trace


def optimal_value(sol: MeanSolution | PenalizedStage, spec: ProblemSpec) -> float:
    """1/2 Y0 x + 1/2 int L dmu; on a penalized stage this is the penalized value."""
    return 0.5 * sol.Y0 * spec.x + 0.5 * sol.mu.integrate(spec.L.values)


def direct_value(
    spec: ProblemSpec, ric: RiccatiSolution, m: GridFunction, k: GridFunction, n: float = 0.0
) -> float:
    """1/2 P_0 x^2 + 1/2 int k^T S k dt + n/2 int (m - L)_-^2 dt by trapezoid quadrature."""
    omega = spec.grid.trapezoid_weights()
    h = spec.grid.h
    kSk = np.einsum("tl,tlj,tj->t", k.values, ric.S.values, k.values)
    short = np.maximum(spec.L.values - m.values, 0.0)
    P0 = float(ric.P.values[0])
    return 0.5 * P0 * spec.x**2 + 0.5 * h * float(np.sum(omega * (kSk + n * short**2)))


def cost_via_moments(spec: ProblemSpec, ric: RiccatiSolution, sol: MeanSolution | PenalizedStage) -> float:
    """Cost of u = -K X - k from the closed first/second moment equations."""
    A = spec.A.refined()
    B = spec.B.refined()
    C = spec.C.refined()
    D = spec.D.refined()
    Q = spec.Q.refined()
    R = spec.R.refined()
    K = ric.K.refined()
    k = sol.k.refined()
    BK = np.einsum("jl,jl->j", B, K)
    Bk = np.einsum("jl,jl->j", B, k)
    CDK = C - np.einsum("jml,jl->jm", D, K)
    Dk = np.einsum("jml,jl->jm", D, k)
    cdk2 = np.einsum("jm,jm->j", CDK, CDK)
    cross = np.einsum("jm,jm->j", CDK, Dk)
    dk2 = np.einsum("jm,jm->j", Dk, Dk)
    KRK = np.einsum("jl,jlk,jk->j", K, R, K)
    kRK = np.einsum("jl,jlk,jk->j", k, R, K)
    kRk = np.einsum("jl,jlk,jk->j", k, R, k)

    def rhs(j: int, y: np.ndarray) -> np.ndarray:
        m, v, _ = y
        dm = (A[j] - BK[j]) * m - Bk[j]
        dv = (2.0 * (A[j] - BK[j]) + cdk2[j]) * v - 2.0 * (Bk[j] + cross[j]) * m + dk2[j]
        dJ = 0.5 * (Q[j] * v + KRK[j] * v + 2.0 * kRK[j] * m + kRk[j])
        return np.array([dm, dv, dJ])

    with np.errstate(over="raise", invalid="raise"):
        try:
            y = rk4_sweep(rhs, np.array([spec.x, spec.x**2, 0.0]), spec.grid)
        except FloatingPointError as e:
            raise SolverError(f"moment equations blew up: {e}") from e
    return float(y[-1, 2] + 0.5 * spec.G * y[-1, 1])
