"""Backward Riccati equation behind the decoupling Y = P X + p.

Substituting the ansatz into the reflected system and matching the diffusion
(Z = P (C X + D u)) and drift terms leaves

    dP/dt = -[2 A P + |C|^2 P + Q - P^2 g^T S^{-1} g],   P_T = G,
    g = B + D^T C,   S = R + P D^T D,   K = S^{-1} g P,

while the offset p and the measure are handled by the mean system in
``obstacle``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from meanref_lq.core import GridFunction, ProblemSpec, rk4_sweep
from meanref_lq.errors import RiccatiError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P: GridFunction
    K: GridFunction
    S: GridFunction


def _drift_gain(B: np.ndarray, C: np.ndarray, D: np.ndarray) -> np.ndarray:
    return B + np.einsum("...ml,...m->...l", D, C)


def solve_riccati(spec: ProblemSpec) -> RiccatiSolution:
    grid = spec.grid
    A = spec.A.refined()
    Q = spec.Q.refined()
    R = spec.R.refined()
    C = spec.C.refined()
    D = spec.D.refined()
    g = _drift_gain(spec.B.refined(), C, D)
    DtD = np.einsum("jml,jmk->jlk", D, D)
    C2 = np.einsum("jm,jm->j", C, C)

    def rhs(j: int, P: np.ndarray) -> np.ndarray:
        S = R[j] + P * DtD[j]
        try:
            Sg = cho_solve(cho_factor(S), g[j])
        except (LinAlgError, ValueError) as e:
            raise RiccatiError(f"S lost positive definiteness at t={j * grid.h / 2:.6g} (P={float(P):.6g})") from e
        return -(2.0 * A[j] * P + C2[j] * P + Q[j] - P * P * np.dot(g[j], Sg))

    with np.errstate(over="raise", invalid="raise"):
        try:
            P = rk4_sweep(rhs, np.float64(spec.G), grid, reverse=True)
        except FloatingPointError as e:
            raise RiccatiError(f"Riccati solution blew up: {e}") from e
    if not np.all(np.isfinite(P)):
        raise RiccatiError("Riccati solution has non-finite values")
    P[-1] = spec.G

    D_n = spec.D.values
    S = spec.R.values + P[:, None, None] * np.einsum("tml,tmk->tlk", D_n, D_n)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as e:
        raise RiccatiError("S is not positive definite at some node") from e
    g_n = _drift_gain(spec.B.values, spec.C.values, D_n)
    K = np.linalg.solve(S, (g_n * P[:, None])[..., None])[..., 0]
    logger.info("solved Riccati on %d steps: P0=%.10g, max|K|=%.4g", grid.N, P[0], np.abs(K).max())
    return RiccatiSolution(P=GridFunction(grid, P), K=GridFunction(grid, K), S=GridFunction(grid, S))


def gain_at(sol: RiccatiSolution, t: float) -> np.ndarray:
    return np.atleast_1d(sol.K.at(t))


def closed_loop(spec: ProblemSpec, ric: RiccatiSolution) -> tuple[np.ndarray, np.ndarray]:
    """Nodal closed-loop drift a = A - B^T K and mean-control weight beta = B^T S^{-1} B."""
    B = spec.B.values
    a = spec.A.values - np.einsum("tl,tl->t", B, ric.K.values)
    SinvB = np.linalg.solve(ric.S.values, B[..., None])[..., 0]
    beta = np.einsum("tl,tl->t", B, SinvB)
    return a, beta
