"""Brute-force references at desk scale.

The binomial tree replaces each Brownian increment by +-sqrt(h) with probability
1/2 and optimises one control per node. Under the Euler map the tree matches the
first two moments of the Gaussian increments exactly, so for linear feedback its
cost equals the exact moment recursion of the Euler scheme (``euler_moment_cost``).
Node j at step i has children 2j (+sqrt(h)) and 2j+1 (-sqrt(h)).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from meanref_lq.core import GridFunction, ProblemSpec, TimeGrid
from meanref_lq.errors import ConfigError, SolverError
from meanref_lq.montecarlo import FeedbackPolicy

logger = logging.getLogger(__name__)

MAX_TREE_STEPS = 12


@dataclass(frozen=True)
class TreeProblem:
    steps: int
    n: float = 0.0

    def __post_init__(self) -> None:
        if not 1 <= self.steps <= MAX_TREE_STEPS:
            raise ConfigError(f"tree steps must lie in 1..{MAX_TREE_STEPS}, got {self.steps}", field="tree_steps")
        if self.n < 0:
            raise ConfigError(f"penalty weight must be nonnegative, got {self.n}", field="n")

    def grid(self, spec: ProblemSpec) -> TimeGrid:
        return TimeGrid(spec.grid.T, self.steps)

    def probabilities(self, i: int) -> np.ndarray:
        return np.full(2**i, 0.5**i)

    def zero_controls(self, spec: ProblemSpec) -> list[np.ndarray]:
        return [np.zeros((2**i, spec.control_dim)) for i in range(self.steps)]


@dataclass(frozen=True)
class _Tree:
    """Coefficients sampled on the tree grid."""

    h: float
    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    d: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    G: float
    L: np.ndarray
    x: float
    n: float

    @classmethod
    def of(cls, tp: TreeProblem, spec: ProblemSpec) -> "_Tree":
        if spec.noise_dim != 1:
            raise ConfigError(f"the tree needs a single Brownian driver, got m={spec.noise_dim}", field="m")
        s = spec.on_grid(tp.grid(spec))
        return cls(
            h=s.grid.h,
            A=s.A.values,
            B=s.B.values,
            c=s.C.values[:, 0],
            d=s.D.values[:, 0, :],
            Q=s.Q.values,
            R=s.R.values,
            G=s.G,
            L=s.L.values,
            x=s.x,
            n=tp.n,
        )

    @property
    def steps(self) -> int:
        return len(self.A) - 1

    def check(self, controls: Sequence[np.ndarray]) -> None:
        if len(controls) != self.steps:
            raise ConfigError(f"expected controls for {self.steps} steps, got {len(controls)}", field="controls")
        l = self.B.shape[1]
        for i, u in enumerate(controls):
            if np.shape(u) != (2**i, l):
                raise ConfigError(f"controls at step {i} have shape {np.shape(u)}, expected {(2**i, l)}", field="controls")

    def child_states(self, i: int, X: np.ndarray, u: np.ndarray) -> np.ndarray:
        h = self.h
        base = X + h * (self.A[i] * X + u @ self.B[i])
        jump = np.sqrt(h) * (self.c[i] * X + u @ self.d[i])
        return np.stack([base + jump, base - jump], axis=1).reshape(-1)

    def states(self, controls: Sequence[np.ndarray]) -> list[np.ndarray]:
        X = [np.array([self.x])]
        for i, u in enumerate(controls):
            X.append(self.child_states(i, X[i], np.asarray(u, dtype=float)))
        return X

    def shortfalls(self, X: list[np.ndarray]) -> np.ndarray:
        """(E[X_i] - L_i)_- for i = 1..N."""
        means = np.array([Xi.mean() for Xi in X[1:]])
        return np.maximum(self.L[1:] - means, 0.0)

    def objective(self, controls: Sequence[np.ndarray]) -> float:
        X = self.states(controls)
        h = self.h
        total = 0.0
        for i, u in enumerate(controls):
            uRu = np.einsum("jl,lk,jk->j", u, self.R[i], u)
            total += 0.5 * h * (self.Q[i] * np.mean(X[i] ** 2) + np.mean(uRu))
        total += 0.5 * self.G * np.mean(X[-1] ** 2)
        total += 0.5 * self.n * h * float(np.sum(self.shortfalls(X) ** 2))
        return float(total)

    def adjoint(self, controls: Sequence[np.ndarray]) -> tuple[list[np.ndarray], float]:
        """Gradient with respect to every node control, and dJ/dx at the root."""
        X = self.states(controls)
        h, sq, N = self.h, np.sqrt(self.h), self.steps
        short = self.shortfalls(X)
        lam = self.G * X[N] / 2**N - self.n * h * short[N - 1] / 2**N
        grads: list[np.ndarray] = [np.empty(0)] * N
        for i in range(N - 1, -1, -1):
            u = np.asarray(controls[i], dtype=float)
            up, down = lam[0::2], lam[1::2]
            s, t = up + down, up - down
            grads[i] = (
                h * (u @ self.R[i]) / 2**i
                + h * s[:, None] * self.B[i]
                + sq * t[:, None] * self.d[i]
            )
            lam = h * self.Q[i] * X[i] / 2**i + s * (1.0 + h * self.A[i]) + sq * t * self.c[i]
            if i >= 1:
                lam = lam - self.n * h * short[i - 1] / 2**i
        return grads, float(lam[0])


def tree_objective(tp: TreeProblem, spec: ProblemSpec, controls: Sequence[np.ndarray]) -> float:
    tree = _Tree.of(tp, spec)
    tree.check(controls)
    return tree.objective(controls)


def tree_gradient(tp: TreeProblem, spec: ProblemSpec, controls: Sequence[np.ndarray]) -> list[np.ndarray]:
    tree = _Tree.of(tp, spec)
    tree.check(controls)
    return tree.adjoint(controls)[0]


def tree_root_adjoint(tp: TreeProblem, spec: ProblemSpec, controls: Sequence[np.ndarray]) -> float:
    """Y_0 = dJ/dx at the root for fixed node controls.

    At the tree optimum J_n = 1/2 Y_0 x + n/2 sum_i h (E[X_i] - L_i)_- L_i.
    """
    tree = _Tree.of(tp, spec)
    tree.check(controls)
    return tree.adjoint(controls)[1]


@dataclass(frozen=True)
class TreeSolution:
    controls: list[np.ndarray]
    objective: float
    iterations: int
    converged: bool
    gradient_norm: float


def _inner(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> float:
    return float(sum(np.vdot(x, y) for x, y in zip(a, b)))


def tree_minimize(
    tp: TreeProblem,
    spec: ProblemSpec,
    init: Sequence[np.ndarray] | None = None,
    tol: float = 1e-8,
    max_iter: int = 50_000,
) -> TreeSolution:
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    Directions and norms use the probability-weighted metric (weight h 2^-i at
    step i), so the gradient norm is the L2(dt x P) norm.
    """
    tree = _Tree.of(tp, spec)
    u = [np.array(c, dtype=float) for c in (init if init is not None else tp.zero_controls(spec))]
    tree.check(u)
    weights = [tree.h / 2**i for i in range(tree.steps)]

    J = tree.objective(u)
    g = tree.adjoint(u)[0]
    d = [gi / w for gi, w in zip(g, weights)]
    step = 1.0 / (1.0 + float(np.max(np.abs(tree.R))))
    converged = False
    norm = np.sqrt(max(_inner(g, d), 0.0))
    it = 0
    for it in range(1, max_iter + 1):
        if norm <= tol * (1.0 + abs(J)):
            converged = True
            break
        slope = _inner(g, d)
        s = step
        while True:
            trial = [ui - s * di for ui, di in zip(u, d)]
            J_trial = tree.objective(trial)
            if J_trial <= J - 1e-4 * s * slope or s < 1e-16:
                break
            s *= 0.5
        g_new = tree.adjoint(trial)[0]
        du = [a - b for a, b in zip(trial, u)]
        dg = [a - b for a, b in zip(g_new, g)]
        curv = _inner(du, dg)
        step = sum(w * float(np.vdot(x, x)) for w, x in zip(weights, du)) / curv if curv > 0 else 2.0 * s
        u, g, J = trial, g_new, J_trial
        d = [gi / w for gi, w in zip(g, weights)]
        norm = np.sqrt(max(_inner(g, d), 0.0))
        logger.debug("tree iteration %d: J=%.15g |grad|=%.3e", it, J, norm)
    if not converged:
        logger.warning("tree descent hit the iteration cap (%d) with gradient norm %.3e", max_iter, norm)
    logger.info("tree optimum on %d steps at n=%.4g: J=%.12g after %d iterations", tree.steps, tp.n, J, it)
    return TreeSolution(controls=u, objective=J, iterations=it, converged=converged, gradient_norm=float(norm))


def _policy_on(policy: FeedbackPolicy, grid: TimeGrid) -> tuple[np.ndarray, np.ndarray]:
    return policy.K.resample(grid).values, policy.k.resample(grid).values


def tree_feedback_controls(tp: TreeProblem, spec: ProblemSpec, policy: FeedbackPolicy) -> list[np.ndarray]:
    """Node controls produced by running the affine feedback on the tree."""
    tree = _Tree.of(tp, spec)
    K, k = _policy_on(policy, tp.grid(spec))
    X = np.array([tree.x])
    controls = []
    for i in range(tree.steps):
        u = -X[:, None] * K[i] - k[i]
        controls.append(u)
        X = tree.child_states(i, X, u)
    return controls


@dataclass(frozen=True)
class EulerRiccati:
    Pi: np.ndarray
    K: np.ndarray


def euler_riccati(spec: ProblemSpec) -> EulerRiccati:
    """Exact backward recursion for the unconstrained Euler scheme on the problem grid."""
    N, h = spec.grid.N, spec.grid.h
    A, B, C, D = spec.A.values, spec.B.values, spec.C.values, spec.D.values
    Q, R = spec.Q.values, spec.R.values
    Pi = np.empty(N + 1)
    K = np.empty((N + 1, spec.control_dim))
    Pi[N] = spec.G
    K[N] = 0.0
    for i in range(N - 1, -1, -1):
        P = Pi[i + 1]
        g = (1.0 + h * A[i]) * B[i] + D[i].T @ C[i]
        M = R[i] + P * (h * np.outer(B[i], B[i]) + D[i].T @ D[i])
        try:
            Mg = np.linalg.solve(M, g)
        except np.linalg.LinAlgError as e:
            raise SolverError(f"singular control weight in the Euler recursion at step {i}") from e
        K[i] = P * Mg
        Pi[i] = h * Q[i] + P * ((1.0 + h * A[i]) ** 2 + h * float(C[i] @ C[i])) - h * P * P * float(g @ Mg)
    return EulerRiccati(Pi=Pi, K=K)


@dataclass(frozen=True)
class EulerMoments:
    cost: float
    mean: np.ndarray
    second_moment: np.ndarray


def euler_moment_cost(spec: ProblemSpec, policy: FeedbackPolicy, n: float = 0.0) -> EulerMoments:
    """Expected cost of the Euler scheme under u = -K X - k, plus the mean penalty at weight n.

    Costs use left-endpoint quadrature exactly as the Monte Carlo estimator does.
    """
    if policy.grid != spec.grid:
        raise ConfigError("policy lives on a different grid than the problem", field="policy")
    N, h = spec.grid.N, spec.grid.h
    A, B, C, D = spec.A.values, spec.B.values, spec.C.values, spec.D.values
    Q, R = spec.Q.values, spec.R.values
    K, k = policy.K.values, policy.k.values
    m = np.empty(N + 1)
    v = np.empty(N + 1)
    m[0], v[0] = spec.x, spec.x**2
    cost = 0.0
    for i in range(N):
        alpha = 1.0 + h * (A[i] - B[i] @ K[i])
        beta = -h * (B[i] @ k[i])
        gamma = C[i] - D[i] @ K[i]
        eta = -(D[i] @ k[i])
        cost += 0.5 * h * (Q[i] * v[i] + (K[i] @ R[i] @ K[i]) * v[i] + 2.0 * (k[i] @ R[i] @ K[i]) * m[i] + k[i] @ R[i] @ k[i])
        m[i + 1] = alpha * m[i] + beta
        v[i + 1] = (
            alpha**2 * v[i] + 2.0 * alpha * beta * m[i] + beta**2
            + h * ((gamma @ gamma) * v[i] + 2.0 * (gamma @ eta) * m[i] + eta @ eta)
        )
    cost += 0.5 * spec.G * v[N]
    short = np.maximum(spec.L.values[1:] - m[1:], 0.0)
    cost += 0.5 * n * h * float(np.sum(short**2))
    return EulerMoments(cost=float(cost), mean=m, second_moment=v)


def distance_bruteforce(X: GridFunction, candidates: Iterable[np.ndarray]) -> float:
    """Smallest sup-distance from X to the given nonnegative candidates."""
    best = np.inf
    for Y in candidates:
        Y = np.asarray(Y, dtype=float)
        if np.any(Y < 0):
            raise ValueError("candidates must be nonnegative")
        best = min(best, float(np.max(np.abs(X.values - Y))))
    return best
