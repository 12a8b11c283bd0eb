"""Euler-Maruyama Monte Carlo for affine feedback policies.

Noise is drawn from counter-based Philox streams keyed by (seed, stream index),
one stream per path (per antithetic pair when ``antithetic`` is set). Streams
are grouped into fixed chunks and chunk statistics are merged in chunk order,
so a result depends on (seed, paths, grid, chunk_size) only and never on the
number of worker threads.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from meanref_lq.core import Compensator, GridFunction, ProblemSpec, TimeGrid
from meanref_lq.errors import ConfigError, SimulationError
from meanref_lq.schema import FuzzReport

logger = logging.getLogger(__name__)

_SEED_LIMIT = 2**64


@dataclass(frozen=True, eq=False)
class FeedbackPolicy:
    """u_t = -K_t X_t - k_t."""

    K: GridFunction
    k: GridFunction

    def __post_init__(self) -> None:
        if self.K.grid != self.k.grid:
            raise ConfigError("K and k live on different grids", field="policy")
        if self.K.shape != self.k.shape or len(self.K.shape) != 1:
            raise ConfigError(f"K and k must be vectors of one size, got {self.K.shape} and {self.k.shape}", field="policy")

    @property
    def grid(self) -> TimeGrid:
        return self.K.grid

    @classmethod
    def from_solution(cls, ric, sol) -> "FeedbackPolicy":
        return cls(K=ric.K, k=sol.k)

    @classmethod
    def zero(cls, grid: TimeGrid, control_dim: int = 1) -> "FeedbackPolicy":
        zero = GridFunction.constant(grid, np.zeros(control_dim))
        return cls(K=zero, k=zero)

    def shifted(self, dK: np.ndarray, dk: np.ndarray) -> "FeedbackPolicy":
        return FeedbackPolicy(
            K=GridFunction(self.grid, self.K.values + dK),
            k=GridFunction(self.grid, self.k.values + dk),
        )

    def control(self, i: int, X: np.ndarray) -> np.ndarray:
        return -X[:, None] * self.K.values[i] - self.k.values[i]


@dataclass(frozen=True)
class MCConfig:
    paths: int
    seed: int
    grid: TimeGrid
    antithetic: bool = False
    chunk_size: int = 1024
    workers: int | None = None

    def __post_init__(self) -> None:
        if self.paths < 2:
            raise ConfigError(f"need at least 2 paths for standard errors, got {self.paths}", field="paths")
        if not 0 <= self.seed < _SEED_LIMIT:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed}", field="seed")
        if self.antithetic and self.paths % 2:
            raise ConfigError(f"antithetic sampling needs an even path count, got {self.paths}", field="paths")
        if self.streams < 2:
            raise ConfigError("antithetic sampling needs at least 2 pairs (4 paths) for standard errors", field="paths")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be positive", field="chunk_size")

    @property
    def streams(self) -> int:
        return self.paths // 2 if self.antithetic else self.paths

    def resolved_workers(self) -> int:
        if self.workers:
            return self.workers
        env = os.environ.get("MEANREF_WORKERS")
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                logger.warning("ignoring non-integer MEANREF_WORKERS=%r", env)
        return min(8, os.cpu_count() or 1)


@dataclass(frozen=True, eq=False)
class MCResult:
    cost_mean: float
    cost_se: float
    mean_path: GridFunction
    mean_path_se: GridFunction
    terminal_second_moment: float
    paths: int


@dataclass
class _Moments:
    """Running count, mean and centred sum of squares of per-sample feature vectors."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def of(cls, samples: np.ndarray) -> "_Moments":
        mean = samples.mean(axis=0)
        return cls(len(samples), mean, ((samples - mean) ** 2).sum(axis=0))

    def merge(self, other: "_Moments") -> "_Moments":
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return _Moments(n, mean, m2)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


def _increments(cfg: MCConfig, noise_dim: int, first: int, last: int) -> np.ndarray:
    """Brownian increments for streams [first, last), shape (paths, N, m)."""
    N, h = cfg.grid.N, cfg.grid.h
    draws = []
    for s in range(first, last):
        rng = np.random.Generator(np.random.Philox(key=np.array([cfg.seed, s], dtype=np.uint64)))
        z = rng.standard_normal((N, noise_dim))
        draws.append(z)
        if cfg.antithetic:
            draws.append(-z)
    return np.sqrt(h) * np.stack(draws)


def _euler(
    spec: ProblemSpec,
    dW: np.ndarray,
    control: Callable[[int, np.ndarray], np.ndarray],
    first_path: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """States (paths, N+1), controls (paths, N, l) and left-endpoint costs (paths,)."""
    N, h = spec.grid.N, spec.grid.h
    A, B, C, D = spec.A.values, spec.B.values, spec.C.values, spec.D.values
    Q, R = spec.Q.values, spec.R.values
    n_paths = dW.shape[0]
    X = np.empty((n_paths, N + 1))
    U = np.empty((n_paths, N, spec.control_dim))
    cost = np.zeros(n_paths)
    X[:, 0] = spec.x
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(N):
            x = X[:, i]
            u = control(i, x)
            U[:, i] = u
            cost += 0.5 * h * (Q[i] * x * x + np.einsum("pl,lk,pk->p", u, R[i], u))
            drift = A[i] * x + u @ B[i]
            vol = x[:, None] * C[i] + u @ D[i].T
            X[:, i + 1] = x + drift * h + np.einsum("pm,pm->p", vol, dW[:, i])
        cost += 0.5 * spec.G * X[:, N] ** 2
    bad = ~(np.isfinite(cost) & np.all(np.isfinite(X), axis=1))
    if bad.any():
        idx = first_path + int(np.argmax(bad))
        raise SimulationError(f"trajectory {idx} left the floating-point range", path_index=idx)
    return X, U, cost


def _check_policy(spec: ProblemSpec, cfg: MCConfig, *policies: FeedbackPolicy) -> None:
    if cfg.grid != spec.grid:
        raise ConfigError("Monte Carlo grid differs from the problem grid", field="grid")
    for policy in policies:
        if policy.grid != spec.grid:
            raise ConfigError("policy lives on a different grid than the problem", field="policy")
        if policy.K.shape != (spec.control_dim,):
            raise ConfigError(f"policy has control size {policy.K.shape}, expected ({spec.control_dim},)", field="policy")


def _estimate(
    spec: ProblemSpec,
    cfg: MCConfig,
    features: Callable[[np.ndarray, int], np.ndarray],
) -> _Moments:
    """Mean and spread of per-stream features, reduced chunk by chunk in order.

    ``features(dW, first_path)`` maps the increments of one chunk to a
    (paths, d) array; antithetic partners are averaged before reduction.
    """
    streams = cfg.streams
    bounds = [(s, min(s + cfg.chunk_size, streams)) for s in range(0, streams, cfg.chunk_size)]
    per_stream = 2 if cfg.antithetic else 1

    def run(bound: tuple[int, int]) -> _Moments:
        first, last = bound
        dW = _increments(cfg, spec.noise_dim, first, last)
        f = features(dW, first * per_stream)
        if cfg.antithetic:
            f = f.reshape(last - first, 2, -1).mean(axis=1)
        return _Moments.of(f)

    workers = min(cfg.resolved_workers(), len(bounds))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, bounds))
    else:
        parts = [run(b) for b in bounds]
    total = parts[0]
    for part in parts[1:]:
        total = total.merge(part)
    logger.info("reduced %d paths in %d chunks on %d worker(s)", cfg.paths, len(bounds), workers)
    return total


def simulate(spec: ProblemSpec, policy: FeedbackPolicy, cfg: MCConfig) -> MCResult:
    _check_policy(spec, cfg, policy)

    def features(dW: np.ndarray, first: int) -> np.ndarray:
        X, _, cost = _euler(spec, dW, policy.control, first)
        return np.column_stack([cost, X, X[:, -1] ** 2])

    stats = _estimate(spec, cfg, features)
    se = stats.se
    N = spec.grid.N
    return MCResult(
        cost_mean=float(stats.mean[0]),
        cost_se=float(se[0]),
        mean_path=GridFunction(spec.grid, stats.mean[1 : N + 2]),
        mean_path_se=GridFunction(spec.grid, se[1 : N + 2]),
        terminal_second_moment=float(stats.mean[-1]),
        paths=cfg.paths,
    )


def _quadratic_distance(spec: ProblemSpec, dX: np.ndarray, dU: np.ndarray) -> np.ndarray:
    h, N = spec.grid.h, spec.grid.N
    Q, R = spec.Q.values[:N], spec.R.values[:N]
    running = Q * dX[:, :N] ** 2 + np.einsum("pil,ilk,pik->pi", dU, R, dU)
    return h * running.sum(axis=1) + spec.G * dX[:, N] ** 2


def parallelogram_check(
    spec: ProblemSpec, u_policy: FeedbackPolicy, v_policy: FeedbackPolicy, cfg: MCConfig
) -> tuple[float, float, float]:
    """J(u) + J(v) - 2 J(mid) against 1/4 E[distance^2] under common noise.

    The midpoint control is the pathwise average of the two control processes,
    which is adapted; its state is then the average of the two states.
    """
    _check_policy(spec, cfg, u_policy, v_policy)

    def features(dW: np.ndarray, first: int) -> np.ndarray:
        Xu, Uu, Ju = _euler(spec, dW, u_policy.control, first)
        Xv, Uv, Jv = _euler(spec, dW, v_policy.control, first)
        U_mid = 0.5 * (Uu + Uv)
        _, _, Jm = _euler(spec, dW, lambda i, x: U_mid[:, i], first)
        lhs = Ju + Jv - 2.0 * Jm
        rhs = 0.25 * _quadratic_distance(spec, Xu - Xv, Uu - Uv)
        return np.column_stack([lhs, rhs])

    mean = _estimate(spec, cfg, features).mean
    lhs, rhs = float(mean[0]), float(mean[1])
    return lhs, rhs, lhs - rhs


def _smooth_bumps(rng: np.random.Generator, grid: TimeGrid, size: int, modes: int = 3) -> np.ndarray:
    """Random sums of sine modes vanishing at both ends, shape (N+1, size)."""
    s = grid.nodes / grid.T
    amp = rng.standard_normal((modes, size)) / np.arange(1, modes + 1)[:, None]
    basis = np.sin(np.pi * np.outer(s, np.arange(1, modes + 1)))
    return basis @ amp


def verification_fuzz(
    spec: ProblemSpec,
    optimal: FeedbackPolicy,
    trials: int,
    cfg: MCConfig,
    scale: float = 0.2,
) -> FuzzReport:
    """Compare the optimal policy against random smooth perturbations under common noise.

    Each perturbation moves the offset k by a strictly positive lift so that the
    mean is pushed up, plus a zero-mean bump on K and k. Perturbations whose simulated mean minus two
    standard errors drops below L are counted as inadmissible and skipped.
    """
    _check_policy(spec, cfg, optimal)
    grid, l = spec.grid, spec.control_dim
    N = grid.N
    B = spec.B.values
    B_dir = B / np.einsum("tl,tl->t", B, B)[:, None]
    K_scale = 1.0 + optimal.K.sup()
    k_scale = 1.0 + optimal.k.sup()

    admissible = inadmissible = violations = 0
    gaps: list[float] = []
    gaps_in_se: list[float] = []
    for trial in range(trials):
        # separate entropy from the path streams
        rng = np.random.default_rng((cfg.seed, trial, 1))
        lift = 0.5 + np.abs(_smooth_bumps(rng, grid, 1))
        dk = scale * k_scale * (0.5 * _smooth_bumps(rng, grid, l) - lift * B_dir)
        dK = 0.25 * scale * K_scale * _smooth_bumps(rng, grid, l)
        perturbed = optimal.shifted(dK, dk)

        def features(dW: np.ndarray, first: int) -> np.ndarray:
            _, _, J_opt = _euler(spec, dW, optimal.control, first)
            X, _, J = _euler(spec, dW, perturbed.control, first)
            return np.column_stack([J - J_opt, X])

        stats = _estimate(spec, cfg, features)
        gap, gap_se = float(stats.mean[0]), float(stats.se[0])
        mean_path, mean_se = stats.mean[1 : N + 2], stats.se[1 : N + 2]
        if np.any(mean_path - 2.0 * mean_se < spec.L.values):
            inadmissible += 1
            logger.debug("trial %d: perturbation leaves the constraint set", trial)
            continue
        admissible += 1
        in_se = gap / gap_se if gap_se > 0 else 0.0 if gap == 0 else np.sign(gap) * np.inf
        gaps.append(gap)
        gaps_in_se.append(float(in_se))
        if gap < -3.0 * gap_se:
            violations += 1
            logger.warning("trial %d: perturbed cost below optimum by %.3g (%.2f SE)", trial, -gap, -in_se)

    logger.info("fuzz: %d admissible, %d inadmissible, %d violations", admissible, inadmissible, violations)
    return FuzzReport(
        trials=trials,
        admissible=admissible,
        inadmissible=inadmissible,
        violations=violations,
        min_gap=min(gaps) if gaps else None,
        min_gap_in_se=min(gaps_in_se) if gaps_in_se else None,
        gaps=gaps,
    )


def duality_gap(
    spec: ProblemSpec, policy: FeedbackPolicy, mu: Compensator, cfg: MCConfig
) -> tuple[float, float]:
    """Simulated int (E[X_t] - L_t) dmu_t and its standard error."""
    _check_policy(spec, cfg, policy)
    masses = mu.increments()
    L = spec.L.values

    def features(dW: np.ndarray, first: int) -> np.ndarray:
        X, _, _ = _euler(spec, dW, policy.control, first)
        return ((X - L) @ masses)[:, None]

    stats = _estimate(spec, cfg, features)
    return float(stats.mean[0]), float(stats.se[0])
