import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanref_lq.core import GridFunction, TimeGrid, distance_to_cone
from meanref_lq.errors import ConfigError
from meanref_lq.montecarlo import FeedbackPolicy
from meanref_lq.obstacle import solve_penalized
from meanref_lq.oracle import (
    TreeProblem,
    distance_bruteforce,
    euler_moment_cost,
    euler_riccati,
    tree_feedback_controls,
    tree_gradient,
    tree_minimize,
    tree_objective,
    tree_root_adjoint,
)
from meanref_lq.riccati import solve_riccati

NOISY = {"A": 0.2, "C": 0.3, "D": 0.5, "Q": 1.0, "R": 1.0, "G": 0.5, "T": 0.5}


def _random_controls(tp, rng, l=1):
    return [rng.normal(size=(2**i, l)) for i in range(tp.steps)]


def _flatten(controls):
    return np.concatenate([c.ravel() for c in controls])


def test_tree_depth_is_capped():
    with pytest.raises(ConfigError):
        TreeProblem(13)
    assert TreeProblem(12).probabilities(12).sum() == pytest.approx(1.0)


def test_tree_needs_one_driver(make_spec):
    spec = make_spec(N=4, m=2, C=[0.0, 0.0], D=[[1.0], [0.0]])
    tp = TreeProblem(4)
    with pytest.raises(ConfigError):
        tree_objective(tp, spec, tp.zero_controls(spec))


def test_controls_shape_checked(make_spec):
    spec = make_spec(N=3)
    tp = TreeProblem(3)
    with pytest.raises(ConfigError) as err:
        tree_objective(tp, spec, [np.zeros((1, 1)), np.zeros((3, 1)), np.zeros((4, 1))])
    assert err.value.field == "controls"


def test_deterministic_tree_objective(make_spec):
    spec = make_spec(N=5, A=0.0, C=0.0, D=0.0, Q=2.0, G=0.5, x=1.0, L=1.2)
    tp = TreeProblem(5, n=10.0)
    h = spec.grid.h
    expected = 0.5 * 5 * h * 2.0 + 0.5 * 0.5 + 0.5 * 10.0 * 5 * h * 0.2**2
    assert tree_objective(tp, spec, tp.zero_controls(spec)) == pytest.approx(expected, rel=1e-12)


def test_tree_objective_vanishes_at_rest(make_spec):
    spec = make_spec(N=6, Q=0.0, x=0.0, L=-0.5)
    tp = TreeProblem(6, n=100.0)
    assert tree_objective(tp, spec, tp.zero_controls(spec)) == 0.0


def test_gradient_matches_central_differences(make_spec):
    spec = make_spec(N=4, L=0.9, x=1.0, **NOISY)
    tp = TreeProblem(4, n=10.0)
    rng = np.random.default_rng(0)
    controls = [0.3 * c for c in _random_controls(tp, rng)]
    grad = _flatten(tree_gradient(tp, spec, controls))
    flat = _flatten(controls)
    sizes = [c.size for c in controls]

    def unflatten(v):
        return [a.reshape(c.shape) for a, c in zip(np.split(v, np.cumsum(sizes)[:-1]), controls)]

    eps = 1e-6
    fd = np.empty_like(flat)
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = eps
        fd[j] = (tree_objective(tp, spec, unflatten(flat + e)) - tree_objective(tp, spec, unflatten(flat - e))) / (2 * eps)
    np.testing.assert_allclose(grad, fd, rtol=1e-5, atol=1e-9)


def test_inactive_penalty_leaves_gradient_unchanged(make_spec):
    spec = make_spec(N=5, L=-1e6, **NOISY)
    rng = np.random.default_rng(1)
    controls = _random_controls(TreeProblem(5), rng)
    with_penalty = tree_gradient(TreeProblem(5, n=1e3), spec, controls)
    without = tree_gradient(TreeProblem(5, n=0.0), spec, controls)
    for a, b in zip(with_penalty, without):
        np.testing.assert_array_equal(a, b)


def test_euler_feedback_is_stationary_on_the_tree(make_spec):
    spec = make_spec(N=6, L=-1e6, **NOISY)
    tp = TreeProblem(6)
    er = euler_riccati(spec)
    policy = FeedbackPolicy(K=GridFunction(spec.grid, er.K), k=GridFunction.constant(spec.grid, [0.0]))
    controls = tree_feedback_controls(tp, spec, policy)
    grad = tree_gradient(tp, spec, controls)
    assert max(np.abs(g).max() for g in grad) <= 1e-10
    assert tree_objective(tp, spec, controls) == pytest.approx(0.5 * er.Pi[0] * spec.x**2, rel=1e-12)


@pytest.mark.parametrize("n", [0.0, 50.0])
def test_linear_feedback_matches_moment_recursion(make_spec, n):
    spec = make_spec(N=7, L=0.95, **NOISY)
    tp = TreeProblem(7, n=n)
    rng = np.random.default_rng(3)
    policy = FeedbackPolicy(
        K=GridFunction(spec.grid, rng.uniform(0, 1, (8, 1))),
        k=GridFunction(spec.grid, rng.uniform(-0.5, 0.5, (8, 1))),
    )
    tree = tree_objective(tp, spec, tree_feedback_controls(tp, spec, policy))
    moments = euler_moment_cost(spec, policy, n=n).cost
    assert tree == pytest.approx(moments, rel=1e-12)


def test_zero_state_optimum_is_zero(make_spec):
    spec = make_spec(N=5, Q=0.0, G=1.0, x=0.0, L=-1.0)
    result = tree_minimize(TreeProblem(5), spec)
    assert result.converged
    assert result.objective == 0.0
    assert all(np.all(c == 0.0) for c in result.controls)


@pytest.fixture(scope="module")
def small_tree_runs():
    from meanref_lq.core import parse_problem

    doc = {"T": 0.5, "N": 6, "B": 1.0, "R": 1.0, "L": 0.95, "x": 1.0, **NOISY}
    spec = parse_problem(doc)
    tp = TreeProblem(6, n=100.0)
    rng = np.random.default_rng(5)
    runs = [tree_minimize(tp, spec)]
    runs += [tree_minimize(tp, spec, init=_random_controls(tp, rng)) for _ in range(4)]
    return spec, tp, runs


def test_minimum_does_not_depend_on_start(small_tree_runs):
    _, _, runs = small_tree_runs
    objectives = [r.objective for r in runs]
    assert all(r.converged for r in runs)
    assert max(objectives) - min(objectives) <= 1e-8


def test_root_adjoint_value_identity(small_tree_runs):
    spec, tp, runs = small_tree_runs
    best = runs[0]
    Y0 = tree_root_adjoint(tp, spec, best.controls)
    h = spec.grid.h
    X = [np.array([spec.x])]
    means = [spec.x]
    # replay the tree means for the penalty term
    for i, u in enumerate(best.controls):
        base = X[i] + h * (0.2 * X[i] + u[:, 0])
        jump = np.sqrt(h) * (0.3 * X[i] + 0.5 * u[:, 0])
        X.append(np.stack([base + jump, base - jump], axis=1).reshape(-1))
        means.append(X[-1].mean())
    short = np.maximum(0.95 - np.array(means[1:]), 0.0)
    identity = 0.5 * Y0 * spec.x + 0.5 * tp.n * h * float(np.sum(short * 0.95))
    assert best.objective == pytest.approx(identity, rel=1e-6)


@pytest.mark.slow
def test_tree_agrees_with_mean_system_solver(make_spec):
    spec = make_spec(N=200)
    n = 1e3
    ric = solve_riccati(spec)
    stage = solve_penalized(spec, ric, n)
    tree = tree_minimize(TreeProblem(10, n=n), spec)
    assert tree.converged
    assert abs(stage.value - tree.objective) <= 0.05 * abs(stage.value) + 1e-3
    tree_means = np.array([np.mean(X) for X in _tree_states(tree, spec, 10)])
    solver_means = stage.m.resample(TimeGrid(1.0, 10)).values
    np.testing.assert_allclose(tree_means, solver_means, atol=0.05)


def _tree_states(result, spec, steps):
    coarse = spec.on_grid(TimeGrid(spec.grid.T, steps))
    h = coarse.grid.h
    X = [np.array([spec.x])]
    for i, u in enumerate(result.controls):
        base = X[i] + h * (coarse.A.values[i] * X[i] + u @ coarse.B.values[i])
        jump = np.sqrt(h) * (coarse.C.values[i, 0] * X[i] + u @ coarse.D.values[i, 0])
        X.append(np.stack([base + jump, base - jump], axis=1).reshape(-1))
    return X


@settings(max_examples=1000)
@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=40), st.integers(0, 2**32 - 1))
def test_distance_formula_is_the_bruteforce_minimum(values, seed):
    X = GridFunction(TimeGrid(1.0, len(values) - 1), values)
    rng = np.random.default_rng(seed)
    candidates = [np.abs(rng.normal(size=len(values))) * 10 for _ in range(20)]
    d = distance_to_cone(X)
    for Y in candidates:
        assert np.max(np.abs(X.values - Y)) >= d
    assert distance_bruteforce(X, candidates + [np.maximum(X.values, 0.0)]) == d


def test_bruteforce_rejects_negative_candidates():
    X = GridFunction(TimeGrid(1.0, 2), [1.0, -1.0, 0.0])
    with pytest.raises(ValueError):
        distance_bruteforce(X, [np.array([0.0, -0.1, 0.0])])
