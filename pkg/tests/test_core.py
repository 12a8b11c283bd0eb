import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from meanref_lq.core import (
    Compensator,
    GridFunction,
    TimeGrid,
    complementarity_residual,
    distance_to_cone,
    load_problem,
    parse_problem,
    rk4_sweep,
    validate_spec,
)
from meanref_lq.errors import AssumptionError, ProblemError


def test_grid_ends_exactly_at_horizon():
    grid = TimeGrid(0.3, 7)
    assert grid.nodes[-1] == 0.3
    assert grid.nodes[0] == 0.0
    assert grid.h == pytest.approx(0.3 / 7)
    assert grid.trapezoid_weights().sum() == 7.0


@pytest.mark.parametrize("T, N", [(0.0, 10), (-1.0, 10), (1.0, 0)])
def test_grid_rejects_bad_sizes(T, N):
    with pytest.raises(ProblemError):
        TimeGrid(T, N)


def test_grid_function_interpolates_linearly():
    grid = TimeGrid(1.0, 4)
    f = GridFunction(grid, [0.0, 1.0, 4.0, 9.0, 16.0])
    assert f.at(0.5) == 4.0
    assert f(0.625) == pytest.approx(6.5)
    assert f.at(1.0) == 16.0
    with pytest.raises(ValueError):
        f.at(1.5)


def test_grid_function_is_read_only():
    f = GridFunction.constant(TimeGrid(1.0, 3), 2.0)
    with pytest.raises(ValueError):
        f.values[0] = 1.0


def test_refined_averages_midpoints():
    f = GridFunction(TimeGrid(1.0, 2), [0.0, 2.0, 6.0])
    np.testing.assert_array_equal(f.refined(), [0.0, 1.0, 2.0, 4.0, 6.0])


def test_parse_broadcasts_constants(make_spec):
    spec = make_spec(N=10)
    assert spec.B.values.shape == (11, 1)
    assert spec.D.values.shape == (11, 1, 1)
    assert spec.R.values.shape == (11, 1, 1)
    assert spec.control_dim == 1 and spec.noise_dim == 1


def test_parse_accepts_nodal_lists(binding_doc):
    binding_doc.update(N=4, L=[0.0, 0.1, 0.2, 0.3, 0.4])
    spec = parse_problem(binding_doc)
    assert spec.L.at(0.5) == pytest.approx(0.2)


def test_missing_field_is_named(binding_doc):
    del binding_doc["R"]
    with pytest.raises(ProblemError) as err:
        parse_problem(binding_doc)
    assert err.value.field == "R"
    assert err.value.exit_code == 2


def test_wrong_shape_is_named(binding_doc):
    binding_doc.update(N=4, L=[0.0, 1.0])
    with pytest.raises(ProblemError) as err:
        parse_problem(binding_doc)
    assert err.value.field == "L"


def test_nonsymmetric_control_weight_rejected(binding_doc):
    binding_doc.update(l=2, B=[1.0, 0.0], D=[[1.0, 0.0]], R=[[1.0, 0.5], [0.0, 1.0]])
    with pytest.raises(ProblemError) as err:
        parse_problem(binding_doc)
    assert err.value.field == "R"


def test_unknown_field_rejected(binding_doc):
    binding_doc["gamma"] = 1.0
    with pytest.raises(ProblemError) as err:
        parse_problem(binding_doc)
    assert err.value.field == "gamma"


def test_load_problem_and_grid_override(problem_file):
    spec = load_problem(problem_file(), grid_steps=50)
    assert spec.grid.N == 50
    assert spec.L.values.shape == (51,)


def test_load_problem_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ProblemError) as err:
        load_problem(path)
    assert err.value.field == "problem"


def test_validate_reports_margins(make_spec):
    report = validate_spec(make_spec(Q=0.5, R=2.0, B=0.5), delta=1e-8, epsilon=1e-8)
    assert report.passed
    margins = dict(zip([c.name for c in report.checks], report.margins()))
    assert margins["R >= delta I"] == pytest.approx(2.0 - 1e-8)
    assert margins["Q >= 0"] == 0.5
    assert margins["B^T B >= epsilon"] == pytest.approx(0.25 - 1e-8)


def test_validate_fails_on_indefinite_weight(make_spec):
    report = validate_spec(make_spec(R=-1.0), delta=1e-8, epsilon=1e-8)
    assert not report.passed
    with pytest.raises(AssumptionError) as err:
        report.raise_for_failure()
    assert err.value.exit_code == 3
    assert err.value.to_payload()["failed"] == ["R >= delta I"]


def test_degenerate_drift_gain_is_explained(make_spec):
    report = validate_spec(make_spec(B=0.0), delta=1e-8, epsilon=1e-8)
    check = next(c for c in report.checks if c.name == "B^T B >= epsilon")
    assert not check.passed
    assert "not identified" in check.detail


def test_compensator_mass_and_cadlag():
    grid = TimeGrid(1.0, 4)
    mu = Compensator.from_masses(grid, [0.5, 0.0, 1.0, 0.0, 2.0])
    assert mu.mass == 3.5
    np.testing.assert_array_equal(mu.increments(), [0.5, 0.0, 1.0, 0.0, 2.0])
    assert mu.integrate([1.0, 1.0, 2.0, 1.0, -1.0]) == 0.5
    assert mu.cadlag().values[-1] == 0.0
    assert mu.cadlag().values[0] == -3.0


def test_compensator_rejects_decreasing():
    with pytest.raises(ValueError):
        Compensator(GridFunction(TimeGrid(1.0, 2), [1.0, 0.5, 2.0]))


def test_complementarity_zero_when_mean_on_the_obstacle():
    grid = TimeGrid(1.0, 5)
    L = GridFunction.constant(grid, 0.7)
    mu = Compensator.from_masses(grid, np.arange(6.0))
    result = complementarity_residual(L, L, mu)
    assert result.residual == 0.0
    assert result.feasibility_defect == 0.0


def test_complementarity_reports_violation():
    grid = TimeGrid(1.0, 2)
    m = GridFunction(grid, [1.0, 0.4, 1.0])
    L = GridFunction.constant(grid, 0.5)
    result = complementarity_residual(m, L, Compensator.zero(grid))
    assert result.feasibility_defect == pytest.approx(0.1)
    assert result.residual == 0.0


@settings(max_examples=1000)
@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=60))
def test_distance_to_cone_attained_by_positive_part(values):
    X = GridFunction(TimeGrid(1.0, len(values) - 1), values)
    d = distance_to_cone(X)
    positive = np.maximum(X.values, 0.0)
    assert d >= 0.0
    assert d == np.max(np.abs(X.values - positive))


def test_rk4_sweep_fourth_order():
    def rhs(j, y):
        return y

    errors = []
    for N in (10, 20):
        y = rk4_sweep(rhs, np.array(1.0), TimeGrid(1.0, N))
        errors.append(abs(y[-1] - np.e))
    assert 12.0 <= errors[0] / errors[1] <= 20.0


def test_rk4_sweep_reverse_orders_by_node():
    y = rk4_sweep(lambda j, y: np.ones_like(y), np.array(0.0), TimeGrid(2.0, 4), reverse=True)
    np.testing.assert_allclose(y, [-2.0, -1.5, -1.0, -0.5, 0.0], atol=1e-15)


@settings(max_examples=25)
@given(st.integers(2, 40), st.integers(2, 40))
def test_resample_keeps_linear_functions(n_from, n_to):
    f = GridFunction(TimeGrid(1.0, n_from), 3.0 * TimeGrid(1.0, n_from).nodes - 1.0)
    g = f.resample(TimeGrid(1.0, n_to))
    np.testing.assert_allclose(g.values, 3.0 * TimeGrid(1.0, n_to).nodes - 1.0, atol=1e-12)
