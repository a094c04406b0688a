#!/usr/bin/env python3
import numpy as np
import pytest

from common import (
    brownian,
    config_for,
    small_grid,
)
from delayfbsde.bsde import check_driver
from delayfbsde.control import (
    ControlProblem,
    ControlSet,
    ControlSetKind,
    MinimizerMode,
    MinimizerRule,
    ball_quadratic_problem,
    check_problem,
    cost,
    cost_reweighted,
    fundamental_relation_check,
    hamiltonian,
    hamiltonian_driver,
    ineffective_problem,
    minimizer,
    random_constant_policies,
    random_piecewise_policies,
    reduce_running_cost,
    simulate_feedback,
)
from delayfbsde.lib import ConfigurationError
from delayfbsde.segment import (
    Segment,
    functional_eval,
    squared_point,
)


GRID_RULE = MinimizerRule(mode=MinimizerMode.GRID, resolution=1001)
ANALYTIC_RULE = MinimizerRule(mode=MinimizerMode.ANALYTIC)


def test_control_set_validation():
    with pytest.raises(TypeError):
        ControlSet(kind="box")
    with pytest.raises(ConfigurationError):
        ControlSet(kind=ControlSetKind.BOX, lower=1.0, upper=-1.0)
    with pytest.raises(ConfigurationError):
        ControlSet(kind=ControlSetKind.FINITE, dim_k=2, points=((1.0,),))


def test_candidates_are_lexicographic():
    box = ControlSet(kind=ControlSetKind.BOX, lower=-1.0, upper=1.0)
    assert np.array_equal(box.candidates(3)[:, 0], [-1.0, 0.0, 1.0])
    finite = ControlSet(kind=ControlSetKind.FINITE, points=((2.0,), (-3.0,), (0.5,)))
    assert np.array_equal(finite.candidates()[:, 0], [-3.0, 0.5, 2.0])
    ball = ControlSet(kind=ControlSetKind.BALL, dim_k=2, radius=2.0)
    assert np.all(ball.contains(ball.candidates(21), 1e-9))


def test_ties_pick_the_lexicographically_first_minimizer():
    grid = small_grid()
    problem = ineffective_problem(
        squared_point(grid),
        cost_weight=0.0,
        control_set=ControlSet(kind=ControlSetKind.FINITE, points=((1.0,), (-1.0,))),
    )
    u = minimizer(problem, GRID_RULE, 0.0, Segment.constant(grid, 0.0), np.array([0.7]))
    assert u[0] == -1.0


def test_ball_hamiltonian_grid_matches_analytic():
    grid = small_grid()
    problem = ball_quadratic_problem(squared_point(grid))
    x = Segment.constant(grid, 0.0)
    for z, expected in ((0.5, -0.125), (-0.2, -0.02), (3.0, -2.5)):
        assert hamiltonian(problem, 0.0, x, z, ANALYTIC_RULE) == pytest.approx(expected)
        assert hamiltonian(problem, 0.0, x, z, GRID_RULE) == pytest.approx(expected, abs=1e-5)
    assert minimizer(problem, ANALYTIC_RULE, 0.0, x, np.array([3.0]))[0] == -1.0
    assert minimizer(problem, GRID_RULE, 0.0, x, np.array([0.5]))[0] == pytest.approx(-0.5)


def test_analytic_rule_needs_an_analytic_minimizer():
    grid = small_grid()
    problem = ineffective_problem(squared_point(grid))
    assert problem.default_rule().mode == MinimizerMode.GRID
    with pytest.raises(ConfigurationError):
        hamiltonian(problem, 0.0, Segment.constant(grid, 0.0), 1.0, ANALYTIC_RULE)


def test_hamiltonian_driver_is_lipschitz_in_z():
    grid = small_grid()
    problem = ball_quadratic_problem(squared_point(grid), radius=1.5)
    driver = hamiltonian_driver(problem, ANALYTIC_RULE)
    assert driver.lipschitz_z == 1.5
    assert check_driver(driver, grid, seed=2).passed
    assert check_problem(problem, grid, seed=2).passed


def test_running_cost_reduction():
    grid = small_grid()
    ramp = Segment.ramp(grid)

    def ell(values):
        return values[..., 0]

    def ell_gradient(values):
        return np.ones_like(values)

    whole = reduce_running_cost(ell, ell_gradient, 0.0, 0.5, grid)
    assert functional_eval(whole, ramp) == pytest.approx(-0.125)
    part = reduce_running_cost(ell, ell_gradient, 0.2, 0.5, grid)
    assert functional_eval(part, ramp) == pytest.approx(-0.045)
    with pytest.raises(ConfigurationError) as error:
        reduce_running_cost(ell, ell_gradient, 0.0, 0.6, grid)
    assert "extend the delay window" in str(error.value)

    problem = ball_quadratic_problem(squared_point(grid))
    folded = problem.with_running_cost(ell, ell_gradient, 0.0, 0.5)
    assert isinstance(folded, ControlProblem)
    assert functional_eval(folded.terminal, ramp) == pytest.approx(-0.125)


def test_policy_factories_are_deterministic():
    grid = small_grid()
    problem = ball_quadratic_problem(squared_point(grid))
    first = random_constant_policies(problem, 5, seed=3)
    second = random_constant_policies(problem, 5, seed=3)
    assert sorted(first) == [f"constant-{i}" for i in range(5)]
    assert all(np.array_equal(first[k], second[k]) for k in first)
    piecewise = random_piecewise_policies(problem, 10, 3, pieces=2, seed=3)
    for policy in piecewise.values():
        assert policy.shape == (10, 1)
        assert np.all(policy[:5] == policy[0])
        assert np.all(problem.control_set.contains(policy))


def test_direct_and_reweighted_costs_agree():
    grid = small_grid()
    model, _ = brownian(grid)
    x = Segment.constant(grid, 0.5)
    problem = ball_quadratic_problem(squared_point(grid))
    config = config_for(0.5, paths=20000)
    policy = np.array([0.3])
    direct, direct_error = cost(problem, model, 0.0, x, policy, config)
    weighted, weighted_error = cost_reweighted(problem, model, 0.0, x, policy, config)
    # E (0.5 + 0.3 T + W_T)^2 + 0.5 * 0.09 * T
    assert direct == pytest.approx(0.65**2 + 0.5 + 0.0225, abs=5 * direct_error)
    assert abs(direct - weighted) <= 5 * np.hypot(direct_error, weighted_error)


def test_ineffective_control_value_is_uncontrolled_expectation():
    grid = small_grid()
    model, _ = brownian(grid)
    x = Segment.constant(grid, 0.5)
    problem = ineffective_problem(squared_point(grid))
    report = fundamental_relation_check(
        problem,
        model,
        0.0,
        x,
        random_constant_policies(problem, 5, seed=1),
        config_for(0.5, paths=4000),
        MinimizerRule(mode=MinimizerMode.GRID, resolution=101),
    )
    assert report.value == pytest.approx(0.75, abs=0.1)
    assert report.passed


def test_fundamental_relation_on_ball_problem(tmp_path):
    grid = small_grid(delay_r=0.5, past_points_m=25)
    model, _ = brownian(grid)
    x = Segment.constant(grid, 0.5)
    problem = ball_quadratic_problem(squared_point(grid))
    policies = {"zero": np.zeros(1)}
    policies |= random_constant_policies(problem, 5, seed=1)
    policies |= random_piecewise_policies(problem, 25, 3, seed=1)
    report = fundamental_relation_check(
        problem,
        model,
        0.0,
        x,
        policies,
        config_for(0.5, paths=4000),
        ANALYTIC_RULE,
        slack=0.1,
    )
    assert report.violations == []
    assert report.min_gap > 0
    assert report.feedback_ok
    rows = report.to_csv(tmp_path / "control.csv").read_text().splitlines()
    assert rows[0] == "policy,J,std_error,J_minus_v,flag"
    assert len(rows) == 1 + len(policies) + 1


def test_feedback_controls_stay_in_the_ball():
    grid = small_grid()
    model, _ = brownian(grid)
    problem = ball_quadratic_problem(squared_point(grid), radius=0.5)
    result = simulate_feedback(
        problem, model, ANALYTIC_RULE, 0.0, Segment.constant(grid, 1.0), config_for(0.5, paths=500)
    )
    assert result.controls.shape == (500, 10, 1)
    assert np.all(np.abs(result.controls) <= 0.5 + 1e-12)
    # A large initial state pushes the control against the boundary.
    assert np.mean(result.controls[:, 0, 0] == -0.5) > 0.5
