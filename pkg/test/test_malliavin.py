#!/usr/bin/env python3
import numpy as np
import pytest

from common import (
    brownian,
    noise_for,
    small_grid,
)
from delayfbsde.lib import ConfigurationError
from delayfbsde.malliavin import (
    bump_oracle,
    chain_rule,
    oracle_agreement,
    propagate_derivative,
)
from delayfbsde.sdde import (
    CoefficientModel,
    linear_model,
    simulate_forward,
    sincos_model,
)
from delayfbsde.segment import (
    Segment,
    point_evaluation,
    squared_point,
    window_mean,
)


def derivative_setup(model, x, s, t, paths=200, seed=0):
    grid = model.grid
    noise = noise_for(grid, paths, t, seed)
    ensemble = simulate_forward(model, 0.0, x, noise)
    state = propagate_derivative(model, ensemble, s)
    return noise, ensemble, state


def test_derivative_starts_at_sigma_and_is_adapted():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.5)
    _, ensemble, state = derivative_setup(model, x, 0.02, 0.08)
    base = state.base_index
    assert base == 4
    sigma = model.diffusion_sigma(ensemble.times[base], ensemble.segment_values(base))
    assert np.array_equal(state.derivative_at(base), sigma)
    assert np.all(state.values[:, : grid.past_points_m + base] == 0.0)


def test_brownian_derivative_is_one():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model, x = brownian(grid)
    noise, ensemble, state = derivative_setup(model, x, 0.02, 0.08, paths=20)
    functional = point_evaluation(grid)
    assert np.allclose(chain_rule(functional, state, ensemble, 0.02, 0.08), 1.0)
    oracle = bump_oracle(model, noise, 0.02, 1e-4, 0.08, x, functional)
    assert np.allclose(oracle, 1.0)


def test_derivative_vanishes_before_s():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model, x = brownian(grid)
    _, ensemble, state = derivative_setup(model, x, 0.05, 0.08, paths=5)
    assert np.all(chain_rule(point_evaluation(grid), state, ensemble, 0.05, 0.03) == 0.0)


def test_linear_delay_model_matches_oracle_exactly():
    """
    With additive noise the bump response at t obeys the same recursion as
    the propagated derivative at t, delayed term included.
    """
    grid = small_grid(delay_r=0.05, past_points_m=10)
    model = linear_model(grid, rate=-0.4, delayed_rate=0.8, sigma=0.3)
    x = Segment.constant(grid, 1.0)
    noise, ensemble, state = derivative_setup(model, x, 0.01, 0.12, paths=10)
    for functional in (point_evaluation(grid), window_mean(grid)):
        derivative = chain_rule(functional, state, ensemble, 0.01, 0.12)
        oracle = bump_oracle(model, noise, 0.01, 1e-4, 0.12, x, functional)
        assert np.allclose(derivative, oracle, rtol=1e-6, atol=1e-9)


def test_nonlinear_model_agrees_with_oracle():
    grid = small_grid(delay_r=0.1, past_points_m=100)
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.5)
    noise, ensemble, state = derivative_setup(model, x, 0.02, 0.06, paths=200)
    functional = point_evaluation(grid)
    derivative = chain_rule(functional, state, ensemble, 0.02, 0.06)
    oracle = bump_oracle(model, noise, 0.02, 1e-4, 0.06, x, functional)
    assert oracle_agreement(derivative, oracle, 1e-2) >= 0.95


def test_squared_point_agrees_with_oracle_at_the_same_time():
    grid = small_grid(delay_r=0.1, past_points_m=100)
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.5)
    noise, ensemble, state = derivative_setup(model, x, 0.05, 0.15, paths=1000, seed=3)
    functional = squared_point(grid)
    derivative = chain_rule(functional, state, ensemble, 0.05, 0.15)
    # 2 y_t D_s y_t
    y_t = ensemble.terminal_values()[:, -1, :]
    expected = 2 * y_t * state.derivative_at(ensemble.steps)[:, :, 0]
    assert np.allclose(derivative, expected)
    oracle = bump_oracle(model, noise, 0.05, 1e-4, 0.15, x, functional)
    assert oracle_agreement(derivative, oracle, 1e-2) >= 0.95


def test_oracle_at_s_and_before_s():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model, x = brownian(grid)
    noise = noise_for(grid, 4, 0.08)
    functional = point_evaluation(grid)
    assert np.allclose(bump_oracle(model, noise, 0.04, 1e-4, 0.04, x, functional), 1.0)
    assert np.all(bump_oracle(model, noise, 0.05, 1e-4, 0.04, x, functional) == 0.0)
    with pytest.raises(ConfigurationError):
        bump_oracle(model, noise, 0.0, 1e-4, 0.04, x, functional)


def test_moments_are_finite():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model = sincos_model(grid)
    _, _, state = derivative_setup(model, Segment.constant(grid, 0.5), 0.02, 0.08)
    moments = state.moments()
    assert set(moments) == {2, 4}
    assert 0 < moments[2] < np.inf


def test_model_without_gradients_is_rejected():
    grid = small_grid()
    model = CoefficientModel(
        grid=grid,
        drift_b=lambda t, values: np.zeros(values.shape[:-2] + (1,)),
        diffusion_sigma=lambda t, values: np.ones(values.shape[:-2] + (1, 1)),
    )
    ensemble = simulate_forward(model, 0.0, Segment.constant(grid, 0.0), noise_for(grid, 2, 0.5))
    with pytest.raises(ConfigurationError):
        propagate_derivative(model, ensemble, 0.1)


def test_chain_rule_needs_matching_s():
    grid = small_grid(delay_r=0.1, past_points_m=20)
    model, x = brownian(grid)
    _, ensemble, state = derivative_setup(model, x, 0.02, 0.08, paths=3)
    with pytest.raises(ConfigurationError):
        chain_rule(point_evaluation(grid), state, ensemble, 0.03, 0.08)


def test_oracle_agreement_counts_paths():
    derivative = np.array([[1.0], [2.0], [3.0], [4.0]])
    oracle = np.array([[1.0], [2.001], [3.5], [4.0]])
    assert oracle_agreement(derivative, oracle, 1e-2) == 0.75
