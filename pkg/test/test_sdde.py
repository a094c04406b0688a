#!/usr/bin/env python3
import numpy as np
import pytest

from common import (
    brownian,
    noise_for,
    small_grid,
)
from delayfbsde.lib import (
    ConfigurationError,
    SimulationError,
    ValidationError,
    mean_and_se,
)
from delayfbsde.sdde import (
    NoiseGrid,
    PathEnsemble,
    Scheme,
    check_coefficients,
    girsanov_weight,
    linear_model,
    lipschitz_ratio,
    method_of_steps,
    pure_delay_model,
    restart_noise,
    segment_history,
    semigroup_apply,
    simulate_controlled,
    simulate_forward,
    sincos_model,
)
from delayfbsde.segment import (
    Segment,
    point_evaluation,
    squared_point,
)


def test_noise_is_independent_of_workers_and_path_count():
    grid = small_grid()
    one = NoiseGrid.generate(3, 12, 0.0, 0.5, grid, workers=1)
    many = NoiseGrid.generate(3, 12, 0.0, 0.5, grid, workers=5)
    fewer = NoiseGrid.generate(3, 4, 0.0, 0.5, grid)
    assert np.array_equal(one.increments, many.increments)
    assert np.array_equal(one.increments[:4], fewer.increments)
    assert one.increments.shape == (12, 10, 1)


def test_different_seeds_give_different_noise():
    grid = small_grid()
    assert not np.array_equal(
        noise_for(grid, 4, 0.5, seed=1).increments, noise_for(grid, 4, 0.5, seed=2).increments
    )


def test_simulation_is_identical_across_workers():
    grid = small_grid()
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.3)
    noise = noise_for(grid, 50, 1.0)
    serial = simulate_forward(model, 0.0, x, noise)
    parallel = simulate_forward(model, 0.0, x, noise, workers=8)
    assert np.array_equal(serial.history, parallel.history)


def test_deterministic_drift():
    grid = small_grid()
    model, x = brownian(grid, drift=2.0, diffusion=0.0)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 3, 0.5))
    assert np.allclose(ensemble.y[:, -1, 0], 1.0 + 2.0 * 0.5)
    assert ensemble.times[-1] == pytest.approx(0.5)


def test_history_starts_with_initial_segment():
    grid = small_grid()
    model = sincos_model(grid)
    x = Segment.ramp(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 5, 0.5))
    assert np.array_equal(ensemble.segment_values(0)[2], x.values)
    assert ensemble.from_history(2, 4).values.shape == x.values.shape


def test_brownian_terminal_moments():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 20000, 0.5))
    mean, error = mean_and_se(ensemble.y[:, -1, 0])
    assert abs(mean - 1.0) <= 5 * error
    assert np.var(ensemble.y[:, -1, 0]) == pytest.approx(0.5, rel=0.05)


def test_flow_property():
    """
    Restarting from X_k with the remaining noise reproduces the path.
    """
    grid = small_grid()
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.2)
    noise = noise_for(grid, 6, 1.0)
    full = simulate_forward(model, 0.0, x, noise)
    k = 7
    for p in range(noise.num_paths):
        restart = simulate_forward(
            model, full.times[k], full.from_history(p, k), restart_noise(noise, k, [p])
        )
        assert np.allclose(restart.y[0], full.y[p, k:], rtol=0.0, atol=1e-12)


def test_restart_outside_noise_is_rejected():
    grid = small_grid()
    with pytest.raises(ConfigurationError):
        restart_noise(noise_for(grid, 2, 0.5), 11)


def test_step_must_match_grid():
    grid = small_grid()
    model, x = brownian(grid)
    noise = noise_for(grid.refined(2), 4, 0.5)
    with pytest.raises(ConfigurationError) as error:
        simulate_forward(model, 0.0, x, noise)
    assert "m * dt = r" in str(error.value)


def test_blow_up_names_path_and_step():
    grid = small_grid()
    model = linear_model(grid, rate=1e300, sigma=0.0)
    with pytest.raises(SimulationError) as error:
        simulate_forward(model, 0.0, Segment.constant(grid, 1e10), noise_for(grid, 2, 0.5))
    assert "path 0" in str(error.value)
    assert "step" in str(error.value)


def test_log_euler_keeps_positive():
    grid = small_grid()
    model = linear_model(grid, rate=0.05, sigma=0.8, multiplicative=True)
    ensemble = simulate_forward(
        model, 0.0, Segment.constant(grid, 1.0), noise_for(grid, 500, 1.0), Scheme.LOG_EULER
    )
    assert np.all(ensemble.y > 0)


def test_pure_delay_first_interval_is_exact():
    """
    With constant history, y' = a y(t - r) is linear on [0, r] and Euler is exact there.
    """
    grid = small_grid()
    model = pure_delay_model(grid, 0.5)
    x = Segment.constant(grid, 1.0)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 2, 1.0))
    assert ensemble.y[0, 10, 0] == pytest.approx(1.25, abs=1e-12)

    trajectory = method_of_steps(
        lambda t, y, delayed: 0.5 * delayed, segment_history(x), 0.5, 0.0, 1.0
    )
    assert trajectory(0.5)[0] == pytest.approx(1.25, abs=1e-8)
    # On [r, 2r], y = 1 + a t + a^2 (t - r)^2 / 2.
    assert trajectory(1.0)[0] == pytest.approx(1.0 + 0.5 + 0.125 * 0.25, abs=1e-8)
    assert ensemble.y[0, -1, 0] == pytest.approx(trajectory(1.0)[0], abs=0.01)


def test_semigroup_identity():
    grid = small_grid()
    model, x = brownian(grid)
    functional = point_evaluation(grid)
    value, error = semigroup_apply(model, functional, 0.0, 0.0, x, noise_for(grid, 8, 0.5))
    assert value == 1.0
    assert error == 0.0


def test_semigroup_of_brownian_point():
    grid = small_grid()
    model, x = brownian(grid)
    value, error = semigroup_apply(
        model, point_evaluation(grid), 0.0, 0.25, x, noise_for(grid, 10000, 0.5)
    )
    assert abs(value - 1.0) <= 5 * error


def test_chapman_kolmogorov():
    """
    P_{0,s}[P_{s,tau} phi](x) matches P_{0,tau}[phi](x): the inner estimates
    restart from each outer X_s with independent noise.
    """
    grid = small_grid()
    model = sincos_model(grid)
    x = Segment.constant(grid, 0.2)
    functional = squared_point(grid)
    direct, direct_error = semigroup_apply(
        model, functional, 0.0, 0.5, x, noise_for(grid, 4000, 0.5, seed=1)
    )
    k = 5
    outer = simulate_forward(model, 0.0, x, noise_for(grid, 200, 0.25, seed=2))
    inner = [
        semigroup_apply(
            model,
            functional,
            0.25,
            0.5,
            outer.from_history(p, k),
            restart_noise(noise_for(grid, 200, 0.5, seed=100 + p), k),
        )[0]
        for p in range(outer.num_paths)
    ]
    nested, nested_error = mean_and_se(np.array(inner))
    assert abs(nested - direct) <= 5 * np.hypot(direct_error, nested_error)


def test_girsanov_weights_have_unit_mean():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 20000, 0.5))
    weights = girsanov_weight(
        ensemble, lambda t, values, u: np.asarray(u, dtype=float), np.array([0.5])
    )
    mean, error = mean_and_se(weights)
    assert abs(mean - 1.0) <= 5 * error


def test_controlled_simulation_records_controls():
    grid = small_grid()
    model, x = brownian(grid, diffusion=0.0)
    ensemble = simulate_controlled(
        model,
        lambda t, values, u: np.asarray(u, dtype=float),
        np.array([0.5]),
        0.0,
        x,
        noise_for(grid, 3, 0.5),
        bound=1.0,
    )
    assert ensemble.controls.shape == (3, 10, 1)
    assert np.all(ensemble.controls == 0.5)


def test_channel_above_bound_is_rejected():
    grid = small_grid()
    model, x = brownian(grid)
    with pytest.raises(ValidationError):
        simulate_controlled(
            model,
            lambda t, values, u: np.asarray(u, dtype=float),
            np.array([2.0]),
            0.0,
            x,
            noise_for(grid, 3, 0.5),
            bound=1.0,
        )


def test_lipschitz_ratio_of_additive_model():
    """
    With additive noise and no drift, paths keep their initial distance.
    """
    grid = small_grid()
    model, x = brownian(grid)
    ratio = lipschitz_ratio(
        model, 0.0, x, x + Segment.constant(grid, 0.5), noise_for(grid, 20, 0.5)
    )
    assert ratio == pytest.approx(1.0)


def test_declared_coefficients_hold():
    grid = small_grid()
    for model in (sincos_model(grid), linear_model(grid, 0.3, -0.2, 0.5, True)):
        check = check_coefficients(model, seed=4)
        assert check.growth_ok
        assert check.gradient_error <= 1e-4


def test_dump_and_load(tmp_path):
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 4, 0.5))
    path = ensemble.dump(tmp_path / "ensemble.npz")
    loaded = PathEnsemble.load(path)
    assert loaded.grid == grid
    assert np.array_equal(loaded.history, ensemble.history)
    assert loaded.seed == ensemble.seed
