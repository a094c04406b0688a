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
    DomainError,
)
from delayfbsde.quadvar import (
    TimeFamily,
    convergence_study,
    functional_path,
    joint_qv_estimate,
    qv_limit_prediction,
    wiener_path,
)
from delayfbsde.sdde import (
    simulate_forward,
    sincos_model,
)
from delayfbsde.segment import (
    Segment,
    lag_product,
    point_evaluation,
)


def test_wiener_path_sums_increments():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 3, 0.5))
    w = wiener_path(ensemble)
    assert np.all(w[:, 0] == 0.0)
    assert np.allclose(w[:, -1], ensemble.increments[:, :, 0].sum(axis=1))
    assert np.allclose(functional_path(point_evaluation(grid), ensemble), ensemble.y[:, :, 0])


def test_brownian_self_variation():
    """
    For u = x(0) on Brownian motion the limit is the window length.
    """
    grid = small_grid(delay_r=0.5, past_points_m=50)
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 4000, 1.0))
    u_path = functional_path(point_evaluation(grid), ensemble)
    estimate = joint_qv_estimate(u_path, wiener_path(ensemble), 0.02, (0.2, 0.6), ensemble.times)
    prediction = qv_limit_prediction(model, point_evaluation(grid), ensemble, (0.2, 0.6))
    assert np.allclose(prediction, 0.4)
    assert abs(estimate.mean() - 0.4) <= 5 * estimate.std(ddof=1) / np.sqrt(4000)


def test_off_grid_epsilon_is_rejected():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 3, 1.0))
    path = wiener_path(ensemble)
    with pytest.raises(ConfigurationError):
        joint_qv_estimate(path, path, 0.07, (0.0, 0.5), ensemble.times)


def test_window_beyond_horizon_is_a_domain_error():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 3, 1.0))
    path = wiener_path(ensemble)
    with pytest.raises(DomainError):
        joint_qv_estimate(path, path, 0.1, (0.0, 0.95), ensemble.times)


def test_time_dependent_family():
    grid = small_grid()
    model, x = brownian(grid)
    ensemble = simulate_forward(model, 0.0, x, noise_for(grid, 2, 0.5))
    functional = point_evaluation(grid)
    family = TimeFamily(
        lambda t, values: t * functional(values),
        lambda t, values: functional.gradient_values(values).scaled(np.full(values.shape[0], t)),
    )
    values = functional_path(family, ensemble)
    assert np.allclose(values, ensemble.times * ensemble.y[:, :, 0])


def test_lag_product_convergence():
    grid = small_grid(delay_r=0.5, past_points_m=100)
    study = convergence_study(
        sincos_model(grid),
        lag_product(grid),
        Segment.constant(grid, 0.5),
        [0.01, 0.04, 0.02],
        1000,
        (0.1, 0.5),
        seed=5,
    )
    assert [row.epsilon for row in study.rows] == [0.04, 0.02, 0.01]
    assert study.decreasing
    assert study.final_bias_ok
    assert study.rows[-1].mean_abs_error < study.rows[0].mean_abs_error
