#!/usr/bin/env python3
"""
Joint quadratic variation of u(t, X_t) with the driving Wiener components:
the epsilon-regularized estimator, its predicted limit and a convergence
study across a ladder of epsilons.
"""
import logging
from collections.abc import (
    Callable,
    Sequence,
)
from dataclasses import (
    dataclass,
    field,
)
from pathlib import Path
from typing import Union

import numpy as np

from .lib import (
    ConfigurationError,
    DomainError,
    mean_and_se,
    on_grid,
    write_csv,
)
from .sdde import (
    CoefficientModel,
    NoiseGrid,
    PathEnsemble,
    Scheme,
    simulate_forward,
)
from .segment import (
    Segment,
    SegmentFunctional,
    WindowMeasure,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class TimeFamily:
    """
    A family u(t, .) of segment functionals with gradients, both batched
    over segments (N, m+1, n).
    """

    value: Callable[[float, np.ndarray], np.ndarray]
    gradient: Callable[[float, np.ndarray], WindowMeasure]

    @classmethod
    def constant_in_time(cls, functional: SegmentFunctional) -> "TimeFamily":
        return cls(
            lambda t, values: functional(values),
            lambda t, values: functional.gradient_values(values),
        )


def as_family(u: Union[SegmentFunctional, TimeFamily]) -> TimeFamily:
    if isinstance(u, TimeFamily):
        return u
    if isinstance(u, SegmentFunctional):
        return TimeFamily.constant_in_time(u)
    raise TypeError(f"Expected SegmentFunctional or TimeFamily, got {type(u)}")


def functional_path(
    u: Union[SegmentFunctional, TimeFamily], ensemble: PathEnsemble
) -> np.ndarray:
    """
    u(t_k, X_k) along every path, shape (N, M+1).
    """
    family = as_family(u)
    times = ensemble.times
    return np.stack(
        [
            np.broadcast_to(
                family.value(times[k], ensemble.segment_values(k)),
                (ensemble.num_paths,),
            )
            for k in range(ensemble.steps + 1)
        ],
        axis=1,
    )


def wiener_path(ensemble: PathEnsemble, component: int = 0) -> np.ndarray:
    """
    W^i - W^i_{t0} on the ensemble grid, shape (N, M+1).
    """
    increments = ensemble.increments[:, :, component]
    path = np.zeros((ensemble.num_paths, ensemble.steps + 1))
    np.cumsum(increments, axis=1, out=path[:, 1:])
    return path


def _window_indices(
    times: np.ndarray, epsilon: float, window: tuple[float, float]
) -> tuple[int, int, int]:
    step = times[1] - times[0]
    lag = on_grid(epsilon, step)
    if lag is None or lag < 1:
        raise ConfigurationError(
            f"epsilon={epsilon} is not a positive multiple of the step {step}"
        )
    start = on_grid(window[0] - times[0], step)
    stop = on_grid(window[1] - times[0], step)
    if start is None or stop is None or start < 0 or stop < start:
        raise ConfigurationError(f"window {window} is not on the time grid")
    if stop + lag > len(times) - 1:
        raise DomainError(
            f"window end {window[1]} plus epsilon {epsilon} exceeds the horizon {times[-1]}"
        )
    return start, stop, lag


def joint_qv_estimate(
    u_path: np.ndarray,
    w_path: np.ndarray,
    epsilon: float,
    window: tuple[float, float],
    times: np.ndarray,
) -> np.ndarray:
    """
    (1/eps) sum_k (u_{k+e} - u_k)(W_{k+e} - W_k) dt over t_k in [t, T'),
    one value per path.
    """
    start, stop, lag = _window_indices(np.asarray(times), epsilon, window)
    step = times[1] - times[0]
    du = u_path[:, start + lag : stop + lag] - u_path[:, start:stop]
    dw = w_path[:, start + lag : stop + lag] - w_path[:, start:stop]
    return (du * dw).sum(axis=1) * step / epsilon


def qv_limit_prediction(
    model: CoefficientModel,
    u: Union[SegmentFunctional, TimeFamily],
    ensemble: PathEnsemble,
    window: tuple[float, float],
    component: int = 0,
) -> np.ndarray:
    """
    sum_k sigma^i(t_k, X_k) . nabla_0 u(t_k, X_k) dt over the window.
    """
    family = as_family(u)
    start = ensemble.index_of(window[0])
    stop = ensemble.index_of(window[1])
    times = ensemble.times
    total = np.zeros(ensemble.num_paths)
    for k in range(start, stop):
        segments = ensemble.segment_values(k)
        sigma = model.diffusion_sigma(times[k], segments)[..., component]
        nabla0 = family.gradient(times[k], segments).nabla0
        total += np.einsum("pn,pn->p", sigma, np.broadcast_to(nabla0, sigma.shape))
    return total * ensemble.step


@dataclass(frozen=True, slots=True)
class ConvergenceRow:
    epsilon: float
    mean_abs_error: float
    std_error: float
    bias: float
    bias_std_error: float


@dataclass(frozen=True, slots=True, kw_only=True)
class ConvergenceStudy:
    rows: list[ConvergenceRow] = field(default_factory=list)

    @property
    def decreasing(self) -> bool:
        """
        The error at the smallest epsilon does not exceed the error at the
        largest by more than two combined standard errors.
        """
        if len(self.rows) < 2:
            return True
        large, small = self.rows[0], self.rows[-1]
        slack = 2.0 * np.hypot(large.std_error, small.std_error)
        return bool(small.mean_abs_error <= large.mean_abs_error + slack)

    @property
    def final_bias_ok(self) -> bool:
        """
        The mean signed error at the smallest epsilon is within 5 SE of 0.
        """
        if not self.rows:
            return True
        last = self.rows[-1]
        return bool(abs(last.bias) <= 5.0 * last.bias_std_error + 1e-12)

    def to_csv(self, path: Path) -> Path:
        return write_csv(
            path,
            ["epsilon", "mean_abs_error", "std_error"],
            [[i.epsilon, i.mean_abs_error, i.std_error] for i in self.rows],
        )

    def to_json(self) -> dict:
        return {
            "rows": [
                {
                    "epsilon": i.epsilon,
                    "mean_abs_error": i.mean_abs_error,
                    "std_error": i.std_error,
                    "bias": i.bias,
                    "bias_std_error": i.bias_std_error,
                }
                for i in self.rows
            ],
            "decreasing": self.decreasing,
            "final_bias_ok": self.final_bias_ok,
        }


def convergence_study(
    model: CoefficientModel,
    u: Union[SegmentFunctional, TimeFamily],
    x: Segment,
    epsilons: Sequence[float],
    num_paths: int,
    window: tuple[float, float],
    seed: int,
    component: int = 0,
    scheme: Scheme = Scheme.EULER,
    workers: int = 1,
) -> ConvergenceStudy:
    """
    Compare the estimator with its predicted limit for each epsilon on one
    ensemble, largest epsilon first.
    """
    epsilons = sorted((float(i) for i in epsilons), reverse=True)
    if not epsilons:
        raise ConfigurationError("convergence study needs at least one epsilon")
    t, end = window
    horizon = end + epsilons[0]
    noise = NoiseGrid.generate(seed, num_paths, t, horizon, model.grid, workers)
    ensemble = simulate_forward(model, t, x, noise, scheme, workers)
    times = ensemble.times
    u_values = functional_path(u, ensemble)
    w_values = wiener_path(ensemble, component)
    prediction = qv_limit_prediction(model, u, ensemble, window, component)
    rows = []
    for epsilon in epsilons:
        error = joint_qv_estimate(u_values, w_values, epsilon, window, times) - prediction
        mean_abs, se_abs = mean_and_se(np.abs(error))
        bias, se_bias = mean_and_se(error)
        rows.append(ConvergenceRow(epsilon, mean_abs, se_abs, bias, se_bias))
        logger.info(
            "epsilon=%g mean|error|=%.3e (se %.1e) bias=%.3e", epsilon, mean_abs, se_abs, bias
        )
    return ConvergenceStudy(rows=rows)
