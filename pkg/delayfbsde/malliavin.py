#!/usr/bin/env python3
"""
Malliavin derivative D_s y_t of a simulated delay equation, propagated with
the linear variational equation on the same noise, and a bump-resimulation
oracle to check it against.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lib import (
    ConfigurationError,
    run_blocks,
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
    GridSpec,
    Segment,
    SegmentFunctional,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, eq=False, kw_only=True)
class MalliavinState:
    """
    D^j_s y on [t0 - r, T] per path, aligned with PathEnsemble.history:
    values has shape (N, m+1+M, n, d) and is zero before the base index.
    """

    grid: GridSpec
    t0: float
    base_index: int
    values: np.ndarray

    @property
    def base_time(self) -> float:
        return self.t0 + self.base_index * self.grid.step_h

    @property
    def steps(self) -> int:
        return self.values.shape[1] - self.grid.past_points_m - 1

    def derivative_at(self, k: int) -> np.ndarray:
        """
        D_s y_{t_k}, shape (N, n, d).
        """
        return self.values[:, self.grid.past_points_m + k]

    def segment_at(self, k: int) -> np.ndarray:
        """
        The derivative's own segment at step k, shape (N, m+1, n, d).
        """
        return self.values[:, k : k + self.grid.past_points_m + 1]

    def moments(self, powers: tuple = (2, 4)) -> dict[int, float]:
        """
        E sup_t |D_s y_t|^p for each p.
        """
        sup = np.abs(self.values).max(axis=(1, 2, 3))
        return {p: float(np.mean(sup**p)) for p in powers}

    def to_csv(self, path: Path) -> Path:
        m, n = self.grid.past_points_m, self.grid.dim_n
        d = self.values.shape[-1]
        header = ["path", "j", "time"] + [f"d{i}" for i in range(n)]

        def rows():
            for p in range(self.values.shape[0]):
                for j in range(d):
                    for k in range(self.base_index, self.steps + 1):
                        time = self.t0 + k * self.grid.step_h
                        yield [p, j, time, *self.values[p, m + k, :, j]]

        return write_csv(path, header, rows())


def propagate_derivative(
    model: CoefficientModel, ensemble: PathEnsemble, s: float, workers: int = 1
) -> MalliavinState:
    if not model.has_gradients:
        raise ConfigurationError(
            f"model {model.name} declares no coefficient gradients; "
            "the variational equation needs both drift and diffusion gradients"
        )
    grid = ensemble.grid
    m, n, d = grid.past_points_m, grid.dim_n, grid.dim_d
    dt = grid.step_h
    base = ensemble.index_of(s)
    times = ensemble.times

    def block(rows: slice) -> np.ndarray:
        history = ensemble.history[rows]
        increments = ensemble.increments[rows]
        values = np.zeros((history.shape[0], history.shape[1], n, d))
        values[:, m + base] = model.diffusion_sigma(
            times[base], history[:, base : base + m + 1]
        )
        for k in range(base, ensemble.steps):
            segments = history[:, k : k + m + 1]
            drift_gradient = model.drift_gradient(times[k], segments)
            diffusion_gradient = model.diffusion_gradient(times[k], segments)
            own = values[:, k : k + m + 1]
            for j in range(d):
                column = own[..., j]
                drift_part = drift_gradient.pair(column[:, None])
                noise_part = diffusion_gradient.pair(column[:, None, None])
                values[:, m + k + 1, :, j] = (
                    values[:, m + k, :, j]
                    + drift_part * dt
                    + np.einsum("pnd,pd->pn", noise_part, increments[:, k])
                )
        return values

    values = np.concatenate(run_blocks(block, ensemble.num_paths, workers), axis=0)
    logger.debug("propagated D_s y from s=%g over %d paths", s, ensemble.num_paths)
    return MalliavinState(grid=grid, t0=ensemble.t0, base_index=base, values=values)


def chain_rule(
    functional: SegmentFunctional,
    state: MalliavinState,
    ensemble: PathEnsemble,
    s: float,
    t: float,
) -> np.ndarray:
    """
    D^j_s F(X_t) = <grad F(X_t), D^j_s y_{t+.}> per path, shape (N, d).
    """
    if ensemble.index_of(s) != state.base_index:
        raise ConfigurationError(
            f"derivative state is based at {state.base_time}, not at s={s}"
        )
    k = ensemble.index_of(t)
    if k < state.base_index:
        return np.zeros((ensemble.num_paths, state.values.shape[-1]))
    gradient = functional.gradient_values(ensemble.segment_values(k))
    own = state.segment_at(k)
    return np.stack(
        [gradient.pair(own[..., j]) for j in range(own.shape[-1])], axis=-1
    )


def bump_oracle(
    model: CoefficientModel,
    noise: NoiseGrid,
    s: float,
    eps: float,
    t: float,
    x: Segment,
    functional: SegmentFunctional,
    scheme: Scheme = Scheme.EULER,
    workers: int = 1,
) -> np.ndarray:
    """
    Central difference of F(X_t) when the increment ending at s is bumped by
    +-eps in each noise column, on common noise. Shape (N, d).

    The bumped increment is the last one that y_s depends on, so the response
    at t lines up with the propagated derivative at t. When sigma does not
    depend on the state the two differ only by the central-difference error.
    """
    if not eps > 0:
        raise ConfigurationError(f"bump size must be positive, got {eps}")
    grid = model.grid
    step_s = grid.steps_between(noise.t0, s)
    step_t = grid.steps_between(noise.t0, t)
    if step_s < 1:
        raise ConfigurationError(
            f"s={s} must lie at least one step after the noise start {noise.t0}"
        )
    result = np.zeros((noise.num_paths, noise.dim_d))
    if step_s > step_t:
        return result
    head = noise.head(step_t)
    bumped = step_s - 1
    for j in range(noise.dim_d):
        up = simulate_forward(
            model, noise.t0, x, head.bumped(bumped, j, eps), scheme, workers
        )
        down = simulate_forward(
            model, noise.t0, x, head.bumped(bumped, j, -eps), scheme, workers
        )
        result[:, j] = (
            functional(up.terminal_values()) - functional(down.terminal_values())
        ) / (2 * eps)
    return result


def oracle_agreement(
    derivative: np.ndarray, oracle: np.ndarray, tolerance: float = 1e-2
) -> float:
    """
    Fraction of paths whose relative error stays within tolerance.
    """
    derivative = np.asarray(derivative).reshape(derivative.shape[0], -1)
    oracle = np.asarray(oracle).reshape(oracle.shape[0], -1)
    scale = np.maximum(np.abs(oracle), np.abs(derivative)).max(axis=1)
    error = np.abs(derivative - oracle).max(axis=1)
    return float(np.mean(error <= tolerance * np.maximum(scale, 1e-12)))
