#!/usr/bin/env python3
"""
Euler-Maruyama simulation of stochastic delay equations over segment state,
plus the Girsanov weights, the Monte Carlo transition semigroup and a
method-of-steps integrator for deterministic delay equations.
"""
import json
import logging
from collections.abc import (
    Callable,
    Sequence,
)
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np
from scipy.integrate import solve_ivp

from .lib import (
    SAMPLE_STREAM,
    ConfigurationError,
    NumericalError,
    SimulationError,
    ValidationError,
    mean_and_se,
    noise_generator,
    on_grid,
    run_blocks,
    write_csv,
)
from .segment import (
    CylindricalFunctional,
    GridSpec,
    Segment,
    SegmentFunctional,
    WindowMeasure,
    constant_functional,
    evaluate,
    stack_measures,
)


logger = logging.getLogger(__name__)

# (t, segments (N, m+1, n)) -> (N, ...)
Coefficient = Callable[[float, np.ndarray], np.ndarray]
# Either a control array of shape (k,), (M, k) or (N, M, k), or a feedback
# map (t, segments) -> (N, k).
Control = Union[np.ndarray, Callable[[float, np.ndarray], np.ndarray]]
# (t, segments, controls (N, k)) -> (N, d)
Channel = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


class Scheme(str, Enum):
    EULER = "euler"
    LOG_EULER = "log-euler"


@dataclass(frozen=True, kw_only=True)
class CoefficientModel:
    """
    Drift b (N, n) and diffusion sigma (N, n, d) of a delay equation, with
    optional gradients as batched WindowMeasures of batch shape (N, n) and
    (N, n, d).
    """

    grid: GridSpec
    drift_b: Coefficient
    diffusion_sigma: Coefficient
    drift_gradient: Union[Callable[[float, np.ndarray], WindowMeasure], None] = None
    diffusion_gradient: Union[Callable[[float, np.ndarray], WindowMeasure], None] = None
    lipschitz_L: float = 1.0
    growth_K: float = 1.0
    name: str = "model"

    @property
    def has_gradients(self) -> bool:
        return self.drift_gradient is not None and self.diffusion_gradient is not None

    @classmethod
    def from_functionals(
        cls,
        grid: GridSpec,
        drift: Sequence[SegmentFunctional],
        diffusion: Sequence[Sequence[SegmentFunctional]],
        **kwargs,
    ) -> "CoefficientModel":
        """
        Time-homogeneous model whose coefficient entries are functionals, so
        the gradients come from the functionals' declared gradients.
        """

        def drift_b(t, values):
            return np.stack([f(values) for f in drift], axis=-1)

        def diffusion_sigma(t, values):
            rows = [np.stack([g(values) for g in row], axis=-1) for row in diffusion]
            return np.stack(rows, axis=-2)

        def drift_gradient(t, values):
            return stack_measures([f.gradient_values(values) for f in drift], axis=-1)

        def diffusion_gradient(t, values):
            rows = [
                stack_measures([g.gradient_values(values) for g in row], axis=-1)
                for row in diffusion
            ]
            return stack_measures(rows, axis=-2)

        return cls(
            grid=grid,
            drift_b=drift_b,
            diffusion_sigma=diffusion_sigma,
            drift_gradient=drift_gradient,
            diffusion_gradient=diffusion_gradient,
            **kwargs,
        )


def constant_model(grid: GridSpec, drift: float = 0.0, diffusion: float = 1.0):
    """
    b and sigma constant in time and state (every entry of sigma equal).
    """
    n, d = grid.dim_n, grid.dim_d
    return CoefficientModel.from_functionals(
        grid,
        [constant_functional(grid, drift) for _ in range(n)],
        [[constant_functional(grid, diffusion) for _ in range(d)] for _ in range(n)],
        lipschitz_L=0.0,
        growth_K=abs(drift) + abs(diffusion) * np.sqrt(n * d),
        name="constant",
    )


def linear_model(
    grid: GridSpec,
    rate: float = 0.0,
    delayed_rate: float = 0.0,
    sigma: float = 1.0,
    multiplicative: bool = False,
):
    """
    Scalar model b = rate x(0) + delayed_rate x(-r) with either additive
    noise sigma or multiplicative noise sigma x(0).
    """
    r = grid.delay_r

    def drift_gradient(points):
        gradient = np.zeros_like(points)
        gradient[..., 0, :] = rate
        gradient[..., 1, :] = delayed_rate
        return gradient

    drift = CylindricalFunctional(
        grid,
        [0.0, -r],
        lambda p: rate * p[..., 0, 0] + delayed_rate * p[..., 1, 0],
        drift_gradient,
        growth_exponent=0,
        growth_constant=abs(rate) + abs(delayed_rate),
    )
    if multiplicative:
        diffusion = CylindricalFunctional(
            grid,
            [0.0],
            lambda p: sigma * p[..., 0, 0],
            lambda p: np.full_like(p, sigma),
            growth_exponent=0,
            growth_constant=abs(sigma),
        )
    else:
        diffusion = constant_functional(grid, sigma)
    return CoefficientModel.from_functionals(
        grid,
        [drift],
        [[diffusion]],
        lipschitz_L=abs(rate) + abs(delayed_rate) + (abs(sigma) if multiplicative else 0.0),
        growth_K=abs(rate) + abs(delayed_rate) + abs(sigma),
        name="linear",
    )


def pure_delay_model(grid: GridSpec, delayed_rate: float, sigma: float = 0.0):
    return linear_model(grid, rate=0.0, delayed_rate=delayed_rate, sigma=sigma)


def sincos_model(grid: GridSpec, noise_scale: float = 0.1):
    """
    Scalar model b = sin(x(-r)), sigma = 1 + noise_scale cos(x(0)).
    """
    r = grid.delay_r
    drift = CylindricalFunctional(
        grid,
        [-r],
        lambda p: np.sin(p[..., 0, 0]),
        np.cos,
        growth_exponent=0,
        growth_constant=1.0,
    )
    diffusion = CylindricalFunctional(
        grid,
        [0.0],
        lambda p: 1.0 + noise_scale * np.cos(p[..., 0, 0]),
        lambda p: -noise_scale * np.sin(p),
        growth_exponent=0,
        growth_constant=1.0 + noise_scale,
    )
    return CoefficientModel.from_functionals(
        grid,
        [drift],
        [[diffusion]],
        lipschitz_L=1.0 + noise_scale,
        growth_K=2.0 + noise_scale,
        name="sincos",
    )


@dataclass(frozen=True, slots=True)
class CoefficientCheck:
    growth_ratio: float
    gradient_error: float

    @property
    def growth_ok(self) -> bool:
        return self.growth_ratio <= 1.0


def check_coefficients(
    model: CoefficientModel, samples: int = 32, seed: int = 0, eps: float = 1e-5
) -> CoefficientCheck:
    """
    Spot-check |b| + |sigma| <= K (1 + |x|) and, when gradients are declared,
    their agreement with central differences along random directions.
    """
    grid = model.grid
    rng = noise_generator(seed, SAMPLE_STREAM)
    shape = (samples, grid.past_points_m + 1, grid.dim_n)
    values = rng.standard_normal(shape).cumsum(axis=1) * np.sqrt(grid.step_h)
    b = model.drift_b(0.0, values)
    s = model.diffusion_sigma(0.0, values)
    norms = np.abs(values).max(axis=(1, 2))
    size = np.abs(b).max(axis=-1) + np.abs(s).max(axis=(-2, -1))
    growth_ratio = float(np.max(size / (model.growth_K * (1.0 + norms) + 1e-300)))

    gradient_error = 0.0
    if model.has_gradients:
        direction = rng.standard_normal(shape)
        analytic_b = model.drift_gradient(0.0, values).pair(direction[:, None])
        numeric_b = (
            model.drift_b(0.0, values + eps * direction)
            - model.drift_b(0.0, values - eps * direction)
        ) / (2 * eps)
        analytic_s = model.diffusion_gradient(0.0, values).pair(direction[:, None, None])
        numeric_s = (
            model.diffusion_sigma(0.0, values + eps * direction)
            - model.diffusion_sigma(0.0, values - eps * direction)
        ) / (2 * eps)
        gradient_error = float(
            max(
                np.max(np.abs(analytic_b - numeric_b) / (1.0 + np.abs(numeric_b))),
                np.max(np.abs(analytic_s - numeric_s) / (1.0 + np.abs(numeric_s))),
            )
        )
    return CoefficientCheck(growth_ratio, gradient_error)


@dataclass(frozen=True, slots=True, eq=False, kw_only=True)
class NoiseGrid:
    """
    Gaussian increments on a uniform time grid starting at t0, one row per
    path. Row p only depends on (seed, p).
    """

    seed: int
    t0: float
    step: float
    increments: np.ndarray

    @classmethod
    def generate(
        cls,
        seed: int,
        num_paths: int,
        t0: float,
        horizon: float,
        grid: GridSpec,
        workers: int = 1,
    ) -> "NoiseGrid":
        steps = grid.steps_between(t0, horizon)
        scale = np.sqrt(grid.step_h)

        def block(rows: slice) -> np.ndarray:
            return np.stack(
                [
                    noise_generator(seed, p).standard_normal((steps, grid.dim_d))
                    for p in range(rows.start, rows.stop)
                ]
            ).reshape(rows.stop - rows.start, steps, grid.dim_d) * scale

        increments = np.concatenate(run_blocks(block, num_paths, workers), axis=0)
        logger.debug(
            "generated noise seed=%d paths=%d steps=%d", seed, num_paths, steps
        )
        return cls(seed=seed, t0=t0, step=grid.step_h, increments=increments)

    @property
    def num_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def steps(self) -> int:
        return self.increments.shape[1]

    @property
    def dim_d(self) -> int:
        return self.increments.shape[2]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.steps + 1)

    def head(self, steps: int) -> "NoiseGrid":
        return NoiseGrid(
            seed=self.seed,
            t0=self.t0,
            step=self.step,
            increments=self.increments[:, :steps],
        )

    def tail(self, start: int) -> "NoiseGrid":
        """
        The increments from step start onwards, re-based at times[start].
        """
        return NoiseGrid(
            seed=self.seed,
            t0=self.t0 + start * self.step,
            step=self.step,
            increments=self.increments[:, start:],
        )

    def subset(self, indices: np.ndarray) -> "NoiseGrid":
        return NoiseGrid(
            seed=self.seed,
            t0=self.t0,
            step=self.step,
            increments=self.increments[indices],
        )

    def bumped(self, step: int, column: int, eps: float) -> "NoiseGrid":
        increments = self.increments.copy()
        increments[:, step, column] += eps
        return NoiseGrid(seed=self.seed, t0=self.t0, step=self.step, increments=increments)


@dataclass(frozen=True, slots=True, eq=False, kw_only=True)
class PathEnsemble:
    """
    Simulated paths: history holds y on [t0 - r, T] (the first m+1 values are
    the initial segment), so the segment at step k is history[:, k:k+m+1].
    """

    grid: GridSpec
    t0: float
    history: np.ndarray
    increments: np.ndarray
    controls: Union[np.ndarray, None] = None
    seed: Union[int, None] = None

    @property
    def num_paths(self) -> int:
        return self.history.shape[0]

    @property
    def steps(self) -> int:
        return self.increments.shape[1]

    @property
    def step(self) -> float:
        return self.grid.step_h

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.step * np.arange(self.steps + 1)

    @property
    def horizon(self) -> float:
        return self.t0 + self.step * self.steps

    @property
    def y(self) -> np.ndarray:
        """
        y on [t0, T], shape (N, M+1, n).
        """
        return self.history[:, self.grid.past_points_m :]

    @property
    def snapshots(self) -> np.ndarray:
        """
        Every segment X_k as a read-only view, shape (N, M+1, m+1, n).
        """
        windows = np.lib.stride_tricks.sliding_window_view(
            self.history, self.grid.past_points_m + 1, axis=1
        )
        return np.moveaxis(windows, -1, -2)

    def index_of(self, time: float) -> int:
        k = on_grid(time - self.t0, self.step)
        if k is None or not 0 <= k <= self.steps:
            raise ConfigurationError(
                f"time {time} is not on the ensemble grid [{self.t0}, {self.horizon}]"
            )
        return k

    def segment_values(self, k: int) -> np.ndarray:
        m = self.grid.past_points_m
        return self.history[:, k : k + m + 1]

    def segment_values_at(self, time: float) -> np.ndarray:
        """
        X at time; before t0 the segment stays equal to the initial one.
        """
        if time < self.t0:
            return self.segment_values(0)
        return self.segment_values(self.index_of(time))

    def from_history(self, path: int, k: int) -> Segment:
        """
        Rebuild X_k of one path from y: X_k(theta) = y_{t_k + theta}.
        """
        m = self.grid.past_points_m
        return Segment(self.grid, self.history[path, k : k + m + 1])

    def terminal_values(self) -> np.ndarray:
        return self.segment_values(self.steps)

    def subset(self, indices: np.ndarray) -> "PathEnsemble":
        return PathEnsemble(
            grid=self.grid,
            t0=self.t0,
            history=self.history[indices],
            increments=self.increments[indices],
            controls=None if self.controls is None else self.controls[indices],
            seed=self.seed,
        )

    def to_csv(self, path: Path) -> Path:
        n = self.grid.dim_n
        header = ["path", "step", "time"] + [f"y{i}" for i in range(n)]
        if self.controls is not None:
            header += [f"u{i}" for i in range(self.controls.shape[-1])]
        times = self.times
        y = self.y

        def rows():
            for p in range(self.num_paths):
                for k in range(self.steps + 1):
                    row = [p, k, times[k], *y[p, k]]
                    if self.controls is not None:
                        row += (
                            list(self.controls[p, k])
                            if k < self.steps
                            else [""] * self.controls.shape[-1]
                        )
                    yield row

        return write_csv(path, header, rows())

    def dump(self, path: Path) -> Path:
        arrays = {"history": self.history, "increments": self.increments}
        if self.controls is not None:
            arrays["controls"] = self.controls
        meta = {"grid": self.grid.to_json(), "t0": self.t0, "seed": self.seed}
        np.savez_compressed(path, meta=np.array(json.dumps(meta)), **arrays)
        return Path(path)

    @classmethod
    def load(cls, path: Path) -> "PathEnsemble":
        with np.load(path) as data:
            meta = json.loads(str(data["meta"]))
            return cls(
                grid=GridSpec.from_json(meta["grid"]),
                t0=float(meta["t0"]),
                history=data["history"],
                increments=data["increments"],
                controls=data["controls"] if "controls" in data else None,
                seed=meta["seed"],
            )


def _check_inputs(model: CoefficientModel, t: float, x: Segment, noise: NoiseGrid):
    grid = model.grid
    if x.grid != grid:
        raise ConfigurationError("initial segment and model use different grids")
    if not np.isclose(noise.step, grid.step_h, rtol=1e-12, atol=0.0):
        raise ConfigurationError(
            f"noise step {noise.step} differs from h = r/m = {grid.step_h}; "
            "the simulation step must satisfy m * dt = r"
        )
    if noise.dim_d != grid.dim_d:
        raise ConfigurationError(
            f"noise has {noise.dim_d} columns, model expects d={grid.dim_d}"
        )
    if on_grid(t - noise.t0, grid.step_h) != 0:
        raise ConfigurationError(f"start time {t} differs from noise start {noise.t0}")


def _control_at(
    policy: Control, k: int, t: float, values: np.ndarray, rows: slice
) -> np.ndarray:
    count = values.shape[0]
    if callable(policy):
        u = np.asarray(policy(t, values), dtype=float)
    else:
        array = np.asarray(policy, dtype=float)
        match array.ndim:
            case 0 | 1:
                u = array
            case 2:
                u = array[k]
            case 3:
                u = array[rows, k]
            case _:
                raise ConfigurationError(f"control array has {array.ndim} axes")
    u = np.atleast_1d(u)
    if u.ndim == 1:
        u = np.broadcast_to(u, (count, u.shape[0]))
    return u


def _simulate(
    model: CoefficientModel,
    t: float,
    x: Segment,
    noise: NoiseGrid,
    scheme: Scheme,
    workers: int,
    channel: Union[Channel, None] = None,
    policy: Union[Control, None] = None,
    bound: float = np.inf,
) -> PathEnsemble:
    _check_inputs(model, t, x, noise)
    grid = model.grid
    m, n = grid.past_points_m, grid.dim_n
    dt = grid.step_h
    steps = noise.steps

    def block(rows: slice) -> tuple[np.ndarray, Union[np.ndarray, None]]:
        count = rows.stop - rows.start
        history = np.empty((count, m + 1 + steps, n))
        history[:, : m + 1] = x.values
        increments = noise.increments[rows]
        controls = None
        for k in range(steps):
            t_k = t + k * dt
            segments = history[:, k : k + m + 1]
            drift = model.drift_b(t_k, segments)
            sigma = model.diffusion_sigma(t_k, segments)
            if channel is not None:
                u = _control_at(policy, k, t_k, segments, rows)
                if controls is None:
                    controls = np.empty((count, steps, u.shape[-1]))
                controls[:, k] = u
                pushed = channel(t_k, segments, u)
                if np.any(np.abs(pushed) > bound * (1 + 1e-12)):
                    raise ValidationError(
                        f"channel exceeds its declared bound {bound} at step {k}"
                    )
                drift = drift + np.einsum("pnd,pd->pn", sigma, pushed)
            current = history[:, m + k]
            match scheme:
                case Scheme.EULER:
                    following = (
                        current
                        + drift * dt
                        + np.einsum("pnd,pd->pn", sigma, increments[:, k])
                    )
                case Scheme.LOG_EULER:
                    if np.any(current <= 0):
                        p = rows.start + int(np.argmax(np.any(current <= 0, axis=1)))
                        raise SimulationError(
                            f"log-Euler needs a positive state; path {p} at step {k}"
                        )
                    vol = sigma / current[:, :, None]
                    exponent = (drift / current - 0.5 * (vol**2).sum(axis=-1)) * dt
                    exponent += np.einsum("pnd,pd->pn", vol, increments[:, k])
                    following = current * np.exp(exponent)
                case _:
                    raise TypeError(f"Expected Scheme, got {scheme}")
            bad = ~np.all(np.isfinite(following), axis=1)
            if bad.any():
                p = rows.start + int(np.argmax(bad))
                raise SimulationError(
                    f"non-finite state on path {p} at step {k} (t={t_k:.6g})"
                )
            history[:, m + k + 1] = following
        return history, controls

    results = run_blocks(block, noise.num_paths, workers)
    history = np.concatenate([i[0] for i in results], axis=0)
    controls = None
    if channel is not None and steps > 0:
        controls = np.concatenate([i[1] for i in results], axis=0)
    logger.debug(
        "simulated %s: paths=%d steps=%d scheme=%s",
        model.name,
        noise.num_paths,
        steps,
        scheme.value,
    )
    return PathEnsemble(
        grid=grid,
        t0=t,
        history=history,
        increments=noise.increments,
        controls=controls,
        seed=noise.seed,
    )


def simulate_forward(
    model: CoefficientModel,
    t: float,
    x: Segment,
    noise: NoiseGrid,
    scheme: Scheme = Scheme.EULER,
    workers: int = 1,
) -> PathEnsemble:
    return _simulate(model, t, x, noise, scheme, workers)


def simulate_controlled(
    model: CoefficientModel,
    h_fn: Channel,
    policy: Control,
    t: float,
    x: Segment,
    noise: NoiseGrid,
    bound: float = np.inf,
    scheme: Scheme = Scheme.EULER,
    workers: int = 1,
) -> PathEnsemble:
    """
    Simulate dy = b dt + sigma (h(t, X, u) dt + dW) and record u per step.
    """
    return _simulate(model, t, x, noise, scheme, workers, h_fn, policy, bound)


def evaluate_policy(policy: Control, ensemble: PathEnsemble) -> np.ndarray:
    """
    The controls a policy would play along the ensemble's own states.
    """
    rows = slice(0, ensemble.num_paths)
    times = ensemble.times
    controls = [
        _control_at(policy, k, times[k], ensemble.segment_values(k), rows)
        for k in range(ensemble.steps)
    ]
    if not controls:
        return np.zeros((ensemble.num_paths, 0, 1))
    return np.stack(controls, axis=1)


def girsanov_weight(
    ensemble: PathEnsemble, h_fn: Channel, policy: Union[Control, None] = None
) -> np.ndarray:
    """
    exp(-sum h dW - 1/2 sum |h|^2 dt) per path. Controls default to the ones
    recorded in the ensemble.
    """
    if policy is None:
        if ensemble.controls is None and ensemble.steps > 0:
            raise ConfigurationError("ensemble carries no controls; pass a policy")
        controls = ensemble.controls
    else:
        controls = evaluate_policy(policy, ensemble)
    times = ensemble.times
    dt = ensemble.step
    exponent = np.zeros(ensemble.num_paths)
    for k in range(ensemble.steps):
        pushed = h_fn(times[k], ensemble.segment_values(k), controls[:, k])
        exponent -= np.einsum("pd,pd->p", pushed, ensemble.increments[:, k])
        exponent -= 0.5 * np.einsum("pd,pd->p", pushed, pushed) * dt
    return np.exp(exponent)


def semigroup_apply(
    model: CoefficientModel,
    functional: SegmentFunctional,
    t: float,
    tau: float,
    x: Segment,
    noise: NoiseGrid,
    scheme: Scheme = Scheme.EULER,
    workers: int = 1,
) -> tuple[float, float]:
    """
    Monte Carlo estimate and standard error of E phi(X_tau^{t,x}).
    """
    steps = model.grid.steps_between(t, tau)
    if steps == 0:
        return float(functional(x.values)), 0.0
    if steps > noise.steps:
        raise ConfigurationError(f"tau={tau} lies beyond the noise horizon")
    ensemble = simulate_forward(model, t, x, noise.head(steps), scheme, workers)
    return mean_and_se(functional(ensemble.terminal_values()))


def method_of_steps(
    rhs: Callable[[float, np.ndarray, np.ndarray], np.ndarray],
    history: Callable[[float], np.ndarray],
    delay: float,
    t0: float,
    horizon: float,
    rtol: float = 1e-10,
    atol: float = 1e-12,
) -> Callable[[float], np.ndarray]:
    """
    Integrate y'(t) = rhs(t, y(t), y(t - delay)) interval by interval. history
    gives y(t0 + theta) for theta in [-delay, 0]. Returns the trajectory as
    a function of time on [t0 - delay, horizon].
    """
    pieces: list[tuple[float, float, Callable]] = []

    def trajectory(time: float) -> np.ndarray:
        if time <= t0:
            return np.atleast_1d(np.asarray(history(time - t0), dtype=float))
        for start, end, dense in pieces:
            if start <= time <= end * (1 + 1e-14) + 1e-14:
                return dense(min(time, end))
        raise ConfigurationError(f"time {time} lies beyond the integrated range")

    state = trajectory(t0)
    start = t0
    while start < horizon - 1e-14:
        end = min(start + delay, horizon)
        solution = solve_ivp(
            lambda s, y: rhs(s, y, trajectory(s - delay)),
            (start, end),
            state,
            dense_output=True,
            rtol=rtol,
            atol=atol,
        )
        if not solution.success:
            raise NumericalError(f"method of steps failed on [{start}, {end}]: {solution.message}")
        pieces.append((start, end, solution.sol))
        state = solution.y[:, -1]
        start = end
    return trajectory


def segment_history(x: Segment) -> Callable[[float], np.ndarray]:
    """
    The initial segment as a history function of theta.
    """
    return lambda theta: evaluate(x, min(max(theta, -x.grid.delay_r), 0.0))


def restart_noise(noise: NoiseGrid, k: int, paths: Union[Sequence[int], None] = None) -> NoiseGrid:
    """
    The noise a restart from step k sees, for the listed paths or all of
    them. Feeding it to a simulation started at times[k] from X_k must
    reproduce the original path from k on.
    """
    if not 0 <= k <= noise.steps:
        raise ConfigurationError(f"restart step {k} lies outside 0..{noise.steps}")
    if paths is not None:
        noise = noise.subset(np.asarray(paths, dtype=int))
    return noise.tail(k)


def lipschitz_ratio(
    model: CoefficientModel,
    t: float,
    first: Segment,
    second: Segment,
    noise: NoiseGrid,
    workers: int = 1,
) -> float:
    """
    Largest pathwise sup distance of the outputs over the sup distance of
    the initial segments, on common noise.
    """
    distance = (first + second.scaled(-1.0)).sup_norm()
    if distance == 0:
        return 0.0
    one = simulate_forward(model, t, first, noise, workers=workers)
    two = simulate_forward(model, t, second, noise, workers=workers)
    gaps = np.abs(one.history - two.history).max(axis=(1, 2))
    return float(gaps.max() / distance)


def moment_ratio(
    build_model: Callable[[GridSpec], CoefficientModel],
    grid: GridSpec,
    t: float,
    initial: Callable[[np.ndarray], np.ndarray],
    horizon: float,
    paths: int,
    seed: int,
    power: int = 4,
) -> float:
    """
    E sup |y|^power at step h/2 divided by the same moment at step h.
    """
    moments = []
    for level in (grid, grid.refined(2)):
        x = Segment.from_function(level, initial)
        noise = NoiseGrid.generate(seed, paths, t, horizon, level)
        ensemble = simulate_forward(build_model(level), t, x, noise)
        moments.append(np.mean(np.abs(ensemble.y).max(axis=(1, 2)) ** power))
    return float(moments[1] / moments[0])
