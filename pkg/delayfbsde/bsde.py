#!/usr/bin/env python3
"""
Least-squares Monte Carlo for the backward equation
dY = psi(t, X, Y, Z) dt + Z dW, Y_T = phi(X_T), with the segment X as state.
"""
import dataclasses
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
    BOOTSTRAP_STREAM,
    SAMPLE_STREAM,
    ConfigurationError,
    NumericalError,
    SingularityError,
    mean_and_se,
    noise_generator,
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
    hat_function,
    interpolate,
)


logger = logging.getLogger(__name__)

# (t, segments (N, m+1, n), y (N,), z (N, d)) -> (N,)
DriverFunction = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]

# Condition number above which a ridge-regularized design is rejected.
CONDITION_LIMIT = 1e13


@dataclass(frozen=True, kw_only=True)
class Driver:
    psi: DriverFunction
    lipschitz_z: float = 0.0
    lipschitz_y: float = 0.0
    growth_exponent: int = 0
    growth_constant: float = 0.0
    name: str = "driver"

    def __call__(self, t, values, y, z) -> np.ndarray:
        return np.broadcast_to(self.psi(t, values, y, z), y.shape)


def zero_driver() -> Driver:
    return Driver(psi=lambda t, values, y, z: np.zeros_like(y), name="zero")


def linear_driver(rate: float) -> Driver:
    """
    psi(t, x, y, z) = rate * y, the discounting driver.
    """
    return Driver(
        psi=lambda t, values, y, z: rate * y,
        lipschitz_y=abs(rate),
        growth_constant=abs(rate),
        name="linear",
    )


@dataclass(frozen=True, slots=True)
class DriverCheck:
    z_ratio: float
    y_ratio: float

    @property
    def passed(self) -> bool:
        return self.z_ratio <= 1.0 + 1e-9 and self.y_ratio <= 1.0 + 1e-9


def check_driver(
    driver: Driver, grid: GridSpec, samples: int = 256, seed: int = 0
) -> DriverCheck:
    """
    Largest observed |psi(z1) - psi(z2)| / (L_z |z1 - z2|) and the same for y,
    on random segments and arguments.
    """
    rng = noise_generator(seed, SAMPLE_STREAM)
    m, n, d = grid.past_points_m, grid.dim_n, grid.dim_d
    values = rng.standard_normal((samples, m + 1, n)).cumsum(axis=1) * np.sqrt(grid.step_h)
    y1, y2 = rng.standard_normal((2, samples)) * 3.0
    z1, z2 = rng.standard_normal((2, samples, d)) * 3.0
    dz = driver(0.0, values, y1, z1) - driver(0.0, values, y1, z2)
    dy = driver(0.0, values, y1, z1) - driver(0.0, values, y2, z1)
    z_gap = np.linalg.norm(z1 - z2, axis=-1)
    y_gap = np.abs(y1 - y2)

    def ratio(change, gap, constant):
        change = np.abs(change)
        if constant == 0:
            return 0.0 if np.all(change <= 1e-12) else np.inf
        return float(np.max(change / (constant * gap)))

    return DriverCheck(
        ratio(dz, z_gap, driver.lipschitz_z), ratio(dy, y_gap, driver.lipschitz_y)
    )


class RegressionBasis:
    """
    Features of a segment: per component x(0), x(-r/2), x(-r) and the window
    mean, all pairwise products of those, plus optional extra features and
    the intercept, which the fit adds itself.
    """

    def __init__(
        self,
        grid: GridSpec,
        ridge_scale: float = 1e-8,
        extra: Sequence[tuple[str, Callable[[np.ndarray], np.ndarray]]] = (),
    ):
        self.grid = grid
        self.ridge_scale = ridge_scale
        self.extra = list(extra)
        linear = []
        for i in range(grid.dim_n):
            linear += [f"x{i}(0)", f"x{i}(-r/2)", f"x{i}(-r)", f"mean(x{i})"]
        self.linear_names = linear
        products = [
            f"{linear[a]}*{linear[b]}"
            for a in range(len(linear))
            for b in range(a, len(linear))
        ]
        self.names = ["1"] + linear + products + [name for name, _ in self.extra]

    @property
    def size(self) -> int:
        return len(self.names)

    def with_extra(self, name: str, feature: Callable[[np.ndarray], np.ndarray]):
        return RegressionBasis(self.grid, self.ridge_scale, self.extra + [(name, feature)])

    def features(self, values: np.ndarray) -> np.ndarray:
        """
        values (N, m+1, n) -> design matrix (N, p) without the intercept column.
        """
        r = self.grid.delay_r
        weights = self.grid.trapezoid_weights() / r
        columns = []
        for i in range(self.grid.dim_n):
            columns += [
                values[:, -1, i],
                interpolate(values, self.grid, -0.5 * r)[:, i],
                values[:, 0, i],
                values[:, :, i] @ weights,
            ]
        linear = np.stack(columns, axis=1)
        upper = np.triu_indices(linear.shape[1])
        products = (linear[:, :, None] * linear[:, None, :])[:, upper[0], upper[1]]
        parts = [linear, products]
        if self.extra:
            parts.append(np.stack([f(values) for _, f in self.extra], axis=1))
        return np.concatenate(parts, axis=1)


@dataclass(frozen=True, slots=True, eq=False)
class RegressionFit:
    """
    Ridge fit on standardized features with an unpenalized intercept.
    Features that are constant over the sample are left out.
    """

    center: np.ndarray
    scale: np.ndarray
    active: np.ndarray
    intercept: np.ndarray
    coefficients: np.ndarray
    r_squared: np.ndarray

    def predict(self, features: np.ndarray) -> np.ndarray:
        standardized = (features[:, self.active] - self.center) / self.scale
        return self.intercept + standardized @ self.coefficients

    def to_json(self, names: Sequence[str]) -> dict:
        active_names = [n for n, a in zip(names, self.active) if a]
        return {
            "intercept": self.intercept.tolist(),
            "features": active_names,
            "center": self.center.tolist(),
            "scale": self.scale.tolist(),
            "coefficients": self.coefficients.tolist(),
            "r_squared": self.r_squared.tolist(),
        }


def fit_regression(
    features: np.ndarray,
    targets: np.ndarray,
    ridge_scale: float,
    names: Union[Sequence[str], None] = None,
) -> RegressionFit:
    """
    Regress targets (N, c) on features (N, p).
    """
    names = list(names) if names is not None else [f"f{i}" for i in range(features.shape[1])]
    finite = np.all(np.isfinite(features), axis=0)
    if not np.all(finite) or not np.all(np.isfinite(targets)):
        bad = [n for n, ok in zip(names, finite) if not ok]
        raise NumericalError(f"non-finite regression input; features: {bad or 'targets'}")
    center = features.mean(axis=0)
    scale = features.std(axis=0)
    active = scale > 1e-12 * (1.0 + np.abs(center))
    design = (features[:, active] - center[active]) / scale[active]
    target_mean = targets.mean(axis=0)
    centered = targets - target_mean
    if design.shape[1] == 0:
        coefficients = np.zeros((0, targets.shape[1]))
    else:
        normal = design.T @ design
        ridge = ridge_scale * np.trace(normal) / design.shape[1]
        regularized = normal + ridge * np.eye(design.shape[1])
        condition = np.linalg.cond(regularized)
        if not np.isfinite(condition) or condition > CONDITION_LIMIT:
            active_names = [n for n, a in zip(names, active) if a]
            spread = ", ".join(
                f"{n}: sd={s:.3g}" for n, s in zip(active_names, scale[active])
            )
            raise NumericalError(
                f"regression design is rank-deficient (condition {condition:.3g}); {spread}"
            )
        coefficients = np.linalg.solve(regularized, design.T @ centered)
    residual = centered - design @ coefficients
    total = (centered**2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r_squared = np.where(total > 0, 1.0 - (residual**2).sum(axis=0) / total, 1.0)
    return RegressionFit(
        center=center[active],
        scale=scale[active],
        active=active,
        intercept=target_mean,
        coefficients=coefficients,
        r_squared=r_squared,
    )


@dataclass(frozen=True, slots=True, kw_only=True)
class BsdeConfig:
    horizon_T: float
    paths: int
    seed: int
    workers: int = 1
    scheme: Scheme = Scheme.EULER
    ridge_scale: float = 1e-8
    implicit: bool = False
    implicit_iterations: int = 3
    bootstrap_samples: int = 8
    quadrature_stride: int = 5
    nested_audit: bool = False
    nested_paths: int = 64
    nested_inner_paths: int = 512

    def __post_init__(self):
        if not isinstance(self.scheme, Scheme):
            raise TypeError(f"Expected Scheme, got {type(self.scheme)}")
        if self.paths < 2:
            raise ConfigurationError(f"paths must be at least 2, got {self.paths}")
        if self.seed is None or self.seed < 0:
            raise ConfigurationError("a nonnegative seed is required")
        if self.workers < 1:
            raise ConfigurationError(f"workers must be positive, got {self.workers}")
        if self.quadrature_stride < 1 or self.implicit_iterations < 1:
            raise ConfigurationError("quadrature_stride and implicit_iterations must be positive")
        if self.bootstrap_samples < 0 or self.bootstrap_samples == 1:
            raise ConfigurationError(
                f"bootstrap_samples must be 0 or at least 2, got {self.bootstrap_samples}"
            )

    def replace(self, **changes) -> "BsdeConfig":
        return dataclasses.replace(self, **changes)

    def to_json(self) -> dict:
        """
        Every knob that affects results; the worker count does not.
        """
        data = dataclasses.asdict(self)
        data["scheme"] = self.scheme.value
        data.pop("workers")
        return data


@dataclass(frozen=True, slots=True, eq=False)
class StepFit:
    conditional_mean: Union[RegressionFit, None]
    z: Union[RegressionFit, None]


@dataclass(frozen=True, eq=False, kw_only=True)
class BsdeSolution:
    """
    Y (N, M+1) and Z (N, M, d) along the ensemble, with the regression fits
    that turn them into functions of the segment at each step.
    """

    ensemble: PathEnsemble
    driver: Driver
    terminal: SegmentFunctional
    basis: RegressionBasis
    fits: list[StepFit]
    Y: np.ndarray
    Z: np.ndarray
    implicit_iterations: int = 0

    @property
    def steps(self) -> int:
        return self.ensemble.steps

    @property
    def value_at_start(self) -> float:
        return float(self.Y[0, 0])

    @property
    def z_at_start(self) -> np.ndarray:
        return self.Z[0, 0].copy()

    @property
    def r_squared(self) -> list[float]:
        return [
            float(i.conditional_mean.r_squared[0]) if i.conditional_mean else float("nan")
            for i in self.fits
        ]

    def index_of(self, time: float) -> int:
        return self.ensemble.index_of(time)

    def conditional_mean_at(self, k: int, values: np.ndarray) -> np.ndarray:
        """
        E[Y_{k+1} | X_k = x] for a batch of segments.
        """
        fit = self.fits[k].conditional_mean
        if fit is None:
            return np.full(values.shape[0], self.Y[:, 1].mean())
        return fit.predict(self.basis.features(values))[:, 0]

    def z_at(self, k: int, values: np.ndarray) -> np.ndarray:
        """
        Z(t_k, x) for a batch of segments, shape (N, d). The last step
        reuses the fit of step M-1.
        """
        k = min(k, self.steps - 1)
        fit = self.fits[k].z
        if fit is None:
            return np.broadcast_to(self.Z[0, 0], (values.shape[0], self.Z.shape[-1])).copy()
        return fit.predict(self.basis.features(values))

    def value_at(self, k: int, values: np.ndarray) -> np.ndarray:
        """
        v(t_k, x) for a batch of segments, shape (N,).
        """
        if k >= self.steps:
            return self.terminal(values)
        t_k = self.ensemble.times[k]
        mean = self.conditional_mean_at(k, values)
        z = self.z_at(k, values)
        return _driver_step(
            self.driver, t_k, values, mean, z, self.ensemble.step, self.implicit_iterations
        )

    def to_csv(self, path: Path) -> Path:
        times = self.ensemble.times
        d = self.Z.shape[-1]
        header = ["k", "time", "y_mean"] + [f"z{j}_mean" for j in range(d)] + ["r_squared"]
        r_squared = self.r_squared + [float("nan")]
        rows = []
        for k in range(self.steps + 1):
            z_mean = self.Z[:, k].mean(axis=0) if k < self.steps else [""] * d
            rows.append([k, times[k], self.Y[:, k].mean(), *z_mean, r_squared[k]])
        return write_csv(path, header, rows)

    def coefficients_json(self) -> dict:
        return {
            "basis": self.basis.names,
            "steps": [
                {
                    "k": k,
                    "conditional_mean": i.conditional_mean.to_json(self.basis.names[1:])
                    if i.conditional_mean
                    else None,
                    "z": i.z.to_json(self.basis.names[1:]) if i.z else None,
                }
                for k, i in enumerate(self.fits)
            ],
        }


def _driver_step(driver, t, values, mean, z, dt, iterations) -> np.ndarray:
    y = mean - driver(t, values, mean, z) * dt
    for _ in range(iterations):
        y = mean - driver(t, values, y, z) * dt
    return y


def solve_backward(
    ensemble: PathEnsemble,
    driver: Driver,
    terminal: SegmentFunctional,
    basis: RegressionBasis,
    implicit_iterations: int = 0,
) -> BsdeSolution:
    """
    Backward induction with Z_k from the regressed martingale increment
    (Y_{k+1} - E[Y_{k+1}|X_k]) dW_k / dt and the explicit driver step
    Y_k = E[Y_{k+1}|X_k] - psi dt. At k = 0 the state is deterministic and
    plain averages replace the regressions.
    """
    if basis.grid != ensemble.grid:
        raise ConfigurationError("regression basis and ensemble use different grids")
    steps, dt = ensemble.steps, ensemble.step
    if steps == 0:
        raise ConfigurationError("the ensemble has no time steps to solve over")
    num_paths, d = ensemble.num_paths, ensemble.increments.shape[-1]
    times = ensemble.times
    Y = np.empty((num_paths, steps + 1))
    Z = np.empty((num_paths, steps, d))
    Y[:, steps] = terminal(ensemble.segment_values(steps))
    fits: list[Union[StepFit, None]] = [None] * steps
    names = basis.names[1:]
    for k in reversed(range(steps)):
        values = ensemble.segment_values(k)
        increments = ensemble.increments[:, k]
        following = Y[:, k + 1]
        if k == 0:
            mean = np.full(num_paths, following.mean())
            z = ((following - mean)[:, None] * increments).mean(axis=0) / dt
            z = np.broadcast_to(z, (num_paths, d))
            fits[k] = StepFit(None, None)
        else:
            features = basis.features(values)
            mean_fit = fit_regression(features, following[:, None], basis.ridge_scale, names)
            mean = mean_fit.predict(features)[:, 0]
            targets = (following - mean)[:, None] * increments / dt
            z_fit = fit_regression(features, targets, basis.ridge_scale, names)
            z = z_fit.predict(features)
            fits[k] = StepFit(mean_fit, z_fit)
        Z[:, k] = z
        Y[:, k] = _driver_step(driver, times[k], values, mean, z, dt, implicit_iterations)
    logger.debug(
        "solved backward over %d steps, Y0=%.6g, min R^2=%.3g",
        steps,
        Y[0, 0],
        np.nanmin([i.conditional_mean.r_squared[0] for i in fits if i.conditional_mean] or [1.0]),
    )
    return BsdeSolution(
        ensemble=ensemble,
        driver=driver,
        terminal=terminal,
        basis=basis,
        fits=fits,
        Y=Y,
        Z=Z,
        implicit_iterations=implicit_iterations,
    )


def solve_from(
    model: CoefficientModel,
    driver: Driver,
    terminal: SegmentFunctional,
    t: float,
    x: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
    noise: Union[NoiseGrid, None] = None,
) -> BsdeSolution:
    """
    Simulate a fresh ensemble from (t, x) and solve backward on it.
    """
    if noise is None:
        noise = NoiseGrid.generate(
            config.seed, config.paths, t, config.horizon_T, model.grid, config.workers
        )
    if basis is None:
        basis = RegressionBasis(model.grid, config.ridge_scale)
    ensemble = simulate_forward(model, t, x, noise, config.scheme, config.workers)
    iterations = config.implicit_iterations if config.implicit else 0
    return solve_backward(ensemble, driver, terminal, basis, iterations)


@dataclass(frozen=True, slots=True)
class ValueEstimate:
    value: float
    std_error: float
    solution: Union[BsdeSolution, None] = field(repr=False)


def solve_value(
    model: CoefficientModel,
    driver: Driver,
    terminal: SegmentFunctional,
    t: float,
    x: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
    noise: Union[NoiseGrid, None] = None,
) -> ValueEstimate:
    """
    v(t, x) with a bootstrap standard error over resampled paths, or the
    plain Monte Carlo error of the first-step average when
    bootstrap_samples is 0.
    """
    if model.grid.steps_between(t, config.horizon_T) == 0:
        return ValueEstimate(float(terminal(x.values)), 0.0, None)
    solution = solve_from(model, driver, terminal, t, x, config, basis, noise)
    value = solution.value_at_start
    if config.bootstrap_samples == 0:
        _, error = mean_and_se(solution.Y[:, 1])
        return ValueEstimate(value, error, solution)
    rng = noise_generator(config.seed, BOOTSTRAP_STREAM)
    iterations = config.implicit_iterations if config.implicit else 0
    resampled = []
    for _ in range(config.bootstrap_samples):
        indices = np.sort(rng.integers(0, config.paths, config.paths))
        replica = solve_backward(
            solution.ensemble.subset(indices), driver, terminal, solution.basis, iterations
        )
        resampled.append(replica.value_at_start)
    error = float(np.std(resampled, ddof=1))
    logger.info("v(%g, x) = %.6g (bootstrap se %.2e)", t, value, error)
    return ValueEstimate(value, error, solution)


def value_function(
    model: CoefficientModel,
    driver: Driver,
    terminal: SegmentFunctional,
    t: float,
    x: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
) -> tuple[float, float]:
    estimate = solve_value(model, driver, terminal, t, x, config, basis)
    return estimate.value, estimate.std_error


def _right_pseudo_inverse(z: np.ndarray, sigma: np.ndarray, k: int, paths) -> np.ndarray:
    """
    Solve g sigma = z for g, z (N, d), sigma (N, n, d) -> g (N, n).
    """
    singular = np.linalg.svd(sigma, compute_uv=False)
    scale = np.maximum(1.0, np.abs(sigma).max(axis=(-2, -1)))
    deficient = singular[..., -1] <= 1e-12 * scale
    if np.any(deficient):
        path = paths[int(np.argmax(deficient))]
        raise SingularityError(
            f"sigma has rank below n at step k={k}, path {path}; nabla0 v is not identified"
        )
    gram = sigma @ np.swapaxes(sigma, -1, -2)
    rhs = np.einsum("pnd,pd->pn", sigma, z)
    return np.linalg.solve(gram, rhs[..., None])[..., 0]


def nabla0_v(
    solution: BsdeSolution, model: CoefficientModel, k: int, path: int
) -> np.ndarray:
    """
    nabla_0 v(t_k, X_k) on one path from Z_k = nabla_0 v sigma.
    """
    k = min(k, solution.steps - 1)
    values = solution.ensemble.segment_values(k)[path : path + 1]
    sigma = model.diffusion_sigma(solution.ensemble.times[k], values)
    return _right_pseudo_inverse(solution.Z[path : path + 1, k], sigma, k, [path])[0]


def nabla0_paths(solution: BsdeSolution, model: CoefficientModel, k: int) -> np.ndarray:
    """
    nabla0_v on every path at step k, shape (N, n).
    """
    k = min(k, solution.steps - 1)
    values = solution.ensemble.segment_values(k)
    sigma = model.diffusion_sigma(solution.ensemble.times[k], values)
    return _right_pseudo_inverse(
        solution.Z[:, k], sigma, k, list(range(solution.ensemble.num_paths))
    )


@dataclass(frozen=True, slots=True, kw_only=True)
class ZIdentificationReport:
    regression: np.ndarray
    regression_std_error: np.ndarray
    bump: np.ndarray
    bump_std_error: np.ndarray
    bump_size: float
    hat_width: float

    @property
    def relative_gap(self) -> float:
        """
        Largest |regression - bump| relative to max(|bump|, 1).
        """
        scale = np.maximum(np.abs(self.bump), 1.0)
        return float(np.max(np.abs(self.regression - self.bump) / scale))

    def passed(self, threshold: float) -> bool:
        return self.relative_gap <= threshold

    def to_json(self) -> dict:
        return {
            "regression": self.regression,
            "regression_std_error": self.regression_std_error,
            "bump": self.bump,
            "bump_std_error": self.bump_std_error,
            "bump_size": self.bump_size,
            "hat_width": self.hat_width,
            "relative_gap": self.relative_gap,
        }


def z_identification_check(
    model: CoefficientModel,
    driver: Driver,
    terminal: SegmentFunctional,
    t: float,
    x: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
) -> ZIdentificationReport:
    """
    nabla_0 v(t, x) from Z at the first step against central differences of
    v(t, x +- delta hat), where the hat sits on [-h, 0]. All runs share the
    same noise, so the bump differences are taken pathwise.
    """
    grid = model.grid
    noise = NoiseGrid.generate(
        config.seed, config.paths, t, config.horizon_T, grid, config.workers
    )
    base = solve_from(model, driver, terminal, t, x, config, basis, noise)
    dt = base.ensemble.step
    following = base.Y[:, 1]
    increments = base.ensemble.increments[:, 0]
    sigma = model.diffusion_sigma(t, x.values[None])
    samples = (following - following.mean())[:, None] * increments / dt
    z_error = samples.std(axis=0, ddof=1) / np.sqrt(config.paths)
    regression = _right_pseudo_inverse(base.z_at_start[None], sigma, 0, [0])[0]
    regression_error = np.abs(
        _right_pseudo_inverse(z_error[None], sigma, 0, [0])[0]
    )

    n = grid.dim_n
    bump = np.empty(n)
    bump_error = np.empty(n)
    delta = 1e-2 * (1.0 + float(np.max(np.abs(x.now()))))
    for i in range(n):
        hat = hat_function(grid, i).scaled(delta)
        up = solve_from(model, driver, terminal, t, x + hat, config, basis, noise)
        down = solve_from(model, driver, terminal, t, x + hat.scaled(-1.0), config, basis, noise)
        bump[i] = (up.value_at_start - down.value_at_start) / (2 * delta)
        _, bump_error[i] = mean_and_se((up.Y[:, 1] - down.Y[:, 1]) / (2 * delta))
    report = ZIdentificationReport(
        regression=regression,
        regression_std_error=regression_error,
        bump=bump,
        bump_std_error=bump_error,
        bump_size=delta,
        hat_width=grid.step_h,
    )
    logger.info(
        "Z identification: regression %s, bump %s, gap %.3g",
        np.round(regression, 6),
        np.round(bump, 6),
        report.relative_gap,
    )
    return report
