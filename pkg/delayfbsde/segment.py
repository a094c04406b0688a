#!/usr/bin/env python3
"""
Elements of C([-r,0]; R^n) sampled on a uniform grid, functionals on them,
and finite measures on [-r,0] that hold their gradients.

Everything here accepts batched arrays: a segment batch has shape
(..., m+1, n) and a measure batch carries the same leading axes.
"""
import logging
from abc import (
    ABC,
    abstractmethod,
)
from collections.abc import (
    Callable,
    Sequence,
)
from dataclasses import (
    dataclass,
    field,
)
from enum import Enum
from typing import Union

import numpy as np

from .lib import (
    ConfigurationError,
    DomainError,
    on_grid,
)


logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True, kw_only=True)
class GridSpec:
    delay_r: float
    past_points_m: int
    dim_n: int = 1
    dim_d: int = 1
    step_h: float = field(init=False)

    def __post_init__(self):
        """
        r and m are given, h is derived so that m * h = r by construction.
        """
        if int(self.past_points_m) != self.past_points_m or self.past_points_m < 1:
            raise ConfigurationError(
                f"past_points_m must be a positive integer, got {self.past_points_m}"
            )
        if not self.delay_r > 0:
            raise ConfigurationError(f"delay_r must be positive, got {self.delay_r}")
        if self.dim_n < 1 or self.dim_d < 1:
            raise ConfigurationError(
                f"dimensions must be positive, got n={self.dim_n} d={self.dim_d}"
            )
        object.__setattr__(self, "step_h", self.delay_r / self.past_points_m)

    @property
    def thetas(self) -> np.ndarray:
        return (np.arange(self.past_points_m + 1) - self.past_points_m) * self.step_h

    def trapezoid_weights(self) -> np.ndarray:
        weights = np.full(self.past_points_m + 1, self.step_h)
        weights[0] = weights[-1] = 0.5 * self.step_h
        return weights

    def refined(self, factor: int = 2) -> "GridSpec":
        return GridSpec(
            delay_r=self.delay_r,
            past_points_m=self.past_points_m * factor,
            dim_n=self.dim_n,
            dim_d=self.dim_d,
        )

    def steps_between(self, start: float, stop: float) -> int:
        """
        Number of grid steps from start to stop, which must be a multiple of h.
        """
        steps = on_grid(stop - start, self.step_h)
        if steps is None or steps < 0:
            raise ConfigurationError(
                f"interval [{start}, {stop}] is not a nonnegative multiple of h={self.step_h}"
            )
        return steps

    def to_json(self) -> dict:
        return {
            "delay_r": self.delay_r,
            "past_points_m": self.past_points_m,
            "dim_n": self.dim_n,
            "dim_d": self.dim_d,
        }

    @classmethod
    def from_json(cls, data: dict) -> "GridSpec":
        return cls(
            delay_r=float(data["delay_r"]),
            past_points_m=int(data["past_points_m"]),
            dim_n=int(data.get("dim_n", 1)),
            dim_d=int(data.get("dim_d", 1)),
        )


@dataclass(frozen=True, slots=True, eq=False)
class Segment:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        expected = (self.grid.past_points_m + 1, self.grid.dim_n)
        if values.shape != expected:
            raise ConfigurationError(
                f"segment needs shape {expected}, got {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("segment values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def now(self) -> np.ndarray:
        return self.values[-1]

    def __add__(self, other: "Segment") -> "Segment":
        return Segment(self.grid, self.values + other.values)

    def scaled(self, factor: float) -> "Segment":
        return Segment(self.grid, self.values * factor)

    @classmethod
    def constant(cls, grid: GridSpec, value: Union[float, Sequence[float]]) -> "Segment":
        row = np.broadcast_to(np.asarray(value, dtype=float), (grid.dim_n,))
        return cls(grid, np.tile(row, (grid.past_points_m + 1, 1)))

    @classmethod
    def ramp(cls, grid: GridSpec) -> "Segment":
        """
        The identity ramp theta_j in every component.
        """
        return cls(grid, np.repeat(grid.thetas[:, None], grid.dim_n, axis=1))

    @classmethod
    def from_function(
        cls, grid: GridSpec, func: Callable[[np.ndarray], np.ndarray]
    ) -> "Segment":
        values = np.asarray(func(grid.thetas), dtype=float)
        return cls(grid, values.reshape(grid.past_points_m + 1, -1))

    def to_json(self) -> dict:
        return {"grid": self.grid.to_json(), "values": self.values.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "Segment":
        return cls(GridSpec.from_json(data["grid"]), np.asarray(data["values"]))


def _interpolation_weight(grid: GridSpec, theta: float) -> tuple[int, float]:
    """
    Left grid index and linear weight of the right neighbour for theta.
    Grid points give weight exactly 0 (or exactly 1 at theta = 0).
    """
    r = grid.delay_r
    if theta < -r * (1 + 1e-12) or theta > r * 1e-12:
        raise DomainError(f"theta={theta} lies outside [-{r}, 0]")
    position = (theta + r) / grid.step_h
    if (index := on_grid(theta + r, grid.step_h)) is not None:
        position = float(index)
    position = min(max(position, 0.0), float(grid.past_points_m))
    left = min(int(np.floor(position)), grid.past_points_m - 1)
    return left, position - left


def interpolate(values: np.ndarray, grid: GridSpec, theta: float) -> np.ndarray:
    """
    Batched evaluation of segments at theta; values has shape (..., m+1, n).
    """
    left, weight = _interpolation_weight(grid, theta)
    if weight == 0.0:
        return values[..., left, :]
    if weight == 1.0:
        return values[..., left + 1, :]
    return (1.0 - weight) * values[..., left, :] + weight * values[..., left + 1, :]


def evaluate(segment: Segment, theta: float) -> np.ndarray:
    return interpolate(segment.values, segment.grid, theta)


def roll_values(values: np.ndarray, new_value: np.ndarray) -> np.ndarray:
    """
    Shift a batch of segments one step left and append new_value at theta = 0.
    """
    new_value = np.asarray(new_value, dtype=float)
    return np.concatenate([values[..., 1:, :], new_value[..., None, :]], axis=-2)


def roll(segment: Segment, new_value: Union[float, Sequence[float]]) -> Segment:
    row = np.broadcast_to(np.asarray(new_value, dtype=float), (segment.grid.dim_n,))
    return Segment(segment.grid, roll_values(segment.values, row))


def hat_function(grid: GridSpec, component: int = 0) -> Segment:
    """
    Value 1 at theta = 0 in one component, falling linearly to 0 at -h.
    """
    values = np.zeros((grid.past_points_m + 1, grid.dim_n))
    values[-1, component] = 1.0
    return Segment(grid, values)


@dataclass(frozen=True, slots=True, eq=False, kw_only=True)
class WindowMeasure:
    """
    A tuple of finite signed measures on [-r,0]: an atom at 0, atoms at the
    interior grid points theta_0..theta_{m-1} and a density sampled on the
    grid and integrated with trapezoidal weights.

    Arrays carry leading batch axes: atom_at_zero (..., c), atoms (..., m, c),
    density (..., m+1, c), where c is the number of components.
    """

    grid: GridSpec
    atom_at_zero: np.ndarray
    atoms: np.ndarray
    density: np.ndarray

    @classmethod
    def zero(
        cls, grid: GridSpec, components: int = 1, batch: tuple = ()
    ) -> "WindowMeasure":
        m = grid.past_points_m
        return cls(
            grid=grid,
            atom_at_zero=np.zeros((*batch, components)),
            atoms=np.zeros((*batch, m, components)),
            density=np.zeros((*batch, m + 1, components)),
        )

    @classmethod
    def dirac(cls, grid: GridSpec, theta: float, weight: float = 1.0) -> "WindowMeasure":
        """
        A scalar point mass at theta, split linearly between grid neighbours
        when theta is off the grid.
        """
        measure = cls.zero(grid)
        left, w = _interpolation_weight(grid, theta)
        _deposit(measure, left, (1.0 - w) * weight)
        _deposit(measure, left + 1, w * weight)
        return measure

    @classmethod
    def lebesgue(
        cls, grid: GridSpec, lower: Union[float, None] = None, weight: float = 1.0
    ) -> "WindowMeasure":
        """
        weight times Lebesgue measure on [lower, 0]; lower must be a grid point.
        """
        m = grid.past_points_m
        density = np.zeros((m + 1, 1))
        if lower is None:
            density[:] = weight
        else:
            start = grid.steps_between(-grid.delay_r, lower)
            if start < m:
                density[start:] = weight
                # Trapezoid end weight of a sub-interval is h/2, not h.
                if start > 0:
                    density[start] = 0.5 * weight
        return cls(
            grid=grid,
            atom_at_zero=np.zeros(1),
            atoms=np.zeros((m, 1)),
            density=density,
        )

    @property
    def batch_shape(self) -> tuple:
        return self.atom_at_zero.shape[:-1]

    @property
    def nabla0(self) -> np.ndarray:
        """
        The mass at theta = 0.
        """
        return self.atom_at_zero

    @property
    def interior_atoms(self) -> list[tuple[float, np.ndarray]]:
        if self.batch_shape:
            raise TypeError("interior_atoms is defined for unbatched measures only")
        thetas = self.grid.thetas
        return [
            (float(thetas[j]), self.atoms[j])
            for j in range(self.grid.past_points_m)
            if np.any(self.atoms[j] != 0)
        ]

    def total_variation(self) -> np.ndarray:
        h = self.grid.step_h
        return (
            np.abs(self.atom_at_zero).sum(axis=-1)
            + np.abs(self.atoms).sum(axis=(-2, -1))
            + h * np.abs(self.density).sum(axis=(-2, -1))
        )

    def pair(self, values: np.ndarray) -> np.ndarray:
        """
        <mu, f> for f sampled on the grid, shape (..., m+1, c); batch axes
        broadcast against the measure's.
        """
        weights = self.grid.trapezoid_weights()[:, None]
        return (
            (self.atom_at_zero * values[..., -1, :]).sum(axis=-1)
            + (self.atoms * values[..., :-1, :]).sum(axis=(-2, -1))
            + (weights * self.density * values).sum(axis=(-2, -1))
        )

    def scaled(self, factor: np.ndarray) -> "WindowMeasure":
        """
        Multiply by factor, which broadcasts against the batch shape.
        """
        factor = np.asarray(factor, dtype=float)
        return WindowMeasure(
            grid=self.grid,
            atom_at_zero=self.atom_at_zero * factor[..., None],
            atoms=self.atoms * factor[..., None, None],
            density=self.density * factor[..., None, None],
        )

    def __add__(self, other: "WindowMeasure") -> "WindowMeasure":
        return WindowMeasure(
            grid=self.grid,
            atom_at_zero=self.atom_at_zero + other.atom_at_zero,
            atoms=self.atoms + other.atoms,
            density=self.density + other.density,
        )

    def to_json(self) -> dict:
        return {
            "atom0": self.atom_at_zero.tolist(),
            "atoms": [[theta, mass.tolist()] for theta, mass in self.interior_atoms],
            "density": self.density.tolist(),
        }

    @classmethod
    def from_json(cls, grid: GridSpec, data: dict) -> "WindowMeasure":
        atom0 = np.asarray(data["atom0"], dtype=float)
        measure = cls.zero(grid, components=atom0.shape[-1])
        measure.atom_at_zero[:] = atom0
        for theta, mass in data["atoms"]:
            index = grid.steps_between(-grid.delay_r, theta)
            measure.atoms[index] = mass
        measure.density[:] = np.asarray(data["density"], dtype=float)
        return measure


def _deposit(measure: WindowMeasure, index: int, mass) -> None:
    """
    Add mass at grid index (index m is theta = 0). Only used while building.
    """
    if index == measure.grid.past_points_m:
        measure.atom_at_zero[...] += mass
    else:
        measure.atoms[..., index, :] += mass


def stack_measures(measures: Sequence[WindowMeasure], axis: int = -1) -> WindowMeasure:
    """
    Stack measures along a new batch axis (counted among batch axes).
    """
    first = measures[0]
    batch_ndim = len(first.batch_shape)
    position = axis if axis >= 0 else batch_ndim + 1 + axis
    return WindowMeasure(
        grid=first.grid,
        atom_at_zero=np.stack([i.atom_at_zero for i in measures], axis=position),
        atoms=np.stack([i.atoms for i in measures], axis=position),
        density=np.stack([i.density for i in measures], axis=position),
    )


class FunctionalKind(str, Enum):
    CYLINDRICAL = "cylindrical"
    WINDOW_INTEGRAL = "window-integral"
    COMPOSITE = "composite"


class SegmentFunctional(ABC):
    """
    A real functional on segments with a declared gradient.

    Subclasses implement batched evaluate_values and gradient_values; the
    growth constants document |F(x)| <= K (1 + |x|)^(m+1).
    """

    kind: FunctionalKind

    def __init__(self, grid: GridSpec, growth_exponent: int, growth_constant: float):
        self.grid = grid
        self.growth_exponent = growth_exponent
        self.growth_constant = growth_constant

    @abstractmethod
    def evaluate_values(self, values: np.ndarray) -> np.ndarray:
        """
        values (..., m+1, n) -> (...)
        """

    @abstractmethod
    def gradient_values(self, values: np.ndarray) -> WindowMeasure:
        """
        values (..., m+1, n) -> measure with batch shape (...) and n components.
        """

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.evaluate_values(values)

    def __add__(self, other: "SegmentFunctional") -> "SegmentFunctional":
        return CompositeFunctional(
            [self, other],
            outer=lambda z: z[..., 0] + z[..., 1],
            outer_gradient=lambda z: np.ones_like(z),
            growth_exponent=max(self.growth_exponent, other.growth_exponent),
            growth_constant=self.growth_constant + other.growth_constant,
        )


class CylindricalFunctional(SegmentFunctional):
    kind = FunctionalKind.CYLINDRICAL

    def __init__(
        self,
        grid: GridSpec,
        angles: Sequence[float],
        outer: Callable[[np.ndarray], np.ndarray],
        outer_gradient: Callable[[np.ndarray], np.ndarray],
        growth_exponent: int = 0,
        growth_constant: float = 1.0,
    ):
        """
        outer maps points (..., k, n) to (...), outer_gradient to (..., k, n).
        """
        super().__init__(grid, growth_exponent, growth_constant)
        self.angles = [float(i) for i in angles]
        self.weights = [_interpolation_weight(grid, i) for i in self.angles]
        self.outer = outer
        self.outer_gradient = outer_gradient

    def _points(self, values: np.ndarray) -> np.ndarray:
        return np.stack([interpolate(values, self.grid, i) for i in self.angles], axis=-2)

    def evaluate_values(self, values: np.ndarray) -> np.ndarray:
        return self.outer(self._points(values))

    def gradient_values(self, values: np.ndarray) -> WindowMeasure:
        partials = self.outer_gradient(self._points(values))
        measure = WindowMeasure.zero(
            self.grid, components=values.shape[-1], batch=values.shape[:-2]
        )
        for i, (left, w) in enumerate(self.weights):
            if w != 1.0:
                _deposit(measure, left, (1.0 - w) * partials[..., i, :])
            if w != 0.0:
                _deposit(measure, left + 1, w * partials[..., i, :])
        return measure


class WindowIntegralFunctional(SegmentFunctional):
    """
    x -> integral of g(x(theta)) against a scalar WindowMeasure.
    """

    kind = FunctionalKind.WINDOW_INTEGRAL

    def __init__(
        self,
        grid: GridSpec,
        weight: WindowMeasure,
        pointwise: Callable[[np.ndarray], np.ndarray],
        pointwise_gradient: Callable[[np.ndarray], np.ndarray],
        growth_exponent: int = 0,
        growth_constant: float = 1.0,
    ):
        """
        pointwise maps (..., n) to (...), pointwise_gradient (..., n) to (..., n).
        """
        super().__init__(grid, growth_exponent, growth_constant)
        if weight.batch_shape or weight.atom_at_zero.shape[-1] != 1:
            raise ConfigurationError("window weight must be a single scalar measure")
        self.weight = weight
        self.pointwise = pointwise
        self.pointwise_gradient = pointwise_gradient

    def evaluate_values(self, values: np.ndarray) -> np.ndarray:
        return self.weight.pair(self.pointwise(values)[..., None])

    def gradient_values(self, values: np.ndarray) -> WindowMeasure:
        partials = self.pointwise_gradient(values)
        return WindowMeasure(
            grid=self.grid,
            atom_at_zero=self.weight.atom_at_zero * partials[..., -1, :],
            atoms=self.weight.atoms * partials[..., :-1, :],
            density=self.weight.density * partials,
        )


class CompositeFunctional(SegmentFunctional):
    """
    x -> outer(phi_1(x), ..., phi_k(x)).
    """

    kind = FunctionalKind.COMPOSITE

    def __init__(
        self,
        parts: Sequence[SegmentFunctional],
        outer: Callable[[np.ndarray], np.ndarray],
        outer_gradient: Callable[[np.ndarray], np.ndarray],
        growth_exponent: int = 0,
        growth_constant: float = 1.0,
    ):
        super().__init__(parts[0].grid, growth_exponent, growth_constant)
        self.parts = list(parts)
        self.outer = outer
        self.outer_gradient = outer_gradient

    def _inner(self, values: np.ndarray) -> np.ndarray:
        return np.stack([i.evaluate_values(values) for i in self.parts], axis=-1)

    def evaluate_values(self, values: np.ndarray) -> np.ndarray:
        return self.outer(self._inner(values))

    def gradient_values(self, values: np.ndarray) -> WindowMeasure:
        partials = self.outer_gradient(self._inner(values))
        result = None
        for i, part in enumerate(self.parts):
            term = part.gradient_values(values).scaled(partials[..., i])
            result = term if result is None else result + term
        return result


def functional_eval(functional: SegmentFunctional, x: Segment) -> float:
    return float(functional.evaluate_values(x.values))


def functional_gradient(functional: SegmentFunctional, x: Segment) -> WindowMeasure:
    return functional.gradient_values(x.values)


def directional_check(
    functional: SegmentFunctional, x: Segment, direction: Segment, eps: float = 1e-5
) -> tuple[float, float]:
    """
    Return the gradient pairing along direction and the central finite
    difference of the functional along the same direction.
    """
    analytic = float(functional_gradient(functional, x).pair(direction.values))
    plus = functional.evaluate_values(x.values + eps * direction.values)
    minus = functional.evaluate_values(x.values - eps * direction.values)
    return analytic, float((plus - minus) / (2 * eps))


def point_evaluation(grid: GridSpec, theta: float = 0.0, component: int = 0):
    """
    x -> x(theta)[component].
    """
    def outer(points):
        return points[..., 0, component]

    def outer_gradient(points):
        gradient = np.zeros_like(points)
        gradient[..., 0, component] = 1.0
        return gradient

    return CylindricalFunctional(grid, [theta], outer, outer_gradient, 0, 1.0)


def squared_point(grid: GridSpec, theta: float = 0.0):
    """
    x -> x(theta)^2 for scalar segments.
    """
    return CylindricalFunctional(
        grid,
        [theta],
        lambda p: p[..., 0, 0] ** 2,
        lambda p: 2.0 * p,
        growth_exponent=1,
        growth_constant=2.0,
    )


def lag_product(grid: GridSpec):
    """
    x -> x(0) * x(-r) for scalar segments.
    """
    def outer_gradient(points):
        gradient = np.empty_like(points)
        gradient[..., 0, :] = points[..., 1, :]
        gradient[..., 1, :] = points[..., 0, :]
        return gradient

    return CylindricalFunctional(
        grid,
        [0.0, -grid.delay_r],
        lambda p: p[..., 0, 0] * p[..., 1, 0],
        outer_gradient,
        growth_exponent=1,
        growth_constant=2.0,
    )


def window_mean(grid: GridSpec, lower: Union[float, None] = None):
    """
    Average of a scalar segment over [lower, 0] (the whole window by default).
    """
    length = grid.delay_r if lower is None else -lower
    weight = WindowMeasure.lebesgue(grid, lower, weight=1.0 / length)
    return WindowIntegralFunctional(
        grid,
        weight,
        lambda v: v[..., 0],
        lambda v: np.ones_like(v),
        growth_exponent=0,
        growth_constant=1.0,
    )


def constant_functional(grid: GridSpec, value: float):
    return CylindricalFunctional(
        grid,
        [0.0],
        lambda p: np.full(p.shape[:-2], float(value)),
        np.zeros_like,
        growth_exponent=0,
        growth_constant=abs(value),
    )
