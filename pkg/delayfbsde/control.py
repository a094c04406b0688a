#!/usr/bin/env python3
"""
Optimal control of a delay equation through its drift channel: the
hamiltonian and its minimizers, cost functionals, closed-loop feedback from
the backward equation and the check that no policy beats the value.
"""
import dataclasses
import logging
from collections.abc import Callable
from dataclasses import (
    dataclass,
    field,
)
from enum import Enum
from pathlib import Path
from typing import Union

import numpy as np

from .bsde import (
    BsdeConfig,
    BsdeSolution,
    Driver,
    solve_value,
)
from .lib import (
    POLICY_STREAM,
    SAMPLE_STREAM,
    ConfigurationError,
    mean_and_se,
    noise_generator,
    write_csv,
)
from .sdde import (
    Channel,
    CoefficientModel,
    Control,
    NoiseGrid,
    PathEnsemble,
    evaluate_policy,
    girsanov_weight,
    simulate_controlled,
    simulate_forward,
)
from .segment import (
    GridSpec,
    Segment,
    SegmentFunctional,
    WindowIntegralFunctional,
    WindowMeasure,
)


logger = logging.getLogger(__name__)


class ControlSetKind(str, Enum):
    BOX = "box"
    BALL = "ball"
    FINITE = "finite"


class MinimizerMode(str, Enum):
    ANALYTIC = "analytic"
    GRID = "grid"


@dataclass(frozen=True, kw_only=True)
class ControlSet:
    kind: ControlSetKind
    dim_k: int = 1
    lower: float = -1.0
    upper: float = 1.0
    radius: float = 1.0
    points: tuple = ()

    def __post_init__(self):
        if not isinstance(self.kind, ControlSetKind):
            raise TypeError(f"Expected ControlSetKind, got {type(self.kind)}")
        match self.kind:
            case ControlSetKind.BOX if not self.lower <= self.upper:
                raise ConfigurationError(f"empty box [{self.lower}, {self.upper}]")
            case ControlSetKind.BALL if not self.radius > 0:
                raise ConfigurationError(f"ball radius must be positive, got {self.radius}")
            case ControlSetKind.FINITE:
                if not self.points:
                    raise ConfigurationError("a finite control set needs at least one point")
                points = tuple(tuple(float(i) for i in np.atleast_1d(p)) for p in self.points)
                if any(len(p) != self.dim_k for p in points):
                    raise ConfigurationError(f"control points must have {self.dim_k} entries")
                object.__setattr__(self, "points", points)

    def candidates(self, resolution: int = 101) -> np.ndarray:
        """
        Grid of admissible controls, shape (C, k), in lexicographic order.
        """
        match self.kind:
            case ControlSetKind.BOX:
                axis = np.linspace(self.lower, self.upper, resolution)
                grid = np.stack(np.meshgrid(*[axis] * self.dim_k, indexing="ij"), axis=-1)
                return grid.reshape(-1, self.dim_k)
            case ControlSetKind.BALL:
                axis = np.linspace(-self.radius, self.radius, resolution)
                grid = np.stack(np.meshgrid(*[axis] * self.dim_k, indexing="ij"), axis=-1)
                grid = grid.reshape(-1, self.dim_k)
                inside = grid[np.linalg.norm(grid, axis=1) <= self.radius * (1 + 1e-12)]
                if self.dim_k == 2:
                    angles = np.linspace(0.0, 2 * np.pi, 4 * resolution, endpoint=False)
                    circle = self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
                    inside = np.concatenate([inside, circle])
                return _lexicographic(inside)
            case ControlSetKind.FINITE:
                return _lexicographic(np.asarray(self.points, dtype=float))

    def contains(self, u: np.ndarray, tolerance: float = 1e-9) -> np.ndarray:
        u = np.atleast_2d(u)
        match self.kind:
            case ControlSetKind.BOX:
                return np.all(
                    (u >= self.lower - tolerance) & (u <= self.upper + tolerance), axis=-1
                )
            case ControlSetKind.BALL:
                return np.linalg.norm(u, axis=-1) <= self.radius + tolerance
            case ControlSetKind.FINITE:
                points = np.asarray(self.points)
                gaps = np.abs(u[:, None, :] - points[None]).max(axis=-1)
                return gaps.min(axis=1) <= tolerance

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        match self.kind:
            case ControlSetKind.BOX:
                return rng.uniform(self.lower, self.upper, (count, self.dim_k))
            case ControlSetKind.BALL:
                direction = rng.standard_normal((count, self.dim_k))
                direction /= np.linalg.norm(direction, axis=1, keepdims=True)
                radius = self.radius * rng.uniform(size=(count, 1)) ** (1.0 / self.dim_k)
                return direction * radius
            case ControlSetKind.FINITE:
                points = np.asarray(self.points)
                return points[rng.integers(0, len(points), count)]

    def to_json(self) -> dict:
        data = {"kind": self.kind.value, "dim_k": self.dim_k}
        match self.kind:
            case ControlSetKind.BOX:
                data |= {"lower": self.lower, "upper": self.upper}
            case ControlSetKind.BALL:
                data |= {"radius": self.radius}
            case ControlSetKind.FINITE:
                data |= {"points": [list(p) for p in self.points]}
        return data


def _lexicographic(points: np.ndarray) -> np.ndarray:
    order = np.lexsort(points.T[::-1])
    return points[order]


@dataclass(frozen=True, slots=True, kw_only=True)
class MinimizerRule:
    mode: MinimizerMode = MinimizerMode.GRID
    resolution: int = 101

    def __post_init__(self):
        if not isinstance(self.mode, MinimizerMode):
            raise TypeError(f"Expected MinimizerMode, got {type(self.mode)}")
        if self.resolution < 2:
            raise ConfigurationError(f"grid resolution must be at least 2, got {self.resolution}")


# (t, segments (N, m+1, n), z (N, d)) -> (u (N, k), H (N,))
AnalyticMinimizer = Callable[[float, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True, kw_only=True)
class ControlProblem:
    """
    Minimize E int g(u) ds + E phi(X_T^u) over controls in U, where u acts on
    the dynamics through sigma h(t, X, u).
    """

    control_set: ControlSet
    running_cost: Callable[[np.ndarray], np.ndarray]
    channel: Channel
    channel_bound: float
    terminal: SegmentFunctional
    analytic: Union[AnalyticMinimizer, None] = None
    name: str = "problem"

    def default_rule(self) -> MinimizerRule:
        if self.analytic is not None:
            return MinimizerRule(mode=MinimizerMode.ANALYTIC)
        return MinimizerRule(mode=MinimizerMode.GRID)

    def with_running_cost(
        self,
        ell: Callable[[np.ndarray], np.ndarray],
        ell_gradient: Callable[[np.ndarray], np.ndarray],
        t: float,
        horizon: float,
    ) -> "ControlProblem":
        """
        Fold a state running cost int_t^T ell(y_s) ds into the terminal cost.
        """
        reduced = reduce_running_cost(ell, ell_gradient, t, horizon, self.terminal.grid)
        return dataclasses.replace(self, terminal=self.terminal + reduced)


@dataclass(frozen=True, slots=True)
class ProblemCheck:
    channel_ratio: float
    min_running_cost: float

    @property
    def passed(self) -> bool:
        return self.channel_ratio <= 1.0 + 1e-12 and self.min_running_cost >= 0.0


def check_problem(
    problem: ControlProblem, grid: GridSpec, samples: int = 256, seed: int = 0
) -> ProblemCheck:
    """
    Spot-check |h| <= bound and g >= 0 on random segments and controls.
    """
    rng = noise_generator(seed, SAMPLE_STREAM)
    values = rng.standard_normal((samples, grid.past_points_m + 1, grid.dim_n)) * 3.0
    controls = problem.control_set.sample(rng, samples)
    pushed = problem.channel(0.0, values, controls)
    ratio = float(np.max(np.abs(pushed)) / problem.channel_bound) if samples else 0.0
    costs = np.concatenate(
        [problem.running_cost(controls), problem.running_cost(problem.control_set.candidates(11))]
    )
    return ProblemCheck(ratio, float(np.min(costs)))


def _minimize(
    problem: ControlProblem,
    rule: MinimizerRule,
    t: float,
    values: np.ndarray,
    z: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    match rule.mode:
        case MinimizerMode.ANALYTIC:
            if problem.analytic is None:
                raise ConfigurationError(f"problem {problem.name} has no analytic minimizer")
            return problem.analytic(t, values, z)
        case MinimizerMode.GRID:
            candidates = problem.control_set.candidates(rule.resolution)
            costs = problem.running_cost(candidates)
            count = values.shape[0]
            totals = np.empty((count, len(candidates)))
            for c, u in enumerate(candidates):
                pushed = problem.channel(t, values, np.broadcast_to(u, (count, u.shape[0])))
                totals[:, c] = costs[c] + np.einsum("pd,pd->p", z, pushed)
            # argmin keeps the first, i.e. lexicographically smallest, minimizer.
            best = np.argmin(totals, axis=1)
            return candidates[best], totals[np.arange(count), best]
        case _:
            raise TypeError(f"Expected MinimizerMode, got {rule.mode}")


def hamiltonian_values(
    problem: ControlProblem,
    t: float,
    values: np.ndarray,
    z: np.ndarray,
    rule: Union[MinimizerRule, None] = None,
) -> np.ndarray:
    return _minimize(problem, rule or problem.default_rule(), t, values, z)[1]


def minimizer_values(
    problem: ControlProblem,
    rule: Union[MinimizerRule, None],
    t: float,
    values: np.ndarray,
    z: np.ndarray,
) -> np.ndarray:
    return _minimize(problem, rule or problem.default_rule(), t, values, z)[0]


def hamiltonian(
    problem: ControlProblem,
    t: float,
    x: Segment,
    z: np.ndarray,
    rule: Union[MinimizerRule, None] = None,
) -> float:
    """
    inf over U of g(u) + z . h(t, x, u).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))[None]
    return float(hamiltonian_values(problem, t, x.values[None], z, rule)[0])


def minimizer(
    problem: ControlProblem,
    rule: Union[MinimizerRule, None],
    t: float,
    x: Segment,
    z: np.ndarray,
) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))[None]
    return minimizer_values(problem, rule, t, x.values[None], z)[0]


def hamiltonian_driver(
    problem: ControlProblem, rule: Union[MinimizerRule, None] = None
) -> Driver:
    """
    psi(t, x, y, z) = -H(t, x, z), so that v = E phi(X_T) + E int H ds.
    """
    rule = rule or problem.default_rule()
    return Driver(
        psi=lambda t, values, y, z: -hamiltonian_values(problem, t, values, z, rule),
        lipschitz_z=problem.channel_bound,
        name=f"hamiltonian[{problem.name}]",
    )


def ball_quadratic_problem(
    terminal: SegmentFunctional, radius: float = 1.0, weight: float = 1.0
) -> ControlProblem:
    """
    U the ball of radius R in R^d, g(u) = weight |u|^2 / 2, h(t, x, u) = u.
    """
    d = terminal.grid.dim_d

    def analytic(t, values, z):
        norm = np.linalg.norm(z, axis=-1)
        inner = norm / weight <= radius
        safe = np.where(norm > 0, norm, 1.0)[:, None]
        u = np.where(inner[:, None], -z / weight, -radius * z / safe)
        value = np.where(
            inner,
            -(norm**2) / (2 * weight),
            0.5 * weight * radius**2 - radius * norm,
        )
        return u, value

    return ControlProblem(
        control_set=ControlSet(kind=ControlSetKind.BALL, dim_k=d, radius=radius),
        running_cost=lambda u: 0.5 * weight * np.sum(np.asarray(u) ** 2, axis=-1),
        channel=lambda t, values, u: np.asarray(u, dtype=float),
        channel_bound=radius,
        terminal=terminal,
        analytic=analytic,
        name="ball-quadratic",
    )


def ineffective_problem(
    terminal: SegmentFunctional,
    cost_weight: float = 1.0,
    control_set: Union[ControlSet, None] = None,
) -> ControlProblem:
    """
    h = 0: controls only cost g(u) = cost_weight |u|^2.
    """
    d = terminal.grid.dim_d
    control_set = control_set or ControlSet(kind=ControlSetKind.BOX, dim_k=1)
    return ControlProblem(
        control_set=control_set,
        running_cost=lambda u: cost_weight * np.sum(np.asarray(u) ** 2, axis=-1),
        channel=lambda t, values, u: np.zeros((np.shape(u)[0], d)),
        channel_bound=1.0,
        terminal=terminal,
        name="ineffective",
    )


def reduce_running_cost(
    ell: Callable[[np.ndarray], np.ndarray],
    ell_gradient: Callable[[np.ndarray], np.ndarray],
    t: float,
    horizon: float,
    grid: GridSpec,
) -> WindowIntegralFunctional:
    """
    phi_0(x) = int_{t-T}^0 ell(x(s)) ds, so that phi_0(X_T) = int_t^T ell(y_s) ds.
    """
    length = horizon - t
    if grid.delay_r < length * (1 - 1e-12):
        raise ConfigurationError(
            f"delay window r={grid.delay_r} is shorter than the horizon T - t = {length}; "
            "extend the delay window so that r >= T - t"
        )
    weight = WindowMeasure.lebesgue(grid, -max(length, 0.0), 1.0)
    return WindowIntegralFunctional(
        grid, weight, ell, ell_gradient, growth_exponent=0, growth_constant=length
    )


def evaluation_noise(config: BsdeConfig, grid: GridSpec, t: float) -> NoiseGrid:
    """
    Noise shared by every policy evaluated against a value. Its seed is one
    above the value's so the two estimates are independent.
    """
    return NoiseGrid.generate(
        config.seed + 1, config.paths, t, config.horizon_T, grid, config.workers
    )


def _running_cost(
    problem: ControlProblem, controls: Union[np.ndarray, None], dt: float, count: int
) -> np.ndarray:
    if controls is None or controls.shape[1] == 0:
        return np.zeros(count)
    return problem.running_cost(controls).sum(axis=1) * dt


def cost_samples(
    problem: ControlProblem,
    model: CoefficientModel,
    t: float,
    x: Segment,
    policy: Control,
    noise: NoiseGrid,
    config: BsdeConfig,
) -> tuple[np.ndarray, PathEnsemble]:
    ensemble = simulate_controlled(
        model,
        problem.channel,
        policy,
        t,
        x,
        noise,
        problem.channel_bound,
        config.scheme,
        config.workers,
    )
    running = _running_cost(problem, ensemble.controls, ensemble.step, ensemble.num_paths)
    samples = running + problem.terminal(ensemble.terminal_values())
    return samples, ensemble


def cost(
    problem: ControlProblem,
    model: CoefficientModel,
    t: float,
    x: Segment,
    policy: Control,
    config: BsdeConfig,
    noise: Union[NoiseGrid, None] = None,
) -> tuple[float, float]:
    """
    J(t, x, u) by direct simulation of the controlled equation.
    """
    noise = noise or evaluation_noise(config, model.grid, t)
    samples, _ = cost_samples(problem, model, t, x, policy, noise, config)
    return mean_and_se(samples)


def cost_reweighted(
    problem: ControlProblem,
    model: CoefficientModel,
    t: float,
    x: Segment,
    policy: Control,
    config: BsdeConfig,
    noise: Union[NoiseGrid, None] = None,
) -> tuple[float, float]:
    """
    J(t, x, u) from uncontrolled paths weighted by exp(int h dW - 1/2 int |h|^2),
    under which the uncontrolled law becomes the controlled one.
    """
    noise = noise or evaluation_noise(config, model.grid, t)
    ensemble = simulate_forward(model, t, x, noise, config.scheme, config.workers)
    controls = evaluate_policy(policy, ensemble)
    weights = girsanov_weight(
        ensemble, lambda s, values, u: -problem.channel(s, values, u), controls
    )
    samples = weights * (
        _running_cost(problem, controls, ensemble.step, ensemble.num_paths)
        + problem.terminal(ensemble.terminal_values())
    )
    return mean_and_se(samples)


def feedback_policy(
    problem: ControlProblem,
    solution: BsdeSolution,
    rule: Union[MinimizerRule, None] = None,
) -> Callable[[float, np.ndarray], np.ndarray]:
    """
    u(t, x) = argmin g(u) + Z(t, x) . h(t, x, u), with Z read from the
    regression fits so the law is a function of the current segment.
    """
    rule = rule or problem.default_rule()

    def policy(t: float, values: np.ndarray) -> np.ndarray:
        k = solution.index_of(t)
        return minimizer_values(problem, rule, t, values, solution.z_at(k, values))

    return policy


@dataclass(frozen=True, slots=True, kw_only=True)
class FeedbackResult:
    ensemble: PathEnsemble
    controls: np.ndarray
    cost: float
    std_error: float
    solution: BsdeSolution = field(repr=False)


def simulate_feedback(
    problem: ControlProblem,
    model: CoefficientModel,
    rule: Union[MinimizerRule, None],
    t: float,
    x: Segment,
    config: BsdeConfig,
    solution: Union[BsdeSolution, None] = None,
    noise: Union[NoiseGrid, None] = None,
) -> FeedbackResult:
    """
    Simulate the closed-loop equation driven by the feedback built from the
    hamiltonian-driver solution, solving for it first when not given.
    """
    if solution is None:
        solution = solve_value(
            model, hamiltonian_driver(problem, rule), problem.terminal, t, x, config
        ).solution
    noise = noise or evaluation_noise(config, model.grid, t)
    samples, ensemble = cost_samples(
        problem, model, t, x, feedback_policy(problem, solution, rule), noise, config
    )
    value, error = mean_and_se(samples)
    return FeedbackResult(
        ensemble=ensemble,
        controls=ensemble.controls,
        cost=value,
        std_error=error,
        solution=solution,
    )


def random_constant_policies(
    problem: ControlProblem, count: int = 20, seed: int = 0
) -> dict[str, np.ndarray]:
    rng = noise_generator(seed, POLICY_STREAM)
    samples = problem.control_set.sample(rng, count)
    return {f"constant-{i}": samples[i] for i in range(count)}


def random_piecewise_policies(
    problem: ControlProblem,
    steps: int,
    count: int = 10,
    pieces: int = 4,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """
    Deterministic controls, constant on each of `pieces` equal blocks of steps.
    """
    rng = noise_generator(seed, POLICY_STREAM)
    # Skip the draws the constant tournament uses.
    rng.standard_normal(64)
    blocks = np.minimum((np.arange(steps) * pieces) // max(steps, 1), pieces - 1)
    policies = {}
    for i in range(count):
        levels = problem.control_set.sample(rng, pieces)
        policies[f"piecewise-{i}"] = levels[blocks]
    return policies


@dataclass(frozen=True, slots=True)
class PolicyRow:
    policy: str
    cost: float
    std_error: float
    gap: float
    gap_std_error: float
    violation: bool


@dataclass(frozen=True, slots=True, kw_only=True)
class RelationReport:
    value: float
    value_std_error: float
    rows: list[PolicyRow]
    feedback: Union[PolicyRow, None]
    slack: float

    @property
    def violations(self) -> list[str]:
        return [i.policy for i in self.rows if i.violation]

    @property
    def min_gap(self) -> float:
        return min(i.gap for i in self.rows) if self.rows else float("inf")

    @property
    def feedback_ok(self) -> bool:
        if self.feedback is None:
            return True
        return abs(self.feedback.gap) <= 5.0 * self.feedback.gap_std_error + self.slack

    @property
    def passed(self) -> bool:
        return not self.violations and self.feedback_ok

    def to_csv(self, path: Path) -> Path:
        rows = list(self.rows) + ([self.feedback] if self.feedback else [])
        return write_csv(
            path,
            ["policy", "J", "std_error", "J_minus_v", "flag"],
            [[i.policy, i.cost, i.std_error, i.gap, int(i.violation)] for i in rows],
        )

    def to_json(self) -> dict:
        return {
            "value": self.value,
            "value_std_error": self.value_std_error,
            "min_gap": self.min_gap,
            "violations": self.violations,
            "feedback": dataclasses.asdict(self.feedback) if self.feedback else None,
            "feedback_ok": self.feedback_ok,
            "policies": len(self.rows),
        }


def fundamental_relation_check(
    problem: ControlProblem,
    model: CoefficientModel,
    t: float,
    x: Segment,
    policies: dict[str, Control],
    config: BsdeConfig,
    rule: Union[MinimizerRule, None] = None,
    include_feedback: bool = True,
    slack: float = 0.02,
) -> RelationReport:
    """
    J(policy) - v for every policy on common noise. A gap below -5 combined
    standard errors is a violation; the feedback policy must close the gap
    to within 5 standard errors plus slack.
    """
    estimate = solve_value(
        model, hamiltonian_driver(problem, rule), problem.terminal, t, x, config
    )
    noise = evaluation_noise(config, model.grid, t)

    def row(name: str, samples: np.ndarray, check: bool) -> PolicyRow:
        value, error = mean_and_se(samples)
        combined = float(np.hypot(error, estimate.std_error))
        gap = value - estimate.value
        return PolicyRow(name, value, error, gap, combined, check and gap < -5.0 * combined)

    rows = []
    for name, policy in policies.items():
        samples, _ = cost_samples(problem, model, t, x, policy, noise, config)
        rows.append(row(name, samples, True))
    feedback = None
    if include_feedback:
        samples, _ = cost_samples(
            problem,
            model,
            t,
            x,
            feedback_policy(problem, estimate.solution, rule),
            noise,
            config,
        )
        feedback = row("feedback", samples, True)
    report = RelationReport(
        value=estimate.value,
        value_std_error=estimate.std_error,
        rows=rows,
        feedback=feedback,
        slack=slack,
    )
    logger.info(
        "fundamental relation: v=%.5g, min J-v=%.3g, violations=%d, feedback gap=%s",
        report.value,
        report.min_gap,
        len(report.violations),
        f"{feedback.gap:.3g}" if feedback else "n/a",
    )
    return report
