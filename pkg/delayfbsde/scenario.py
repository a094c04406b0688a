#!/usr/bin/env python3
"""
JSON scenario files: grid, simulation settings and the named model,
functional, market, claim and control families a scenario may reference.
"""
import copy
import json
import logging
import os
from collections.abc import Mapping
from dataclasses import (
    dataclass,
    field,
)
from pathlib import Path
from typing import Union

import numpy as np

from .bsde import (
    BsdeConfig,
    Driver,
    linear_driver,
    zero_driver,
)
from .control import (
    ControlProblem,
    ControlSet,
    ControlSetKind,
    MinimizerMode,
    MinimizerRule,
    ball_quadratic_problem,
    ineffective_problem,
)
from .lib import (
    ConfigurationError,
    on_grid,
)
from .pricing import (
    Claim,
    ClaimKind,
    MarketModel,
    constant_claim,
    constant_market,
    delayed_vol_market,
    fixed_lag_claim,
    smooth_call,
    vanilla_call,
    window_call,
)
from .sdde import (
    CoefficientModel,
    Scheme,
    constant_model,
    linear_model,
    pure_delay_model,
    sincos_model,
)
from .segment import (
    GridSpec,
    Segment,
    SegmentFunctional,
    constant_functional,
    lag_product,
    point_evaluation,
    squared_point,
    window_mean,
)


logger = logging.getLogger(__name__)

ENV_PREFIX = "DELAYFBSDE_"
OVERRIDES = ("seed", "paths", "dt", "threads")


@dataclass(frozen=True, kw_only=True)
class SimulationSettings:
    t0: float
    horizon_T: float
    paths: int
    seed: int
    workers: int = 1

    def __post_init__(self):
        if self.seed is None:
            raise ConfigurationError(
                "a seed is required: set simulation.seed, DELAYFBSDE_SEED or --seed"
            )
        if int(self.seed) != self.seed or self.seed < 0:
            raise ConfigurationError(f"seed must be a nonnegative integer, got {self.seed}")
        if self.paths < 2:
            raise ConfigurationError(f"paths must be at least 2, got {self.paths}")
        if self.workers < 1:
            raise ConfigurationError(f"threads must be positive, got {self.workers}")
        if self.horizon_T < self.t0:
            raise ConfigurationError(
                f"horizon_T={self.horizon_T} precedes t0={self.t0}"
            )


@dataclass(frozen=True, kw_only=True)
class Scenario:
    name: str
    grid: GridSpec
    simulation: SimulationSettings
    sections: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise ConfigurationError(f"scenario {self.name} has no '{name}' section")
        return self.sections[name]

    def has(self, name: str) -> bool:
        return name in self.sections

    def bsde_config(self) -> BsdeConfig:
        knobs = dict(self.sections.get("bsde", {}))
        knobs.pop("driver", None)
        if "scheme" in knobs:
            knobs["scheme"] = Scheme(knobs["scheme"])
        try:
            return BsdeConfig(
                horizon_T=self.simulation.horizon_T,
                paths=self.simulation.paths,
                seed=self.simulation.seed,
                workers=self.simulation.workers,
                **knobs,
            )
        except TypeError as error:
            raise ConfigurationError(f"bad bsde section: {error}") from error

    def resolved(self) -> dict:
        """
        Everything that determines a run's output, seed included.
        """
        data = copy.deepcopy(self.sections)
        data["name"] = self.name
        data["grid"] = self.grid.to_json()
        data["simulation"] = {
            "t0": self.simulation.t0,
            "horizon_T": self.simulation.horizon_T,
            "paths": self.simulation.paths,
            "seed": self.simulation.seed,
        }
        return data

    def initial_segment(self) -> Segment:
        return build_segment(self.sections.get("initial", {"kind": "constant"}), self.grid)

    def model(self) -> CoefficientModel:
        return build_model(self.section("model"), self.grid)

    def terminal(self) -> SegmentFunctional:
        return build_functional(self.section("terminal"), self.grid)

    def driver(self) -> Driver:
        return build_driver(self.sections.get("bsde", {}).get("driver", {"kind": "zero"}))

    def market(self) -> MarketModel:
        return build_market(self.section("market"), self.grid)

    def claim(self) -> Claim:
        return build_claim(self.section("claim"), self.grid)

    def problem(self) -> tuple[ControlProblem, MinimizerRule]:
        return build_problem(self.section("control"), self.terminal())


def _read_overrides(environ: Mapping[str, str]) -> dict:
    overrides = {}
    for key in OVERRIDES:
        if (value := environ.get(f"{ENV_PREFIX}{key.upper()}")) is not None:
            overrides[key] = value
    return overrides


def load_scenario(
    path: Path,
    overrides: Union[dict, None] = None,
    environ: Union[Mapping[str, str], None] = None,
) -> Scenario:
    """
    Read a scenario file and apply environment overrides, then command
    line overrides (seed, paths, dt, threads); later sources win.
    """
    path = Path(path)
    try:
        with open(path, "r") as file:
            data = json.loads(file.read())
    except FileNotFoundError as error:
        raise ConfigurationError(f"scenario file {path} does not exist") from error
    except json.JSONDecodeError as error:
        raise ConfigurationError(f"scenario file {path} is not valid JSON: {error}") from error
    if not isinstance(data, dict) or "grid" not in data or "simulation" not in data:
        raise ConfigurationError(f"scenario {path} needs 'grid' and 'simulation' sections")

    merged = _read_overrides(os.environ if environ is None else environ)
    merged |= {k: v for k, v in (overrides or {}).items() if v is not None}

    grid_data = dict(data["grid"])
    simulation = dict(data["simulation"])
    try:
        if "seed" in merged:
            simulation["seed"] = int(merged["seed"])
        if "paths" in merged:
            simulation["paths"] = int(merged["paths"])
        if "threads" in merged:
            simulation["workers"] = int(merged["threads"])
        if "dt" in merged:
            dt = float(merged["dt"])
            m = on_grid(float(grid_data["delay_r"]), dt)
            if m is None or m < 1:
                raise ConfigurationError(
                    f"dt={dt} does not divide delay_r={grid_data['delay_r']}: "
                    "the simulation step must satisfy m * dt = r for an integer m"
                )
            grid_data["past_points_m"] = m
        grid = GridSpec.from_json(grid_data)
        settings = SimulationSettings(
            t0=float(simulation.get("t0", 0.0)),
            horizon_T=float(simulation["horizon_T"]),
            paths=int(simulation["paths"]),
            seed=simulation.get("seed"),
            workers=int(simulation.get("workers", 1)),
        )
    except (KeyError, TypeError, ValueError) as error:
        if isinstance(error, ConfigurationError):
            raise
        raise ConfigurationError(f"scenario {path}: {error!r}") from error
    grid.steps_between(settings.t0, settings.horizon_T)

    sections = {k: v for k, v in data.items() if k not in ("grid", "simulation", "name")}
    scenario = Scenario(
        name=data.get("name", path.stem),
        grid=grid,
        simulation=settings,
        sections=sections,
    )
    logger.info(
        "loaded scenario %s: r=%g m=%d paths=%d seed=%d",
        scenario.name,
        grid.delay_r,
        grid.past_points_m,
        settings.paths,
        settings.seed,
    )
    return scenario


def _kind(section: dict, family: str) -> str:
    if "kind" not in section:
        raise ConfigurationError(f"{family} section needs a 'kind'")
    return section["kind"]


def build_segment(section: dict, grid: GridSpec) -> Segment:
    match _kind(section, "initial"):
        case "constant":
            return Segment.constant(grid, section.get("value", 1.0))
        case "ramp":
            return Segment.ramp(grid).scaled(section.get("slope", 1.0)) + Segment.constant(
                grid, section.get("value", 0.0)
            )
        case "values":
            return Segment(grid, np.asarray(section["values"], dtype=float))
        case kind:
            raise ConfigurationError(f"unknown initial segment kind {kind}")


def build_model(section: dict, grid: GridSpec) -> CoefficientModel:
    match _kind(section, "model"):
        case "constant":
            return constant_model(grid, section.get("drift", 0.0), section.get("diffusion", 1.0))
        case "linear":
            return linear_model(
                grid,
                rate=section.get("rate", 0.0),
                delayed_rate=section.get("delayed_rate", 0.0),
                sigma=section.get("sigma", 1.0),
                multiplicative=section.get("multiplicative", False),
            )
        case "pure-delay":
            return pure_delay_model(grid, section["delayed_rate"], section.get("sigma", 0.0))
        case "sincos":
            return sincos_model(grid, section.get("noise_scale", 0.1))
        case kind:
            raise ConfigurationError(f"unknown model kind {kind}")


def build_functional(section: dict, grid: GridSpec) -> SegmentFunctional:
    match _kind(section, "functional"):
        case "point":
            return point_evaluation(grid, section.get("theta", 0.0), section.get("component", 0))
        case "squared-point":
            return squared_point(grid, section.get("theta", 0.0))
        case "lag-product":
            return lag_product(grid)
        case "window-mean":
            return window_mean(grid, section.get("lower"))
        case "constant":
            return constant_functional(grid, section.get("value", 0.0))
        case kind:
            raise ConfigurationError(f"unknown functional kind {kind}")


def build_driver(section: dict) -> Driver:
    match _kind(section, "driver"):
        case "zero":
            return zero_driver()
        case "linear":
            return linear_driver(section["rate"])
        case kind:
            raise ConfigurationError(f"unknown driver kind {kind}")


def build_market(section: dict, grid: GridSpec) -> MarketModel:
    match _kind(section, "market"):
        case "constant":
            return constant_market(
                grid, section["mu"], section["sigma"], section["rho"], section["s0"]
            )
        case "delayed-vol":
            return delayed_vol_market(
                grid,
                section["mu"],
                section["rho"],
                section["s0"],
                section.get("base", 0.2),
                section.get("amplitude", 0.1),
            )
        case kind:
            raise ConfigurationError(f"unknown market kind {kind}")


def build_claim(section: dict, grid: GridSpec) -> Claim:
    try:
        kind = ClaimKind(_kind(section, "claim"))
    except ValueError as error:
        raise ConfigurationError(f"unknown claim kind {section['kind']}") from error
    strike = section.get("strike", 0.0)
    beta = section.get("beta", 50.0)
    match kind:
        case ClaimKind.VANILLA_CALL:
            return vanilla_call(grid, strike)
        case ClaimKind.SMOOTH_CALL:
            return smooth_call(grid, strike, beta)
        case ClaimKind.WINDOW_CALL:
            return window_call(grid, strike)
        case ClaimKind.SMOOTH_WINDOW_CALL:
            return window_call(grid, strike, smoothed=True, beta=beta)
        case ClaimKind.FIXED_LAG:
            return fixed_lag_claim(grid, strike, beta)
        case ClaimKind.CONSTANT:
            return constant_claim(grid, section["value"])


def build_problem(
    section: dict, terminal: SegmentFunctional
) -> tuple[ControlProblem, MinimizerRule]:
    try:
        mode = MinimizerMode(section.get("minimizer", "grid"))
    except ValueError as error:
        raise ConfigurationError(f"unknown minimizer {section['minimizer']}") from error
    rule = MinimizerRule(mode=mode, resolution=section.get("resolution", 101))
    match _kind(section, "control"):
        case "ball-quadratic":
            problem = ball_quadratic_problem(
                terminal, section.get("radius", 1.0), section.get("weight", 1.0)
            )
        case "ineffective":
            box = ControlSet(
                kind=ControlSetKind.BOX,
                lower=section.get("lower", -1.0),
                upper=section.get("upper", 1.0),
            )
            problem = ineffective_problem(terminal, section.get("cost_weight", 1.0), box)
        case kind:
            raise ConfigurationError(f"unknown control problem kind {kind}")
    return problem, rule
