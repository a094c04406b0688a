#!/usr/bin/env python3
import json
import shutil
from pathlib import Path

from delayfbsde.bsde import BsdeConfig
from delayfbsde.sdde import (
    NoiseGrid,
    constant_model,
)
from delayfbsde.segment import (
    GridSpec,
    Segment,
)


# Scratch space for reports written by the command line tests.
SCRATCH_DIR = Path("/tmp/delayfbsde_test")

SCENARIO_DIR = Path(__file__).parent.parent / "scenarios"


class ScratchDirectory:
    """
    Context manager for a scratch output directory.

    Creates SCRATCH_DIR/<name> on entry and removes it on exit or error,
    so no test relies on reports left behind by a previous one.
    """

    def __init__(self, name: str = "run"):
        self.path = SCRATCH_DIR / name

    def __enter__(self) -> Path:
        if self.path.exists():
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True)
        return self.path

    def __exit__(self, *args, **kwargs):
        if self.path.exists():
            shutil.rmtree(self.path)


def small_grid(delay_r: float = 0.5, past_points_m: int = 10, dim_n: int = 1, dim_d: int = 1):
    return GridSpec(delay_r=delay_r, past_points_m=past_points_m, dim_n=dim_n, dim_d=dim_d)


def brownian(grid: GridSpec, drift: float = 0.0, diffusion: float = 1.0):
    """
    A constant model and the constant initial segment 1.
    """
    return constant_model(grid, drift, diffusion), Segment.constant(grid, 1.0)


def noise_for(grid: GridSpec, paths: int, horizon: float, seed: int = 0, t0: float = 0.0):
    return NoiseGrid.generate(seed, paths, t0, horizon, grid)


def config_for(horizon: float, paths: int = 4000, seed: int = 1, **knobs) -> BsdeConfig:
    return BsdeConfig(horizon_T=horizon, paths=paths, seed=seed, **knobs)


def write_scenario(directory: Path, data: dict, name: str = "scenario.json") -> Path:
    path = Path(directory) / name
    with open(path, "w") as file:
        file.write(json.dumps(data))
    return path


def linear_scenario(paths: int = 20000, seed: int = 7) -> dict:
    """
    A desk-scale Brownian scenario with a zero driver, v = x(0).
    """
    return {
        "name": "linear-test",
        "grid": {"delay_r": 0.2, "past_points_m": 10, "dim_n": 1, "dim_d": 1},
        "simulation": {"t0": 0.0, "horizon_T": 0.2, "paths": paths, "seed": seed},
        "model": {"kind": "constant", "drift": 0.0, "diffusion": 1.0},
        "initial": {"kind": "constant", "value": 1.0},
        "terminal": {"kind": "point"},
        "bsde": {"driver": {"kind": "zero"}, "bootstrap_samples": 4},
        "checks": {"expected_value": 1.0, "expected_tolerance": 0.05, "residual_segments": 2},
    }


def black_scholes_scenario(paths: int = 4000, seed: int = 2024) -> dict:
    return {
        "name": "bs-test",
        "grid": {"delay_r": 0.1, "past_points_m": 5, "dim_n": 1, "dim_d": 1},
        "simulation": {"t0": 0.0, "horizon_T": 0.5, "paths": paths, "seed": seed},
        "market": {"kind": "constant", "mu": 0.05, "sigma": 0.2, "rho": 0.05, "s0": 100.0},
        "claim": {"kind": "vanilla-call", "strike": 100.0},
        "bsde": {"bootstrap_samples": 0},
    }
