#!/usr/bin/env python3
import csv
import json
import logging
from collections.abc import (
    Callable,
    Iterable,
    Sequence,
)
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Union

import numpy as np


logger = logging.getLogger(__name__)

# High counter words reserved for streams that are not simulation paths.
# Path p uses counter word p, so these sit far above any realistic path count.
BOOTSTRAP_STREAM = 2**62
POLICY_STREAM = 2**62 + 1
SAMPLE_STREAM = 2**62 + 2

# Relative tolerance used when deciding whether a time lies on a grid.
GRID_TOLERANCE = 1e-9


class DelayError(Exception):
    """
    Root of every error raised by delayfbsde.
    """


class ConfigurationError(DelayError, ValueError):
    """
    Inconsistent grids, missing model data, off-grid parameters
    or an unreadable scenario.
    """


class DomainError(DelayError, ValueError):
    pass


class SimulationError(DelayError, ArithmeticError):
    pass


class ValidationError(DelayError, ValueError):
    pass


class NumericalError(DelayError, ArithmeticError):
    pass


class SingularityError(NumericalError):
    pass


class ModelViolationError(DelayError, ValueError):
    pass


def noise_generator(seed: int, stream: int) -> np.random.Generator:
    """
    Counter-based generator for one stream. The key is the seed and the
    stream index occupies the high counter word, so draws depend on
    (seed, stream, position) only and never on evaluation order.
    """
    if seed < 0:
        raise ConfigurationError(f"seed must be nonnegative, got {seed}")
    bit_generator = np.random.Philox(key=seed, counter=[0, 0, 0, stream])
    return np.random.Generator(bit_generator)


def mean_and_se(samples: np.ndarray) -> tuple[float, float]:
    """
    Sample mean and standard error along the first axis.
    """
    samples = np.asarray(samples, dtype=float)
    count = samples.shape[0]
    if count < 2:
        return float(np.mean(samples)), 0.0
    return (
        float(np.mean(samples)),
        float(np.std(samples, ddof=1) / np.sqrt(count)),
    )


def on_grid(value: float, step: float) -> Union[int, None]:
    """
    Return the integer multiple of step that value equals, or None.
    """
    ratio = value / step
    nearest = round(ratio)
    if abs(ratio - nearest) <= GRID_TOLERANCE * max(1.0, abs(ratio)):
        return int(nearest)
    return None


def path_blocks(num_paths: int, workers: int) -> list[slice]:
    """
    Split range(num_paths) into contiguous blocks, one per worker.
    """
    workers = max(1, min(workers, num_paths)) if num_paths else 1
    bounds = np.linspace(0, num_paths, workers + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def run_blocks(
    func: Callable[[slice], np.ndarray], num_paths: int, workers: int
) -> list:
    """
    Evaluate func on every block of paths and return the results in block
    order. Blocks are independent, so the outcome does not depend on
    the number of workers.
    """
    blocks = path_blocks(num_paths, workers)
    if len(blocks) == 1:
        return [func(blocks[0])]
    with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
        return list(pool.map(func, blocks))


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    Path.mkdir(path.parent, parents=True, exist_ok=True)
    with open(path, "w", newline="") as file:
        writer = csv.writer(file)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_plain(i) for i in row])
    logger.debug("wrote %s", path)
    return path


def write_json(path: Path, payload: dict) -> Path:
    """
    Write payload with sorted keys so identical runs give identical bytes.
    """
    path = Path(path)
    Path.mkdir(path.parent, parents=True, exist_ok=True)
    with open(path, "w") as file:
        file.write(json.dumps(_plain(payload), sort_keys=True, indent=2))
        file.write("\n")
    logger.debug("wrote %s", path)
    return path


def _plain(value):
    """
    Convert numpy scalars and arrays into JSON/CSV friendly objects.
    """
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(i) for i in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, Path):
        return str(value)
    return value
