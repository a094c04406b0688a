#!/usr/bin/env python3
import argparse
import logging
import os
import sys
from collections.abc import (
    Mapping,
    Sequence,
)
from pathlib import Path
from typing import Union

from .experiment import ExperimentController
from .lib import ConfigurationError
from .scenario import (
    ENV_PREFIX,
    load_scenario,
)
from .ui import UI


logger = logging.getLogger(__name__)

SUBCOMMANDS = ("simulate", "price", "control", "qv", "malliavin", "verify")


def run(
    subcommand: str,
    config_path: Path,
    output_dir: Path,
    overrides: Union[dict, None] = None,
    environ: Union[Mapping[str, str], None] = None,
    args: Sequence[str] = (),
) -> int:
    """
    Load the scenario and execute one subcommand on it. Returns 0 when
    every check passed, 1 when a check failed and 2 for a bad scenario.
    """
    try:
        scenario = load_scenario(
            config_path, overrides, os.environ if environ is None else environ
        )
    except ConfigurationError as error:
        print(f"configuration error: {error}", file=sys.stderr)
        return 2
    controller = ExperimentController(scenario, Path(output_dir))
    return UI(controller).run([subcommand, *args])


def parser() -> argparse.ArgumentParser:
    result = argparse.ArgumentParser(
        prog="delayfbsde",
        description="Forward-backward delay equation experiments.",
        epilog=f"Environment overrides: {ENV_PREFIX}SEED, {ENV_PREFIX}PATHS, "
        f"{ENV_PREFIX}DT, {ENV_PREFIX}THREADS. Flags take precedence.",
    )
    result.add_argument("command", help=f"one of {', '.join(SUBCOMMANDS)} or help")
    result.add_argument("args", nargs="*", help="command arguments, e.g. csv=true")
    result.add_argument("--config", type=Path, help="scenario JSON file")
    result.add_argument("--out", type=Path, default=Path("out"), help="report directory")
    result.add_argument("--seed", type=int)
    result.add_argument("--paths", type=int)
    result.add_argument("--dt", type=float)
    result.add_argument("--threads", type=int)
    result.add_argument("--verbose", action="store_true", help="log at DEBUG level")
    return result


def main(argv: Union[Sequence[str], None] = None) -> int:
    options = parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if options.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if options.config is None:
        print("configuration error: --config is required", file=sys.stderr)
        return 2
    # "csv=true" style arguments become positional ones for the UI.
    args = [i.split("=", 1)[-1] for i in options.args]
    overrides = {
        "seed": options.seed,
        "paths": options.paths,
        "dt": options.dt,
        "threads": options.threads,
    }
    return run(options.command, options.config, options.out, overrides, args=args)
