#!/usr/bin/env python3
import json

import pytest

from common import (
    SCRATCH_DIR,
    ScratchDirectory,
    black_scholes_scenario,
    linear_scenario,
    write_scenario,
)
from delayfbsde.cli import (
    main,
    run,
)


def read_report(path):
    with open(path, "r") as file:
        return json.loads(file.read())


def test_verify_linear_scenario():
    with ScratchDirectory("verify") as directory:
        path = write_scenario(directory, linear_scenario())
        out = directory / "out"
        assert run("verify", path, out, environ={}) == 0
        report = read_report(out / "verify.json")
        assert report["passed"]
        names = [i["name"] for i in report["checks"]]
        for name in ("value-closed-form", "z-identification", "mild-residual-0", "determinism"):
            assert name in names
        assert report["scenario"]["simulation"]["seed"] == 7


def test_failed_check_exits_with_one():
    data = linear_scenario(paths=2000)
    data["checks"]["expected_value"] = 5.0
    with ScratchDirectory("failed") as directory:
        path = write_scenario(directory, data)
        assert run("verify", path, directory / "out", environ={}) == 1
        report = read_report(directory / "out" / "verify.json")
        assert not report["passed"]


def test_bad_dt_exits_with_two():
    with ScratchDirectory("dt") as directory:
        path = write_scenario(directory, linear_scenario())
        assert run("simulate", path, directory / "out", {"dt": 0.03}, environ={}) == 2
        assert not (directory / "out").exists()


def test_verify_report_does_not_depend_on_threads():
    with ScratchDirectory("verify-threads") as directory:
        path = write_scenario(directory, linear_scenario(paths=1000))
        codes = [
            run("verify", path, directory / f"out{threads}", {"threads": threads}, environ={})
            for threads in (1, 2, 8)
        ]
        assert len(set(codes)) == 1
        first = (directory / "out1" / "verify.json").read_bytes()
        for threads in (2, 8):
            assert first == (directory / f"out{threads}" / "verify.json").read_bytes()


def test_simulate_reports_do_not_depend_on_threads():
    with ScratchDirectory("threads") as directory:
        path = write_scenario(directory, linear_scenario(paths=2000))
        for threads in (1, 2):
            out = directory / f"out{threads}"
            assert run("simulate", path, out, {"threads": threads}, environ={}, args=["true"]) == 0
        for name in ("simulate.json", "paths.csv"):
            first = (directory / "out1" / name).read_bytes()
            assert first == (directory / "out2" / name).read_bytes()


def test_environment_seed_reaches_the_report():
    with ScratchDirectory("environ") as directory:
        path = write_scenario(directory, linear_scenario(paths=500))
        environ = {"DELAYFBSDE_SEED": "21"}
        assert run("simulate", path, directory / "out", environ=environ) == 0
        report = read_report(directory / "out" / "simulate.json")
        assert report["scenario"]["simulation"]["seed"] == 21


def test_black_scholes_price():
    with ScratchDirectory("price") as directory:
        path = write_scenario(directory, black_scholes_scenario())
        assert run("price", path, directory / "out", environ={}) == 0
        report = read_report(directory / "out" / "price.json")
        names = [i["name"] for i in report["checks"]]
        assert names == ["price-consistency", "closed-form-price", "closed-form-hedge"]


@pytest.mark.parametrize(
    "argv",
    [
        ["simulate"],
        ["bogus", "--config", "missing.json"],
        ["simulate", "--config", str(SCRATCH_DIR / "missing.json")],
    ],
)
def test_main_rejects_bad_invocations(argv):
    assert main(argv) == 2


def test_main_accepts_named_arguments(monkeypatch):
    monkeypatch.delenv("DELAYFBSDE_SEED", raising=False)
    with ScratchDirectory("main") as directory:
        path = write_scenario(directory, linear_scenario(paths=500))
        out = directory / "out"
        argv = ["simulate", "csv=true", "--config", str(path), "--out", str(out), "--seed", "3"]
        assert main(argv) == 0
        assert (out / "paths.csv").exists()
        assert (out / "ensemble.npz").exists()
        assert read_report(out / "simulate.json")["scenario"]["simulation"]["seed"] == 3
