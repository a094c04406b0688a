#!/usr/bin/env python3
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from .bsde import (
    Driver,
    check_driver,
    solve_value,
    z_identification_check,
)
from .control import (
    check_problem,
    cost,
    cost_reweighted,
    evaluation_noise,
    fundamental_relation_check,
    hamiltonian_driver,
    random_constant_policies,
    random_piecewise_policies,
)
from .kolmogorov import mild_residual
from .lib import (
    SAMPLE_STREAM,
    mean_and_se,
    noise_generator,
    write_json,
)
from .malliavin import (
    bump_oracle,
    chain_rule,
    oracle_agreement,
    propagate_derivative,
)
from .pricing import (
    ClaimKind,
    bs_closed_form,
    hedge_strategy,
    price,
    replication_ladder,
    replication_test,
)
from .quadvar import convergence_study
from .scenario import (
    Scenario,
    build_claim,
    build_functional,
    build_market,
    build_model,
)
from .sdde import (
    NoiseGrid,
    check_coefficients,
    lipschitz_ratio,
    method_of_steps,
    moment_ratio,
    restart_noise,
    segment_history,
    semigroup_apply,
    simulate_forward,
)
from .segment import (
    Segment,
    functional_eval,
    point_evaluation,
)
from .ui import Controller


logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class Check:
    name: str
    passed: bool
    value: float
    limit: float
    detail: str = ""

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "passed": bool(self.passed),
            "value": float(self.value),
            "limit": float(self.limit),
            "detail": self.detail,
        }


class ExperimentController(Controller):
    """
    Runs the experiments a scenario describes and writes one JSON report
    per command into the output directory. A command whose checks fail
    raises a Warning naming them after its report is written.
    """

    def __init__(self, scenario: Scenario, output: Path):
        self.scenario = scenario
        self.output = Path(output)
        self.checks: list[Check] = []
        self.written: list[Path] = []
        self.command = ""

    def _post_exec(self) -> None:
        logger.info("%s finished, %d report(s) written", self.command, len(self.written))

    def __str__(self) -> str:
        lines = [f"{self.scenario.name}: {self.command}"]
        for check in self.checks:
            mark = "pass" if check.passed else "FAIL"
            lines.append(f"  [{mark}] {check.name}: {check.value:.6g} (limit {check.limit:.6g})")
        lines += [f"  wrote {i}" for i in self.written]
        return "\n".join(lines)

    def _start(self, command: str):
        self.command = command
        self.checks = []
        self.written = []

    def _check(self, name: str, value: float, limit: float, passed: bool, detail: str = ""):
        check = Check(name, bool(passed), float(value), float(limit), detail)
        logger.info("check %s: %s (%.6g vs %.6g)", name, "pass" if passed else "FAIL", value, limit)
        self.checks.append(check)

    def _finish(self, results: dict):
        payload = {
            "command": self.command,
            "scenario": self.scenario.resolved(),
            "results": results,
            "checks": [i.to_json() for i in self.checks],
            "passed": all(i.passed for i in self.checks),
        }
        self.written.append(write_json(self.output / f"{self.command}.json", payload))
        if failed := [i.name for i in self.checks if not i.passed]:
            raise Warning(f"{self.command}: failed checks: {', '.join(failed)}")

    @property
    def _t0(self) -> float:
        return self.scenario.simulation.t0

    def _noise(self, horizon: Union[float, None] = None, paths: Union[int, None] = None):
        settings = self.scenario.simulation
        return NoiseGrid.generate(
            settings.seed,
            paths or settings.paths,
            settings.t0,
            settings.horizon_T if horizon is None else horizon,
            self.scenario.grid,
            settings.workers,
        )

    def _driver(self) -> Driver:
        if self.scenario.has("control"):
            problem, rule = self.scenario.problem()
            return hamiltonian_driver(problem, rule)
        return self.scenario.driver()

    def _mean_ode(self):
        """
        The deterministic delay equation the mean of a linear model obeys.
        """
        section = self.scenario.section("model")
        match section["kind"]:
            case "constant":
                drift = section.get("drift", 0.0)
                return lambda t, y, delayed: np.full_like(y, drift)
            case "linear" | "pure-delay":
                rate = section.get("rate", 0.0)
                delayed_rate = section.get("delayed_rate", 0.0)
                return lambda t, y, delayed: rate * y + delayed_rate * delayed
        return None

    def _simulate_checks(self, csv: bool = False) -> dict:
        scenario = self.scenario
        model = scenario.model()
        x = scenario.initial_segment()
        horizon = scenario.simulation.horizon_T
        noise = self._noise()
        ensemble = simulate_forward(model, self._t0, x, noise, workers=scenario.simulation.workers)
        mean, error = mean_and_se(ensemble.y[:, -1, 0])
        results = {
            "steps": ensemble.steps,
            "terminal_mean": mean,
            "terminal_se": error,
            "terminal_sd": float(np.std(ensemble.y[:, -1, 0], ddof=1)),
        }
        if (rhs := self._mean_ode()) is not None:
            trajectory = method_of_steps(
                rhs, segment_history(x), scenario.grid.delay_r, self._t0, horizon
            )
            expected = float(trajectory(horizon)[0])
            section = scenario.section("model")
            rates = abs(section.get("rate", 0.0)) + abs(section.get("delayed_rate", 0.0))
            budget = 5.0 * ensemble.step * rates * (horizon - self._t0) * max(1.0, abs(expected))
            gap = abs(mean - expected)
            self._check(
                "dde-mean", gap, 5.0 * error + budget, gap <= 5.0 * error + budget + 1e-12,
                f"method of steps gives {expected:.6g}",
            )
            results["method_of_steps"] = expected
        if csv:
            self.written.append(ensemble.to_csv(self.output / "paths.csv"))
            self.written.append(ensemble.dump(self.output / "ensemble.npz"))
        return results

    def _generic_checks(self) -> dict:
        scenario = self.scenario
        grid = scenario.grid
        model = scenario.model()
        x = scenario.initial_segment()
        noise = self._noise(paths=min(scenario.simulation.paths, 10000))
        dt = grid.step_h

        increments = noise.increments.reshape(-1)
        mean, mean_error = mean_and_se(increments)
        variance, variance_error = mean_and_se(increments**2)
        self._check("noise-mean", abs(mean), 5.0 * mean_error, abs(mean) <= 5.0 * mean_error)
        self._check(
            "noise-variance",
            abs(variance - dt),
            5.0 * variance_error,
            abs(variance - dt) <= 5.0 * variance_error,
        )

        sample = noise.subset(np.arange(min(64, noise.num_paths)))
        runs = [simulate_forward(model, self._t0, x, sample, workers=w).history for w in (1, 2, 8)]
        identical = all(np.array_equal(runs[0], i) for i in runs[1:])
        self._check("determinism", float(not identical), 0.0, identical, "workers 1, 2 and 8")

        base = simulate_forward(model, self._t0, x, sample)
        k = base.steps // 2
        worst = 0.0
        for p in range(min(4, sample.num_paths)):
            restart = simulate_forward(
                model,
                base.times[k],
                base.from_history(p, k),
                restart_noise(sample, k, [p]),
            )
            worst = max(worst, float(np.max(np.abs(restart.y[0] - base.y[p, k:]))))
        self._check("flow-property", worst, 1e-9, worst <= 1e-9)

        functional = point_evaluation(grid)
        value, error = semigroup_apply(model, functional, self._t0, self._t0, x, sample)
        gap = abs(value - functional_eval(functional, x)) + error
        self._check("semigroup-identity", gap, 0.0, gap == 0.0)

        coefficients = check_coefficients(model, seed=scenario.simulation.seed)
        self._check(
            "coefficient-growth", coefficients.growth_ratio, 1.0, coefficients.growth_ok
        )
        if model.has_gradients:
            self._check(
                "coefficient-gradients",
                coefficients.gradient_error,
                1e-4,
                coefficients.gradient_error <= 1e-4,
            )

        values = x.values[:, 0]
        thetas = grid.thetas

        def initial(points):
            return np.interp(points, thetas, values)

        ratio = moment_ratio(
            lambda g: build_model(scenario.section("model"), g),
            grid,
            self._t0,
            initial,
            scenario.simulation.horizon_T,
            min(scenario.simulation.paths, 10000),
            scenario.simulation.seed,
        )
        self._check("moment-ratio", ratio, 1.5, ratio < 1.5, "E sup|y|^4 at dt/2 over dt")
        shifted = x + Segment.constant(grid, 0.1)
        return {
            "lipschitz_ratio": lipschitz_ratio(model, self._t0, x, shifted, sample),
            "moment_ratio": ratio,
        }

    def _bsde_checks(self) -> dict:
        scenario = self.scenario
        model = scenario.model()
        x = scenario.initial_segment()
        config = scenario.bsde_config()
        terminal = scenario.terminal()
        driver = self._driver()
        section = scenario.sections.get("checks", {})
        results = {}

        if driver.lipschitz_z or driver.lipschitz_y:
            checked = check_driver(driver, scenario.grid, seed=config.seed)
            self._check(
                "driver-lipschitz", max(checked.z_ratio, checked.y_ratio), 1.0, checked.passed
            )

        estimate = solve_value(model, driver, terminal, self._t0, x, config)
        results["value"] = estimate.value
        results["value_se"] = estimate.std_error
        if (expected := section.get("expected_value")) is not None:
            gap = abs(estimate.value - expected)
            limit = 5.0 * estimate.std_error + section.get("expected_tolerance", 0.0)
            self._check("value-closed-form", gap, limit, gap <= limit + 1e-12)

        identification = z_identification_check(model, driver, terminal, self._t0, x, config)
        threshold = section.get("z_gap", 0.1 if scenario.has("control") else 0.05)
        self._check(
            "z-identification",
            identification.relative_gap,
            threshold,
            identification.passed(threshold),
        )
        results["z_identification"] = identification.to_json()

        linear = driver.lipschitz_z == 0 and driver.lipschitz_y == 0
        rng = noise_generator(config.seed, SAMPLE_STREAM)
        residuals = []
        for i in range(section.get("residual_segments", 1)):
            start = x
            if i:
                slope, level = rng.normal(0.0, 0.5, 2)
                start = x + Segment.ramp(scenario.grid).scaled(slope) + Segment.constant(
                    scenario.grid, level
                )
            report = mild_residual(model, driver, terminal, self._t0, start, config)
            budget = 0.0 if linear else report.bias_budget
            self._check(
                f"mild-residual-{i}",
                abs(report.residual),
                5.0 * report.std_error + budget,
                report.within(5.0, budget),
            )
            residuals.append(report.to_json())
        results["mild_residuals"] = residuals
        return results

    def _price_checks(self, paths_csv: bool = False) -> dict:
        scenario = self.scenario
        market = scenario.market()
        claim = scenario.claim()
        config = scenario.bsde_config()
        s = market.initial
        report = price(market, claim, self._t0, s, config)
        hedge0 = hedge_strategy(report.solution, market, 0, s)
        results = report.to_json() | {"hedge0": hedge0}
        combined = 5.0 * np.hypot(report.std_error, report.discounted_std_error)
        self._check(
            "price-consistency",
            abs(report.price - report.discounted_price),
            combined,
            report.consistent,
        )

        market_section = scenario.section("market")
        claim_section = scenario.section("claim")
        maturity = config.horizon_T - self._t0
        if market_section["kind"] == "constant" and claim.kind in (
            ClaimKind.VANILLA_CALL,
            ClaimKind.SMOOTH_CALL,
        ):
            s0 = float(s.now()[0])
            reference, delta = bs_closed_form(
                s0, claim.strike, market_section["sigma"], market.rate_rho, maturity
            )
            smoothing = 0.0
            if claim.kind == ClaimKind.SMOOTH_CALL:
                smoothing = np.log(2.0) / claim_section.get("beta", 50.0)
            limit = 5.0 * report.std_error + 0.005 * reference + smoothing
            gap = abs(report.price - reference)
            self._check("closed-form-price", gap, limit, gap <= limit)
            hedge_gap = abs(hedge0 / s0 - delta)
            self._check("closed-form-hedge", hedge_gap, 0.05, hedge_gap <= 0.05)
            results["closed_form"] = {"price": reference, "delta": delta}

        if (replication := scenario.sections.get("replication")) is not None:
            threshold = replication.get("threshold", 0.1)
            if replication.get("ladder", False):
                ladder = replication_ladder(
                    lambda g: (build_market(market_section, g), build_claim(claim_section, g)),
                    scenario.grid,
                    self._t0,
                    config,
                    replication.get("levels", 3),
                )
                finest = ladder.reports[-1]
                self._check(
                    "replication-trend", float(not ladder.decreasing), 0.0, ladder.decreasing
                )
                results["replication_ladder"] = ladder.to_json()
            else:
                finest = replication_test(market, claim, self._t0, s, config)
            self._check(
                "replication-error",
                finest.relative_error,
                threshold,
                finest.relative_error <= threshold,
            )
            results["replication_l2"] = finest.l2_error
            if paths_csv:
                self.written.append(finest.to_csv(self.output / "replication.csv"))

        if paths_csv:
            self.written.append(report.solution.ensemble.to_csv(self.output / "price_paths.csv"))
            self.written.append(report.solution.to_csv(self.output / "price_solution.csv"))
            self.written.append(
                write_json(
                    self.output / "price_coefficients.json",
                    report.solution.coefficients_json(),
                )
            )
        return results

    def _control_checks(self) -> dict:
        scenario = self.scenario
        problem, rule = scenario.problem()
        model = scenario.model()
        x = scenario.initial_segment()
        config = scenario.bsde_config()
        section = scenario.section("control")
        seed = config.seed

        problem_check = check_problem(problem, scenario.grid, seed=seed)
        self._check("channel-bound", problem_check.channel_ratio, 1.0, problem_check.passed)

        steps = scenario.grid.steps_between(self._t0, config.horizon_T)
        policies = {}
        zero = np.zeros(problem.control_set.dim_k)
        if problem.control_set.contains(zero)[0]:
            policies["zero"] = zero
        policies |= random_constant_policies(problem, section.get("constant_policies", 20), seed)
        policies |= random_piecewise_policies(
            problem, steps, section.get("piecewise_policies", 10), seed=seed
        )
        report = fundamental_relation_check(
            problem,
            model,
            self._t0,
            x,
            policies,
            config,
            rule,
            slack=section.get("slack", 0.02),
        )
        self.written.append(report.to_csv(self.output / "control.csv"))
        self._check(
            "fundamental-relation",
            report.min_gap,
            0.0,
            not report.violations,
            f"violations: {report.violations}",
        )
        if report.feedback is not None:
            self._check(
                "feedback-equality",
                abs(report.feedback.gap),
                5.0 * report.feedback.gap_std_error + report.slack,
                report.feedback_ok,
            )

        reference_policy = policies[sorted(policies)[0]]
        noise = evaluation_noise(config, scenario.grid, self._t0)
        direct = cost(problem, model, self._t0, x, reference_policy, config, noise)
        weighted = cost_reweighted(problem, model, self._t0, x, reference_policy, config, noise)
        gap = abs(direct[0] - weighted[0])
        limit = 5.0 * np.hypot(direct[1], weighted[1])
        self._check("girsanov-cross-check", gap, limit, gap <= limit)
        return report.to_json() | {"direct_cost": direct[0], "reweighted_cost": weighted[0]}

    def _qv_checks(self) -> dict:
        scenario = self.scenario
        section = scenario.section("qv")
        model = scenario.model()
        study = convergence_study(
            model,
            build_functional(section["functional"], scenario.grid),
            scenario.initial_segment(),
            section["epsilons"],
            section.get("paths", scenario.simulation.paths),
            tuple(section["window"]),
            scenario.simulation.seed,
            section.get("component", 0),
            workers=scenario.simulation.workers,
        )
        self.written.append(study.to_csv(self.output / "qv.csv"))
        self._check("qv-trend", float(not study.decreasing), 0.0, study.decreasing)
        last = study.rows[-1]
        self._check(
            "qv-final-bias", abs(last.bias), 5.0 * last.bias_std_error, study.final_bias_ok
        )
        return study.to_json()

    def _malliavin_checks(self) -> dict:
        scenario = self.scenario
        section = scenario.section("malliavin")
        grid = scenario.grid
        model = scenario.model()
        x = scenario.initial_segment()
        s, t = section["s"], section["t"]
        functional = build_functional(section.get("functional", {"kind": "point"}), grid)
        noise = self._noise(horizon=t, paths=section.get("paths"))
        ensemble = simulate_forward(model, self._t0, x, noise, workers=scenario.simulation.workers)
        state = propagate_derivative(model, ensemble, s, scenario.simulation.workers)
        base = state.base_index
        sigma = model.diffusion_sigma(ensemble.times[base], ensemble.segment_values(base))
        initial_gap = float(np.max(np.abs(state.derivative_at(base) - sigma)))
        self._check("malliavin-initial", initial_gap, 0.0, initial_gap == 0.0)
        before = float(np.max(np.abs(state.values[:, : grid.past_points_m + base]), initial=0.0))
        self._check("malliavin-adapted", before, 0.0, before == 0.0)

        derivative = chain_rule(functional, state, ensemble, s, t)
        oracle = bump_oracle(model, noise, s, section.get("eps", 1e-4), t, x, functional)
        tolerance = section.get("tolerance", 1e-2)
        fraction = section.get("fraction", 0.95)
        agreement = oracle_agreement(derivative, oracle, tolerance)
        self._check("malliavin-agreement", agreement, fraction, agreement >= fraction)
        return {"agreement": agreement, "moments": state.moments()}

    def simulate(self, csv: bool = False):
        """
        Simulate the forward equation. With csv=true also write the paths
        as CSV and the ensemble as a compressed dump
        """
        self._start("simulate")
        self._finish(self._simulate_checks(csv))

    def price(self, paths_csv: bool = False):
        """
        Price the scenario's claim, report the initial hedge and, when the
        scenario asks for it, the replication error
        """
        self._start("price")
        self._finish(self._price_checks(paths_csv))

    def control(self):
        """
        Policy tournament and closed-loop feedback against the value function
        """
        self._start("control")
        self._finish(self._control_checks())

    def qv(self):
        """
        Joint quadratic variation convergence study
        """
        self._start("qv")
        self._finish(self._qv_checks())

    def malliavin(self):
        """
        Malliavin derivative against the bump oracle
        """
        self._start("malliavin")
        self._finish(self._malliavin_checks())

    def verify(self):
        """
        Run every check that applies to the scenario
        """
        self._start("verify")
        scenario = self.scenario
        results = {}
        if scenario.has("model"):
            results["generic"] = self._generic_checks()
            results["simulate"] = self._simulate_checks()
            if scenario.has("terminal"):
                results["bsde"] = self._bsde_checks()
            if scenario.has("control"):
                results["control"] = self._control_checks()
            if scenario.has("qv"):
                results["qv"] = self._qv_checks()
            if scenario.has("malliavin"):
                results["malliavin"] = self._malliavin_checks()
        if scenario.has("market"):
            results["price"] = self._price_checks()
        self._finish(results)
