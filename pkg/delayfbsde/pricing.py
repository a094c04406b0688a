#!/usr/bin/env python3
"""
A single-asset market whose drift and volatility depend on the price
history: risk-neutral pricing through the backward equation with driver
rho * y, the hedge read from Z, and replication under the physical measure.
"""
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
from scipy.special import (
    expit,
    ndtr,
)

from .bsde import (
    BsdeConfig,
    BsdeSolution,
    RegressionBasis,
    linear_driver,
    solve_value,
)
from .lib import (
    ConfigurationError,
    ModelViolationError,
    mean_and_se,
    write_csv,
)
from .sdde import (
    CoefficientModel,
    NoiseGrid,
    Scheme,
    simulate_forward,
)
from .segment import (
    CompositeFunctional,
    CylindricalFunctional,
    GridSpec,
    Segment,
    SegmentFunctional,
    constant_functional,
    window_mean,
)


logger = logging.getLogger(__name__)

# (t, segments (N, m+1, 1)) -> (N,)
MarketCoefficient = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True, kw_only=True)
class MarketModel:
    """
    dS = mu(t, S) S dt + sigma(t, S) S dW with |sigma| >= vol_floor and a
    riskless asset growing at rate_rho.
    """

    grid: GridSpec
    drift_mu: MarketCoefficient
    vol_sigma: MarketCoefficient
    vol_floor: float
    rate_rho: float
    initial: Segment
    mu_bound: float
    name: str = "market"

    def __post_init__(self):
        if self.grid.dim_n != 1 or self.grid.dim_d != 1:
            raise ConfigurationError("the market has a single risky asset: n = d = 1")
        if not self.vol_floor > 0:
            raise ConfigurationError(f"vol_floor must be positive, got {self.vol_floor}")
        if self.rate_rho < 0:
            raise ConfigurationError(f"rate_rho must be nonnegative, got {self.rate_rho}")
        if np.any(self.initial.values <= 0):
            raise ConfigurationError("the initial price segment must be positive")

    def volatility(self, t: float, values: np.ndarray) -> np.ndarray:
        sigma = np.broadcast_to(self.vol_sigma(t, values), values.shape[:-2])
        if np.any(np.abs(sigma) < self.vol_floor * (1 - 1e-12)):
            low = float(np.min(np.abs(sigma)))
            raise ModelViolationError(
                f"volatility {low:.6g} is below the declared floor {self.vol_floor} at t={t}"
            )
        return sigma

    @property
    def premium_bound(self) -> float:
        return (self.mu_bound + self.rate_rho) / self.vol_floor

    def _model(self, drift: MarketCoefficient, label: str) -> CoefficientModel:
        def drift_b(t, values):
            return (drift(t, values) * values[..., -1, 0])[..., None]

        def diffusion_sigma(t, values):
            return (self.volatility(t, values) * values[..., -1, 0])[..., None, None]

        return CoefficientModel(
            grid=self.grid,
            drift_b=drift_b,
            diffusion_sigma=diffusion_sigma,
            name=f"{self.name}-{label}",
        )

    def risk_neutral_model(self) -> CoefficientModel:
        rate = self.rate_rho
        return self._model(
            lambda t, values: np.full(values.shape[:-2], rate), "risk-neutral"
        )

    def physical_model(self) -> CoefficientModel:
        return self._model(
            lambda t, values: np.broadcast_to(self.drift_mu(t, values), values.shape[:-2]),
            "physical",
        )


def constant_market(
    grid: GridSpec, mu: float, sigma: float, rho: float, s0: float
) -> MarketModel:
    return MarketModel(
        grid=grid,
        drift_mu=lambda t, values: np.full(values.shape[:-2], mu),
        vol_sigma=lambda t, values: np.full(values.shape[:-2], sigma),
        vol_floor=abs(sigma),
        rate_rho=rho,
        initial=Segment.constant(grid, s0),
        mu_bound=abs(mu),
        name="constant",
    )


def delayed_vol_market(
    grid: GridSpec,
    mu: float,
    rho: float,
    s0: float,
    base: float = 0.2,
    amplitude: float = 0.1,
) -> MarketModel:
    """
    sigma(t, x) = base + amplitude tanh(x(-r) / x(0) - 1).
    """
    if not base > amplitude >= 0:
        raise ConfigurationError("delayed volatility needs base > amplitude >= 0")

    def vol_sigma(t, values):
        return base + amplitude * np.tanh(values[..., 0, 0] / values[..., -1, 0] - 1.0)

    return MarketModel(
        grid=grid,
        drift_mu=lambda t, values: np.full(values.shape[:-2], mu),
        vol_sigma=vol_sigma,
        vol_floor=base - amplitude,
        rate_rho=rho,
        initial=Segment.constant(grid, s0),
        mu_bound=abs(mu),
        name="delayed-vol",
    )


def risk_premium(market: MarketModel, t: float, x: Segment) -> float:
    """
    theta = (mu - rho) / sigma.
    """
    values = x.values[None]
    sigma = market.volatility(t, values)
    mu = np.broadcast_to(market.drift_mu(t, values), sigma.shape)
    return float(((mu - market.rate_rho) / sigma)[0])


class ClaimKind(str, Enum):
    VANILLA_CALL = "vanilla-call"
    SMOOTH_CALL = "smooth-call"
    WINDOW_CALL = "window-call"
    SMOOTH_WINDOW_CALL = "smooth-window-call"
    FIXED_LAG = "fixed-lag"
    CONSTANT = "constant"


@dataclass(frozen=True, kw_only=True)
class Claim:
    kind: ClaimKind
    payoff: SegmentFunctional
    strike: float = 0.0

    def __post_init__(self):
        if not isinstance(self.kind, ClaimKind):
            raise TypeError(f"Expected ClaimKind, got {type(self.kind)}")

    @property
    def name(self) -> str:
        return self.kind.value


def _hinge(strike: float):
    return (
        lambda z: np.maximum(z - strike, 0.0),
        lambda z: (z > strike).astype(float),
    )


def _softplus(strike: float, beta: float):
    return (
        lambda z: np.logaddexp(0.0, beta * (z - strike)) / beta,
        lambda z: expit(beta * (z - strike)),
    )


def _point_claim(grid: GridSpec, theta: float, outer, outer_gradient) -> SegmentFunctional:
    return CylindricalFunctional(
        grid,
        [theta],
        lambda p: outer(p[..., 0, 0]),
        lambda p: outer_gradient(p),
        growth_exponent=0,
        growth_constant=1.0,
    )


def vanilla_call(grid: GridSpec, strike: float) -> Claim:
    return Claim(
        kind=ClaimKind.VANILLA_CALL,
        payoff=_point_claim(grid, 0.0, *_hinge(strike)),
        strike=strike,
    )


def smooth_call(grid: GridSpec, strike: float, beta: float = 50.0) -> Claim:
    """
    softplus(beta (x(0) - K)) / beta, a differentiable call.
    """
    return Claim(
        kind=ClaimKind.SMOOTH_CALL,
        payoff=_point_claim(grid, 0.0, *_softplus(strike, beta)),
        strike=strike,
    )


def window_call(
    grid: GridSpec, strike: float, smoothed: bool = False, beta: float = 50.0
) -> Claim:
    """
    A call on the average of the price over the whole window.
    """
    outer, outer_gradient = _softplus(strike, beta) if smoothed else _hinge(strike)
    payoff = CompositeFunctional(
        [window_mean(grid)],
        outer=lambda z: outer(z[..., 0]),
        outer_gradient=outer_gradient,
        growth_exponent=0,
        growth_constant=1.0,
    )
    kind = ClaimKind.SMOOTH_WINDOW_CALL if smoothed else ClaimKind.WINDOW_CALL
    return Claim(kind=kind, payoff=payoff, strike=strike)


def fixed_lag_claim(grid: GridSpec, strike: float, beta: float = 50.0) -> Claim:
    """
    A smoothed call on the price one full delay ago, x(-r).
    """
    return Claim(
        kind=ClaimKind.FIXED_LAG,
        payoff=_point_claim(grid, -grid.delay_r, *_softplus(strike, beta)),
        strike=strike,
    )


def constant_claim(grid: GridSpec, value: float) -> Claim:
    return Claim(kind=ClaimKind.CONSTANT, payoff=constant_functional(grid, value), strike=value)


@dataclass(frozen=True, slots=True, kw_only=True)
class PriceReport:
    price: float
    std_error: float
    discounted_price: float
    discounted_std_error: float
    solution: BsdeSolution = field(repr=False)

    @property
    def consistent(self) -> bool:
        """
        The two price estimators agree within 5 combined standard errors.
        """
        gap = abs(self.price - self.discounted_price)
        return gap <= 5.0 * np.hypot(self.std_error, self.discounted_std_error) + 1e-12

    def to_json(self) -> dict:
        return {
            "price": self.price,
            "se": self.std_error,
            "discounted_price": self.discounted_price,
            "discounted_se": self.discounted_std_error,
        }


def pricing_basis(grid: GridSpec, claim: Claim, ridge_scale: float) -> RegressionBasis:
    """
    The default segment features plus the payoff itself.
    """
    return RegressionBasis(grid, ridge_scale).with_extra("payoff", claim.payoff)


def price(
    market: MarketModel,
    claim: Claim,
    t: float,
    s: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
    noise: Union[NoiseGrid, None] = None,
) -> PriceReport:
    """
    V_t from the backward equation with psi = rho y on the risk-neutral
    ensemble, simulated log-Euler, and the discounted expectation of the
    payoff on the same paths.
    """
    config = config.replace(scheme=Scheme.LOG_EULER)
    basis = basis or pricing_basis(market.grid, claim, config.ridge_scale)
    estimate = solve_value(
        market.risk_neutral_model(),
        linear_driver(market.rate_rho),
        claim.payoff,
        t,
        s,
        config,
        basis,
        noise,
    )
    discount = np.exp(-market.rate_rho * (config.horizon_T - t))
    if estimate.solution is None:
        payoff = float(claim.payoff(s.values))
        return PriceReport(
            price=payoff,
            std_error=0.0,
            discounted_price=payoff,
            discounted_std_error=0.0,
            solution=None,
        )
    payoffs = claim.payoff(estimate.solution.ensemble.terminal_values())
    discounted, discounted_error = mean_and_se(discount * payoffs)
    logger.info(
        "%s on %s: price %.6g (se %.2e), discounted %.6g",
        claim.name,
        market.name,
        estimate.value,
        estimate.std_error,
        discounted,
    )
    return PriceReport(
        price=estimate.value,
        std_error=estimate.std_error,
        discounted_price=discounted,
        discounted_std_error=discounted_error,
        solution=estimate.solution,
    )


def hedge_strategy(
    solution: BsdeSolution,
    market: MarketModel,
    k: int,
    segment: Union[Segment, np.ndarray],
) -> Union[float, np.ndarray]:
    """
    pi = Z(t_k, x) / sigma(t_k, x), the amount held in the risky asset
    (delta times S when nothing depends on the past).
    """
    single = isinstance(segment, Segment)
    values = segment.values[None] if single else segment
    t_k = solution.ensemble.times[min(k, solution.steps)]
    sigma_total = solution.z_at(k, values)[:, 0]
    pi = sigma_total / market.volatility(t_k, values)
    return float(pi[0]) if single else pi


@dataclass(frozen=True, slots=True, kw_only=True)
class ReplicationReport:
    price: float
    step: float
    l2_error: float
    l2_std_error: float
    errors: np.ndarray = field(repr=False)

    @property
    def relative_error(self) -> float:
        return self.l2_error / abs(self.price) if self.price else float("inf")

    def to_csv(self, path: Path) -> Path:
        return write_csv(
            path, ["path", "hedging_error"], [[p, e] for p, e in enumerate(self.errors)]
        )

    def to_json(self) -> dict:
        return {
            "price": self.price,
            "dt": self.step,
            "replication_l2": self.l2_error,
            "replication_l2_se": self.l2_std_error,
            "relative_error": self.relative_error,
        }


def replication_test(
    market: MarketModel,
    claim: Claim,
    t: float,
    s: Segment,
    config: BsdeConfig,
    basis: Union[RegressionBasis, None] = None,
) -> ReplicationReport:
    """
    Start from the price and rebalance pi every step along fresh paths of the
    physical market: V_{k+1} = V_k + rho (V_k - pi_k) dt + pi_k (S_{k+1} - S_k) / S_k.
    Reports the root mean square of V_T - phi(S_{T+.}).
    """
    report = price(market, claim, t, s, config, basis)
    solution = report.solution
    if solution is None:
        return ReplicationReport(
            price=report.price, step=market.grid.step_h, l2_error=0.0, l2_std_error=0.0,
            errors=np.zeros(1),
        )
    noise = NoiseGrid.generate(
        config.seed + 1, config.paths, t, config.horizon_T, market.grid, config.workers
    )
    ensemble = simulate_forward(
        market.physical_model(), t, s, noise, Scheme.LOG_EULER, config.workers
    )
    dt = ensemble.step
    prices = ensemble.y[:, :, 0]
    wealth = np.full(ensemble.num_paths, report.price)
    for k in range(ensemble.steps):
        pi = hedge_strategy(solution, market, k, ensemble.segment_values(k))
        returns = prices[:, k + 1] / prices[:, k] - 1.0
        wealth = wealth + market.rate_rho * (wealth - pi) * dt + pi * returns
    errors = wealth - claim.payoff(ensemble.terminal_values())
    squared, squared_error = mean_and_se(errors**2)
    l2 = float(np.sqrt(squared))
    l2_error = squared_error / (2 * l2) if l2 > 0 else 0.0
    logger.info("replication at dt=%g: l2 %.4g (%.2f%% of price)", dt, l2, 100 * l2 / report.price)
    return ReplicationReport(
        price=report.price, step=dt, l2_error=l2, l2_std_error=l2_error, errors=errors
    )


@dataclass(frozen=True, slots=True)
class ReplicationLadder:
    reports: list[ReplicationReport]

    @property
    def decreasing(self) -> bool:
        """
        Each refinement does not increase the error by more than 2 combined SE.
        """
        for coarse, fine in zip(self.reports, self.reports[1:]):
            slack = 2.0 * np.hypot(coarse.l2_std_error, fine.l2_std_error)
            if fine.l2_error > coarse.l2_error + slack:
                return False
        return True

    def to_json(self) -> dict:
        return {
            "levels": [i.to_json() for i in self.reports],
            "decreasing": self.decreasing,
        }


def replication_ladder(
    build: Callable[[GridSpec], tuple[MarketModel, Claim]],
    grid: GridSpec,
    t: float,
    config: BsdeConfig,
    levels: int = 3,
) -> ReplicationLadder:
    """
    Replication errors as dt halves, starting from grid.
    """
    reports = []
    for level in range(levels):
        refined = grid.refined(2**level) if level else grid
        market, claim = build(refined)
        reports.append(replication_test(market, claim, t, market.initial, config))
    return ReplicationLadder(reports)


def bs_closed_form(
    s0: float, strike: float, sigma: float, rho: float, maturity: float
) -> tuple[float, float]:
    """
    Lognormal call price and delta.
    """
    if not sigma > 0 or not maturity > 0:
        raise ConfigurationError("bs_closed_form needs sigma > 0 and maturity > 0")
    if strike <= 0:
        return s0, 1.0
    spread = sigma * np.sqrt(maturity)
    d1 = (np.log(s0 / strike) + (rho + 0.5 * sigma**2) * maturity) / spread
    d2 = d1 - spread
    value = s0 * ndtr(d1) - strike * np.exp(-rho * maturity) * ndtr(d2)
    return float(value), float(ndtr(d1))
