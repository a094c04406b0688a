#!/usr/bin/env python3
import numpy as np
import pytest

from common import (
    config_for,
    small_grid,
)
from delayfbsde.lib import (
    ConfigurationError,
    ModelViolationError,
)
from delayfbsde.pricing import (
    Claim,
    ClaimKind,
    MarketModel,
    bs_closed_form,
    constant_claim,
    constant_market,
    delayed_vol_market,
    hedge_strategy,
    price,
    replication_ladder,
    replication_test,
    risk_premium,
    smooth_call,
    vanilla_call,
    window_call,
)
from delayfbsde.segment import Segment


def market_grid():
    return small_grid(delay_r=0.1, past_points_m=5)


def test_closed_form_reference_values():
    value, delta = bs_closed_form(100.0, 100.0, 0.2, 0.05, 1.0)
    assert value == pytest.approx(10.4506, abs=1e-4)
    assert delta == pytest.approx(0.6368, abs=1e-4)
    assert bs_closed_form(100.0, 0.0, 0.2, 0.05, 1.0) == (100.0, 1.0)
    assert bs_closed_form(100.0, -5.0, 0.2, 0.05, 1.0) == (100.0, 1.0)
    with pytest.raises(ConfigurationError):
        bs_closed_form(100.0, 100.0, 0.0, 0.05, 1.0)


def test_market_validation():
    grid = market_grid()
    with pytest.raises(ConfigurationError):
        constant_market(small_grid(dim_n=2), 0.05, 0.2, 0.05, 100.0)
    with pytest.raises(ConfigurationError):
        constant_market(grid, 0.05, 0.2, -0.01, 100.0)
    with pytest.raises(ConfigurationError):
        constant_market(grid, 0.05, 0.2, 0.05, -1.0)
    with pytest.raises(ConfigurationError):
        delayed_vol_market(grid, 0.05, 0.05, 100.0, base=0.1, amplitude=0.2)
    with pytest.raises(TypeError):
        Claim(kind="vanilla-call", payoff=vanilla_call(grid, 100.0).payoff)


def test_risk_premium_and_bound():
    market = constant_market(market_grid(), 0.08, 0.2, 0.05, 100.0)
    assert risk_premium(market, 0.0, market.initial) == pytest.approx(0.15)
    assert market.premium_bound == pytest.approx(0.65)


def test_vanilla_call_matches_closed_form():
    market = constant_market(market_grid(), 0.05, 0.2, 0.05, 100.0)
    claim = vanilla_call(market.grid, 100.0)
    report = price(market, claim, 0.0, market.initial, config_for(0.5, paths=20000, seed=3))
    expected, delta = bs_closed_form(100.0, 100.0, 0.2, 0.05, 0.5)
    assert report.price == pytest.approx(expected, abs=5 * report.std_error + 0.005 * expected)
    assert report.consistent
    pi = hedge_strategy(report.solution, market, 0, market.initial)
    assert pi / 100.0 == pytest.approx(delta, abs=0.05)
    # Every later step hedges with a position between 0 and S.
    values = report.solution.ensemble.segment_values(5)
    positions = hedge_strategy(report.solution, market, 5, values)
    spot = values[:, -1, 0]
    assert np.mean((positions > -0.1 * spot) & (positions < 1.1 * spot)) > 0.95


def test_claims_evaluate_their_payoffs():
    grid = market_grid()
    segment = Segment.ramp(grid) + Segment.constant(grid, 100.0)
    assert vanilla_call(grid, 99.5).payoff(segment.values) == pytest.approx(0.5)
    assert smooth_call(grid, 99.5, 50.0).payoff(segment.values) == pytest.approx(
        np.logaddexp(0.0, 25.0) / 50.0
    )
    # The window mean of 100 + theta over [-0.1, 0] is 99.95.
    assert window_call(grid, 99.5).payoff(segment.values) == pytest.approx(0.45)
    assert window_call(grid, 99.5).kind == ClaimKind.WINDOW_CALL
    assert window_call(grid, 99.5, smoothed=True).kind == ClaimKind.SMOOTH_WINDOW_CALL


def test_price_at_maturity_is_the_payoff():
    market = constant_market(market_grid(), 0.05, 0.2, 0.05, 100.0)
    report = price(
        market, vanilla_call(market.grid, 90.0), 0.5, Segment.constant(market.grid, 110.0),
        config_for(0.5),
    )
    assert report.price == 20.0
    assert report.solution is None


def test_constant_claim_is_discounted_exactly():
    market = constant_market(market_grid(), 0.05, 0.2, 0.05, 100.0)
    report = price(
        market, constant_claim(market.grid, 1.0), 0.0, market.initial,
        config_for(0.5, paths=200, bootstrap_samples=0),
    )
    assert report.price == pytest.approx((1 - 0.05 * 0.02) ** 25)
    assert report.discounted_price == pytest.approx(np.exp(-0.025))
    assert report.to_json()["price"] == report.price


def test_volatility_below_floor_is_rejected():
    grid = market_grid()
    market = MarketModel(
        grid=grid,
        drift_mu=lambda t, values: np.full(values.shape[:-2], 0.05),
        vol_sigma=lambda t, values: np.full(values.shape[:-2], 0.05),
        vol_floor=0.1,
        rate_rho=0.05,
        initial=Segment.constant(grid, 100.0),
        mu_bound=0.05,
    )
    with pytest.raises(ModelViolationError):
        price(market, vanilla_call(grid, 100.0), 0.0, market.initial, config_for(0.5, paths=100))


def test_delayed_volatility_stays_above_floor():
    market = delayed_vol_market(market_grid(), 0.05, 0.05, 100.0)
    assert market.vol_floor == pytest.approx(0.1)
    report = price(
        market, smooth_call(market.grid, 100.0), 0.0, market.initial,
        config_for(0.5, paths=2000),
    )
    assert report.consistent
    assert report.price > 0


def test_replication_of_a_smooth_call(tmp_path):
    market = constant_market(market_grid(), 0.08, 0.2, 0.05, 100.0)
    claim = smooth_call(market.grid, 100.0)
    report = replication_test(
        market, claim, 0.0, market.initial, config_for(0.5, paths=2000, bootstrap_samples=0)
    )
    assert report.step == pytest.approx(0.02)
    assert report.relative_error < 0.5
    assert len(report.errors) == 2000
    rows = report.to_csv(tmp_path / "hedge.csv").read_text().splitlines()
    assert rows[0] == "path,hedging_error"


def test_replication_ladder_halves_the_step():
    def build(grid):
        return constant_market(grid, 0.08, 0.2, 0.05, 100.0), smooth_call(grid, 100.0)

    ladder = replication_ladder(
        build, market_grid(), 0.0, config_for(0.5, paths=1000, bootstrap_samples=0), levels=2
    )
    assert [i.step for i in ladder.reports] == pytest.approx([0.02, 0.01])
    assert len(ladder.to_json()["levels"]) == 2
