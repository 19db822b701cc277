import math

import numpy as np
import pytest
from pydantic import ValidationError

from errors import DataError
from meanfield import (
    GridMismatch,
    MeanFieldParams,
    MeanFieldTrajectory,
    NonPhysical,
    RequiresHalfLO,
    ZeroMarketRate,
    compare,
    gap_ratio,
    gap_ratio_general,
    general_recursion,
    k_sum,
    limit_recursion,
    local_exponent,
    measure_sigma_gamma,
    stationarity_residual,
    stationary_gap,
    write_comparison,
    write_trajectory,
)
from relax import RelaxationCurve
from ziflow import StationaryBaseline

DEFAULTS = dict(D=1000, p_lo=0.5, p_mo=0.16, p_c=0.34, sigma=40.0)


def test_first_limit_step():
    trajectory = limit_recursion(1000, 1000, 1)
    assert trajectory.spread[1] == pytest.approx(937.375, rel=1e-12)


def test_small_spread_decays_geometrically():
    s0 = 1e-3
    trajectory = limit_recursion(1000, s0, 100)
    assert trajectory.spread[100] == pytest.approx(s0 * (1 - 1 / 8000) ** 100, rel=1e-4)


def test_unit_exponent_while_quadratic_term_dominates():
    trajectory = limit_recursion(1000, 1000, 1500)
    assert 0.95 <= local_exponent(trajectory, 300, 1000) <= 1.05
    t = np.arange(200, 1501)
    scaled = t * trajectory.spread[t] / 16000
    assert np.all((scaled >= 0.85) & (scaled <= 1.0))


@pytest.mark.parametrize("s0", [0.5, 10.0, 1000.0, 4000.0])
def test_limit_trajectory_decreases(s0):
    spread = limit_recursion(1000, s0, 2000).spread
    assert np.all(np.diff(spread) < 0)
    assert np.all(spread > 0)


def test_oversized_start_is_nonphysical():
    with pytest.raises(NonPhysical):
        limit_recursion(1000, 20_000, 10)


def test_stationary_gap():
    assert stationary_gap(40, 0.5, 0.16, 1000) == pytest.approx(0.65625, rel=1e-12)
    with pytest.raises(ZeroMarketRate):
        stationary_gap(40, 0.5, 0.0, 1000)


def test_gap_ratio():
    assert gap_ratio(40, 0.65625, 0.5, 0.16, 1000) == pytest.approx(0.061963, abs=1e-6)
    assert gap_ratio(0.5, 0.5, 0.5, 0.16, 1000) == 0
    with pytest.raises(RequiresHalfLO):
        gap_ratio(40, 0.65625, 0.6, 0.1, 1000)
    assert gap_ratio(40, 1.26, 0.6, 0.1, 1000, allow_general=True) == gap_ratio_general(40, 1.26, 0.6, 0.1, 1000)
    with pytest.raises(ZeroMarketRate):
        gap_ratio(40, 0.65625, 0.5, 0.0, 1000)


@pytest.mark.parametrize("sigma", [2.0, 40.0, 300.0])
@pytest.mark.parametrize("p_mo", [0.05, 0.16, 0.4])
def test_general_ratio_reduces_to_half_case(sigma, p_mo):
    gamma1 = stationary_gap(sigma, 0.5, p_mo, 1000)
    assert gap_ratio_general(sigma, gamma1, 0.5, p_mo, 1000) == pytest.approx(
        gap_ratio(sigma, gamma1, 0.5, p_mo, 1000), rel=1e-12, abs=1e-15,
    )


def test_k_sum():
    assert k_sum(4) == 10
    assert k_sum(0.5) == 0.375


def test_no_market_orders_matches_limit_case():
    params = MeanFieldParams(D=1000, p_lo=0.5, p_mo=0.0, p_c=0.5, s0=1000, steps=500)
    general = general_recursion(params)
    limit = limit_recursion(1000, 1000, 500)
    np.testing.assert_array_equal(general.spread, limit.spread)
    assert np.all(general.gap1 >= 0)


def test_stationary_point_is_fixed():
    gamma1 = stationary_gap(40, 0.5, 0.16, 1000)
    trajectory = general_recursion(MeanFieldParams(**DEFAULTS, s0=40.0, gap0=gamma1, steps=200))
    np.testing.assert_allclose(trajectory.spread, 40.0, rtol=0, atol=1e-9)
    np.testing.assert_allclose(trajectory.gap1, gamma1, rtol=0, atol=1e-9)


def test_vanishing_market_rate_approaches_limit_case():
    params = MeanFieldParams(D=1000, p_lo=0.5, p_mo=1e-5, p_c=0.5 - 1e-5, sigma=1.0, gap0=1.0, s0=1000, steps=1000)
    np.testing.assert_allclose(general_recursion(params).spread, limit_recursion(1000, 1000, 1000).spread, rtol=0.01)


def test_spread_relaxes_towards_sigma():
    trajectory = general_recursion(MeanFieldParams(**DEFAULTS, s0=1040.0, steps=3000))
    assert trajectory.spread[0] == 1040.0
    assert trajectory.spread[-1] < trajectory.spread[100] < trajectory.spread[0]
    assert np.all(trajectory.gap1 >= 0)


def test_general_recursion_guards_the_spread():
    with pytest.raises(NonPhysical):
        general_recursion(MeanFieldParams(**DEFAULTS, s0=20_000.0, steps=5))


@pytest.mark.parametrize("overrides", [
    {"D": -1},
    {"p_mo": 0.2},
    {"p_lo": 0.6, "p_mo": 0.1, "p_c": 0.3},
    {"s0": 10.0},
    {"steps": 0},
])
def test_invalid_parameters(overrides):
    with pytest.raises(ValidationError):
        MeanFieldParams(**{**DEFAULTS, **overrides})


def test_general_closure_accepts_any_limit_rate():
    params = MeanFieldParams(**{**DEFAULTS, "p_lo": 0.6, "p_mo": 0.1, "p_c": 0.3, "closure": "general"})
    assert params.closure == "general"


def test_stationarity_residual():
    gamma1 = stationary_gap(40, 0.5, 0.16, 1000)
    assert stationarity_residual(40, gamma1, 0.5, 0.16, 1000) == pytest.approx(0.0, abs=1e-12)
    assert stationarity_residual(40, 2 * gamma1, 0.5, 0.16, 1000) == pytest.approx(1.0)


def test_stationarity_residual_uses_second_moment():
    # a fluctuating spread with mean 40 closes faster than a constant one
    sigma, spread_sq = 40.0, 40.0**2 + 30.0**2
    gamma1 = 0.5 * (spread_sq / 8000 + sigma / 4000) / 0.16
    assert stationarity_residual(sigma, gamma1, 0.5, 0.16, 1000, spread_sq=spread_sq) == pytest.approx(0.0, abs=1e-12)
    assert stationarity_residual(sigma, gamma1, 0.5, 0.16, 1000) > 0.3
    assert stationarity_residual(40, 0.65625, 0.5, 0.16, 1000, spread_sq=1600.0) == pytest.approx(0.0, abs=1e-12)


def test_measure_sigma_gamma():
    baseline = StationaryBaseline(steps=10, spread_sum=400.0, gap1_bid_sum=3.0, gap1_bid_count=4,
                                  gap1_ask_sum=5.0, gap1_ask_count=4)
    assert measure_sigma_gamma(baseline) == (40.0, 1.0)
    with pytest.raises(DataError):
        measure_sigma_gamma(StationaryBaseline())


def test_local_exponent_window():
    trajectory = limit_recursion(1000, 1000, 100)
    with pytest.raises(ValueError):
        local_exponent(trajectory, 50, 200)
    with pytest.raises(ValueError):
        local_exponent(trajectory, 0, 50)


def test_trajectory_as_curve():
    curve = MeanFieldTrajectory(np.array([80.0, 60.0, 40.0])).to_curve(40.0)
    assert curve.rel_t.tolist() == [0, 1, 2]
    assert curve.mean.tolist() == [2.0, 1.5, 1.0]


def test_compare_identical_curves():
    curve = general_recursion(MeanFieldParams(**DEFAULTS, s0=1040.0, steps=100)).to_curve(40.0)
    report = compare(curve, curve, 50)
    assert report.rel_t == list(range(1, 51))
    assert report.max_error == 0


def test_compare_relative_error():
    t = np.arange(0, 4)
    model = RelaxationCurve("spread", t, np.array([3.0, 1.5, 1.2, 1.0]), np.ones(4))
    simulated = RelaxationCurve("spread", t, np.array([3.0, 2.0, 1.2, 1.0]), np.ones(4))
    report = compare(model, simulated, 3)
    assert report.error_at(1) == pytest.approx(0.5)
    assert report.error_at(2) == pytest.approx(0.0)
    assert report.error_at(3) == 0.0
    assert math.isclose(report.max_error, 0.5)


def test_compare_needs_every_step():
    model = MeanFieldTrajectory(np.linspace(100, 40, 101)).to_curve(40.0)
    short = RelaxationCurve("spread", np.arange(-5, 21), np.full(26, 2.0), np.ones(26))
    with pytest.raises(GridMismatch):
        compare(model, short, 50)


def test_output_files(tmp_path):
    trajectory = general_recursion(MeanFieldParams(**DEFAULTS, s0=1040.0, steps=10))
    write_trajectory(tmp_path / "meanfield.csv", trajectory)
    lines = (tmp_path / "meanfield.csv").read_text().splitlines()
    assert lines[0] == "t,spread,gap1"
    assert lines[1].startswith("0,1040.0,")
    assert len(lines) == 12

    curve = trajectory.to_curve(40.0)
    write_comparison(tmp_path / "comparison.csv", compare(curve, curve, 5))
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == "rel_t,model_excess,sim_excess,relative_error"
    assert lines[-1].endswith(",0.0")
