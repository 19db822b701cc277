"""Full-size model runs. Minutes each; run with `pytest -m slow`."""

import numpy as np
import pytest

from meanfield import MeanFieldParams, compare, general_recursion, measure_sigma_gamma, stationarity_residual
from relax import aggregate, align_shock_windows, excess, fit_power_law, peak
from ziflow import FlowConfig, run_experiment

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def full_run():
    return run_experiment(FlowConfig(p_lo=0.5, p_mo=0.16, p_c=0.34, D=1000, J=1000, f=2e-5, total_steps=5_000_000))


def test_model_relaxation_exponents(full_run):
    spread = aggregate(align_shock_windows(full_run.windows, full_run.baseline, "spread"))
    volatility = aggregate(align_shock_windows(full_run.windows, full_run.baseline, "volatility"))
    assert 0.38 <= fit_power_law(excess(spread), 1, 100).beta <= 0.58
    assert 0.40 <= fit_power_law(excess(volatility), 1, 100).beta <= 0.60
    assert peak(volatility)[1] > peak(spread)[1]


def test_shock_moves_mid_by_half_the_band(full_run):
    moves = [r.mid_move for r in full_run.shocks if r.mid_move is not None]
    assert len(moves) >= 50
    sigma, gamma1 = measure_sigma_gamma(full_run.baseline)
    depth = full_run.config.shock_depth
    assert depth / 2 <= np.mean(moves) <= depth / 2 + gamma1 + 2 * sigma


def test_meanfield_tracks_simulation_early(full_run):
    # the recursion starts from a populated best price; windows whose side was cleared start undefined
    windows = [w for w in full_run.windows if not w.side_emptied]
    simulated = aggregate(align_shock_windows(windows, full_run.baseline, "spread"))
    sigma, _ = measure_sigma_gamma(full_run.baseline)
    params = MeanFieldParams(D=1000, p_lo=0.5, p_mo=0.16, p_c=0.34, sigma=sigma, s0=sigma + 1000, steps=1000)
    model = general_recursion(params).to_curve(sigma)

    early = compare(model, simulated, 50)
    assert early.max_error < 0.25
    assert compare(model, simulated, 1000).error_at(1000) > early.error_at(50)


def test_shock_free_run_is_stationary():
    config = FlowConfig(p_lo=0.5, p_mo=0.16, p_c=0.34, D=1000, f=0, total_steps=1_000_000, initial_depth=10_000)
    baseline = run_experiment(config).baseline
    first, second = baseline.order_count_halves
    assert abs(first - second) / first < 0.05
    sigma, gamma1 = measure_sigma_gamma(baseline)
    assert stationarity_residual(sigma, gamma1, 0.5, 0.16, 1000, spread_sq=baseline.spread_sq) < 0.10
