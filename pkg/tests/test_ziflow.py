import numpy as np
import pytest
from pydantic import ValidationError
from scipy import stats

from errors import ConfigError
from orderbook import EmptySide, Side
from ziflow import (
    Action,
    FlowConfig,
    FlowEngine,
    ShockWindow,
    SideEmptied,
    StationaryBaseline,
    merge_results,
    model_volatility,
    read_baseline,
    read_trajectories,
    run_experiment,
    write_baseline,
    write_trajectories,
)


def engine_with(bids, asks, **overrides) -> FlowEngine:
    config = FlowConfig(**{"seed": 1, **overrides})
    engine = FlowEngine(config)
    order_id = -1
    for side, prices in ((Side.BUY, bids), (Side.SELL, asks)):
        for price in prices:
            engine.book.insert_limit(side, price, 1, order_id)
            order_id -= 1
    return engine


def test_rates_must_sum_to_one():
    with pytest.raises(ValidationError):
        FlowConfig(p_lo=0.5, p_mo=0.2, p_c=0.2)


def test_run_must_outlast_warm_up():
    with pytest.raises(ValidationError):
        FlowConfig(warmup_steps=1000, total_steps=1000)


def test_short_names_are_accepted():
    config = FlowConfig(D=20, J=5, f=0.001)
    assert (config.deposit_width, config.shock_depth, config.shock_period) == (20, 5, 1000)
    assert FlowConfig(f=0).shock_period is None


def test_deposit_band_around_half_tick_mid():
    engine = engine_with([100], [101], p_lo=1.0, p_mo=0.0, p_c=0.0, D=3)
    assert engine.deposit_band(Side.BUY, engine.current_mid()) == (98, 100)
    assert engine.deposit_band(Side.SELL, engine.current_mid()) == (101, 103)


def test_deposit_prices_are_uniform_on_band():
    engine = engine_with([100], [101], p_lo=1.0, p_mo=0.0, p_c=0.0, D=3)
    seen = {Side.BUY: [], Side.SELL: []}
    for _ in range(10_000):
        engine.step()
        order = engine.book.get(engine._next_id - 1)
        seen[order.side].append(order.price)
        engine.book.cancel_by_id(order.id)

    buys, counts = np.unique(seen[Side.BUY], return_counts=True)
    assert buys.tolist() == [98, 99, 100]
    assert stats.chisquare(counts).pvalue > 0.01
    sells, counts = np.unique(seen[Side.SELL], return_counts=True)
    assert sells.tolist() == [101, 102, 103]
    assert stats.chisquare(counts).pvalue > 0.01


@pytest.mark.parametrize("bid", [100, 101])
def test_one_tick_spread_never_crosses(bid):
    engine = engine_with([bid], [bid + 1], p_lo=1.0, p_mo=0.0, p_c=0.0, D=5)
    for _ in range(200):
        engine.step()
        engine.book.check_invariants()
    assert engine.book.best_bid() == bid
    assert engine.book.best_ask() == bid + 1


def test_market_step_removes_best_ask():
    engine = engine_with([], [100, 102], p_lo=0.0, p_mo=1.0, p_c=0.0)
    while engine.step().action is not Action.MO_BUY:
        pass
    assert engine.book.best_ask() == 102


def test_infeasible_action_is_skipped():
    engine = engine_with([], [], p_lo=0.0, p_mo=0.5, p_c=0.5)
    record = engine.step()
    assert record.action is Action.SKIP
    assert record.mid is None
    assert engine.t == 1


def test_drop_shock_clears_band():
    engine = engine_with([100, 99, 98, 97], [101])
    report = engine.inject_shock("down", depth=2)
    assert report.removed == 3
    assert report.best_after == 97
    assert report.mid_before == 100.5
    assert report.mid_after == 99
    assert report.mid_move == 1.5


def test_rise_shock_clears_band():
    engine = engine_with([99], [100, 101, 104])
    report = engine.inject_shock("up", depth=2)
    assert report.best_after == 104
    assert report.best_after > report.best_before + report.depth


def test_shock_emptying_the_side():
    engine = engine_with([100, 99], [101])
    with pytest.raises(SideEmptied) as info:
        engine.inject_shock("down", depth=10)
    assert info.value.report.side_emptied
    assert engine.book.is_empty(Side.BUY)
    with pytest.raises(EmptySide):
        engine.inject_shock("down", depth=10)


def test_deposits_continue_around_last_mid_after_emptying():
    engine = engine_with([100], [102], p_lo=1.0, p_mo=0.0, p_c=0.0, D=4)
    engine.snapshot(Action.SKIP)
    with pytest.raises(SideEmptied):
        engine.inject_shock("down", depth=5)
    assert engine.current_mid() == 101
    for _ in range(50):
        engine.step()
    engine.book.check_invariants()
    assert not engine.book.is_empty(Side.BUY)


def test_experiment_collects_one_window_per_shock(small_config):
    result = run_experiment(small_config)
    assert len(result.windows) == 10
    window = result.windows[0]
    assert window.rel_t[0] == -10 and window.rel_t[-1] == 200
    zero = int(np.searchsorted(window.rel_t, 0))
    assert all(w.action[zero] == "shock" for w in result.windows)
    assert [w.direction for w in result.windows[:4]] == ["down", "up", "down", "up"]
    assert result.baseline.steps > 0
    assert result.baseline.steps <= small_config.total_steps - 10 * 211


def test_shock_moves_best_price_past_band(small_config):
    result = run_experiment(small_config)
    for report in result.shocks:
        if report.direction == "down":
            assert report.best_after is None or report.best_after < report.best_before - report.depth
        else:
            assert report.best_after is None or report.best_after > report.best_before + report.depth


def test_window_must_fit_between_shocks():
    config = FlowConfig(f=1 / 100, window_pre=50, window_post=100, warmup_steps=10, total_steps=1000)
    with pytest.raises(ConfigError):
        run_experiment(config)


def test_no_shocks_gives_baseline_only(small_config):
    result = run_experiment(small_config.model_copy(update={"shock_frequency": 0}))
    assert result.windows == []
    assert result.baseline.steps == small_config.total_steps
    assert result.baseline.spread > 0
    assert result.baseline.volatility_count == small_config.total_steps - 1


def test_same_seed_same_bytes(small_config, tmp_path):
    write_trajectories(tmp_path / "a.csv", run_experiment(small_config).windows)
    write_trajectories(tmp_path / "b.csv", run_experiment(small_config).windows)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    other = small_config.model_copy(update={"seed": 8})
    write_trajectories(tmp_path / "c.csv", run_experiment(other).windows)
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


def test_trajectories_survive_a_file(small_config, tmp_path):
    windows = run_experiment(small_config).windows
    write_trajectories(tmp_path / "trajectories.csv", windows)
    loaded = read_trajectories(tmp_path / "trajectories.csv")
    assert len(loaded) == len(windows)
    for before, after in zip(windows, loaded):
        np.testing.assert_array_equal(before.rel_t, after.rel_t)
        np.testing.assert_array_equal(before.spread, after.spread)
        np.testing.assert_array_equal(before.mid, after.mid)
        assert before.direction == after.direction
        assert before.side_emptied == after.side_emptied


def emptied_window(direction: str) -> ShockWindow:
    window = ShockWindow.empty(0, 0, pre=2, post=3)
    window.mid[:] = [100.0, 100.5, np.nan, np.nan, 140.0, 139.5]
    window.n_bid[:] = [5, 5, 5, 5, 5, 5] if direction == "up" else [5, 5, 0, 0, 1, 1]
    window.n_ask[:] = [5, 5, 0, 0, 1, 1] if direction == "up" else [5, 5, 5, 5, 5, 5]
    return window


@pytest.mark.parametrize("direction", ["down", "up"])
def test_emptied_window_direction_without_report(direction):
    window = emptied_window(direction)
    assert window.report is None
    assert window.direction == direction
    assert window.side_emptied


def test_direction_from_first_defined_mid_after_shock():
    window = ShockWindow.empty(0, 0, pre=2, post=3)
    window.mid[:] = [100.0, 100.5, np.nan, 160.0, 159.5, 159.0]
    window.n_bid[:] = 5
    window.n_ask[:] = 5
    assert window.direction == "up"
    assert not window.side_emptied


def test_skipped_shock_is_not_an_emptied_window():
    window = ShockWindow.empty(0, 0, pre=2, post=3)
    window.n_bid[:] = [0, 0, 0, 1, 1, 1]
    window.n_ask[:] = 5
    assert window.direction == "down"
    assert not window.side_emptied


def test_direction_when_the_other_side_is_empty():
    window = ShockWindow.empty(0, 0, pre=2, post=3)
    window.n_bid[:] = 0
    window.n_ask[:] = [9, 9, 3, 3, 4, 4]
    assert window.direction == "up"
    assert not window.side_emptied


def test_baseline_survives_a_file(small_config, tmp_path):
    baseline = run_experiment(small_config).baseline
    write_baseline(tmp_path / "baseline.csv", baseline)
    loaded = read_baseline(tmp_path / "baseline.csv")
    assert loaded == baseline
    assert loaded.value("queue_bid") == baseline.value("queue_bid")


def test_baseline_second_moment_of_spread():
    baseline = StationaryBaseline(steps=4, spread_sum=10.0, spread_sq_sum=30.0)
    assert baseline.spread == 2.5
    assert baseline.spread_sq == 7.5
    assert baseline.spread_sq >= baseline.spread**2


def test_no_shock_baseline_spread_moments(small_config):
    config = small_config.model_copy(update={"shock_frequency": 0})
    engine = FlowEngine(config)
    engine.warm_up()
    spreads = np.array([r.spread_ticks for r in (engine.step() for _ in range(config.total_steps))
                        if r.spread_ticks is not None], dtype=float)
    baseline = run_experiment(config).baseline
    assert baseline.steps == spreads.size
    assert baseline.spread_sq == pytest.approx(np.mean(spreads**2), rel=1e-12)


def test_unknown_baseline_observable():
    with pytest.raises(ConfigError):
        StationaryBaseline(steps=1).value("sharpe")


def test_merge_does_not_depend_on_order(small_config):
    first = run_experiment(small_config, run_id=0)
    second = run_experiment(small_config.model_copy(update={"seed": 99}), run_id=1)
    forward, backward = merge_results([first, second]), merge_results([second, first])
    assert forward.run_ids == backward.run_ids == [0, 1]
    assert forward.baseline == backward.baseline
    assert [(w.run_id, w.event_id) for w in forward.windows] == [(w.run_id, w.event_id) for w in backward.windows]
    assert len(forward.windows) == 20


def test_model_volatility():
    assert model_volatility(np.array([100.0, 102.0, 101.0])).tolist() == [2.0, 1.0]
    assert model_volatility(np.full(5, 7.0)).tolist() == [0.0] * 4
    with pytest.raises(ValueError):
        model_volatility(np.array([1.0]))


def test_stationary_volatility_is_the_normalization_baseline(small_config):
    config = small_config.model_copy(update={"shock_frequency": 0})
    engine = FlowEngine(config)
    engine.warm_up()
    records = [engine.step() for _ in range(config.total_steps)]
    volatility = model_volatility(records)
    baseline = run_experiment(config).baseline
    assert np.count_nonzero(~np.isnan(volatility)) == baseline.volatility_count
    assert np.nanmean(volatility) == pytest.approx(baseline.value("volatility"), rel=1e-12)


def test_limit_case_rates_run(small_config):
    config = small_config.model_copy(update={"p_lo": 0.5, "p_mo": 0.0, "p_c": 0.5})
    result = run_experiment(config)
    assert len(result.windows) == 10
    assert all("MO" not in a for w in result.windows for a in w.action)
