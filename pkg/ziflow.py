r"""
Zero-intelligence order flow in event time.

Every step draws one action with probabilities (p_lo, p_mo, p_c):

- limit order: buy or sell with equal probability, unit volume, price uniform
  on the integer ticks of [m - D, m] (buy) or [m, m + D] (sell)
- market order: buy or sell with equal probability, unit volume
- cancelation: buy or sell side with equal probability, every resting unit of
  volume on that side equally likely

Large price changes are injected by hand: a drop clears all bids in
[b - J, b], a rise clears all asks in [a, a + J].

run_experiment() warms the book up, injects shocks every 1/f steps, keeps an
aligned window of records around every shock and measures the stationary
baseline on the steps outside those windows.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, model_validator

from errors import ConfigError, DataError
from orderbook import BookStats, EmptySide, OrderBook, Side

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = [
    "run_id", "event_id", "rel_t", "mid", "spread_ticks", "action",
    "n_bid", "n_ask", "vbuy", "vsell", "g1_bid", "g1_ask",
]


class Action(str, Enum):
    LO_BUY = "LO-buy"
    LO_SELL = "LO-sell"
    MO_BUY = "MO-buy"
    MO_SELL = "MO-sell"
    C_BUY = "C-buy"
    C_SELL = "C-sell"
    SKIP = "skip"
    SHOCK = "shock"


class FlowConfig(BaseModel):
    """Rates and parameters of the zero-intelligence model"""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    p_lo: float = Field(0.5, ge=0, le=1)
    p_mo: float = Field(0.16, ge=0, le=1)
    p_c: float = Field(0.34, ge=0, le=1)
    deposit_width: int = Field(1000, ge=1, validation_alias=AliasChoices("deposit_width", "D"))
    shock_depth: int = Field(1000, ge=1, validation_alias=AliasChoices("shock_depth", "J"))
    shock_frequency: float = Field(2e-5, ge=0, validation_alias=AliasChoices("shock_frequency", "f"))
    warmup_steps: int = Field(100_000, ge=0)
    total_steps: int = Field(5_000_000, ge=1)
    seed: int = 0
    initial_price: int = Field(100_000, ge=1)
    initial_depth: int = Field(1000, ge=0)
    window_pre: int = Field(50, ge=0)
    window_post: int = Field(10_000, ge=1)
    shock_directions: Literal["alternate", "random"] = "alternate"
    first_direction: Literal["down", "up"] = "down"

    @model_validator(mode="after")
    def _check_consistency(self) -> "FlowConfig":
        if abs(self.p_lo + self.p_mo + self.p_c - 1.0) > 1e-12:
            raise ValueError(f"p_lo + p_mo + p_c must be 1, got {self.p_lo + self.p_mo + self.p_c}")
        if self.total_steps <= self.warmup_steps:
            raise ValueError("total_steps must exceed warmup_steps")
        return self

    @property
    def shock_period(self) -> int | None:
        if self.shock_frequency == 0:
            return None
        return max(1, round(1 / self.shock_frequency))


class ShockReport(BaseModel):
    direction: Literal["down", "up"]
    depth: int
    removed: int
    best_before: int
    best_after: int | None
    mid_before: float
    mid_after: float | None
    side_emptied: bool

    @property
    def mid_move(self) -> float | None:
        if self.mid_after is None:
            return None
        return abs(self.mid_after - self.mid_before)


class SideEmptied(DataError):
    """A shock cleared every order on its side"""

    def __init__(self, report: ShockReport):
        super().__init__(f"{report.direction} shock of depth {report.depth} emptied the side")
        self.report = report


@dataclass(slots=True, frozen=True)
class StepRecord:
    t: int
    action: Action
    mid: float | None
    spread_ticks: int | None
    stats: BookStats | None


class UniformStream:
    """Uniform numbers on [0, 1) drawn from a seeded numpy Generator in blocks"""

    def __init__(self, seed: int | np.random.SeedSequence, block: int = 1 << 16):
        self._rng = np.random.default_rng(seed)
        self._block = block
        self._buffer: list[float] = []
        self._index = 0

    def random(self) -> float:
        if self._index == len(self._buffer):
            self._buffer = self._rng.random(self._block).tolist()
            self._index = 0
        value = self._buffer[self._index]
        self._index += 1
        return value

    def integer(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range [lo, hi]"""
        span = hi - lo + 1
        return lo + min(int(self.random() * span), span - 1)


class FlowEngine:
    def __init__(self, config: FlowConfig, rng: UniformStream | None = None):
        self.config = config
        self.book = OrderBook()
        self.rng = rng or UniformStream(config.seed)
        self.t = 0
        self.last_mid = float(config.initial_price)
        self._next_id = 1
        self._lo_cut = config.p_lo
        self._mo_cut = config.p_lo + config.p_mo

    def _new_id(self) -> int:
        order_id = self._next_id
        self._next_id += 1
        return order_id

    def current_mid(self) -> float:
        """Mid of the book, or the last valid mid while a side is empty"""
        best_bid = self.book.best_bid()
        best_ask = self.book.best_ask()
        if best_bid is None or best_ask is None:
            return self.last_mid
        return (best_bid + best_ask) / 2

    def deposit_band(self, side: Side, mid: float) -> tuple[int, int]:
        """Integer tick range a new limit order of this side is drawn from"""
        width = self.config.deposit_width
        if side is Side.BUY:
            lo, hi = math.ceil(mid) - width, math.floor(mid)
            best_ask = self.book.best_ask()
            if best_ask is not None:
                hi = min(hi, best_ask - 1)
        else:
            lo, hi = math.ceil(mid), math.floor(mid) + width
            best_bid = self.book.best_bid()
            if best_bid is not None:
                lo = max(lo, best_bid + 1)
        return lo, hi

    def seed_book(self) -> None:
        """Place initial_depth unit orders per side around initial_price"""
        price = self.config.initial_price
        width = self.config.deposit_width
        for _ in range(self.config.initial_depth):
            self.book.insert_limit(Side.BUY, self.rng.integer(price - width, price - 1), 1, self._new_id())
            self.book.insert_limit(Side.SELL, self.rng.integer(price + 1, price + width), 1, self._new_id())

    def warm_up(self) -> None:
        self.seed_book()
        for _ in range(self.config.warmup_steps):
            self.step()
        self.t = 0
        logger.info(
            "Warm-up done: %d bids, %d asks resting",
            self.book.n_orders(Side.BUY), self.book.n_orders(Side.SELL),
        )

    def step(self) -> StepRecord:
        """Draw and apply one order-flow action"""
        u = self.rng.random()
        side = Side.BUY if self.rng.random() < 0.5 else Side.SELL
        book = self.book

        if u < self._lo_cut:
            lo, hi = self.deposit_band(side, self.current_mid())
            if lo > hi:
                action = Action.SKIP
            else:
                book.insert_limit(side, self.rng.integer(lo, hi), 1, self._new_id())
                action = Action.LO_BUY if side is Side.BUY else Action.LO_SELL
        elif u < self._mo_cut:
            if book.is_empty(side.opposite):
                action = Action.SKIP
            else:
                book.execute_market(side, 1)
                action = Action.MO_BUY if side is Side.BUY else Action.MO_SELL
        else:
            if book.is_empty(side):
                action = Action.SKIP
            else:
                book.cancel_uniform(side, self.rng)
                action = Action.C_BUY if side is Side.BUY else Action.C_SELL

        return self.snapshot(action)

    def snapshot(self, action: Action) -> StepRecord:
        """Record the book after an action and advance event time by one"""
        book = self.book
        if book.bids and book.asks:
            stats = book.stats()
            self.last_mid = stats.mid
            record = StepRecord(self.t, action, stats.mid, stats.spread_ticks, stats)
        else:
            record = StepRecord(self.t, action, None, None, None)
        self.t += 1
        return record

    def inject_shock(self, direction: Literal["down", "up"], depth: int | None = None) -> ShockReport:
        """Clear one side of the book within `depth` ticks of its best price"""
        depth = self.config.shock_depth if depth is None else depth
        side = Side.BUY if direction == "down" else Side.SELL
        if self.book.is_empty(side):
            raise EmptySide(f"cannot shock an empty {side.value} side")

        mid_before = self.current_mid()
        if side is Side.BUY:
            best_before = self.book.best_bid()
            removed = self.book.clear_band(side, best_before - depth, best_before)
            best_after = self.book.best_bid()
        else:
            best_before = self.book.best_ask()
            removed = self.book.clear_band(side, best_before, best_before + depth)
            best_after = self.book.best_ask()

        both_sides = bool(self.book.bids) and bool(self.book.asks)
        report = ShockReport(
            direction=direction,
            depth=depth,
            removed=len(removed),
            best_before=best_before,
            best_after=best_after,
            mid_before=mid_before,
            mid_after=self.current_mid() if both_sides else None,
            side_emptied=best_after is None,
        )
        if report.side_emptied:
            raise SideEmptied(report)
        return report


@dataclass
class ShockWindow:
    """Records from W_pre steps before to W_post steps after one shock"""

    run_id: int
    event_id: int
    rel_t: np.ndarray
    mid: np.ndarray
    spread: np.ndarray
    n_bid: np.ndarray
    n_ask: np.ndarray
    vbuy: np.ndarray
    vsell: np.ndarray
    g1_bid: np.ndarray
    g1_ask: np.ndarray
    action: list[str]
    report: ShockReport | None = None

    @classmethod
    def empty(cls, run_id: int, event_id: int, pre: int, post: int) -> "ShockWindow":
        length = pre + post + 1
        return cls(
            run_id=run_id,
            event_id=event_id,
            rel_t=np.arange(-pre, post + 1),
            **{name: np.full(length, np.nan) for name in
               ("mid", "spread", "n_bid", "n_ask", "vbuy", "vsell", "g1_bid", "g1_ask")},
            action=[""] * length,
        )

    def store(self, index: int, record: StepRecord, book: OrderBook) -> None:
        self.action[index] = record.action.value
        self.n_bid[index] = book.n_orders(Side.BUY)
        self.n_ask[index] = book.n_orders(Side.SELL)
        self.vbuy[index] = book.total_buy_volume
        self.vsell[index] = book.total_sell_volume
        stats = record.stats
        if stats is not None:
            self.mid[index] = stats.mid
            self.spread[index] = stats.spread_ticks
            if stats.gap1_bid is not None:
                self.g1_bid[index] = stats.gap1_bid
            if stats.gap1_ask is not None:
                self.g1_ask[index] = stats.gap1_ask

    def _shocked_side(self) -> Literal["down", "up"] | None:
        """Side that lost orders at the shock step; None when the shock removed nothing"""
        zero = int(np.searchsorted(self.rel_t, 0))
        if zero == 0:
            return None
        if self.n_bid[zero] < self.n_bid[zero - 1]:
            return "down"
        if self.n_ask[zero] < self.n_ask[zero - 1]:
            return "up"
        return None

    @property
    def direction(self) -> Literal["down", "up"]:
        """Shock direction; windows read back from a file infer it from the book"""
        if self.report is not None:
            return self.report.direction
        shocked = self._shocked_side()
        if shocked is not None:
            return shocked
        zero = int(np.searchsorted(self.rel_t, 0))
        before = self.mid[:zero][~np.isnan(self.mid[:zero])]
        after = self.mid[zero:][~np.isnan(self.mid[zero:])]
        if before.size and after.size and after[0] > before[-1]:
            return "up"
        return "down"

    @property
    def side_emptied(self) -> bool:
        """The shock cleared its whole side"""
        if self.report is not None:
            return self.report.side_emptied
        shocked = self._shocked_side()
        if shocked is None:
            return False
        zero = int(np.searchsorted(self.rel_t, 0))
        counts = self.n_bid if shocked == "down" else self.n_ask
        return bool(counts[zero] == 0)


class StationaryBaseline(BaseModel):
    """Running sums over shock-free steps; means are derived properties"""

    steps: int = 0
    spread_sum: float = 0.0
    spread_sq_sum: float = 0.0
    gap1_bid_sum: float = 0.0
    gap1_bid_count: int = 0
    gap1_ask_sum: float = 0.0
    gap1_ask_count: int = 0
    gap2_sum: float = 0.0
    gap2_count: int = 0
    n_bid_sum: float = 0.0
    n_ask_sum: float = 0.0
    imbalance_buy_sum: float = 0.0
    volatility_sum: float = 0.0
    volatility_count: int = 0
    orders_first_half_sum: float = 0.0
    first_half_count: int = 0
    orders_second_half_sum: float = 0.0
    second_half_count: int = 0

    @staticmethod
    def _mean(total: float, count: int) -> float:
        return total / count if count else math.nan

    @property
    def spread(self) -> float:
        return self._mean(self.spread_sum, self.steps)

    @property
    def spread_sq(self) -> float:
        """E[S^2]; the closing term of the spread drift is quadratic in S"""
        return self._mean(self.spread_sq_sum, self.steps)

    @property
    def gap1(self) -> float:
        return self._mean(self.gap1_bid_sum + self.gap1_ask_sum, self.gap1_bid_count + self.gap1_ask_count)

    @property
    def gap2(self) -> float:
        return self._mean(self.gap2_sum, self.gap2_count)

    @property
    def volatility(self) -> float:
        return self._mean(self.volatility_sum, self.volatility_count)

    @property
    def order_count_halves(self) -> tuple[float, float]:
        return (
            self._mean(self.orders_first_half_sum, self.first_half_count),
            self._mean(self.orders_second_half_sum, self.second_half_count),
        )

    def value(self, observable: str) -> float:
        """Baseline mean of a model-mode observable"""
        means = {
            "spread": self.spread,
            "volatility": self.volatility,
            "queue_bid": self._mean(self.n_bid_sum, self.steps),
            "queue_ask": self._mean(self.n_ask_sum, self.steps),
            "imbalance_buy": self._mean(self.imbalance_buy_sum, self.steps),
            "imbalance_sell": self._mean(self.steps - self.imbalance_buy_sum, self.steps),
            "gap1_bid": self._mean(self.gap1_bid_sum, self.gap1_bid_count),
            "gap1_ask": self._mean(self.gap1_ask_sum, self.gap1_ask_count),
        }
        try:
            return means[observable]
        except KeyError:
            raise ConfigError(f"no baseline for observable '{observable}'") from None

    def merge(self, other: "StationaryBaseline") -> "StationaryBaseline":
        return StationaryBaseline(**{
            name: getattr(self, name) + getattr(other, name) for name in StationaryBaseline.model_fields
        })


@dataclass
class ExperimentResult:
    config: FlowConfig
    baseline: StationaryBaseline
    windows: list[ShockWindow] = field(default_factory=list)
    run_ids: list[int] = field(default_factory=lambda: [0])

    @property
    def shocks(self) -> list[ShockReport]:
        return [w.report for w in self.windows if w.report is not None]


def _shock_direction(config: FlowConfig, event_id: int, rng: UniformStream) -> Literal["down", "up"]:
    if config.shock_directions == "random":
        return "down" if rng.random() < 0.5 else "up"
    other = "up" if config.first_direction == "down" else "down"
    return config.first_direction if event_id % 2 == 0 else other


def run_experiment(config: FlowConfig, run_id: int = 0) -> ExperimentResult:
    """Warm up, inject periodic shocks and collect aligned windows plus the baseline"""
    pre, post = config.window_pre, config.window_post
    period = config.shock_period
    if period is not None and period < pre + post + 1:
        raise ConfigError(f"shock period {period} is shorter than the window {pre} + {post} + 1")

    engine = FlowEngine(config)
    engine.warm_up()

    total = config.total_steps
    n_shocks = total // period if period is not None else 0
    shock_at = {k * period + pre: k for k in range(n_shocks)} if period is not None else {}
    logger.info("Run %d: %d recorded steps, %d shocks", run_id, total, n_shocks)

    sums = dict.fromkeys(StationaryBaseline.model_fields, 0)
    windows: list[ShockWindow] = []
    window: ShockWindow | None = None
    window_start = 0
    half = total // 2
    previous_mid: float | None = None
    book = engine.book

    for t in range(total):
        event_id = shock_at.get(t + pre) if period is not None else None
        if event_id is not None:
            window = ShockWindow.empty(run_id, event_id, pre, post)
            window_start = t
            windows.append(window)

        if t in shock_at:
            direction = _shock_direction(config, shock_at[t], engine.rng)
            try:
                report = engine.inject_shock(direction)
            except SideEmptied as exc:
                report = exc.report
                logger.warning("Shock %d emptied the %s side", shock_at[t], "bid" if direction == "down" else "ask")
            except EmptySide:
                report = None
                logger.warning("Shock %d skipped: side already empty", shock_at[t])
            record = engine.snapshot(Action.SHOCK)
            window.report = report
        else:
            record = engine.step()

        n_orders = len(book)
        if t < half:
            sums["orders_first_half_sum"] += n_orders
            sums["first_half_count"] += 1
        else:
            sums["orders_second_half_sum"] += n_orders
            sums["second_half_count"] += 1

        if window is not None:
            window.store(t - window_start, record, book)
            if t - window_start == pre + post:
                window = None
            previous_mid = None
            continue

        stats = record.stats
        if stats is None:
            previous_mid = None
            continue
        sums["steps"] += 1
        sums["spread_sum"] += stats.spread_ticks
        sums["spread_sq_sum"] += stats.spread_ticks * stats.spread_ticks
        sums["n_bid_sum"] += stats.n_bid_orders
        sums["n_ask_sum"] += stats.n_ask_orders
        sums["imbalance_buy_sum"] += stats.imbalance_buy
        if stats.gap1_bid is not None:
            sums["gap1_bid_sum"] += stats.gap1_bid
            sums["gap1_bid_count"] += 1
        if stats.gap1_ask is not None:
            sums["gap1_ask_sum"] += stats.gap1_ask
            sums["gap1_ask_count"] += 1
        for gap in (stats.gap2_bid, stats.gap2_ask):
            if gap is not None:
                sums["gap2_sum"] += gap
                sums["gap2_count"] += 1
        if previous_mid is not None:
            sums["volatility_sum"] += abs(stats.mid - previous_mid)
            sums["volatility_count"] += 1
        previous_mid = stats.mid

    return ExperimentResult(
        config=config,
        baseline=StationaryBaseline(**sums),
        windows=windows,
        run_ids=[run_id],
    )


def merge_results(results: Iterable[ExperimentResult]) -> ExperimentResult:
    """Combine independently seeded runs; the outcome does not depend on input order"""
    ordered = sorted(results, key=lambda r: min(r.run_ids))
    if not ordered:
        raise ValueError("nothing to merge")
    baseline = StationaryBaseline()
    windows: list[ShockWindow] = []
    run_ids: list[int] = []
    for result in ordered:
        baseline = baseline.merge(result.baseline)
        windows.extend(result.windows)
        run_ids.extend(result.run_ids)
    windows.sort(key=lambda w: (w.run_id, w.event_id))
    return ExperimentResult(config=ordered[0].config, baseline=baseline, windows=windows, run_ids=sorted(run_ids))


def model_volatility(records: Sequence[StepRecord] | np.ndarray) -> np.ndarray:
    """|m_t - m_{t-1}| in ticks; NaN where either mid is absent"""
    if len(records) < 2:
        raise ValueError("need at least two records")
    if isinstance(records, np.ndarray):
        mids = records.astype(float)
    else:
        mids = np.array([np.nan if r.mid is None else r.mid for r in records], dtype=float)
    return np.abs(np.diff(mids))


def _cell(value: float) -> str:
    if np.isnan(value):
        return ""
    if float(value).is_integer():
        return str(int(value))
    return repr(float(value))


def write_trajectories(path: Path, windows: Iterable[ShockWindow]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAJECTORY_COLUMNS)
        for w in windows:
            for i, rel_t in enumerate(w.rel_t):
                writer.writerow([
                    w.run_id, w.event_id, int(rel_t), _cell(w.mid[i]), _cell(w.spread[i]), w.action[i],
                    _cell(w.n_bid[i]), _cell(w.n_ask[i]), _cell(w.vbuy[i]), _cell(w.vsell[i]),
                    _cell(w.g1_bid[i]), _cell(w.g1_ask[i]),
                ])


def read_trajectories(path: Path) -> list[ShockWindow]:
    frame = pd.read_csv(path, keep_default_na=False, na_values=[""], float_precision="round_trip")
    missing = set(TRAJECTORY_COLUMNS) - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    windows: list[ShockWindow] = []
    for (run_id, event_id), rows in frame.groupby(["run_id", "event_id"], sort=True):
        rows = rows.sort_values("rel_t")
        windows.append(ShockWindow(
            run_id=int(run_id),
            event_id=int(event_id),
            rel_t=rows["rel_t"].to_numpy(dtype=int),
            mid=rows["mid"].to_numpy(dtype=float),
            spread=rows["spread_ticks"].to_numpy(dtype=float),
            n_bid=rows["n_bid"].to_numpy(dtype=float),
            n_ask=rows["n_ask"].to_numpy(dtype=float),
            vbuy=rows["vbuy"].to_numpy(dtype=float),
            vsell=rows["vsell"].to_numpy(dtype=float),
            g1_bid=rows["g1_bid"].to_numpy(dtype=float),
            g1_ask=rows["g1_ask"].to_numpy(dtype=float),
            action=rows["action"].astype(str).tolist(),
        ))
    return windows


def write_baseline(path: Path, baseline: StationaryBaseline) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in baseline.model_dump().items():
            writer.writerow([name, value])
        for name in ("spread", "volatility", "gap1", "gap2"):
            writer.writerow([f"mean_{name}", repr(getattr(baseline, name))])


def read_baseline(path: Path) -> StationaryBaseline:
    frame = pd.read_csv(path, float_precision="round_trip")
    values = dict(zip(frame["metric"], frame["value"]))
    return StationaryBaseline(**{name: values[name] for name in StationaryBaseline.model_fields if name in values})
