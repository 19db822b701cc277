r"""
Relaxation of microstructure observables after large price changes.

The aligned ratios from the event detector (empirical data) or from the
shock windows of the simulator (model data) are averaged per relative time,
turned into an excess over the stationary level and fitted with

    E(t) = A * t^(-beta)

by least squares on log E against log t, with every decade of t given
the same total weight.

The empirical side also replays raw order logs into a book, which yields the
per-minute observables (order placement and cancelation counts, market
orders, queue sizes, imbalance, spread, volatility, order-type rates) and a
transaction-price minute series the detector runs on.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from errors import DataError, NumericalError
from events import AlignedMatrix, DailyValues, MinuteObservable, MinuteSeries, TradingDay
from orderbook import CrossingPrice, DuplicateId, InsufficientLiquidity, OrderBook, Side, UnknownId
from ziflow import ShockWindow, StationaryBaseline

logger = logging.getLogger(__name__)

ORDER_LOG_COLUMNS = ["timestamp", "event_type", "side", "price", "volume", "order_id"]

MODEL_OBSERVABLES = (
    "spread", "volatility", "queue_bid", "queue_ask", "imbalance_buy", "imbalance_sell", "gap1_bid", "gap1_ask",
)

EMPIRICAL_OBSERVABLES = (
    "volatility", "log_spread",
    "placements_bid", "placements_ask", "placement_volume_bid", "placement_volume_ask",
    "cancels_bid", "cancels_ask", "market_bid", "market_ask",
    "queue_bid", "queue_ask", "imbalance_buy", "imbalance_sell",
    "rate_limit", "rate_market", "rate_cancel",
    "rate_limit_bid", "rate_market_bid", "rate_cancel_bid",
    "rate_limit_ask", "rate_market_ask", "rate_cancel_ask",
)

MIN_FIT_POINTS = 5


class EmptyEnsemble(DataError):
    """No event contributes to the aggregate"""


class TooFewPoints(NumericalError):
    """Not enough positive excess values inside the fit window"""


class AllNonpositive(NumericalError):
    """Every excess value in the fit window is zero or negative"""


class MalformedLog(DataError):
    """Order log row that cannot be applied to the book"""


class FitConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    t_lo: float = Field(1, ge=1)
    t_hi: float = Field(100, gt=1)
    resample: Literal["log", "raw"] = "log"
    aggregation: Literal["mean_of_ratios", "ratio_of_means"] = "mean_of_ratios"
    bootstrap: int = Field(0, ge=0)
    bootstrap_seed: int = 0

    @model_validator(mode="after")
    def _check_window(self) -> "FitConfig":
        if self.t_hi <= self.t_lo:
            raise ValueError(f"fit window [{self.t_lo}, {self.t_hi}] is empty")
        return self


class ReplayConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    open_minute: int = Field(480, ge=0)
    close_minute: int = Field(990, le=24 * 60)
    tick_size: float = Field(1.0, gt=0)
    instrument: str = "UNKNOWN"

    @model_validator(mode="after")
    def _check_session(self) -> "ReplayConfig":
        if self.close_minute <= self.open_minute:
            raise ValueError("close_minute must be after open_minute")
        return self


class PowerLawFit(BaseModel):
    label: str
    beta: float
    stderr: float
    amplitude: float
    t_lo: float
    t_hi: float
    n_points: int
    n_excluded: int = 0
    rms_residual: float = 0.0
    method: Literal["regression", "bootstrap"] = "regression"

    @property
    def side(self) -> str:
        for suffix in ("bid", "ask", "buy", "sell"):
            if self.label.endswith("_" + suffix):
                return suffix
        return ""

    def predict(self, t: np.ndarray | float) -> np.ndarray | float:
        return self.amplitude * np.power(t, -self.beta)


@dataclass
class RelaxationCurve:
    """Mean ratio to baseline per relative time, with the number of contributing events"""

    label: str
    rel_t: np.ndarray
    mean: np.ndarray
    counts: np.ndarray

    def value_at(self, t: int) -> float:
        index = np.flatnonzero(self.rel_t == t)
        if index.size == 0:
            raise KeyError(t)
        return float(self.mean[index[0]])


@dataclass
class ExcessSeries:
    label: str
    rel_t: np.ndarray
    values: np.ndarray

    @property
    def negative(self) -> np.ndarray:
        return self.values < 0


def aggregate(
    matrix: AlignedMatrix,
    method: Literal["mean_of_ratios", "ratio_of_means"] = "mean_of_ratios",
    direction: str | None = None,
) -> RelaxationCurve:
    """Average the per-event ratios over events; points no event covers are dropped"""
    matrix = matrix.with_direction(direction)
    if matrix.n_events == 0:
        raise EmptyEnsemble(f"{matrix.label}: no events" + (f" with direction {direction}" if direction else ""))

    ratios = matrix.ratios
    present = ~np.isnan(ratios)
    counts = present.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        if method == "mean_of_ratios":
            mean = np.where(present, ratios, 0.0).sum(axis=0) / counts
        else:
            raw = np.where(present, matrix.raw, 0.0).sum(axis=0)
            base = np.where(present, matrix.baseline, 0.0).sum(axis=0)
            mean = raw / base

    keep = counts > 0
    if not keep.any():
        raise EmptyEnsemble(f"{matrix.label}: no event has a usable value")
    return RelaxationCurve(matrix.label, matrix.rel_t[keep], mean[keep], counts[keep])


def excess(curve: RelaxationCurve) -> ExcessSeries:
    return ExcessSeries(curve.label, curve.rel_t, curve.mean - 1.0)


def peak(curve: RelaxationCurve, lo: int = 0) -> tuple[int, float]:
    """Relative time and value of the largest mean ratio at rel_t >= lo"""
    after = curve.rel_t >= lo
    if not after.any():
        raise EmptyEnsemble(f"{curve.label}: nothing at rel_t >= {lo}")
    index = int(np.argmax(np.where(after, curve.mean, -np.inf)))
    return int(curve.rel_t[index]), float(curve.mean[index])


def log_spacing_weights(times: np.ndarray) -> np.ndarray:
    """Half the log-distance between each point's neighbours; every decade sums to the same weight"""
    x = np.log(times)
    edges = np.concatenate(([x[0]], (x[1:] + x[:-1]) / 2, [x[-1]]))
    return np.diff(edges)


def _weighted_line(x: np.ndarray, y: np.ndarray, weights: np.ndarray) -> tuple[float, float, float]:
    """Weighted least-squares slope, intercept and slope stderr"""
    w = weights * (x.size / weights.sum())
    x_mean, y_mean = np.average(x, weights=w), np.average(y, weights=w)
    sxx = float(np.sum(w * (x - x_mean) ** 2))
    slope = float(np.sum(w * (x - x_mean) * (y - y_mean))) / sxx
    intercept = float(y_mean - slope * x_mean)
    residual = y - (intercept + slope * x)
    stderr = math.sqrt(float(np.sum(w * residual**2)) / (x.size - 2) / sxx)
    return slope, intercept, stderr


def fit_power_law(
    series: ExcessSeries,
    t_lo: float = 1,
    t_hi: float = 100,
    resample: Literal["log", "raw"] = "log",
) -> PowerLawFit:
    """Least-squares power law through the positive excess values of [t_lo, t_hi]

    `log` weights each point by its share of log t, so every decade counts the same
    however densely it is sampled; `raw` weights every point equally.
    """
    if t_lo < 1 or t_hi <= t_lo:
        raise ValueError(f"fit window [{t_lo}, {t_hi}] must satisfy 1 <= t_lo < t_hi")
    window = (series.rel_t >= t_lo) & (series.rel_t <= t_hi)
    values = series.values[window]
    times = series.rel_t[window].astype(float)
    finite = np.isfinite(values)
    positive = finite & (values > 0)

    if finite.any() and not positive.any():
        raise AllNonpositive(f"{series.label}: no positive excess in [{t_lo}, {t_hi}]")
    if positive.sum() < MIN_FIT_POINTS:
        raise TooFewPoints(f"{series.label}: {int(positive.sum())} usable points in [{t_lo}, {t_hi}]")
    excluded = int(finite.sum() - positive.sum())
    if excluded:
        logger.warning("%s: %d non-positive excess values left out of the fit", series.label, excluded)

    x, y = np.log(times[positive]), np.log(values[positive])
    if resample == "log":
        slope, intercept, stderr = _weighted_line(x, y, log_spacing_weights(times[positive]))
    else:
        result = stats.linregress(x, y)
        slope, intercept, stderr = float(result.slope), float(result.intercept), float(result.stderr)
    residual = y - (intercept + slope * x)
    return PowerLawFit(
        label=series.label,
        beta=-slope,
        stderr=stderr,
        amplitude=math.exp(intercept),
        t_lo=t_lo,
        t_hi=t_hi,
        n_points=int(positive.sum()),
        n_excluded=excluded,
        rms_residual=float(np.sqrt(np.mean(residual**2))),
    )


def bootstrap_exponent(matrix: AlignedMatrix, config: FitConfig, direction: str | None = None) -> PowerLawFit:
    """Fit on the full ensemble, with stderr from resampling events with replacement"""
    matrix = matrix.with_direction(direction)
    full = fit_power_law(
        excess(aggregate(matrix, config.aggregation)),
        config.t_lo, config.t_hi, config.resample,
    )
    if config.bootstrap < 2:
        return full

    rng = np.random.default_rng(config.bootstrap_seed)
    betas = []
    for _ in range(config.bootstrap):
        rows = rng.integers(0, matrix.n_events, matrix.n_events)
        try:
            fit = fit_power_law(
                excess(aggregate(matrix.select(rows), config.aggregation)),
                config.t_lo, config.t_hi, config.resample,
            )
        except (EmptyEnsemble, TooFewPoints, AllNonpositive):
            continue
        betas.append(fit.beta)
    if len(betas) < 2:
        raise TooFewPoints(f"{matrix.label}: only {len(betas)} bootstrap resamples could be fitted")
    logger.info("%s: %d of %d bootstrap resamples fitted", matrix.label, len(betas), config.bootstrap)
    return full.model_copy(update={"stderr": float(np.std(betas, ddof=1)), "method": "bootstrap"})


# -- model mode ---------------------------------------------------------------


def window_observable(window: ShockWindow, name: str) -> np.ndarray:
    """One observable along a shock window; NaN where undefined"""
    if name == "spread":
        return window.spread.copy()
    if name == "volatility":
        values = np.full(window.mid.size, np.nan)
        values[1:] = np.abs(np.diff(window.mid))
        return values
    if name == "queue_bid":
        return window.n_bid.copy()
    if name == "queue_ask":
        return window.n_ask.copy()
    if name in ("imbalance_buy", "imbalance_sell"):
        total = window.vbuy + window.vsell
        side = window.vbuy if name == "imbalance_buy" else window.vsell
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(total > 0, side / total, np.nan)
    if name == "gap1_bid":
        return window.g1_bid.copy()
    if name == "gap1_ask":
        return window.g1_ask.copy()
    raise DataError(f"unknown model observable '{name}'")


def align_shock_windows(
    windows: Sequence[ShockWindow], baseline: StationaryBaseline, observable: str = "spread",
) -> AlignedMatrix:
    """Stack simulator windows into the same matrix form the detector produces"""
    if not windows:
        raise EmptyEnsemble("no shock windows")
    rel_t = windows[0].rel_t
    for w in windows:
        if not np.array_equal(w.rel_t, rel_t):
            raise DataError(f"window {w.run_id}/{w.event_id} has a different relative-time grid")
    raw = np.vstack([window_observable(w, observable) for w in windows])
    level = baseline.value(observable)
    if not level > 0:
        raise DataError(f"baseline of {observable} is {level}; cannot normalize")
    return AlignedMatrix(observable, rel_t.copy(), raw, np.full_like(raw, level), [w.direction for w in windows])


# -- order-log replay ---------------------------------------------------------


@dataclass
class ReplayResult:
    prices: MinuteSeries
    observables: dict[str, MinuteObservable]


def load_order_log(path: Path) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"event_type": str, "side": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        raise MalformedLog(f"{path}: empty order log") from None
    missing = set(ORDER_LOG_COLUMNS) - set(frame.columns)
    if missing:
        raise MalformedLog(f"{path}: missing columns {sorted(missing)}")
    return frame


class _DayCounts:
    """Per-minute tallies and end-of-minute snapshots for one session"""

    COUNTED = (
        "placements_bid", "placements_ask", "placement_volume_bid", "placement_volume_ask",
        "cancels_bid", "cancels_ask", "market_bid", "market_ask",
    )
    SNAPSHOT = ("queue_bid", "queue_ask", "imbalance_buy", "imbalance_sell", "log_spread", "log_mid")

    def __init__(self, n_minutes: int):
        self.n = n_minutes
        self.columns = {name: np.zeros(n_minutes) for name in self.COUNTED}
        self.columns.update({name: np.full(n_minutes, np.nan) for name in self.SNAPSHOT})
        self.filled = 0
        self.trade_minutes: list[int] = []
        self.trade_prices: list[float] = []

    def snapshot_until(self, index: int, book: OrderBook) -> None:
        """Store the current book as the end-of-minute state of minutes [filled, index)"""
        index = min(index, self.n)
        if index <= self.filled:
            return
        cols = self.columns
        span = slice(self.filled, index)
        cols["queue_bid"][span] = book.n_orders(Side.BUY)
        cols["queue_ask"][span] = book.n_orders(Side.SELL)
        total = book.total_buy_volume + book.total_sell_volume
        if total:
            cols["imbalance_buy"][span] = book.total_buy_volume / total
            cols["imbalance_sell"][span] = book.total_sell_volume / total
        best_bid, best_ask = book.best_bid(), book.best_ask()
        if best_bid is not None and best_ask is not None and best_bid > 0:
            cols["log_spread"][span] = math.log(best_ask) - math.log(best_bid)
            cols["log_mid"][span] = math.log((best_ask + best_bid) / 2)
        self.filled = index

    def record_trade(self, minute: int, log_price: float) -> None:
        if self.trade_minutes and self.trade_minutes[-1] == minute:
            self.trade_prices[-1] = log_price
        else:
            self.trade_minutes.append(minute)
            self.trade_prices.append(log_price)

    def derived(self) -> dict[str, np.ndarray]:
        cols = dict(self.columns)
        log_mid = cols.pop("log_mid")
        volatility = np.full(self.n, np.nan)
        volatility[1:] = np.abs(np.diff(log_mid))
        cols["volatility"] = volatility

        bid = {k: cols[f"{k}_bid"] for k in ("placements", "cancels", "market")}
        ask = {k: cols[f"{k}_ask"] for k in ("placements", "cancels", "market")}
        total = sum(bid.values()) + sum(ask.values())
        bid_total, ask_total = sum(bid.values()), sum(ask.values())
        with np.errstate(invalid="ignore", divide="ignore"):
            for kind, name in (("placements", "limit"), ("market", "market"), ("cancels", "cancel")):
                cols[f"rate_{name}"] = np.where(total > 0, (bid[kind] + ask[kind]) / total, np.nan)
                cols[f"rate_{name}_bid"] = np.where(bid_total > 0, bid[kind] / bid_total, np.nan)
                cols[f"rate_{name}_ask"] = np.where(ask_total > 0, ask[kind] / ask_total, np.nan)
        return cols


def _ticks(price: float, tick_size: float) -> int:
    ticks = price / tick_size
    rounded = round(ticks)
    if abs(ticks - rounded) > 1e-6:
        raise MalformedLog(f"price {price} is not a multiple of the tick size {tick_size}")
    return int(rounded)


def replay_order_log(frame: pd.DataFrame, config: ReplayConfig | None = None) -> ReplayResult:
    """Rebuild the book event by event and sample it once per session minute"""
    config = config or ReplayConfig()
    frame = frame.copy()
    try:
        timestamps = pd.to_datetime(frame["timestamp"])
    except (ValueError, TypeError) as exc:
        raise MalformedLog(f"unparseable timestamp: {exc}") from None
    frame["session_date"] = timestamps.dt.date
    frame["minute_of_day"] = timestamps.dt.hour * 60 + timestamps.dt.minute
    frame["arrival"] = timestamps
    frame = frame.sort_values("arrival", kind="mergesort")

    n_minutes = config.close_minute - config.open_minute + 1
    book = OrderBook()
    days: dict[date, _DayCounts] = {}

    for day, rows in frame.groupby("session_date", sort=True):
        counts = days[day] = _DayCounts(n_minutes)
        for row in rows.itertuples(index=False):
            index = row.minute_of_day - config.open_minute
            counts.snapshot_until(index, book)
            in_session = 0 <= index < n_minutes
            _apply(book, row, counts, index if in_session else None, config)
        counts.snapshot_until(n_minutes, book)
        logger.info("Replayed %s: %d rows, %d orders resting at the close", day, len(rows), len(book))

    prices = MinuteSeries(config.instrument, [
        TradingDay(
            day=day,
            open_minute=config.open_minute,
            close_minute=config.close_minute,
            minutes=np.array(c.trade_minutes, dtype=int),
            log_prices=np.array(c.trade_prices, dtype=float),
        )
        for day, c in days.items()
    ])
    per_day = {day: c.derived() for day, c in days.items()}
    observables = {
        name: MinuteObservable(name, config.instrument, [
            DailyValues(day, config.open_minute, cols[name]) for day, cols in per_day.items()
        ])
        for name in EMPIRICAL_OBSERVABLES
    }
    return ReplayResult(prices=prices, observables=observables)


def _side(value: str) -> Side:
    try:
        return Side(str(value).lower())
    except ValueError:
        raise MalformedLog(f"unknown side '{value}'") from None


def _apply(book: OrderBook, row, counts: _DayCounts, index: int | None, config: ReplayConfig) -> None:
    event = str(row.event_type).lower()
    try:
        if event == "limit":
            side = _side(row.side)
            volume = int(row.volume)
            book.insert_limit(side, _ticks(float(row.price), config.tick_size), volume, int(row.order_id))
            if index is not None:
                suffix = "bid" if side is Side.BUY else "ask"
                counts.columns[f"placements_{suffix}"][index] += 1
                counts.columns[f"placement_volume_{suffix}"][index] += volume
        elif event == "market":
            side = _side(row.side)
            fills = book.execute_market(side, int(row.volume))
            if index is not None:
                # a sell market order consumes bid-side liquidity
                counts.columns["market_bid" if side is Side.SELL else "market_ask"][index] += 1
                counts.record_trade(config.open_minute + index, math.log(fills[-1].price * config.tick_size))
        elif event == "cancel":
            order = book.cancel_by_id(int(row.order_id))
            if index is not None:
                counts.columns["cancels_bid" if order.side is Side.BUY else "cancels_ask"][index] += 1
        else:
            raise MalformedLog(f"unknown event type '{row.event_type}'")
    except (CrossingPrice, DuplicateId, InsufficientLiquidity, UnknownId, ValueError) as exc:
        raise MalformedLog(f"{row.timestamp}: {exc}") from exc


# -- output -------------------------------------------------------------------


def write_curve(path: Path, curve: RelaxationCurve) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rel_t", "mean_ratio", "n_events", "excess", "negative"])
        flagged = excess(curve).negative
        for t, value, count, negative in zip(curve.rel_t, curve.mean, curve.counts, flagged):
            writer.writerow([int(t), repr(float(value)), int(count), repr(float(value) - 1.0), int(negative)])


def read_curve(path: Path, label: str = "") -> RelaxationCurve:
    frame = pd.read_csv(path, float_precision="round_trip")
    missing = {"rel_t", "mean_ratio", "n_events"} - set(frame.columns)
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    return RelaxationCurve(
        label=label or Path(path).stem,
        rel_t=frame["rel_t"].to_numpy(dtype=int),
        mean=frame["mean_ratio"].to_numpy(dtype=float),
        counts=frame["n_events"].to_numpy(dtype=int),
    )


def write_fit_report(path: Path, fits: Iterable[PowerLawFit]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([
            "observable", "side", "beta", "stderr", "amplitude", "t_lo", "t_hi", "n_points", "n_excluded", "rms_residual",
        ])
        for fit in fits:
            writer.writerow([
                fit.label, fit.side, repr(fit.beta), repr(fit.stderr), repr(fit.amplitude),
                fit.t_lo, fit.t_hi, fit.n_points, fit.n_excluded, repr(fit.rms_residual),
            ])


def write_plot_data(path: Path, series: ExcessSeries, fit: PowerLawFit | None = None) -> None:
    """log10 t against log10 excess for the positive points, plus the fitted line"""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["log10_t", "log10_excess", "log10_fit"])
        for t, value in zip(series.rel_t, series.values):
            if t < 1 or not value > 0:
                continue
            fitted = repr(math.log10(fit.predict(float(t)))) if fit is not None else ""
            writer.writerow([repr(math.log10(t)), repr(math.log10(value)), fitted])


def write_peaks(path: Path, curves: Iterable[RelaxationCurve]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["observable", "peak_rel_t", "peak_ratio"])
        for curve in curves:
            rel_t, value = peak(curve)
            writer.writerow([curve.label, rel_t, repr(value)])
