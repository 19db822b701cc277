r"""
Large intraday price changes in minute-resolution price series.

An event is a window [t1, t2] of at most 120 minutes in which the log-price
moved by at least 2% (absolute filter) and by at least 6 times the normal
volatility summed over the minutes of the window (relative filter). Normal
volatility at a minute of the day is the mean absolute one-minute log return
at that minute over the 60 preceding trading days.

The event is placed at the earliest window end t2 that passes both filters,
using the shortest such window; t2 is minute 0 of the event. The first 5 and
the last 60 minutes of the session are left out.

align_windows() cuts the -60 ... +120 minute neighbourhood of every event out
of any per-minute observable and divides it by that observable's own 60-day
mean for the same minute of the day.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import DataError

logger = logging.getLogger(__name__)

CATALOG_COLUMNS = ["instrument", "date", "t0_minute", "direction", "window_len", "magnitude"]


class InsufficientHistory(DataError):
    """Fewer than the required number of prior trading days"""


class MalformedInput(DataError):
    """Input file does not match its declared format"""


class DetectorConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    abs_thresh: float = Field(0.02, gt=0)
    rel_mult: float = Field(6.0, ge=0)
    max_window: int = Field(120, ge=1)
    skip_open: int = Field(5, ge=0)
    skip_close: int = Field(60, ge=0)
    suppress_span: int = Field(120, ge=0)
    lookback_days: int = Field(60, ge=1)
    max_lookback_calendar_days: int = Field(120, ge=1)
    open_minute: int = Field(480, ge=0)
    close_minute: int = Field(990, le=24 * 60)

    @model_validator(mode="after")
    def _check_session(self) -> "DetectorConfig":
        if self.close_minute <= self.open_minute:
            raise ValueError("close_minute must be after open_minute")
        return self


class DetectedEvent(BaseModel):
    instrument: str
    day: date
    t0: int
    direction: Literal["up", "down"]
    window_length: int = Field(ge=1)
    magnitude: float


@dataclass
class DailyValues:
    """One trading day of a per-minute quantity on the grid open ... close; NaN = absent"""

    day: date
    open_minute: int
    values: np.ndarray

    @property
    def close_minute(self) -> int:
        return self.open_minute + len(self.values) - 1

    @property
    def has_data(self) -> bool:
        return bool(np.any(~np.isnan(self.values)))

    def at(self, minute: int) -> float:
        index = minute - self.open_minute
        if 0 <= index < len(self.values):
            return float(self.values[index])
        return float("nan")


@dataclass
class MinuteObservable:
    name: str
    instrument: str
    days: list[DailyValues]

    def __post_init__(self):
        self.days.sort(key=lambda d: d.day)
        self._index = {d.day: i for i, d in enumerate(self.days)}

    def index_of(self, day: date) -> int:
        try:
            return self._index[day]
        except KeyError:
            raise InsufficientHistory(f"{self.name}: no data for {day}") from None


@dataclass
class TradingDay:
    day: date
    open_minute: int
    close_minute: int
    minutes: np.ndarray
    log_prices: np.ndarray

    def __post_init__(self):
        self.minutes = np.asarray(self.minutes, dtype=int)
        self.log_prices = np.asarray(self.log_prices, dtype=float)
        if self.minutes.shape != self.log_prices.shape:
            raise MalformedInput(f"{self.day}: minutes and prices differ in length")
        if np.any(np.diff(self.minutes) <= 0):
            raise MalformedInput(f"{self.day}: minutes are not strictly increasing")
        if not np.all(np.isfinite(self.log_prices)):
            raise MalformedInput(f"{self.day}: non-finite log-price")

    @property
    def has_data(self) -> bool:
        return self.minutes.size > 0

    def price_grid(self) -> np.ndarray | None:
        """Log-price at every session minute, last trade carried forward"""
        if not self.has_data:
            return None
        grid = np.arange(self.open_minute, self.close_minute + 1)
        position = np.searchsorted(self.minutes, grid, side="right") - 1
        # minutes before the first trade take the first trade's price
        return self.log_prices[np.clip(position, 0, None)]

    def abs_returns(self) -> np.ndarray | None:
        """|one-minute log return| on the session grid; zero at the open"""
        grid = self.price_grid()
        if grid is None:
            return None
        returns = np.zeros_like(grid)
        returns[1:] = np.abs(np.diff(grid))
        return returns


@dataclass
class MinuteSeries:
    instrument: str
    days: list[TradingDay]

    def __post_init__(self):
        self.days.sort(key=lambda d: d.day)

    def index_of(self, day: date) -> int:
        for i, trading_day in enumerate(self.days):
            if trading_day.day == day:
                return i
        raise InsufficientHistory(f"{self.instrument}: no trading day {day}")

    def volatility(self) -> MinuteObservable:
        """Absolute one-minute log returns as a per-minute observable"""
        days = []
        for d in self.days:
            returns = d.abs_returns()
            if returns is None:
                returns = np.full(d.close_minute - d.open_minute + 1, np.nan)
            days.append(DailyValues(d.day, d.open_minute, returns))
        return MinuteObservable("volatility", self.instrument, days)


@dataclass
class VolatilityProfile:
    day: date
    open_minute: int
    values: np.ndarray
    counts: np.ndarray

    def at(self, minute: int) -> float:
        return float(self.values[minute - self.open_minute])


def _history_indices(
    days: Sequence[date], has_data: Sequence[bool], index: int, lookback: int, max_calendar_days: int,
) -> list[int]:
    target = days[index]
    chosen: list[int] = []
    for j in range(index - 1, -1, -1):
        if (target - days[j]).days > max_calendar_days:
            break
        if has_data[j]:
            chosen.append(j)
            if len(chosen) == lookback:
                return chosen
    raise InsufficientHistory(
        f"{target}: only {len(chosen)} of {lookback} prior trading days within {max_calendar_days} calendar days"
    )


def _trailing_mean(history: Iterable[DailyValues], open_minute: int, n_minutes: int) -> tuple[np.ndarray, np.ndarray]:
    """Mean per minute of day over the history, on the grid starting at open_minute"""
    total = np.zeros(n_minutes)
    count = np.zeros(n_minutes, dtype=int)
    for past in history:
        start = past.open_minute - open_minute
        lo, hi = max(start, 0), min(start + len(past.values), n_minutes)
        if lo >= hi:
            continue
        chunk = past.values[lo - start:hi - start]
        present = ~np.isnan(chunk)
        total[lo:hi][present] += chunk[present]
        count[lo:hi] += present
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return mean, count


def build_profile(series: MinuteSeries, day: date, config: DetectorConfig | None = None) -> VolatilityProfile:
    """Normal volatility for each minute of `day` from the preceding trading days"""
    config = config or DetectorConfig()
    index = series.index_of(day)
    volatility = series.volatility()
    chosen = _history_indices(
        [d.day for d in series.days], [d.has_data for d in series.days],
        index, config.lookback_days, config.max_lookback_calendar_days,
    )
    target = series.days[index]
    n_minutes = target.close_minute - target.open_minute + 1
    values, counts = _trailing_mean((volatility.days[j] for j in chosen), target.open_minute, n_minutes)
    return VolatilityProfile(day=day, open_minute=target.open_minute, values=values, counts=counts)


def _scan_day(instrument: str, day: TradingDay, profile: VolatilityProfile, config: DetectorConfig) -> list[DetectedEvent]:
    log_prices = day.price_grid()
    if log_prices is None:
        return []
    lo = config.skip_open
    hi = (day.close_minute - config.skip_close) - day.open_minute
    normal = np.concatenate(([0.0], np.cumsum(np.nan_to_num(profile.values))))

    found: list[DetectedEvent] = []
    blocked_until = -1
    for i2 in range(lo + 1, hi + 1):
        if i2 <= blocked_until:
            continue
        # candidate starts, shortest window first
        i1 = np.arange(i2 - 1, max(lo, i2 - config.max_window) - 1, -1)
        delta = log_prices[i2] - log_prices[i1]
        move = np.abs(delta)
        window_normal = normal[i2 + 1] - normal[i1 + 1]
        passing = (move >= config.abs_thresh) & (move >= config.rel_mult * window_normal)
        if not passing.any():
            continue
        k = int(np.argmax(passing))
        magnitude = float(delta[k])
        found.append(DetectedEvent(
            instrument=instrument,
            day=day.day,
            t0=day.open_minute + i2,
            direction="up" if magnitude > 0 else "down",
            window_length=int(i2 - i1[k]),
            magnitude=magnitude,
        ))
        blocked_until = i2 + config.suppress_span
    return found


def detect_events(
    series: MinuteSeries, config: DetectorConfig | None = None, days: Iterable[date] | None = None,
) -> list[DetectedEvent]:
    """Localized large price changes; without `days`, every day with enough history is scanned"""
    config = config or DetectorConfig()
    if days is None:
        candidates, explicit = range(len(series.days)), False
    else:
        candidates, explicit = [series.index_of(d) for d in days], True

    events: list[DetectedEvent] = []
    for index in candidates:
        trading_day = series.days[index]
        try:
            profile = build_profile(series, trading_day.day, config)
        except InsufficientHistory:
            if explicit:
                raise
            logger.debug("%s %s: not enough history, skipped", series.instrument, trading_day.day)
            continue
        day_events = _scan_day(series.instrument, trading_day, profile, config)
        for event in day_events:
            logger.info(
                "%s %s: %s event at minute %d (%.4f over %d min)",
                event.instrument, event.day, event.direction, event.t0, event.magnitude, event.window_length,
            )
        events.extend(day_events)
    return events


@dataclass
class AlignedMatrix:
    """Event-aligned raw values and their baselines, one row per event"""

    label: str
    rel_t: np.ndarray
    raw: np.ndarray
    baseline: np.ndarray
    directions: list[str]

    @property
    def n_events(self) -> int:
        return self.raw.shape[0]

    @property
    def ratios(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios = self.raw / self.baseline
        ratios[~(self.baseline > 0) | np.isnan(self.raw)] = np.nan
        return ratios

    def select(self, rows: Sequence[int] | np.ndarray) -> "AlignedMatrix":
        rows = np.asarray(rows, dtype=int)
        return AlignedMatrix(
            self.label, self.rel_t, self.raw[rows], self.baseline[rows], [self.directions[i] for i in rows],
        )

    def with_direction(self, direction: str | None) -> "AlignedMatrix":
        if direction in (None, "all"):
            return self
        return self.select([i for i, d in enumerate(self.directions) if d == direction])


def align_windows(
    events: Sequence[DetectedEvent],
    observable: MinuteObservable,
    pre: int = 60,
    post: int = 120,
    config: DetectorConfig | None = None,
) -> AlignedMatrix:
    """Observable around each event divided by its trailing mean for the same minute of day"""
    config = config or DetectorConfig()
    rel_t = np.arange(-pre, post + 1)
    raw = np.full((len(events), rel_t.size), np.nan)
    baseline = np.full((len(events), rel_t.size), np.nan)
    dates = [d.day for d in observable.days]
    has_data = [d.has_data for d in observable.days]

    for row, event in enumerate(events):
        index = observable.index_of(event.day)
        chosen = _history_indices(dates, has_data, index, config.lookback_days, config.max_lookback_calendar_days)
        today = observable.days[index]
        mean, _ = _trailing_mean(
            (observable.days[j] for j in chosen), today.open_minute, len(today.values),
        )
        for col, offset in enumerate(rel_t):
            minute_index = event.t0 + offset - today.open_minute
            if 0 <= minute_index < len(today.values):
                raw[row, col] = today.values[minute_index]
                baseline[row, col] = mean[minute_index]

    return AlignedMatrix(observable.name, rel_t, raw, baseline, [e.direction for e in events])


def load_minute_bars(path: Path, config: DetectorConfig | None = None) -> dict[str, MinuteSeries]:
    """Read `instrument, date, minute, price` rows into one MinuteSeries per instrument"""
    config = config or DetectorConfig()
    try:
        frame = pd.read_csv(path, dtype={"instrument": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return {}
    missing = {"instrument", "date", "minute", "price"} - set(frame.columns)
    if missing:
        raise MalformedInput(f"{path}: missing columns {sorted(missing)}")
    if frame.empty:
        return {}
    if (frame["price"] <= 0).any():
        raise MalformedInput(f"{path}: prices must be positive")

    frame["date"] = pd.to_datetime(frame["date"]).dt.date
    frame = frame.sort_values(["instrument", "date", "minute"], kind="mergesort")
    series: dict[str, MinuteSeries] = {}
    for instrument, rows in frame.groupby("instrument", sort=True):
        days = []
        for day, day_rows in rows.groupby("date", sort=True):
            in_session = day_rows[day_rows["minute"].between(config.open_minute, config.close_minute)]
            # keep the last print of each minute
            in_session = in_session.drop_duplicates("minute", keep="last")
            days.append(TradingDay(
                day=day,
                open_minute=config.open_minute,
                close_minute=config.close_minute,
                minutes=in_session["minute"].to_numpy(dtype=int),
                log_prices=np.log(in_session["price"].to_numpy(dtype=float)),
            ))
        series[str(instrument)] = MinuteSeries(str(instrument), days)
    return series


def write_catalog(path: Path, events: Iterable[DetectedEvent]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CATALOG_COLUMNS)
        for e in events:
            writer.writerow([e.instrument, e.day.isoformat(), e.t0, e.direction, e.window_length, repr(e.magnitude)])


def read_catalog(path: Path) -> list[DetectedEvent]:
    try:
        frame = pd.read_csv(path, dtype={"instrument": str}, float_precision="round_trip")
    except pd.errors.EmptyDataError:
        return []
    missing = set(CATALOG_COLUMNS) - set(frame.columns)
    if missing:
        raise MalformedInput(f"{path}: missing columns {sorted(missing)}")
    return [
        DetectedEvent(
            instrument=row.instrument,
            day=pd.Timestamp(row.date).date(),
            t0=int(row.t0_minute),
            direction=row.direction,
            window_length=int(row.window_len),
            magnitude=float(row.magnitude),
        )
        for row in frame.itertuples(index=False)
    ]
