r"""
Mean-field recursions for the relaxation of the spread after a shock.

Limit case, no market orders (p_mo = 0, p_lo = p_c = 0.5):

    S_{t+1} = S_t (1 - 1/(8D)) - S_t^2 / (16D)

which decays like 16D / t while the quadratic term dominates.

General case: the expected spread and the expected first gap g evolve
together,

    S_{t+1} = S_t - p_lo (S_t^2/(8D) + S_t/(4D)) + p_mo g_t
    g_{t+1} = p_c g_t
              + p_lo [ (D - S_t/2 - g_t)/D g_t + k(g_t)/D + k(S_t/2)/D ]
              + p_mo r g_t

with k(n) = n(n+1)/2 evaluated at real n. The second gap that a market order
exposes is closed as r times the first gap, with r the stationary ratio of
the two gaps.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import AliasChoices, BaseModel, ConfigDict, Field, model_validator

from errors import DataError, NumericalError
from relax import RelaxationCurve
from ziflow import StationaryBaseline

logger = logging.getLogger(__name__)

HALF_TOLERANCE = 1e-12


class NonPhysical(NumericalError):
    """A recursion produced a negative or non-finite spread or gap"""


class ZeroMarketRate(NumericalError):
    """The stationary gap is undefined without market orders"""


class RequiresHalfLO(NumericalError):
    """The simplified gap closure assumes p_lo = 0.5"""


class GridMismatch(DataError):
    """Model and simulation curves do not share the requested time points"""


class MeanFieldParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    deposit_width: float = Field(1000.0, gt=0, validation_alias=AliasChoices("deposit_width", "D"))
    p_lo: float = Field(0.5, ge=0, le=1)
    p_mo: float = Field(0.16, ge=0, le=1)
    p_c: float = Field(0.34, ge=0, le=1)
    sigma: float = Field(40.0, gt=0)
    s0: float = Field(1040.0, gt=0)
    steps: int = Field(1000, ge=1)
    gap0: float | None = Field(None, ge=0)
    closure: Literal["half", "general"] = "half"

    @model_validator(mode="after")
    def _check_consistency(self) -> "MeanFieldParams":
        if abs(self.p_lo + self.p_mo + self.p_c - 1.0) > 1e-12:
            raise ValueError(f"p_lo + p_mo + p_c must be 1, got {self.p_lo + self.p_mo + self.p_c}")
        if self.closure == "half" and self.p_mo > 0 and abs(self.p_lo - 0.5) > HALF_TOLERANCE:
            raise ValueError(f"closure 'half' needs p_lo = 0.5, got {self.p_lo}; use closure 'general'")
        if self.s0 < self.sigma:
            raise ValueError(f"s0 ({self.s0}) must be at least sigma ({self.sigma})")
        return self


@dataclass
class MeanFieldTrajectory:
    """Expected spread (and first gap) at t = 0 ... steps"""

    spread: np.ndarray
    gap1: np.ndarray | None = None

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.spread.size)

    def to_curve(self, sigma: float, label: str = "spread") -> RelaxationCurve:
        """Spread relative to its stationary value, on the same footing as a simulated curve"""
        return RelaxationCurve(label, self.t, self.spread / sigma, np.ones(self.spread.size, dtype=int))


def k_sum(n: float) -> float:
    """1 + 2 + ... + n, continued to real n"""
    return n * (n + 1) / 2


def spread_drift(spread: float, gap1: float, p_lo: float, p_mo: float, width: float) -> float:
    """Expected one-step change of the spread"""
    return -p_lo * (spread * spread / (8 * width) + spread / (4 * width)) + p_mo * gap1


def _check(t: int, spread: float, gap1: float | None = None) -> None:
    if not math.isfinite(spread) or spread < 0:
        raise NonPhysical(f"spread {spread} at step {t}")
    if gap1 is not None and (not math.isfinite(gap1) or gap1 < 0):
        raise NonPhysical(f"first gap {gap1} at step {t}")


def limit_recursion(width: float, s0: float, steps: int) -> MeanFieldTrajectory:
    """Spread relaxation with limit orders and cancelations only"""
    if width <= 0 or s0 <= 0:
        raise ValueError("width and s0 must be positive")
    spread = np.empty(steps + 1)
    spread[0] = s = s0
    for t in range(1, steps + 1):
        s = s + spread_drift(s, 0.0, 0.5, 0.0, width)
        _check(t, s)
        spread[t] = s
    return MeanFieldTrajectory(spread)


def stationary_gap(sigma: float, p_lo: float, p_mo: float, width: float) -> float:
    """First gap that balances spread closing by limit orders against opening by market orders"""
    if p_mo <= 0:
        raise ZeroMarketRate("stationary gap needs p_mo > 0")
    return (p_lo / p_mo) * (sigma * sigma / (8 * width) + sigma / (4 * width))


def gap_ratio_general(sigma: float, gamma1: float, p_lo: float, p_mo: float, width: float) -> float:
    if p_mo <= 0:
        raise ZeroMarketRate("gap ratio needs p_mo > 0")
    return 1 + (p_lo / p_mo) * (sigma + gamma1 - 1) / (2 * width) - 2 * p_lo


def gap_ratio(
    sigma: float, gamma1: float, p_lo: float, p_mo: float, width: float, allow_general: bool = False,
) -> float:
    """Stationary second-to-first gap ratio, simplified for p_lo = 0.5"""
    if abs(p_lo - 0.5) > HALF_TOLERANCE:
        if allow_general:
            return gap_ratio_general(sigma, gamma1, p_lo, p_mo, width)
        raise RequiresHalfLO(f"p_lo = {p_lo}")
    if p_mo <= 0:
        raise ZeroMarketRate("gap ratio needs p_mo > 0")
    return (p_lo / p_mo) * (sigma + gamma1 - 1) / (2 * width)


def general_recursion(params: MeanFieldParams) -> MeanFieldTrajectory:
    """Coupled spread and first-gap recursion with the second gap closed on the first"""
    width, p_lo, p_mo, p_c = params.deposit_width, params.p_lo, params.p_mo, params.p_c

    if p_mo > 0:
        gamma1 = stationary_gap(params.sigma, p_lo, p_mo, width)
        if params.closure == "half":
            ratio = gap_ratio(params.sigma, gamma1, p_lo, p_mo, width)
        else:
            ratio = gap_ratio_general(params.sigma, gamma1, p_lo, p_mo, width)
        g = gamma1 if params.gap0 is None else params.gap0
    else:
        ratio = 0.0
        g = 1.0 if params.gap0 is None else params.gap0
    logger.debug("closure ratio %.6g, initial gap %.6g", ratio, g)

    spread = np.empty(params.steps + 1)
    gap1 = np.empty(params.steps + 1)
    s = params.s0
    spread[0], gap1[0] = s, g
    for t in range(1, params.steps + 1):
        half = s / 2
        s_next = s + spread_drift(s, g, p_lo, p_mo, width)
        g_next = (
            p_c * g
            + p_lo * ((width - half - g) / width * g + k_sum(g) / width + k_sum(half) / width)
            + p_mo * ratio * g
        )
        _check(t, s_next, g_next)
        s, g = s_next, g_next
        spread[t], gap1[t] = s, g
    return MeanFieldTrajectory(spread, gap1)


def stationarity_residual(
    sigma: float, gamma1: float, p_lo: float, p_mo: float, width: float, spread_sq: float | None = None,
) -> float:
    """Relative imbalance between spread closing and opening at a measured (sigma, gamma1)

    The closing term averages S^2 over the stationary state; pass the measured E[S^2]
    as `spread_sq`. Without it the spread is treated as constant (E[S^2] = sigma^2).
    """
    if spread_sq is None:
        spread_sq = sigma * sigma
    closing = p_lo * (spread_sq / (8 * width) + sigma / (4 * width))
    opening = p_mo * gamma1
    return abs(closing - opening) / closing


def measure_sigma_gamma(baseline: StationaryBaseline) -> tuple[float, float]:
    """Stationary spread and mean first gap measured on a simulation"""
    sigma, gamma1 = baseline.spread, baseline.gap1
    if not (sigma > 0 and gamma1 >= 0):
        raise DataError(f"baseline has no usable spread/gap (sigma={sigma}, gamma1={gamma1})")
    return sigma, gamma1


def local_exponent(trajectory: MeanFieldTrajectory, t_lo: int, t_hi: int) -> float:
    """Secant slope -d log S / d log t between two steps"""
    if not 1 <= t_lo < t_hi < trajectory.spread.size:
        raise ValueError(f"need 1 <= t_lo < t_hi <= {trajectory.spread.size - 1}")
    s_lo, s_hi = trajectory.spread[t_lo], trajectory.spread[t_hi]
    if not (s_lo > 0 and s_hi > 0):
        raise NonPhysical("spread is not positive inside the window")
    return -(math.log(s_hi) - math.log(s_lo)) / (math.log(t_hi) - math.log(t_lo))


class ComparisonReport(BaseModel):
    horizon: int
    rel_t: list[int]
    model_excess: list[float]
    sim_excess: list[float]
    relative_error: list[float]

    @property
    def max_error(self) -> float:
        return max(self.relative_error)

    def error_at(self, t: int) -> float:
        return self.relative_error[self.rel_t.index(t)]


def compare(model: RelaxationCurve, simulated: RelaxationCurve, horizon: int) -> ComparisonReport:
    """Relative error of the model excess against the simulated excess at t = 1 ... horizon"""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    model_at = dict(zip(model.rel_t.tolist(), model.mean.tolist()))
    sim_at = dict(zip(simulated.rel_t.tolist(), simulated.mean.tolist()))
    grid = list(range(1, horizon + 1))
    missing = [t for t in grid if t not in model_at or t not in sim_at]
    if missing:
        raise GridMismatch(f"{len(missing)} of {horizon} steps missing, first at t={missing[0]}")

    model_excess = [model_at[t] - 1.0 for t in grid]
    sim_excess = [sim_at[t] - 1.0 for t in grid]
    errors = []
    for m, s in zip(model_excess, sim_excess):
        if s == 0:
            errors.append(0.0 if m == 0 else math.inf)
        else:
            errors.append(abs(m - s) / abs(s))
    return ComparisonReport(
        horizon=horizon, rel_t=grid, model_excess=model_excess, sim_excess=sim_excess, relative_error=errors,
    )


def write_trajectory(path: Path, trajectory: MeanFieldTrajectory) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "spread", "gap1"])
        for t, s in enumerate(trajectory.spread):
            gap = repr(float(trajectory.gap1[t])) if trajectory.gap1 is not None else ""
            writer.writerow([t, repr(float(s)), gap])


def write_comparison(path: Path, report: ComparisonReport) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["rel_t", "model_excess", "sim_excess", "relative_error"])
        for row in zip(report.rel_t, report.model_excess, report.sim_excess, report.relative_error):
            writer.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
