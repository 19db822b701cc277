r"""
Command line for the relaxation toolkit.

    python cli.py simulate  --config run.ini --out results/sim
    python cli.py detect    --minute-bars bars.csv --out results/events
    python cli.py relax     --trajectories results/sim/trajectories.csv --baseline results/sim/baseline.csv
    python cli.py relax     --order-log orders.csv --catalog results/events/events.csv --observable cancels_bid
    python cli.py meanfield --config run.ini --sim-curve results/relax/curve_spread.csv

Every command writes manifest.json into its output directory before any other
file: the effective configuration, the seed, the tool version and a sha256
digest of every input. Running a command again with the same manifest gives
byte-identical outputs.

Configuration file sections: [flow] [detect] [fit] [meanfield] [replay].
Environment (optional, read from .env): LOB_RELAX_OUT, LOB_RELAX_LOG_LEVEL.
Precedence: command-line flag > environment > default.

Exit codes: 0 ok, 2 configuration or usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import asyncio
import configparser
import csv
import hashlib
import logging
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

import meanfield
import relax
from errors import ConfigError, DataError, LobRelaxError, NumericalError
from events import DetectedEvent, DetectorConfig, align_windows, detect_events, load_minute_bars, read_catalog
from events import write_catalog
from meanfield import MeanFieldParams
from relax import FitConfig, ReplayConfig
from ziflow import ExperimentResult, FlowConfig, merge_results, read_baseline, read_trajectories, run_experiment
from ziflow import write_baseline, write_trajectories

load_dotenv()

logger = logging.getLogger(__name__)

VERSION = "0.1.0"
SECTIONS: dict[str, type[BaseModel]] = {
    "flow": FlowConfig,
    "detect": DetectorConfig,
    "fit": FitConfig,
    "meanfield": MeanFieldParams,
    "replay": ReplayConfig,
}


class RunManifest(BaseModel):
    command: str
    tool_version: str = VERSION
    seed: int | None = None
    config: dict[str, dict[str, Any]]
    inputs: dict[str, str] = {}
    outputs: list[str] = []


def read_config(path: Path | None) -> dict[str, dict[str, str]]:
    """Raw key-value pairs per section; unknown sections are rejected"""
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    unknown = set(parser.sections()) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    return {section: dict(parser[section]) for section in parser.sections()}


def section(raw: dict[str, dict[str, str]], name: str, **overrides: Any) -> Any:
    values = dict(raw.get(name, {}))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return SECTIONS[name].model_validate(values)


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def output_dir(args: argparse.Namespace) -> Path:
    out = Path(args.out or os.getenv("LOB_RELAX_OUT", "results"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_manifest(out: Path, manifest: RunManifest) -> None:
    path = out / "manifest.json"
    path.write_text(manifest.model_dump_json(indent=2) + "\n")
    print(f"Saved to {path}")


def manifest_for(
    args: argparse.Namespace, config: dict[str, BaseModel], outputs: list[str], seed: int | None = None,
) -> RunManifest:
    inputs = {}
    for name in ("config", "trajectories", "baseline", "order_log", "catalog", "minute_bars", "sim_curve"):
        path = getattr(args, name, None)
        if path is not None:
            inputs[str(path)] = file_digest(Path(path))
    return RunManifest(
        command=args.command,
        seed=seed,
        config={name: model.model_dump(mode="json") for name, model in config.items()},
        inputs=inputs,
        outputs=outputs,
    )


def parse_window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(part) for part in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got '{text}'") from None
    return lo, hi


def parse_names(text: str) -> list[str]:
    return [name.strip() for name in text.split(",") if name.strip()]


def write_rows(path: Path, header: list[str], rows: list[list[Any]]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)
    print(f"Saved to {path}")


# -- simulate -----------------------------------------------------------------


async def run_ensemble(configs: list[FlowConfig]) -> list[ExperimentResult]:
    return await asyncio.gather(*[
        asyncio.to_thread(run_experiment, config, run_id) for run_id, config in enumerate(configs)
    ])


def cmd_simulate(args: argparse.Namespace) -> None:
    raw = read_config(args.config)
    flow = section(raw, "flow", seed=args.seed)
    if args.runs < 1:
        raise ConfigError("--runs must be at least 1")

    out = output_dir(args)
    outputs = ["trajectories.csv", "baseline.csv", "stationarity.csv"]
    write_manifest(out, manifest_for(args, {"flow": flow}, outputs, seed=flow.seed))

    if args.runs == 1:
        result = run_experiment(flow)
    else:
        children = np.random.SeedSequence(flow.seed).spawn(args.runs)
        configs = [flow.model_copy(update={"seed": int(c.generate_state(1)[0])}) for c in children]
        print(f"Running {args.runs} seeded runs...")
        result = merge_results(asyncio.run(run_ensemble(configs)))

    write_trajectories(out / "trajectories.csv", result.windows)
    print(f"Saved {len(result.windows)} shock windows to {out / 'trajectories.csv'}")
    write_baseline(out / "baseline.csv", result.baseline)
    print(f"Saved to {out / 'baseline.csv'}")

    first, second = result.baseline.order_count_halves
    rows = [["orders_first_half", repr(first)], ["orders_second_half", repr(second)],
            ["sigma", repr(result.baseline.spread)], ["gamma1", repr(result.baseline.gap1)]]
    if flow.p_mo > 0 and result.baseline.steps:
        residual = meanfield.stationarity_residual(
            result.baseline.spread, result.baseline.gap1, flow.p_lo, flow.p_mo, flow.deposit_width,
            spread_sq=result.baseline.spread_sq,
        )
        rows.append(["stationarity_residual", repr(residual)])
    write_rows(out / "stationarity.csv", ["metric", "value"], rows)


# -- detect -------------------------------------------------------------------


def _detect_all(args: argparse.Namespace, detect: DetectorConfig, replay: ReplayConfig) -> list[DetectedEvent]:
    if args.minute_bars is not None:
        series = load_minute_bars(args.minute_bars, detect).values()
    elif args.order_log is not None:
        series = [relax.replay_order_log(relax.load_order_log(args.order_log), replay).prices]
    else:
        raise ConfigError("detect needs --minute-bars or --order-log")
    events: list[DetectedEvent] = []
    for s in series:
        events.extend(detect_events(s, detect))
    return events


def cmd_detect(args: argparse.Namespace) -> None:
    raw = read_config(args.config)
    detect = section(raw, "detect")
    replay = section(raw, "replay")
    out = output_dir(args)
    write_manifest(out, manifest_for(args, {"detect": detect, "replay": replay}, ["events.csv"]))

    events = _detect_all(args, detect, replay)
    write_catalog(out / "events.csv", events)
    print(f"Saved {len(events)} events to {out / 'events.csv'}")


# -- relax --------------------------------------------------------------------


def _fit_config(raw: dict[str, dict[str, str]], args: argparse.Namespace) -> FitConfig:
    overrides: dict[str, Any] = {}
    if args.fit_window is not None:
        overrides["t_lo"], overrides["t_hi"] = args.fit_window
    if args.raw_grid:
        overrides["resample"] = "raw"
    if args.ratio_of_means:
        overrides["aggregation"] = "ratio_of_means"
    if args.bootstrap is not None:
        overrides["bootstrap"] = args.bootstrap
    return section(raw, "fit", **overrides)


def _matrices(args: argparse.Namespace, config: dict[str, BaseModel]):
    if args.trajectories is not None:
        if args.baseline is None:
            raise ConfigError("--trajectories needs --baseline")
        names = parse_names(args.observable or "spread,volatility")
        unknown = set(names) - set(relax.MODEL_OBSERVABLES)
        if unknown:
            raise ConfigError(f"unknown model observables {sorted(unknown)}; choose from {relax.MODEL_OBSERVABLES}")
        windows = read_trajectories(args.trajectories)
        if args.skip_emptied:
            kept = [w for w in windows if not w.side_emptied]
            logger.info("%d of %d windows left after dropping emptied sides", len(kept), len(windows))
            windows = kept
        baseline = read_baseline(args.baseline)
        for name in names:
            yield relax.align_shock_windows(windows, baseline, name)
        return

    if args.order_log is None:
        raise ConfigError("relax needs --trajectories or --order-log")
    names = parse_names(args.observable or "volatility,log_spread")
    unknown = set(names) - set(relax.EMPIRICAL_OBSERVABLES)
    if unknown:
        raise ConfigError(f"unknown observables {sorted(unknown)}; choose from {relax.EMPIRICAL_OBSERVABLES}")
    detect, replay = config["detect"], config["replay"]
    replayed = relax.replay_order_log(relax.load_order_log(args.order_log), replay)
    if args.catalog is not None:
        events = [e for e in read_catalog(args.catalog) if e.instrument == replay.instrument]
    else:
        events = detect_events(replayed.prices, detect)
    logger.info("%d events to align", len(events))
    for name in names:
        yield align_windows(events, replayed.observables[name], config=detect)


def cmd_relax(args: argparse.Namespace) -> None:
    raw = read_config(args.config)
    fit = _fit_config(raw, args)
    config: dict[str, BaseModel] = {"fit": fit, "detect": section(raw, "detect"), "replay": section(raw, "replay")}
    out = output_dir(args)
    write_manifest(out, manifest_for(args, config, ["curve_*.csv", "plot_*.csv", "fits.csv", "peaks.csv"]))

    curves, fits = [], []
    failures: list[NumericalError] = []
    for matrix in _matrices(args, config):
        curve = relax.aggregate(matrix, fit.aggregation, args.direction)
        curves.append(curve)
        relax.write_curve(out / f"curve_{matrix.label}.csv", curve)
        print(f"Saved to {out / f'curve_{matrix.label}.csv'}")
        try:
            result = relax.bootstrap_exponent(matrix, fit, args.direction)
        except NumericalError as exc:
            logger.warning("%s: no fit (%s)", matrix.label, exc)
            failures.append(exc)
            relax.write_plot_data(out / f"plot_{matrix.label}.csv", relax.excess(curve))
            continue
        fits.append(result)
        relax.write_plot_data(out / f"plot_{matrix.label}.csv", relax.excess(curve), result)
        print(f"   {matrix.label}: beta = {result.beta:.3f} +/- {result.stderr:.3f} ({result.n_points} points)")

    relax.write_fit_report(out / "fits.csv", fits)
    print(f"Saved to {out / 'fits.csv'}")
    relax.write_peaks(out / "peaks.csv", curves)
    print(f"Saved to {out / 'peaks.csv'}")
    if failures and not fits:
        raise failures[0]


# -- meanfield ----------------------------------------------------------------


def cmd_meanfield(args: argparse.Namespace) -> None:
    raw = read_config(args.config)
    params = section(raw, "meanfield")
    if args.baseline is not None:
        flow = section(raw, "flow")
        baseline = read_baseline(args.baseline)
        sigma, gamma1 = meanfield.measure_sigma_gamma(baseline)
        params = MeanFieldParams.model_validate({
            **params.model_dump(), "sigma": sigma, "s0": sigma + flow.shock_depth,
        })
        if params.p_mo > 0:
            residual = meanfield.stationarity_residual(
                sigma, gamma1, params.p_lo, params.p_mo, params.deposit_width, spread_sq=baseline.spread_sq,
            )
            print(f"Measured sigma = {sigma:.4f}, gamma1 = {gamma1:.4f}, stationarity residual = {residual:.4f}")

    out = output_dir(args)
    outputs = ["meanfield.csv", "meanfield_summary.csv"] + (["comparison.csv"] if args.sim_curve else [])
    write_manifest(out, manifest_for(args, {"meanfield": params}, outputs))

    if params.p_mo == 0:
        trajectory = meanfield.limit_recursion(params.deposit_width, params.s0, params.steps)
    else:
        trajectory = meanfield.general_recursion(params)
    meanfield.write_trajectory(out / "meanfield.csv", trajectory)
    print(f"Saved to {out / 'meanfield.csv'}")

    rows: list[list[Any]] = [["sigma", repr(params.sigma)], ["s0", repr(params.s0)]]
    lo, hi = args.exponent_window
    if hi <= params.steps:
        exponent = meanfield.local_exponent(trajectory, int(lo), int(hi))
        rows.append(["local_exponent", repr(exponent)])
        print(f"   local exponent over [{int(lo)}, {int(hi)}]: {exponent:.4f}")
    else:
        logger.warning("exponent window ends at %d, after the last step %d", int(hi), params.steps)
    if params.p_mo > 0:
        gamma1 = meanfield.stationary_gap(params.sigma, params.p_lo, params.p_mo, params.deposit_width)
        rows.append(["gamma1", repr(gamma1)])

    if args.sim_curve is not None:
        simulated = relax.read_curve(args.sim_curve)
        report = meanfield.compare(trajectory.to_curve(params.sigma), simulated, args.horizon)
        meanfield.write_comparison(out / "comparison.csv", report)
        print(f"Saved to {out / 'comparison.csv'}")
        rows.append(["max_relative_error", repr(report.max_error)])
    write_rows(out / "meanfield_summary.csv", ["metric", "value"], rows)


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lob-relax", description="Order-book relaxation after large price changes")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="INI file with [flow] [detect] [fit] [meanfield] [replay]")
        p.add_argument("--out", type=Path, help="Output directory (CLI > env:LOB_RELAX_OUT > results)")
        p.add_argument("--format", choices=["csv"], default="csv")

    p = sub.add_parser("simulate", help="Run the zero-intelligence model with shocks")
    common(p)
    p.add_argument("--seed", type=int, help="Overrides [flow] seed")
    p.add_argument("--runs", type=int, default=1, help="Independent seeded runs merged into one ensemble")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("detect", help="Detect large intraday price changes")
    common(p)
    p.add_argument("--minute-bars", type=Path)
    p.add_argument("--order-log", type=Path)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("relax", help="Event-aligned relaxation curves and power-law fits")
    common(p)
    p.add_argument("--trajectories", type=Path)
    p.add_argument("--baseline", type=Path)
    p.add_argument("--order-log", type=Path)
    p.add_argument("--catalog", type=Path)
    p.add_argument("--observable", help="NAME[,NAME...]")
    p.add_argument("--fit-window", type=parse_window, help="LO:HI in relative time units")
    p.add_argument("--direction", choices=["all", "down", "up"], default="all")
    p.add_argument("--bootstrap", type=int, help="Resamples for the exponent error")
    p.add_argument("--raw-grid", action="store_true", help="Unweighted fit instead of equal weight per decade")
    p.add_argument("--ratio-of-means", action="store_true")
    p.add_argument("--skip-emptied", action="store_true", help="Drop shock windows whose shock cleared its whole side")
    p.set_defaults(handler=cmd_relax)

    p = sub.add_parser("meanfield", help="Mean-field spread recursion and comparison")
    common(p)
    p.add_argument("--baseline", type=Path, help="Take sigma from a simulated baseline")
    p.add_argument("--sim-curve", type=Path, help="Simulated spread curve to compare against")
    p.add_argument("--horizon", type=int, default=50)
    p.add_argument("--exponent-window", type=parse_window, default=(300.0, 1000.0))
    p.set_defaults(handler=cmd_meanfield)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    logging.basicConfig(
        level=os.getenv("LOB_RELAX_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        args.handler(args)
    except ValidationError as exc:
        print(f"Config error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    except LobRelaxError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
