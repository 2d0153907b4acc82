"""Command line entry point: ``simulate`` runs a study, ``plot`` turns a
results CSV into plot-ready series."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import harness
from .config import ALGORITHMS, PILOT_KINDS, STUDIES, ExperimentConfig, load_config, parse_power_sweep, parse_trials

log = logging.getLogger("cellfree_jcd")


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.replace("|", ",").split(",") if p.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellfree-jcd", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = ap.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a Monte Carlo study and write <study>.csv")
    sim.add_argument("--config", help="YAML scenario/experiment file (defaults apply without one)")
    sim.add_argument("--study", choices=STUDIES)
    sim.add_argument("--power-sweep", help="transmit powers in dBm: start:stop:step or a comma list")
    sim.add_argument("--trials", help="drops x realizations, e.g. 200x1 or 100x100")
    sim.add_argument("--algorithms", help=f"comma list from {', '.join(ALGORITHMS)}")
    sim.add_argument("--pilots", help=f"comma list from {', '.join(PILOT_KINDS)}")
    sim.add_argument("--td", help="comma list of data lengths")
    sim.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    sim.add_argument("--out", help="output directory")
    sim.add_argument("--workers", type=int, help="worker processes")
    sim.add_argument("--full-scale", action="store_true", help="published trial counts instead of desk scale")
    sim.add_argument("--no-series", action="store_true", help="skip writing plot series")

    pl = sub.add_parser("plot", help="write plot-ready series from a results CSV")
    pl.add_argument("--results", required=True, help="results CSV written by simulate")
    pl.add_argument("--study", required=True, choices=STUDIES)
    pl.add_argument("--out", required=True, help="directory for the series files")
    return ap


def config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    upd = {}
    if args.study:
        upd["study"] = args.study
    if args.power_sweep:
        upd["powers_dbm"] = parse_power_sweep(args.power_sweep)
    if args.trials:
        upd["drops"], upd["realizations"] = parse_trials(args.trials)
    if args.algorithms:
        upd["algorithms"] = _csv_list(args.algorithms)
    if args.pilots:
        upd["pilots"] = _csv_list(args.pilots)
    if args.td:
        upd["Td"] = tuple(int(t) for t in _csv_list(args.td))
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.workers is not None:
        upd["workers"] = args.workers
    if args.full_scale:
        upd["full_scale"] = True
    return dataclasses.replace(cfg, **upd).resolved()


def cmd_simulate(args) -> None:
    cfg = config_from_args(args)
    out = harness.resolve_out_dir(cfg.out_dir, args.out)
    res = harness.run_experiment(cfg, out_dir=out)
    print(f"wrote {res.csv_path}")
    if res.trace_path:
        print(f"wrote {res.trace_path}")
    if not args.no_series:
        files = harness.emit_plot_series(res, cfg.study, out / f"{cfg.study}_series")
        print(f"wrote {len(files)} series to {out / f'{cfg.study}_series'}")


def cmd_plot(args) -> None:
    files = harness.emit_plot_series(args.results, args.study, args.out)
    for f in files:
        print(f)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "simulate":
            cmd_simulate(args)
        else:
            cmd_plot(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
