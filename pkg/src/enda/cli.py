"""Command-line entry point: ``enda <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import cycle as cyc
from .config import ConfigError, load_config
from .geo import DEFAULT_LEVELS_HPA, GridSpec
from .metrics import acc, rmse, spread
from .models import read_grid_state, read_ring_state, write_state
from .obs import ObsBatch, ObsFormatError, read_obs_file, write_obs_file
from .thinning import ThinningConfig, thin, write_density_report

log = logging.getLogger("enda")


def _overrides(items) -> dict[str, str]:
    out = {}
    for it in items or []:
        key, sep, val = it.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {it!r}")
        out[key.strip()] = val.strip()
    return out


def _config(args):
    return load_config(args.config, _overrides(args.set))


def cmd_cycle(args) -> int:
    cfg = _config(args)
    every = max(1, cfg.run.n_cycles // 20)

    def progress(c):
        if c % every == 0:
            log.info("cycle %d/%d", c, cfg.run.n_cycles)

    res = cyc.run_cycle_experiment(cfg, resume=args.resume, progress=progress)
    log.info("finished %d cycles in %.1f s; reports in %s", len(res.reports), res.elapsed,
             Path(cfg.run.output_dir) / "reports.csv")
    return 0


def cmd_forecast(args) -> int:
    cfg = _config(args)
    archive = cyc.load_archive(args.archive) if args.archive else None
    rows = cyc.forecast_from_config(cfg, archive)
    out = Path(args.out or Path(cfg.run.output_dir) / "lead_times.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    cyc.write_lead_table(rows, out)
    log.info("lead-time table written to %s", out)
    return 0


def cmd_thin(args) -> int:
    obs = list(read_obs_file(args.obs))
    grid = GridSpec.regular(args.n_lon, args.n_lat, tuple(args.levels) if args.levels else DEFAULT_LEVELS_HPA)
    tcfg = ThinningConfig(r_h=args.r_h, r_v=args.r_v, c_thresh=args.c_thresh, m_thresh=args.m_thresh)
    center = obs[0].time if obs else 0
    res = thin(ObsBatch(obs, center), grid, tcfg)
    write_obs_file(res.batch.observations, args.out)
    if args.density:
        write_density_report(res, grid, args.density)
    log.info("kept %d of %d observations", len(res.batch), len(obs))
    return 0


def _read_any(path):
    """(fields, areas, lat_weights, labels) for a grid state or a ring state."""
    p = Path(path)
    if p.suffix == ".txt":
        x = read_ring_state(p)
        n = x.shape[-1]
        return x.reshape(*x.shape[:-1], 1, 1, n), np.ones((1, n)), np.ones(1), [("X", None)]
    fields, _, layout = read_grid_state(p)
    return fields, layout.grid.cell_area, layout.grid.lat_weight, layout.field_labels()


def cmd_metrics(args) -> int:
    fc, areas, lw, labels = _read_any(args.state)
    truth = _read_any(args.truth)[0]
    truth = truth.mean(axis=0) if truth.ndim == 4 else truth
    clim = _read_any(args.climatology)[0] if args.climatology else None
    if clim is not None and clim.ndim == 4:
        clim = clim.mean(axis=0)
    ens = fc if fc.ndim == 4 else None
    mean = fc.mean(axis=0) if ens is not None else fc
    if mean.shape != truth.shape:
        raise ValueError(f"state shape {mean.shape} does not match truth shape {truth.shape}")
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["variable", "level_hpa", "rmse", "spread", "acc"])
        for f, (var, lev) in enumerate(labels):
            sp = "" if ens is None else repr(spread(ens[:, f], areas))
            ac = ""
            if clim is not None:
                try:
                    ac = repr(acc(mean[f], truth[f], clim[f], lw))
                except ValueError as exc:
                    log.error("%s %s: %s", var, lev, exc)
            w.writerow([var, "" if lev is None else repr(lev), repr(rmse(mean[f], truth[f], areas)), sp, ac])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_synth_obs(args) -> int:
    cfg = _config(args)
    model = cyc.build_model(cfg)
    nature = cyc.Nature(model, cfg)
    obs = []
    for c, truth in nature.cycles(1):
        if c > cfg.run.n_cycles:
            break
        obs.extend(cyc.synthetic_cycle_obs(cfg, model, truth, c))
    n = write_obs_file(obs, args.out, header=f"synthetic observations, cycles 1-{cfg.run.n_cycles}")
    log.info("wrote %d observations to %s", n, args.out)
    return 0


def cmd_nature(args) -> int:
    cfg = _config(args)
    model = cyc.build_model(cfg)
    nature = cyc.Nature(model, cfg)
    out = Path(args.out)
    for c, truth in nature.cycles(0):
        if c > cfg.run.n_cycles:
            break
        if c % args.every == 0:
            write_state(out / f"truth_c{c:05d}", truth, model, cyc.cycle_time(cfg, c))
    log.info("nature run written to %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="enda", description="Ensemble data assimilation experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("config", nargs="?", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_config(sub.add_parser("cycle", help="run an assimilation cycle experiment"))
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output dir")
    p.set_defaults(func=cmd_cycle)

    p = with_config(sub.add_parser("forecast", help="lead-time experiment from archived analyses"))
    p.add_argument("--archive", help="archive directory (default <output_dir>/archive)")
    p.add_argument("--out", help="CSV path (default <output_dir>/lead_times.csv)")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("thin", help="thin an observation file")
    p.add_argument("obs")
    p.add_argument("--out", required=True)
    p.add_argument("--density", help="also write per-grid densities to this CSV")
    p.add_argument("--n-lon", type=int, default=64)
    p.add_argument("--n-lat", type=int, default=32)
    p.add_argument("--levels", type=float, nargs="+")
    p.add_argument("--r-h", type=float, default=500.0)
    p.add_argument("--r-v", type=float, default=0.1)
    p.add_argument("--c-thresh", type=float, default=0.01)
    p.add_argument("--m-thresh", type=int)
    p.set_defaults(func=cmd_thin)

    p = sub.add_parser("metrics", help="score a state file against a truth state file")
    p.add_argument("state")
    p.add_argument("truth")
    p.add_argument("--climatology")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = with_config(sub.add_parser("synth-obs", help="write synthetic observations from the nature run"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_obs)

    p = with_config(sub.add_parser("nature", help="write the nature run at every cycle"))
    p.add_argument("--out", required=True)
    p.add_argument("--every", type=int, default=1)
    p.set_defaults(func=cmd_nature)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except cyc.DivergenceError as exc:
        log.error("%s; partial outputs kept", exc)
        return 3
    except (ConfigError, ObsFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
