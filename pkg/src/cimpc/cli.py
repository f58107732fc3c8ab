"""Command-line entry point: ``cimpc run | sweep | compare | defaults``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ConfigError, TaskConfig, default_config_text, load_config, parse_config
from .logs import write_logs
from .mpc import run_closed_loop

log = logging.getLogger("cimpc")

SERIES_COLUMNS = ("rho", "average_cost", "average_stance_time", "stance_fraction", "flight_phases", "success")


def _prepared(cfg: TaskConfig):
    off = cfg.initial_offset()
    pert = replace(cfg.loop.perturbation, init_offset=None if off is None else tuple(off))
    return replace(cfg.loop, perturbation=pert, seed=cfg.seed)


def run_experiment(cfg: TaskConfig, out_dir) -> dict:
    """One closed-loop run; writes ``log.csv`` and ``summary.json`` and returns the summary."""
    loop = _prepared(cfg)
    elog = run_closed_loop(cfg.model, loop, cfg.task, cfg.weights)
    meta = {
        "task": cfg.task.kind,
        "rho": loop.rho,
        "shooting": loop.shooting,
        "plant": loop.plant,
        "seed": cfg.seed,
        "duration": loop.duration,
        "config": cfg.raw,
    }
    return write_logs(elog, out_dir, meta)


def _sweep_one(args):
    cfg, rho, out = args
    return rho, run_experiment(cfg.with_rho(rho), out)


def _rho_dir(rho: float) -> str:
    return f"rho_{rho:g}"


def run_sweep(cfg: TaskConfig, out_dir, jobs: int = 1) -> dict:
    """Closed-loop runs over ``cfg.rho_list``; emits ``series.csv`` and ``sweep.json``."""
    from scipy.stats import spearmanr

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    work = [(cfg, rho, out / _rho_dir(rho)) for rho in cfg.rho_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, work))
    else:
        results = [_sweep_one(w) for w in work]
    rows = []
    for rho, s in results:
        rows.append({k: (rho if k == "rho" else s[k]) for k in SERIES_COLUMNS})
    with open(out / "series.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=SERIES_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    positive = [r for r in rows if r["rho"] > 0]
    trend = None
    times = [r["average_stance_time"] for r in positive]
    if len(positive) >= 3 and len(set(times)) > 1:
        trend = float(spearmanr([r["rho"] for r in positive], times)[0])
    report = {
        "runs": len(rows),
        "series": rows,
        "stance_time_spearman": trend,
        "stance_time_decreasing": trend is not None and trend < 0,
    }
    with open(out / "sweep.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    return report


def run_compare(cfg: TaskConfig, out_dir) -> dict:
    """Identical runs in single- and multiple-shooting mode."""
    out = Path(out_dir)
    res = {}
    for mode in ("single", "multiple"):
        c = replace(cfg, loop=replace(cfg.loop, shooting=mode))
        s = run_experiment(c, out / mode)
        bad = [e for e in s["events"] if e["kind"] in ("divergence", "fall", "blow_up", "solver_failure")]
        res[mode] = {
            "success": s["success"],
            "events": len(s["events"]),
            "first_failure_t": bad[0]["t"] if bad else None,
            "average_cost": s["average_cost"],
        }
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(res, f, indent=2)
        f.write("\n")
    return res


def _load(args) -> TaskConfig:
    cfg = load_config(args.config) if args.config else parse_config("")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "rho", None) is not None:
        if args.rho < 0:
            raise ConfigError(["--rho: must be >= 0"])
        cfg = cfg.with_rho(args.rho)
    if getattr(args, "mode", None):
        cfg = replace(cfg, loop=replace(cfg.loop, shooting=args.mode))
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cimpc", description="Contact-implicit MPC experiments for a planar quadruped.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI task config (omitted fields take defaults)")
        sp.add_argument("--out", default="runs/out", help="output directory")
        sp.add_argument("--seed", type=int, help="override the config seed")

    r = sub.add_parser("run", help="run the config's task (sweep/compare kinds dispatch accordingly)")
    common(r)
    r.add_argument("--rho", type=float, help="override the relaxation parameter")
    r.add_argument("--mode", choices=("single", "multiple"), help="shooting mode")
    s = sub.add_parser("sweep", help="relaxation sweep over the config's rho_list")
    common(s)
    s.add_argument("--mode", choices=("single", "multiple"), help="shooting mode")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    c = sub.add_parser("compare", help="single vs multiple shooting on the same seed")
    common(c)
    c.add_argument("--rho", type=float, help="override the relaxation parameter")
    sub.add_parser("defaults", help="print the fully defaulted config")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "defaults":
        sys.stdout.write(default_config_text())
        return 0
    try:
        cfg = _load(args)
    except ConfigError as e:
        print(e, file=sys.stderr)
        return 2
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return 2
    try:
        cmd = args.command
        if cmd == "run":
            cmd = {"relaxation_sweep": "sweep", "shooting_compare": "compare"}.get(cfg.kind, "run")
        if cmd == "sweep":
            res = run_sweep(cfg, args.out, getattr(args, "jobs", 1))
            print(json.dumps({k: res[k] for k in ("runs", "stance_time_spearman")}))
        elif cmd == "compare":
            print(json.dumps(run_compare(cfg, args.out)))
        else:
            s = run_experiment(cfg, args.out)
            keys = ("success", "average_cost", "average_stance_time", "flight_phases", "max_iters")
            print(json.dumps({k: s[k] for k in keys}))
    except OSError as e:
        print(e, file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
