"""CSV trajectory logs, JSON summaries and the metrics derived from them."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .mpc import ExecutionLog

SETTLE_TIME = 1.0
DIVERGENCE_FACTOR = 10.0


def columns(n_joints: int, n_feet: int) -> list[str]:
    nv = 3 + n_joints
    cols = ["t"]
    cols += [f"q{i}" for i in range(nv)]
    cols += [f"qdot{i}" for i in range(nv)]
    cols += [f"u_cmd{i}" for i in range(n_joints)]
    cols += [f"u_ff{i}" for i in range(n_joints)]
    for k in range(n_feet):
        cols += [f"phi{k}", f"lam_t{k}", f"lam_n{k}", f"mode{k}"]
    cols += ["cost", "gap_norm", "iters", "solve_ms"]
    return cols


def log_table(elog: ExecutionLog) -> dict:
    """Column name -> array, in CSV order."""
    a = elog.arrays()
    nv = 3 + elog.n_joints
    out = {"t": a["t"]}
    for i in range(nv):
        out[f"q{i}"] = a["x"][:, i]
    for i in range(nv):
        out[f"qdot{i}"] = a["x"][:, nv + i]
    for i in range(elog.n_joints):
        out[f"u_cmd{i}"] = a["u_cmd"][:, i]
    for i in range(elog.n_joints):
        out[f"u_ff{i}"] = a["u_ff"][:, i]
    for k in range(elog.n_feet):
        out[f"phi{k}"] = a["phi"][:, k]
        out[f"lam_t{k}"] = a["lam"][:, k, 0]
        out[f"lam_n{k}"] = a["lam"][:, k, 1]
        out[f"mode{k}"] = a["modes"][:, k]
    cyc = a["cycle"]
    recs = elog.cycles
    out["cost"] = np.array([recs[c].cost for c in cyc], dtype=float)
    out["gap_norm"] = np.array([recs[c].gap_norm for c in cyc], dtype=float)
    out["iters"] = np.array([recs[c].iterations for c in cyc], dtype=int)
    out["solve_ms"] = np.array([recs[c].solve_ms for c in cyc], dtype=float)
    return out


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(table: dict, path: Path) -> None:
    cols = list(table)
    n = len(table["t"])
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in range(n):
                w.writerow([_fmt(table[c][r]) for c in cols])
    except OSError as e:
        raise OSError(f"cannot write log {path}: {e}") from e


def read_csv(path) -> dict:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    out = {}
    for j, c in enumerate(header):
        vals = [r[j] for r in body]
        if c.startswith("mode") or c == "iters":
            out[c] = np.array([int(v) for v in vals], dtype=int)
        else:
            out[c] = np.array([float(v) for v in vals], dtype=float)
    return out


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal ``True`` runs as half-open index ranges."""
    runs = []
    start = None
    for i, m in enumerate(mask):
        if m and start is None:
            start = i
        elif not m and start is not None:
            runs.append((start, i))
            start = None
    if start is not None:
        runs.append((start, len(mask)))
    return runs


def summarize(table: dict, dt: float, settle: float = SETTLE_TIME) -> dict:
    """Run metrics, all recomputable from the CSV columns.

    Stance rows have at least one foot Clamping or Sliding. Stance and flight
    statistics skip the first ``settle`` seconds.
    """
    t = np.asarray(table["t"], dtype=float)
    n = t.size
    mode_cols = sorted(c for c in table if c.startswith("mode"))
    if n == 0:
        return {
            "rows": 0, "cycles": 0, "average_cost": 0.0, "average_stance_time": 0.0, "stance_fraction": 0.0,
            "flight_phases": 0, "max_iters": 0, "mean_iters": 0.0, "mean_solve_ms": 0.0, "max_gap_norm": 0.0,
            "divergence_cycles": [],
        }
    modes = np.column_stack([table[c] for c in mode_cols])
    stance = np.any(modes > 0, axis=1)
    row_dt = float(np.median(np.diff(t))) if n > 1 else dt
    first = np.r_[True, np.floor(t[1:] / dt + 1e-9) != np.floor(t[:-1] / dt + 1e-9)]
    cyc_cost = np.asarray(table["cost"], dtype=float)[first]
    iters = np.asarray(table["iters"])[first]
    solve_ms = np.asarray(table["solve_ms"], dtype=float)[first]
    gaps = np.asarray(table["gap_norm"], dtype=float)[first]
    win = t >= settle - 1e-9
    st = stance[win]
    stance_runs = _runs(st)
    flight_runs = _runs(~st)
    divergence = []
    for i in range(5, cyc_cost.size):
        if cyc_cost[i] > DIVERGENCE_FACTOR * float(np.median(cyc_cost[:i])):
            divergence.append(i)
    return {
        "rows": int(n),
        "cycles": int(cyc_cost.size),
        "average_cost": float(np.mean(cyc_cost)),
        "average_stance_time": float(np.mean([(b - a) * row_dt for a, b in stance_runs])) if stance_runs else 0.0,
        "stance_fraction": float(np.mean(st)) if st.size else 0.0,
        "flight_phases": len(flight_runs),
        "max_iters": int(np.max(iters)),
        "mean_iters": float(np.mean(iters)),
        "mean_solve_ms": float(np.mean(solve_ms)),
        "max_gap_norm": float(np.max(gaps)),
        "divergence_cycles": divergence,
    }


def write_logs(elog: ExecutionLog, out_dir, meta: dict | None = None) -> dict:
    """Write ``log.csv`` and ``summary.json`` into ``out_dir``; returns the summary."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    table = log_table(elog)
    write_csv(table, out / "log.csv")
    summary = summarize(table, elog.dt)
    summary["dt"] = elog.dt
    summary["failed"] = elog.failed
    summary["success"] = not elog.failed
    summary["events"] = elog.events
    if meta:
        summary["meta"] = meta
    with open(out / "summary.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return summary


def slip_distance(table: dict, model, contact_height: float = 5e-3) -> float:
    """Total tangential foot travel while the foot is below ``contact_height``."""
    from .model import _evaluate

    t = np.asarray(table["t"])
    nv = model.nv
    q = np.column_stack([table[f"q{i}"] for i in range(nv)])
    feet = np.array([_evaluate(qi, np.zeros(nv), model, 0)[2] for qi in q])
    total = 0.0
    for k in range(model.n_contacts):
        low = feet[:-1, k, 1] - model.ground_height < contact_height
        total += float(np.sum(np.abs(np.diff(feet[:, k, 0]))[low]))
    return total if t.size > 1 else 0.0


def peak_swing_height(table: dict) -> float:
    phis = [np.asarray(table[c]) for c in table if c.startswith("phi")]
    return float(max((p.max() for p in phis if p.size), default=0.0))
