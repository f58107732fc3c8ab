import csv
import json

import numpy as np
import pytest

from cimpc.cli import main
from cimpc.config import ConfigError, default_config_text, parse_config
from cimpc.logs import columns, log_table, read_csv, summarize, write_logs
from cimpc.model import RobotModel
from cimpc.mpc import ClosedLoopConfig, TaskSpec, run_closed_loop

MODEL = RobotModel()
METRICS = ("rows", "cycles", "average_cost", "average_stance_time", "stance_fraction", "flight_phases", "max_iters",
           "mean_iters", "mean_solve_ms", "max_gap_norm", "divergence_cycles")


@pytest.fixture(scope="module")
def short_log():
    return run_closed_loop(MODEL, ClosedLoopConfig(duration=0.25, rho=0.25), TaskSpec("jump_up", height=0.3))


def test_column_order(short_log, tmp_path):
    write_logs(short_log, tmp_path)
    with open(tmp_path / "log.csv", "rb") as f:
        raw = f.read()
    assert b"\r" not in raw
    header = raw.decode("utf-8").split("\n")[0].split(",")
    assert header == columns(4, 2)
    assert header[:2] == ["t", "q0"] and header[-4:] == ["cost", "gap_norm", "iters", "solve_ms"]
    assert header[header.index("phi0"):header.index("phi0") + 4] == ["phi0", "lam_t0", "lam_n0", "mode0"]


def test_summary_roundtrip(short_log, tmp_path):
    written = write_logs(short_log, tmp_path)
    with open(tmp_path / "summary.json", encoding="utf-8") as f:
        on_disk = json.load(f)
    again = summarize(read_csv(tmp_path / "log.csv"), on_disk["dt"])
    for k in METRICS:
        assert again[k] == on_disk[k] == written[k], k


def test_table_matches_log(short_log, tmp_path):
    write_logs(short_log, tmp_path)
    back = read_csv(tmp_path / "log.csv")
    table = log_table(short_log)
    for k in table:
        assert np.array_equal(back[k], table[k]), k
    for k in ("mode0", "mode1"):
        assert set(np.unique(back[k])) <= {0, 1, 2}


def test_empty_run(tmp_path):
    elog = run_closed_loop(MODEL, ClosedLoopConfig(duration=0.0), TaskSpec("stand"))
    s = write_logs(elog, tmp_path)
    with open(tmp_path / "log.csv", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 1 and rows[0] == columns(4, 2)
    assert s["rows"] == 0 and s["cycles"] == 0 and s["flight_phases"] == 0 and s["average_cost"] == 0.0


def test_write_logs_reports_path(tmp_path, short_log):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError, match="file"):
        write_logs(short_log, blocker / "sub")


def test_flight_counting():
    t = np.arange(0, 3, 0.025)
    modes = np.ones_like(t, dtype=int)
    modes[(t > 1.5) & (t < 1.6)] = 0
    modes[(t > 2.0) & (t < 2.2)] = 0
    modes[t < 0.5] = 0  # start-up hop inside the settling window
    table = {"t": t, "mode0": modes, "mode1": modes, "cost": np.ones_like(t), "gap_norm": np.zeros_like(t),
             "iters": np.ones_like(t, dtype=int), "solve_ms": np.ones_like(t)}
    s = summarize(table, 0.025)
    assert s["flight_phases"] == 2
    assert s["average_stance_time"] == pytest.approx((0.5 + 0.4 + 0.8) / 3, abs=0.03)


# -- config ------------------------------------------------------------------


def test_minimal_config_defaults():
    cfg = parse_config("[task]\nkind = stand\n")
    assert cfg.kind == "stand" and cfg.loop.horizon == 20 and cfg.loop.dt == 0.025
    assert cfg.loop.gains.kp == 50.0 and cfg.weights.c_a == 2e3 and cfg.weights.beta == 10.0
    assert parse_config(default_config_text()).raw == parse_config("").raw


def test_negative_rho_rejected_with_line():
    with pytest.raises(ConfigError) as e:
        parse_config("[task]\nkind = stand\n\n[solver]\nrho = -1\n")
    assert "line 5" in str(e.value) and "rho" in str(e.value)


@pytest.mark.parametrize(
    "text, field",
    [
        ("[solver]\ndt = 0\n", "dt"),
        ("[solver]\nhorizon = 0\n", "horizon"),
        ("[solver]\nhorizont = 20\n", "horizont"),
        ("[bogus]\nx = 1\n", "bogus"),
        ("[task]\nkind = cartwheel\n", "kind"),
        ("[solver]\ndt = fast\n", "dt"),
        ("[perturbation]\ninit_offset = 1, 2\n", "init_offset"),
        ("[mpc]\ndrift = maybe\n", "drift"),
    ],
)
def test_config_errors(text, field):
    with pytest.raises(ConfigError) as e:
        parse_config(text)
    assert field in str(e.value)


def test_all_problems_itemized():
    with pytest.raises(ConfigError) as e:
        parse_config("[solver]\ndt = -1\nhorizon = 0\nrho = -2\n")
    assert len(e.value.problems) == 3


def test_sweep_list_and_schedule():
    cfg = parse_config("[task]\nkind = relaxation_sweep\n\n[perturbation]\nfriction_schedule = 1.0:2.0:0.25\n")
    assert cfg.rho_list == (0.0, 0.02, 0.25, 2.0, 6.0)
    assert cfg.task.kind == "jump_up"
    assert cfg.loop.perturbation.friction_schedule == ((1.0, 2.0, 0.25),)


def test_seeded_offset_deterministic():
    cfg = parse_config("[perturbation]\ninit_noise = 0.01\n")
    assert np.array_equal(cfg.initial_offset(), cfg.initial_offset())
    assert parse_config("").initial_offset() is None


# -- CLI ---------------------------------------------------------------------


def _write_cfg(path, body):
    path.write_text(body, encoding="utf-8")
    return str(path)


def test_cli_run_reproducible(tmp_path):
    cfg = _write_cfg(tmp_path / "c.ini", "[task]\nkind = jump_up\nheight = 0.3\nduration = 0.2\n\n[solver]\nrho = 0.25\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = read_csv(tmp_path / "a" / "log.csv"), read_csv(tmp_path / "b" / "log.csv")
    for k in a:
        if k != "solve_ms":
            assert np.array_equal(a[k], b[k]), k
    with open(tmp_path / "a" / "summary.json", encoding="utf-8") as f:
        s = json.load(f)
    assert s["meta"]["rho"] == 0.25 and s["success"]


def test_cli_overrides(tmp_path):
    out = tmp_path / "o"
    cfg = _write_cfg(tmp_path / "c.ini", "[task]\nduration = 0.1\n")
    assert main(["run", "--config", cfg, "--out", str(out), "--rho", "0.5", "--mode", "single", "--seed", "3"]) == 0
    with open(out / "summary.json", encoding="utf-8") as f:
        meta = json.load(f)["meta"]
    assert meta["rho"] == 0.5 and meta["shooting"] == "single" and meta["seed"] == 3


def test_cli_bad_config_exits_2(tmp_path, capsys):
    cfg = _write_cfg(tmp_path / "bad.ini", "[solver]\nrho = -1\n")
    assert main(["run", "--config", cfg, "--out", str(tmp_path)]) == 2
    assert "rho" in capsys.readouterr().err
    assert main(["run", "--config", str(tmp_path / "missing.ini")]) == 2


def test_cli_sweep_series(tmp_path):
    cfg = _write_cfg(
        tmp_path / "s.ini",
        "[task]\nkind = relaxation_sweep\nsweep_task = jump_up\nduration = 0.1\nrho_list = 0, 0.25, 1, 2\n\n"
        "[mpc]\nplant = model\n",
    )
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "sw")]) == 0
    with open(tmp_path / "sw" / "series.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [float(r["rho"]) for r in rows] == [0.0, 0.25, 1.0, 2.0]
    for rho in ("0", "0.25", "1", "2"):
        assert (tmp_path / "sw" / f"rho_{rho}" / "log.csv").exists()
    with open(tmp_path / "sw" / "sweep.json", encoding="utf-8") as f:
        assert json.load(f)["runs"] == 4


def test_cli_compare(tmp_path):
    cfg = _write_cfg(tmp_path / "c.ini", "[task]\nkind = shooting_compare\nduration = 0.1\n\n[mpc]\nplant = model\n")
    assert main(["compare", "--config", cfg, "--out", str(tmp_path / "cmp")]) == 0
    with open(tmp_path / "cmp" / "compare.json", encoding="utf-8") as f:
        res = json.load(f)
    assert set(res) == {"single", "multiple"}
    assert (tmp_path / "cmp" / "single" / "log.csv").exists()


def test_cli_defaults(capsys):
    assert main(["defaults"]) == 0
    assert "[solver]" in capsys.readouterr().out


def test_shipped_configs_parse():
    from pathlib import Path

    from cimpc.config import load_config

    shipped = sorted((Path(__file__).parent.parent / "configs").glob("*.ini"))
    assert shipped
    for path in shipped:
        load_config(path)
