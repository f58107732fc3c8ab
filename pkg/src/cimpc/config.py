"""INI task configuration with documented defaults and itemized validation errors."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from .costs import CostWeights
from .model import LegSpec, RobotModel
from .mpc import ClosedLoopConfig, PdGains, Perturbation, TaskSpec

KINDS = ("stand", "jump_up", "move_forward", "pitch_target", "relaxation_sweep", "shooting_compare", "slip_recovery")

# section -> key -> (type, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "task": {
        "kind": (str, "stand"),
        "height": (float, 0.6),
        "velocity": (float, 1.0),
        "pitch": (float, 0.6),
        "duration": (float, 5.0),
        "seed": (int, 0),
        "sweep_task": (str, "jump_up"),
        "rho_list": ("floats", (0.0, 0.02, 0.25, 2.0, 6.0)),
        "compare_task": (str, "move_forward"),
    },
    "solver": {
        "horizon": (int, 20),
        "dt": (float, 0.025),
        "rho": (float, 0.0),
        "max_iter": (int, 4),
        "shooting": (str, "multiple"),
    },
    "model": {
        "base_mass": (float, 10.0),
        "base_inertia": (float, 0.3),
        "link_length": (float, 0.25),
        "link_mass": (float, 1.0),
        "hip_offset": (float, 0.3),
        "friction": (float, 0.8),
        "gravity": (float, 9.81),
        "torque_limit": (float, 50.0),
    },
    "weights": {
        "w_pos": (float, 1.0),
        "w_height": (float, 10.0),
        "w_pitch": (float, 10.0),
        "w_joint": (float, 0.1),
        "w_vel": (float, 5e-4),
        "w_u": (float, 5e-4),
        "beta": (float, 10.0),
        "foot": (bool, False),
        "c_f": (float, 1.0),
        "c_1": (float, -30.0),
        "airtime": (bool, False),
        "c_a": (float, 2e3),
        "i_t": (int, 12),
        "symmetric": (bool, False),
        "c_s": (float, 1e-2),
    },
    "mpc": {
        "plant": (str, "fine"),
        "plant_dt": (float, 1e-3),
        "kp": (float, 50.0),
        "kd": (float, 1.0),
        "drift": (bool, True),
    },
    "perturbation": {
        "foot_height": (float, 0.0),
        "init_offset": ("floats", ()),
        "init_noise": (float, 0.0),
        "friction_schedule": (str, ""),
    },
}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class TaskConfig:
    kind: str
    task: TaskSpec
    loop: ClosedLoopConfig
    model: RobotModel
    weights: CostWeights
    seed: int = 0
    rho_list: tuple = ()
    sweep_task: str = "jump_up"
    compare_task: str = "move_forward"
    init_noise: float = 0.0
    raw: dict = field(default_factory=dict)

    def with_rho(self, rho: float) -> "TaskConfig":
        from dataclasses import replace

        return replace(self, loop=replace(self.loop, rho=rho))

    def initial_offset(self) -> np.ndarray | None:
        """Deterministic initial-state offset (explicit offset plus seeded noise)."""
        nx = self.model.nx
        off = np.zeros(nx)
        given = self.loop.perturbation.init_offset
        if given is not None:
            off += np.asarray(given, dtype=float)
        if self.init_noise > 0:
            rng = np.random.default_rng(self.seed)
            off[: self.model.nv] += rng.normal(scale=self.init_noise, size=self.model.nv)
        return off if np.any(off) else None


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            cur = s[1:-1].strip()
        elif cur == section and s.split("=")[0].split(":")[0].strip() == key:
            return n
    return None


def _convert(kind, raw: str):
    if kind is bool:
        v = raw.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if kind == "floats":
        parts = [p for p in raw.replace(";", ",").split(",") if p.strip()]
        return tuple(float(p) for p in parts)
    return kind(raw.strip())


def _friction_schedule(raw: str) -> tuple:
    """``"t0:t1:mu, t0:t1:mu"`` windows."""
    out = []
    for item in raw.replace(";", ",").split(","):
        if not item.strip():
            continue
        t0, t1, mu = (float(v) for v in item.split(":"))
        if t1 <= t0 or mu < 0:
            raise ValueError(f"bad friction window {item.strip()!r}")
        out.append((t0, t1, mu))
    return tuple(out)


def parse_config(text: str) -> TaskConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError([str(e)]) from None
    problems = []
    vals: dict[str, dict] = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            problems.append(f"line {_line_of(text, sec, '') or '?'}: unknown section [{sec}]")
    for sec, keys in SCHEMA.items():
        vals[sec] = {k: d for k, (_, d) in keys.items()}
        if not cp.has_section(sec):
            continue
        for key, raw in cp.items(sec):
            where = f"line {_line_of(text, sec, key) or '?'} [{sec}] {key}"
            if key not in keys:
                problems.append(f"{where}: unknown key")
                continue
            try:
                vals[sec][key] = _convert(keys[key][0], raw)
            except ValueError as e:
                problems.append(f"{where}: {e}")
    if problems:
        raise ConfigError(problems)
    return _build(vals, text)


def _build(v: dict, text: str) -> TaskConfig:
    problems = []

    def check(cond, sec, key, msg):
        if not cond:
            problems.append(f"line {_line_of(text, sec, key) or '?'} [{sec}] {key}: {msg}")

    t, s, m, w, c, p = (v[k] for k in ("task", "solver", "model", "weights", "mpc", "perturbation"))
    check(t["kind"] in KINDS, "task", "kind", f"must be one of {', '.join(KINDS)}")
    check(t["sweep_task"] in KINDS[:4], "task", "sweep_task", "must be a plain task")
    check(t["compare_task"] in KINDS[:4], "task", "compare_task", "must be a plain task")
    check(t["duration"] >= 0, "task", "duration", "must be >= 0")
    check(s["horizon"] >= 1, "solver", "horizon", "must be >= 1")
    check(s["dt"] > 0, "solver", "dt", "must be > 0")
    check(s["rho"] >= 0, "solver", "rho", "must be >= 0")
    check(all(r >= 0 for r in t["rho_list"]), "task", "rho_list", "entries must be >= 0")
    check(s["max_iter"] >= 1, "solver", "max_iter", "must be >= 1")
    check(s["shooting"] in ("multiple", "single"), "solver", "shooting", "must be multiple or single")
    check(c["plant"] in ("fine", "model"), "mpc", "plant", "must be fine or model")
    check(c["plant_dt"] > 0, "mpc", "plant_dt", "must be > 0")
    check(c["kp"] > 0 and c["kd"] > 0, "mpc", "kp", "gains must be positive")
    for key in ("base_mass", "base_inertia", "link_length", "link_mass", "torque_limit"):
        check(m[key] > 0, "model", key, "must be > 0")
    check(m["friction"] >= 0, "model", "friction", "must be >= 0")
    try:
        sched = _friction_schedule(p["friction_schedule"])
    except ValueError as e:
        problems.append(f"[perturbation] friction_schedule: {e}")
        sched = ()
    n_joints = 4
    nx = 2 * (3 + n_joints)
    off = p["init_offset"]
    check(len(off) in (0, nx), "perturbation", "init_offset", f"needs {nx} entries")
    if problems:
        raise ConfigError(problems)
    L, lm = m["link_length"], m["link_mass"]
    legs = (
        LegSpec(hip=(m["hip_offset"], 0.0), lengths=(L, L), masses=(lm, lm), name="front"),
        LegSpec(hip=(-m["hip_offset"], 0.0), lengths=(L, L), masses=(lm, lm), name="hind"),
    )
    try:
        model = RobotModel(
            base_mass=m["base_mass"], base_inertia=m["base_inertia"], legs=legs, gravity=m["gravity"],
            friction=m["friction"], torque_limits=(m["torque_limit"],) * n_joints,
        )
        weights = CostWeights(**w)
        kind = t["kind"]
        base = {"relaxation_sweep": t["sweep_task"], "shooting_compare": t["compare_task"]}.get(kind, kind)
        task = TaskSpec(base, height=t["height"], velocity=t["velocity"], pitch=t["pitch"])
        loop = ClosedLoopConfig(
            horizon=s["horizon"], dt=s["dt"], plant_dt=c["plant_dt"], duration=t["duration"], rho=s["rho"],
            shooting=s["shooting"], plant=c["plant"], max_iter=s["max_iter"],
            gains=PdGains(c["kp"], c["kd"]), drift=c["drift"], seed=t["seed"],
            perturbation=Perturbation(off if off else None, p["foot_height"], sched),
        )
    except ValueError as e:
        raise ConfigError([str(e)]) from None
    return TaskConfig(
        kind=kind, task=task, loop=loop, model=model, weights=weights, seed=t["seed"],
        rho_list=tuple(t["rho_list"]), sweep_task=t["sweep_task"], compare_task=t["compare_task"],
        init_noise=p["init_noise"], raw=v,
    )


def load_config(path) -> TaskConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def default_config_text() -> str:
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for k, (kind, d) in keys.items():
            if kind == "floats":
                d = ", ".join(repr(x) for x in d)
            elif kind is bool:
                d = "true" if d else "false"
            lines.append(f"{k} = {d}")
        lines.append("")
    return "\n".join(lines)
