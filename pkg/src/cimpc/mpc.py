"""Receding-horizon loop around the contact-implicit solver."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .costs import AirTimeSchedule, CostContext, CostWeights, ReferenceConfig, update_airtime_schedule
from .fddp import SolverSettings, Trajectory, contact_problem, evaluate, rollout, solve
from .model import CLAMPING, SLIDING, RobotModel
from .stepper import StepError, gravity_compensation, step, step_x

log = logging.getLogger(__name__)

TASKS = ("stand", "jump_up", "move_forward", "pitch_target", "slip_recovery")


@dataclass(frozen=True)
class PdGains:
    kp: float | tuple = 50.0
    kd: float | tuple = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.kp) <= 0) or np.any(np.asarray(self.kd) <= 0):
            raise ValueError("PD gains must be positive")


@dataclass(frozen=True)
class Perturbation:
    """Deliberate model/plant discrepancies.

    ``init_offset`` is added to the initial plant state; ``foot_height``
    raises the plant's ground, so a plant foot at rest appears that far above
    the solver's ground; ``friction_schedule`` holds ``(t_start, t_end, mu)``
    windows for the plant.
    """

    init_offset: tuple | None = None
    foot_height: float = 0.0
    friction_schedule: tuple = ()

    def friction_window(self, t: float) -> int | None:
        for j, (t0, t1, _) in enumerate(self.friction_schedule):
            if t0 <= t < t1:
                return j
        return None

    def friction_at(self, t: float, default: float) -> float:
        j = self.friction_window(t)
        return default if j is None else self.friction_schedule[j][2]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "stand"
    height: float = 0.0  # jump_up offset (m)
    velocity: float = 0.0  # move_forward speed (m/s)
    pitch: float = 0.0  # pitch_target (rad)

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown task {self.kind!r}")

    def reference(self, model: RobotModel, x_start: float, t: float, horizon_time: float) -> ReferenceConfig:
        if self.kind == "jump_up":
            return ReferenceConfig.stance(model, x0=x_start, dz=self.height)
        if self.kind in ("move_forward", "slip_recovery") and self.velocity:
            return ReferenceConfig.stance(
                model, x0=x_start + self.velocity * (t + horizon_time), vx=self.velocity
            )
        if self.kind == "pitch_target":
            return ReferenceConfig.stance(model, x0=x_start, dpitch=self.pitch)
        # holding still: the static torque is the control reference
        ref = ReferenceConfig.stance(model, x0=x_start)
        return ReferenceConfig(ref.q_ref, ref.qdot_ref, gravity_compensation(model))


@dataclass(frozen=True)
class ClosedLoopConfig:
    horizon: int = 20
    dt: float = 0.025
    plant_dt: float = 1e-3
    duration: float = 5.0
    rho: float = 0.0
    shooting: str = "multiple"
    plant: str = "fine"  # fine: plant_dt steps with PD; model: one solver step with u*_0
    max_iter: int = 4
    gains: PdGains = PdGains()
    perturbation: Perturbation = Perturbation()
    drift: bool = True
    fall_height: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.horizon < 1 or self.dt <= 0 or self.plant_dt <= 0 or self.duration < 0:
            raise ValueError("horizon, dt, plant_dt must be positive and duration >= 0")
        if self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.shooting not in ("multiple", "single"):
            raise ValueError("shooting must be 'multiple' or 'single'")
        if self.plant not in ("fine", "model"):
            raise ValueError("plant must be 'fine' or 'model'")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        ratio = self.dt / self.plant_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError("MPC period must be an integer multiple of the plant dt")

    @property
    def substeps(self) -> int:
        return int(round(self.dt / self.plant_dt)) if self.plant == "fine" else 1

    @property
    def n_cycles(self) -> int:
        return int(round(self.duration / self.dt))


# ---------------------------------------------------------------------------
# building blocks


def standing_context(model: RobotModel, weights: CostWeights | None = None, x_start=None) -> CostContext:
    """Stance reference whose control reference is the static holding torque."""
    ref = ReferenceConfig.stance(model, x0=x_start)
    ref = ReferenceConfig(ref.q_ref, ref.qdot_ref, gravity_compensation(model))
    w = (weights or CostWeights()).with_(foot=False, airtime=False, symmetric=False)
    return CostContext(model, w, ref)


def make_standing_trajectory(model: RobotModel, horizon=20, dt=0.025, weights=None, x0=None) -> Trajectory:
    """Feasible trajectory that holds the nominal stance."""
    x0 = model.stance_state().x if x0 is None else np.asarray(x0, dtype=float)
    ctx = standing_context(model, weights, x0[0])
    p = contact_problem(model, x0, horizon, dt, ctx)
    init = rollout(p, np.tile(gravity_compensation(model), (horizon, 1)))
    traj, st = solve(p, init, SolverSettings(max_iter=50))
    if not st.improved or traj.gap_norm > 1e-9:
        raise RuntimeError(f"standing initialization failed (gap {traj.gap_norm:.2e})")
    return traj


def warm_start_shift(model: RobotModel, prev: Trajectory, x_meas, dt: float, drift: bool = True):
    """Shift ``prev`` one knot left; returns ``(xs, us)`` of the init trajectory."""
    nu = prev.us.shape[1]
    xs = np.empty_like(prev.xs)
    us = np.empty_like(prev.us)
    xs[:-1] = prev.xs[1:]
    us[:-1] = prev.us[1:]
    us[-1] = 0.0
    xs[-1] = step_x(model, xs[-2], np.zeros(nu), dt, drift)[0]
    return xs, us


def check_shift(prev: Trajectory, init: Trajectory, tol: float = 1e-12, controls_only: bool = False) -> bool:
    """Structural warm-start invariant: only the first gap is new.

    ``controls_only`` checks just the control shift (single shooting re-rolls
    the states).
    """
    nu_ok = np.array_equal(init.us[:-1], prev.us[1:]) and not np.any(init.us[-1])
    if controls_only:
        return bool(nu_ok)
    xs_ok = np.array_equal(init.xs[:-1], prev.xs[1:])
    interior = np.max(np.abs(init.gaps[1:-1] - prev.gaps[2:]), initial=0.0) <= tol
    last = np.max(np.abs(init.gaps[-1])) <= tol
    return bool(nu_ok and xs_ok and interior and last)


def pd_command(u_ff, p_des, pdot_des, p, pdot, gains: PdGains, limit) -> np.ndarray:
    u = (
        np.asarray(u_ff, dtype=float)
        + np.asarray(gains.kp) * (np.asarray(p_des) - np.asarray(p))
        + np.asarray(gains.kd) * (np.asarray(pdot_des) - np.asarray(pdot))
    )
    return np.clip(u, -limit, limit)


@dataclass
class StandingRollout:
    phi: np.ndarray  # (T, K) after each step
    modes: np.ndarray  # (T, K)
    xs: np.ndarray

    @property
    def max_clamping_phi(self) -> float:
        held = self.modes == CLAMPING
        return float(np.max(np.abs(self.phi[held]))) if held.any() else 0.0


def standing_rollout(
    model: RobotModel, dt=0.025, duration=5.0, drift=True, x_offset=None, gains: PdGains | None = None
) -> StandingRollout:
    """Stance held by gravity compensation plus joint PD, no planner.

    Constant torques alone leave the passive stance statically unstable, so the
    joints are servoed to the nominal pose.
    """
    gains = gains or PdGains()
    x = model.stance_state().x
    if x_offset is not None:
        x = x + np.asarray(x_offset, dtype=float)
    nv = model.nv
    q_nom = model.stance_q()[3:]
    u_g = gravity_compensation(model)
    n = int(round(duration / dt))
    phi = np.empty((n, model.n_contacts))
    modes = np.empty((n, model.n_contacts), dtype=int)
    xs = np.empty((n + 1, model.nx))
    xs[0] = x
    for i in range(n):
        u = pd_command(u_g, q_nom, 0.0, x[3:nv], x[nv + 3:], gains, model.torque_limit)
        x, r = step_x(model, x, u, dt, drift)
        phi[i], modes[i], xs[i + 1] = r.phi_after, r.modes, x
    return StandingRollout(phi, modes, xs)


@dataclass
class CycleRecord:
    t: float
    cost: float
    gap_norm: float
    init_gap0: float
    iterations: int
    solve_ms: float
    improved: bool
    shift_ok: bool
    contraction_err: float
    alphas: list


@dataclass
class MpcState:
    prev: Trajectory | None = None
    schedule: AirTimeSchedule | None = None
    cycle: int = 0


def mpc_step(model, mstate: MpcState, x_meas, ctx_weights: CostWeights, ref: ReferenceConfig, cfg: ClosedLoopConfig):
    """One MPC problem; returns ``(solution, record)`` and advances ``mstate``."""
    N, dt = cfg.horizon, cfg.dt
    if mstate.prev is None:
        mstate.prev = make_standing_trajectory(model, N, dt, ctx_weights, x_meas)
        xs, us = mstate.prev.xs.copy(), mstate.prev.us.copy()
        shifted = False
    else:
        xs, us = warm_start_shift(model, mstate.prev, x_meas, dt, cfg.drift)
        shifted = True
    if mstate.schedule is None:
        mstate.schedule = AirTimeSchedule.empty(model.n_contacts, N)
    if ctx_weights.airtime:
        mstate.schedule = update_airtime_schedule(mstate.schedule, xs, model, ctx_weights)
    ctx = CostContext(model, ctx_weights, ref, mstate.schedule)
    p = contact_problem(model, x_meas, N, dt, ctx, cfg.rho, cfg.drift)
    single = cfg.shooting == "single"
    init = rollout(p, us) if single else evaluate(p, xs, us)
    shift_ok = check_shift(mstate.prev, init, controls_only=single) if shifted else True
    t0 = time.perf_counter()
    sol, st = solve(p, init, SolverSettings(max_iter=cfg.max_iter), single=single)
    ms = 1e3 * (time.perf_counter() - t0)
    rec = CycleRecord(
        t=0.0,
        cost=sol.cost,
        gap_norm=sol.gap_norm,
        init_gap0=float(np.sum(np.abs(init.gaps[0]))),
        iterations=st.iterations,
        solve_ms=ms,
        improved=st.improved,
        shift_ok=shift_ok,
        contraction_err=st.max_contraction_err,
        alphas=[r.alpha for r in st.records],
    )
    mstate.prev = sol
    mstate.cycle += 1
    return sol, rec


# ---------------------------------------------------------------------------
# closed loop


@dataclass
class ExecutionLog:
    """Per-plant-step rows plus per-cycle records."""

    n_joints: int
    n_feet: int
    t: list = field(default_factory=list)
    x: list = field(default_factory=list)
    u_cmd: list = field(default_factory=list)
    u_ff: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    cycle_index: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    events: list = field(default_factory=list)
    failed: bool = False
    dt: float = 0.025

    def add_event(self, t, kind, detail=""):
        self.events.append({"t": float(t), "kind": kind, "detail": detail})

    def arrays(self):
        n = len(self.t)
        nx = 2 * (3 + self.n_joints)
        return dict(
            t=np.array(self.t, dtype=float),
            x=np.array(self.x, dtype=float).reshape(n, nx),
            u_cmd=np.array(self.u_cmd, dtype=float).reshape(n, self.n_joints),
            u_ff=np.array(self.u_ff, dtype=float).reshape(n, self.n_joints),
            phi=np.array(self.phi, dtype=float).reshape(n, self.n_feet),
            lam=np.array(self.lam, dtype=float).reshape(n, self.n_feet, 2),
            modes=np.array(self.modes, dtype=int).reshape(n, self.n_feet),
            cycle=np.array(self.cycle_index, dtype=int),
        )


def _divergence(rec: CycleRecord, history: list) -> bool:
    if len(history) < 5:
        return False
    return rec.cost > 10.0 * float(np.median(history))


def run_closed_loop(model: RobotModel, cfg: ClosedLoopConfig, task: TaskSpec, weights: CostWeights | None = None) -> ExecutionLog:
    weights = weights or CostWeights()
    pert = cfg.perturbation
    elog = ExecutionLog(model.n_joints, model.n_contacts, dt=cfg.dt)
    x = model.stance_state().x
    if pert.init_offset is not None:
        x = x + np.asarray(pert.init_offset, dtype=float)
    x_start = float(model.stance_q()[0])
    plant_models = {}

    def plant_model(t):
        mu = pert.friction_at(t, model.friction)
        key = mu
        if key not in plant_models:
            plant_models[key] = model.with_(friction=mu, ground_height=model.ground_height + pert.foot_height)
        return plant_models[key]

    mstate = MpcState()
    history = []
    slipped = set()
    nv, nj = model.nv, model.n_joints
    limit = model.torque_limit
    horizon_time = cfg.horizon * cfg.dt
    sub_dt = cfg.plant_dt if cfg.plant == "fine" else cfg.dt
    for c in range(cfg.n_cycles):
        t = c * cfg.dt
        ref = task.reference(model, x_start, t, horizon_time)
        try:
            sol, rec = mpc_step(model, mstate, x, weights, ref, cfg)
        except (StepError, RuntimeError) as e:
            elog.add_event(t, "solver_failure", str(e))
            elog.failed = True
            break
        rec.t = t
        if _divergence(rec, history):
            elog.add_event(t, "divergence", f"cycle cost {rec.cost:.4g} > 10x median {np.median(history):.4g}")
        history.append(rec.cost)
        elog.cycles.append(rec)
        u_ff = sol.us[0]
        p_des, pdot_des = sol.xs[1, 3:nv], sol.xs[1, nv + 3:]
        for s in range(cfg.substeps):
            ts = t + s * sub_dt
            pm = plant_model(ts)
            if cfg.plant == "fine":
                u = pd_command(u_ff, p_des, pdot_des, x[3:nv], x[nv + 3:], cfg.gains, limit)
            else:
                u = np.clip(u_ff, -limit, limit)
            try:
                r = step(pm, x, u, sub_dt, cfg.drift)
            except StepError as e:
                elog.add_event(ts, "blow_up", str(e))
                elog.failed = True
                break
            elog.t.append(ts)
            elog.x.append(x)
            elog.u_cmd.append(u)
            elog.u_ff.append(u_ff)
            elog.phi.append(r.phi_before)
            elog.lam.append(r.contact.impulses)
            elog.modes.append(r.contact.modes)
            elog.cycle_index.append(len(elog.cycles) - 1)
            if pm.friction != model.friction and np.any(r.contact.modes == SLIDING):
                window = pert.friction_window(ts)
                if window not in slipped:
                    slipped.add(window)
                    elog.add_event(ts, "slip", f"foot sliding at mu={pm.friction:g}")
            x = r.next_state.x
            if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > 1e4:
                elog.add_event(ts, "blow_up", "state overflow")
                elog.failed = True
                break
        if elog.failed:
            break
        if x[1] < cfg.fall_height or abs(x[2]) > 0.5 * np.pi:
            elog.add_event(t + cfg.dt, "fall", f"base z {x[1]:.3f}, pitch {x[2]:.3f}")
            elog.failed = True
            break
    return elog
