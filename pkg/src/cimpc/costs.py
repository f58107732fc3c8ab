"""Running and terminal costs with gradients and Gauss-Newton Hessians."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .model import RobotModel, _evaluate

SWING_HEIGHT = 1e-4


@dataclass(frozen=True)
class CostWeights:
    """Diagonal weights and cost-term parameters.

    ``W_x``/``W_u`` default from the per-group scalars when left as None.
    """

    w_pos: float = 1.0
    w_height: float = 10.0
    w_pitch: float = 10.0
    w_joint: float = 0.1
    w_vel: float = 5e-4
    w_u: float = 5e-4
    W_x: tuple | None = None
    W_u: tuple | None = None
    beta: float = 10.0
    foot: bool = False
    c_f: float = 1.0
    c_1: float = -30.0
    airtime: bool = False
    c_a: float = 2e3
    i_t: int = 12
    symmetric: bool = False
    c_s: float = 1e-2
    C_2: tuple = ((1.0, 0.0, -1.0, 0.0), (0.0, 1.0, 0.0, -1.0))

    def __post_init__(self):
        scal = (self.w_pos, self.w_height, self.w_pitch, self.w_joint, self.w_vel, self.w_u)
        if min(scal) < 0 or min(self.c_f, self.c_a, self.c_s) < 0:
            raise ValueError("cost weights must be non-negative")
        for w in (self.W_x, self.W_u):
            if w is not None and min(w) < 0:
                raise ValueError("cost weights must be non-negative")
        if self.beta <= 0:
            raise ValueError("terminal multiplier must be positive")
        if self.i_t < 1:
            raise ValueError("air-time threshold must be >= 1")

    def state_weights(self, model: RobotModel) -> np.ndarray:
        if self.W_x is not None:
            w = np.asarray(self.W_x, dtype=float)
            if w.shape != (model.nx,):
                raise ValueError(f"W_x needs {model.nx} entries")
            return w
        q = [self.w_pos, self.w_height, self.w_pitch] + [self.w_joint] * model.n_joints
        return np.array(q + [self.w_vel] * model.nv)

    def control_weights(self, model: RobotModel) -> np.ndarray:
        if self.W_u is not None:
            w = np.asarray(self.W_u, dtype=float)
            if w.shape != (model.n_joints,):
                raise ValueError(f"W_u needs {model.n_joints} entries")
            return w
        return np.full(model.n_joints, self.w_u)

    def with_(self, **changes) -> "CostWeights":
        return replace(self, **changes)


@dataclass(frozen=True)
class ReferenceConfig:
    q_ref: np.ndarray
    qdot_ref: np.ndarray
    u_ref: np.ndarray

    @classmethod
    def stance(cls, model: RobotModel, dx=0.0, dz=0.0, dpitch=0.0, x0=None, vx=0.0) -> "ReferenceConfig":
        """Nominal stance with a body offset; ``x0`` overrides the base x origin."""
        q = model.stance_q()
        if x0 is not None:
            q[0] = x0
        q[0] += dx
        q[1] += dz
        q[2] += dpitch
        qd = np.zeros(model.nv)
        qd[0] = vx
        return cls(q, qd, np.zeros(model.n_joints))

    @property
    def x_ref(self) -> np.ndarray:
        return np.concatenate([self.q_ref, self.qdot_ref])


@dataclass
class CostEval:
    value: float
    l_x: np.ndarray
    l_u: np.ndarray
    l_xx: np.ndarray
    l_uu: np.ndarray
    l_xu: np.ndarray

    @classmethod
    def zero(cls, nx, nu) -> "CostEval":
        return cls(0.0, np.zeros(nx), np.zeros(nu), np.zeros((nx, nx)), np.zeros((nu, nu)), np.zeros((nx, nu)))

    def __iadd__(self, o: "CostEval"):
        self.value += o.value
        self.l_x += o.l_x
        self.l_u += o.l_u
        self.l_xx += o.l_xx
        self.l_uu += o.l_uu
        self.l_xu += o.l_xu
        return self


@dataclass
class AirTimeSchedule:
    """``weights[k, i]`` for foot ``k`` at running knot ``i``."""

    weights: np.ndarray

    @classmethod
    def empty(cls, n_feet, horizon) -> "AirTimeSchedule":
        return cls(np.zeros((n_feet, horizon)))

    @property
    def horizon(self) -> int:
        return self.weights.shape[1]


def regulating_cost(model: RobotModel, x, u, ref: ReferenceConfig, weights: CostWeights, is_terminal=False) -> CostEval:
    nx, nu = model.nx, model.n_joints
    Wx = weights.state_weights(model) * (weights.beta if is_terminal else 1.0)
    e = np.asarray(x, dtype=float) - ref.x_ref
    ev = CostEval.zero(nx, nu)
    ev.value = float(e @ (Wx * e))
    ev.l_x = 2.0 * Wx * e
    ev.l_xx = np.diag(2.0 * Wx)
    if not is_terminal:
        Wu = weights.control_weights(model)
        eu = np.asarray(u, dtype=float) - ref.u_ref
        ev.value += float(eu @ (Wu * eu))
        ev.l_u = 2.0 * Wu * eu
        ev.l_uu = np.diag(2.0 * Wu)
    return ev


def _feet(model, x):
    nv = model.nv
    q, qd = x[:nv], x[nv:]
    _, _, pos, Jf, Hf = _evaluate(q, qd, model, 1)[:5]
    return q, qd, pos[:, 1] - model.ground_height, Jf, Hf


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def foot_residuals(model: RobotModel, x, weights: CostWeights):
    """Residuals ``sqrt(c_f S(c_1 phi)) v_t`` per foot and their Jacobians."""
    nv = model.nv
    x = np.asarray(x, dtype=float)
    q, qd, phi, Jf, Hf = _feet(model, x)
    K = model.n_contacts
    r = np.zeros(K)
    Jr = np.zeros((K, model.nx))
    for k in range(K):
        S = _sigmoid(weights.c_1 * phi[k])
        dS = weights.c_1 * S * (1.0 - S)
        vt = Jf[k, 0] @ qd
        dvt_dq = qd @ Hf[k, 0]
        sq = np.sqrt(weights.c_f * S)
        r[k] = sq * vt
        Jr[k, :nv] = np.sqrt(weights.c_f) * (0.5 * dS / np.sqrt(S) * vt * Jf[k, 1] + np.sqrt(S) * dvt_dq)
        Jr[k, nv:] = sq * Jf[k, 0]
    return r, Jr


def foot_cost(model: RobotModel, x, weights: CostWeights) -> CostEval:
    r, Jr = foot_residuals(model, x, weights)
    ev = CostEval.zero(model.nx, model.n_joints)
    ev.value = float(r @ r)
    ev.l_x = 2.0 * Jr.T @ r
    ev.l_xx = 2.0 * Jr.T @ Jr
    return ev


def airtime_residuals(model: RobotModel, x, schedule: AirTimeSchedule, i: int):
    x = np.asarray(x, dtype=float)
    _, _, phi, Jf, _ = _feet(model, x)
    w = np.sqrt(schedule.weights[:, i]) if 0 <= i < schedule.horizon else np.zeros(model.n_contacts)
    Jr = np.zeros((model.n_contacts, model.nx))
    Jr[:, : model.nv] = w[:, None] * Jf[:, 1, :]
    return w * phi, Jr


def airtime_cost(model: RobotModel, x, schedule: AirTimeSchedule, i: int) -> CostEval:
    ev = CostEval.zero(model.nx, model.n_joints)
    if not 0 <= i < schedule.horizon or not np.any(schedule.weights[:, i]):
        return ev
    r, Jr = airtime_residuals(model, x, schedule, i)
    ev.value = float(r @ r)
    ev.l_x = 2.0 * Jr.T @ r
    ev.l_xx = 2.0 * Jr.T @ Jr
    return ev


def symmetric_cost(model: RobotModel, u, weights: CostWeights) -> CostEval:
    C = np.asarray(weights.C_2, dtype=float)
    if C.shape[1] != model.n_joints:
        raise ValueError("pairing matrix does not match the number of joints")
    u = np.asarray(u, dtype=float)
    d = C @ u
    ev = CostEval.zero(model.nx, model.n_joints)
    ev.value = float(weights.c_s * d @ d)
    ev.l_u = 2.0 * weights.c_s * C.T @ d
    ev.l_uu = 2.0 * weights.c_s * C.T @ C
    return ev


def swing_runs(phis: np.ndarray) -> np.ndarray:
    """Longest run of consecutive swing knots per foot; ``phis`` is (knots, K)."""
    swing = np.asarray(phis) > SWING_HEIGHT
    best = np.zeros(swing.shape[1], dtype=int)
    run = np.zeros(swing.shape[1], dtype=int)
    for row in swing:
        run = np.where(row, run + 1, 0)
        best = np.maximum(best, run)
    return best


def update_airtime_schedule(prev: AirTimeSchedule, init_states, model: RobotModel, weights: CostWeights) -> AirTimeSchedule:
    """Shift the previous activations one knot earlier and add new ones.

    A foot whose swing run in ``init_states`` exceeds ``i_t`` knots gets
    ``c_a`` on knots ``i_t .. i_t+3``.
    """
    w = np.zeros_like(prev.weights)
    w[:, :-1] = prev.weights[:, 1:]
    phis = np.array([_evaluate(x[: model.nv], x[model.nv:], model, 0)[2][:, 1] for x in init_states])
    phis = phis - model.ground_height
    hit = swing_runs(phis) > weights.i_t
    hi = min(weights.i_t + 4, w.shape[1])
    for k in np.flatnonzero(hit):
        w[k, weights.i_t:hi] = weights.c_a
    return AirTimeSchedule(w)


@dataclass
class CostContext:
    """Everything the running/terminal cost needs for one problem."""

    model: RobotModel
    weights: CostWeights
    ref: ReferenceConfig
    schedule: AirTimeSchedule | None = None
    _Wx: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._Wx = self.weights.state_weights(self.model)


def total_cost(x, u, ctx: CostContext, i: int = 0, is_terminal: bool = False) -> CostEval:
    """Sum of enabled terms; the terminal knot evaluates regulating only."""
    m, w = ctx.model, ctx.weights
    ev = regulating_cost(m, x, u, ctx.ref, w, is_terminal)
    if is_terminal:
        return ev
    if w.foot:
        ev += foot_cost(m, x, w)
    if w.airtime and ctx.schedule is not None:
        ev += airtime_cost(m, x, ctx.schedule, i)
    if w.symmetric:
        ev += symmetric_cost(m, u, w)
    return ev


def cost_value(x, u, ctx: CostContext, i: int = 0, is_terminal: bool = False) -> float:
    """Value only (line-search path)."""
    m, w = ctx.model, ctx.weights
    e = np.asarray(x, dtype=float) - ctx.ref.x_ref
    Wx = ctx._Wx * (w.beta if is_terminal else 1.0)
    v = float(e @ (Wx * e))
    if is_terminal:
        return v
    eu = np.asarray(u, dtype=float) - ctx.ref.u_ref
    v += float(eu @ (w.control_weights(m) * eu))
    if w.foot:
        r, _ = foot_residuals(m, x, w)
        v += float(r @ r)
    if w.airtime and ctx.schedule is not None and 0 <= i < ctx.schedule.horizon and np.any(ctx.schedule.weights[:, i]):
        r, _ = airtime_residuals(m, x, ctx.schedule, i)
        v += float(r @ r)
    if w.symmetric:
        d = np.asarray(w.C_2) @ u
        v += float(w.c_s * d @ d)
    return v


class QuadraticCost:
    """``x'Qx + u'Ru`` running and ``x'Qf x`` terminal (for linear test problems)."""

    def __init__(self, Q, R, Qf, x_ref=None):
        self.Q, self.R, self.Qf = (np.asarray(a, dtype=float) for a in (Q, R, Qf))
        self.x_ref = np.zeros(self.Q.shape[0]) if x_ref is None else np.asarray(x_ref, dtype=float)

    def __call__(self, x, u, i, is_terminal=False) -> CostEval:
        e = np.asarray(x, dtype=float) - self.x_ref
        nx, nu = self.Q.shape[0], self.R.shape[0]
        ev = CostEval.zero(nx, nu)
        P = self.Qf if is_terminal else self.Q
        ev.value = float(e @ P @ e)
        ev.l_x = 2.0 * P @ e
        ev.l_xx = 2.0 * P
        if not is_terminal:
            ev.value += float(u @ self.R @ u)
            ev.l_u = 2.0 * self.R @ u
            ev.l_uu = 2.0 * self.R
        return ev
