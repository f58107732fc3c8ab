"""Feasibility-driven multiple-shooting DDP (and classic single-shooting DDP).

Dynamics objects expose ``step(x, u, i) -> (x_next, aux)`` and
``jacobians(x, u, i, aux) -> (f_x, f_u)``; cost objects are callables
``cost(x, u, i, is_terminal) -> CostEval`` with an optional ``value`` method.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .costs import CostContext, cost_value, total_cost
from .stepper import StepError, step_jacobians, step_x

log = logging.getLogger(__name__)

ALPHAS = tuple(2.0 ** -j for j in range(11))
REG_MIN, REG_MAX = 1e-9, 1e9


class BackwardPassError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# problem plumbing


class ContactDynamics:
    def __init__(self, model, dt, rho=0.0, drift=True):
        self.model, self.dt, self.rho, self.drift = model, dt, rho, drift

    def step(self, x, u, i=0):
        return step_x(self.model, x, u, self.dt, self.drift)

    def jacobians(self, x, u, i, aux):
        J = step_jacobians(self.model, x, u, self.dt, self.rho, aux, self.drift)
        return J.f_x, J.f_u


class LinearDynamics:
    def __init__(self, A, B):
        self.A, self.B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)

    def step(self, x, u, i=0):
        return self.A @ x + self.B @ u, None

    def jacobians(self, x, u, i, aux):
        return self.A, self.B


class TaskCost:
    def __init__(self, ctx: CostContext):
        self.ctx = ctx

    def __call__(self, x, u, i, is_terminal=False):
        return total_cost(x, u, self.ctx, i, is_terminal)

    def value(self, x, u, i, is_terminal=False):
        return cost_value(x, u, self.ctx, i, is_terminal)


@dataclass
class OcProblem:
    x0: np.ndarray
    N: int
    dt: float
    dynamics: object
    cost: object
    nu: int
    u_lb: np.ndarray | None = None
    u_ub: np.ndarray | None = None
    rho: float = 0.0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.N < 1 or self.dt <= 0 or self.rho < 0:
            raise ValueError("need N >= 1, dt > 0, rho >= 0")
        if (self.u_lb is None) != (self.u_ub is None):
            raise ValueError("give both control bounds or neither")
        if self.u_lb is not None:
            self.u_lb = np.asarray(self.u_lb, dtype=float)
            self.u_ub = np.asarray(self.u_ub, dtype=float)
            if np.any(self.u_lb > self.u_ub):
                raise ValueError("inconsistent control bounds")

    @property
    def nx(self) -> int:
        return self.x0.size

    def clamp(self, u):
        return u if self.u_lb is None else np.clip(u, self.u_lb, self.u_ub)

    def cost_value(self, x, u, i, terminal=False) -> float:
        f = getattr(self.cost, "value", None)
        return f(x, u, i, terminal) if f is not None else self.cost(x, u, i, terminal).value


def contact_problem(model, x0, N, dt, ctx: CostContext, rho=0.0, drift=True) -> OcProblem:
    lim = model.torque_limit
    return OcProblem(x0, N, dt, ContactDynamics(model, dt, rho, drift), TaskCost(ctx), model.n_joints, -lim, lim, rho)


@dataclass
class Trajectory:
    xs: np.ndarray  # (N+1, nx)
    us: np.ndarray  # (N, nu)
    fs: np.ndarray  # (N, nx) f(x_i, u_i)
    gaps: np.ndarray  # (N+1, nx)
    aux: list
    costs: np.ndarray  # (N+1,)

    @property
    def cost(self) -> float:
        return float(self.costs.sum())

    @property
    def gap_norm(self) -> float:
        return float(np.sum(np.abs(self.gaps)))

    @property
    def contacts(self) -> list:
        return [getattr(a, "contact", None) for a in self.aux]

    def copy(self) -> "Trajectory":
        return Trajectory(self.xs.copy(), self.us.copy(), self.fs.copy(), self.gaps.copy(), list(self.aux), self.costs.copy())


def compute_gaps(problem: OcProblem, xs, fs) -> np.ndarray:
    gaps = np.empty_like(xs)
    gaps[0] = problem.x0 - xs[0]
    gaps[1:] = fs - xs[1:]
    return gaps


def evaluate(problem: OcProblem, xs, us) -> Trajectory:
    """Shoot every interval from the given nodes and record gaps and costs."""
    xs = np.array(xs, dtype=float)
    us = np.array(us, dtype=float)
    N = problem.N
    fs = np.empty((N, problem.nx))
    aux = []
    costs = np.empty(N + 1)
    for i in range(N):
        fs[i], a = problem.dynamics.step(xs[i], us[i], i)
        aux.append(a)
        costs[i] = problem.cost_value(xs[i], us[i], i)
    costs[N] = problem.cost_value(xs[N], None, N, True)
    return Trajectory(xs, us, fs, compute_gaps(problem, xs, fs), aux, costs)


def rollout(problem: OcProblem, us, x0=None) -> Trajectory:
    """Sequential simulation of ``us`` from ``x0`` (feasible by construction)."""
    N = problem.N
    xs = np.empty((N + 1, problem.nx))
    xs[0] = problem.x0 if x0 is None else x0
    fs = np.empty((N, problem.nx))
    aux = []
    costs = np.empty(N + 1)
    us = np.array(us, dtype=float)
    for i in range(N):
        fs[i], a = problem.dynamics.step(xs[i], us[i], i)
        if not np.all(np.isfinite(fs[i])) or np.max(np.abs(fs[i])) > 1e6:
            raise RolloutDiverged(f"state overflow at knot {i}")
        xs[i + 1] = fs[i]
        aux.append(a)
        costs[i] = problem.cost_value(xs[i], us[i], i)
    costs[N] = problem.cost_value(xs[N], None, N, True)
    return Trajectory(xs, us, fs, compute_gaps(problem, xs, fs), aux, costs)


# ---------------------------------------------------------------------------
# derivatives, backward and forward passes


@dataclass
class Derivatives:
    fx: list
    fu: list
    costs: list  # CostEval per knot (N+1)


def linearize(problem: OcProblem, traj: Trajectory) -> Derivatives:
    fx, fu, ce = [], [], []
    for i in range(problem.N):
        A, B = problem.dynamics.jacobians(traj.xs[i], traj.us[i], i, traj.aux[i])
        fx.append(A)
        fu.append(B)
        ce.append(problem.cost(traj.xs[i], traj.us[i], i, False))
    ce.append(problem.cost(traj.xs[-1], None, problem.N, True))
    return Derivatives(fx, fu, ce)


@dataclass
class BackwardPassWorkspace:
    k: np.ndarray
    K: np.ndarray
    Q_u: list = field(default_factory=list)
    Q_uu: list = field(default_factory=list)
    V_x: list = field(default_factory=list)
    V_xx: list = field(default_factory=list)
    reg: float = 0.0
    clamped: np.ndarray | None = None


def backward_pass(problem: OcProblem, traj: Trajectory, d: Derivatives, reg: float) -> BackwardPassWorkspace:
    N, nx, nu = problem.N, problem.nx, problem.nu
    k = np.zeros((N, nu))
    K = np.zeros((N, nu, nx))
    clamped = np.zeros((N, nu), dtype=bool)
    ws = BackwardPassWorkspace(k, K, reg=reg, clamped=clamped)
    term = d.costs[N]
    Vx = term.l_x.copy()
    Vxx = term.l_xx.copy()
    ws.V_x.append(Vx)
    ws.V_xx.append(Vxx)
    gaps = traj.gaps
    for i in range(N - 1, -1, -1):
        c = d.costs[i]
        A, B = d.fx[i], d.fu[i]
        if not (np.all(np.isfinite(Vxx)) and np.all(np.isfinite(Vx))):
            raise BackwardPassError(f"non-finite value function at knot {i + 1}")
        Vx_d = Vx + Vxx @ gaps[i + 1]
        Qx = c.l_x + A.T @ Vx_d
        Qu = c.l_u + B.T @ Vx_d
        VA = Vxx @ A
        VB = Vxx @ B
        Qxx = c.l_xx + A.T @ VA
        Quu = c.l_uu + B.T @ VB
        Qxu = c.l_xu + A.T @ VB
        if not (np.all(np.isfinite(Quu)) and np.all(np.isfinite(Qxx))):
            raise BackwardPassError(f"non-finite value function at knot {i}")
        Quu_r = Quu + reg * np.eye(nu)
        try:
            L = np.linalg.cholesky(Quu_r)
        except np.linalg.LinAlgError:
            raise BackwardPassError(f"Q_uu not positive definite at knot {i} (reg {reg:.1e})") from None
        rhs = np.column_stack([Qu, Qxu.T])
        sol = -np.linalg.solve(L.T, np.linalg.solve(L, rhs))
        ki, Ki = sol[:, 0], sol[:, 1:]
        if problem.u_lb is not None:
            u = traj.us[i]
            target = u + ki
            lo = target < problem.u_lb
            hi = target > problem.u_ub
            ki = np.clip(target, problem.u_lb, problem.u_ub) - u
            cl = lo | hi
            Ki = Ki.copy()
            Ki[cl] = 0.0
            clamped[i] = cl
        k[i], K[i] = ki, Ki
        Vx = Qx + Ki.T @ (Quu @ ki) + Ki.T @ Qu + Qxu @ ki
        Vxx = Qxx + Ki.T @ Quu @ Ki + Ki.T @ Qxu.T + Qxu @ Ki
        Vxx = 0.5 * (Vxx + Vxx.T)
        ws.Q_u.append(Qu)
        ws.Q_uu.append(Quu)
        ws.V_x.append(Vx)
        ws.V_xx.append(Vxx)
    for lst in (ws.Q_u, ws.Q_uu, ws.V_x, ws.V_xx):
        lst.reverse()
    return ws


def expected_improvement(problem: OcProblem, traj: Trajectory, d: Derivatives, ws: BackwardPassWorkspace, single=False):
    """Coefficients ``(g, H)`` with ``Delta(alpha) = alpha g + alpha^2 H / 2``.

    Uses the linearized rollout of the update, which is linear in alpha.
    """
    N = problem.N
    dx = np.zeros(problem.nx) if single else traj.gaps[0].copy()
    g = 0.0
    H = 0.0
    for i in range(N):
        du = ws.k[i] + ws.K[i] @ dx
        c = d.costs[i]
        g += c.l_x @ dx + c.l_u @ du
        H += dx @ c.l_xx @ dx + 2.0 * dx @ c.l_xu @ du + du @ c.l_uu @ du
        dx = d.fx[i] @ dx + d.fu[i] @ du + (0.0 if single else traj.gaps[i + 1])
    c = d.costs[N]
    g += c.l_x @ dx
    H += dx @ c.l_xx @ dx
    return float(g), float(H)


class RolloutDiverged(RuntimeError):
    pass


def forward_pass(problem: OcProblem, traj: Trajectory, ws: BackwardPassWorkspace, alpha: float, single=False) -> Trajectory:
    N = problem.N
    xs = np.empty_like(traj.xs)
    us = np.empty_like(traj.us)
    fs = np.empty_like(traj.fs)
    aux = []
    costs = np.empty(N + 1)
    xs[0] = problem.x0 if single else problem.x0 + (alpha - 1.0) * traj.gaps[0]
    for i in range(N):
        us[i] = problem.clamp(traj.us[i] + alpha * ws.k[i] + ws.K[i] @ (xs[i] - traj.xs[i]))
        try:
            fs[i], a = problem.dynamics.step(xs[i], us[i], i)
        except StepError as e:
            raise RolloutDiverged(str(e)) from e
        if not np.all(np.isfinite(fs[i])) or np.max(np.abs(fs[i])) > 1e6:
            raise RolloutDiverged(f"state overflow at knot {i}")
        aux.append(a)
        costs[i] = problem.cost_value(xs[i], us[i], i)
        xs[i + 1] = fs[i] if single else fs[i] + (alpha - 1.0) * traj.gaps[i + 1]
    costs[N] = problem.cost_value(xs[N], None, N, True)
    return Trajectory(xs, us, fs, compute_gaps(problem, xs, fs), aux, costs)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class SolverSettings:
    max_iter: int = 100
    reg_init: float = REG_MIN
    th_stop: float = 1e-9
    th_gap: float = 1e-9
    th_cost: float = 1e-6
    th_accept: float = 0.1
    th_accept_neg: float = 2.0
    check_contraction: bool = True


@dataclass
class IterationRecord:
    cost: float
    gap_norm: float
    alpha: float
    reg: float
    accepted: bool
    expected: float = 0.0
    actual: float = 0.0
    contraction_err: float = 0.0


@dataclass
class SolveStats:
    iterations: int = 0
    converged: bool = False
    improved: bool = True
    records: list = field(default_factory=list)
    reg: float = REG_MIN

    @property
    def max_contraction_err(self) -> float:
        return max((r.contraction_err for r in self.records if r.accepted), default=0.0)


def _contraction_err(old: Trajectory, new: Trajectory, alpha: float) -> float:
    scale = max(1.0, float(np.max(np.abs(new.xs))))
    return float(np.max(np.abs(new.gaps - (1.0 - alpha) * old.gaps))) / scale


def solve(problem: OcProblem, init: Trajectory, settings: SolverSettings | None = None, single: bool = False):
    """Run FDDP (or DDP with ``single``) from ``init``; returns ``(Trajectory, SolveStats)``."""
    s = settings or SolverSettings()
    traj = init
    reg = s.reg_init
    stats = SolveStats(reg=reg)
    d = None
    while stats.iterations < s.max_iter:
        if d is None:
            d = linearize(problem, traj)
        try:
            ws = backward_pass(problem, traj, d, reg)
        except BackwardPassError:
            reg = min(reg * 10.0, REG_MAX * 10.0)
            if reg > REG_MAX:
                stats.improved = False
                break
            continue
        g, H = expected_improvement(problem, traj, d, ws, single)
        gap_norm = traj.gap_norm
        if gap_norm < s.th_gap and abs(g) < s.th_stop * max(1.0, abs(traj.cost)):
            stats.converged = True
            break
        stats.iterations += 1
        accepted = False
        for alpha in ALPHAS:
            expected = alpha * g + 0.5 * alpha * alpha * H
            try:
                cand = forward_pass(problem, traj, ws, alpha, single)
            except RolloutDiverged as e:
                log.debug("rollout diverged at alpha=%g: %s", alpha, e)
                continue
            actual = cand.cost - traj.cost
            if expected <= 0.0:
                ok = actual <= s.th_accept * expected
            else:
                ok = actual <= s.th_accept_neg * expected
            if ok:
                rec = IterationRecord(cand.cost, cand.gap_norm, alpha, reg, True, expected, actual)
                if s.check_contraction and not single:
                    rec.contraction_err = _contraction_err(traj, cand, alpha)
                stats.records.append(rec)
                prev_cost = traj.cost
                traj = cand
                d = None
                accepted = True
                if alpha == 1.0:
                    reg = max(reg / 10.0, REG_MIN)
                break
        if not accepted:
            stats.records.append(IterationRecord(traj.cost, traj.gap_norm, 0.0, reg, False, g + 0.5 * H))
            reg = reg * 10.0
            if reg > REG_MAX:
                stats.improved = False
                break
            continue
        if traj.gap_norm < s.th_gap and abs(prev_cost - traj.cost) < s.th_cost:
            stats.converged = True
            break
    stats.reg = reg
    return traj, stats


def solve_single_shooting(problem: OcProblem, us, settings: SolverSettings | None = None):
    """Classic DDP: the controls are rolled out from ``x0`` and every iterate stays feasible."""
    return solve(problem, rollout(problem, us), settings, single=True)
