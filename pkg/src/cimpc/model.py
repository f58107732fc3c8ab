"""Planar floating-base legged robot: kinematics, dynamics and their partials.

Configuration ``q = (x, z, pitch, joints...)``; the base moves in the x-z
plane and every joint rotates about the same (y) axis, so all link angles
are sums of coordinates and positions are sums of rotated constant vectors::

    p(q) = (x, z) + sum_t R(s_t . q) r_t

This makes every derivative of a point position closed form: with
``S = [[0, -1], [1, 0]]``, ``d R(a) / da = S R(a)`` and ``S @ S = -I``.
Mass matrix and bias forces are assembled body by body from point Jacobians
(``M = sum m Jv'Jv + I w w'``, ``h = sum m Jv'(qd'H qd + g)``), which is
Newton-Euler written in generalized coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ._backend import kernel

SEPARATING, CLAMPING, SLIDING = 0, 1, 2


@dataclass(frozen=True)
class LegSpec:
    """Serial leg hanging from the base; zero-angle links point straight down."""

    hip: tuple[float, float]
    lengths: tuple[float, ...] = (0.25, 0.25)
    masses: tuple[float, ...] = (1.0, 1.0)
    inertias: tuple[float, ...] | None = None
    stance: tuple[float, ...] = (-0.6, 1.2)
    name: str = ""

    def link_inertias(self) -> tuple[float, ...]:
        if self.inertias is not None:
            return tuple(self.inertias)
        # slender rod about its centre
        return tuple(m * l * l / 12.0 for m, l in zip(self.masses, self.lengths))


def default_legs() -> tuple[LegSpec, ...]:
    return (
        LegSpec(hip=(0.3, 0.0), name="front"),
        LegSpec(hip=(-0.3, 0.0), name="hind"),
    )


@dataclass(frozen=True)
class RobotModel:
    base_mass: float = 10.0
    base_inertia: float = 0.3
    legs: tuple[LegSpec, ...] = field(default_factory=default_legs)
    gravity: float = 9.81
    friction: float = 0.8
    torque_limits: tuple[float, ...] | None = None
    ground_height: float = 0.0

    def __post_init__(self):
        if self.base_mass <= 0 or self.base_inertia <= 0:
            raise ValueError("base mass and inertia must be positive")
        for leg in self.legs:
            n = len(leg.lengths)
            if len(leg.masses) != n or len(leg.stance) != n:
                raise ValueError(f"leg {leg.name!r}: lengths/masses/stance size mismatch")
            if len(leg.link_inertias()) != n:
                raise ValueError(f"leg {leg.name!r}: inertias size mismatch")
            vals = list(leg.lengths) + list(leg.masses) + list(leg.link_inertias())
            if any(v <= 0 for v in vals):
                raise ValueError(f"leg {leg.name!r}: lengths, masses and inertias must be positive")
        if self.friction < 0:
            raise ValueError("friction coefficient must be >= 0")
        if self.torque_limits is not None:
            if len(self.torque_limits) != self.n_joints:
                raise ValueError("one torque limit per joint required")
            if any(t <= 0 for t in self.torque_limits):
                raise ValueError("torque limits must be positive")

    # -- sizes ---------------------------------------------------------
    @property
    def n_joints(self) -> int:
        return sum(len(leg.lengths) for leg in self.legs)

    @property
    def nv(self) -> int:
        return 3 + self.n_joints

    @property
    def nx(self) -> int:
        return 2 * self.nv

    @property
    def n_contacts(self) -> int:
        return len(self.legs)

    @property
    def contact_points(self) -> tuple[str, ...]:
        return tuple(leg.name or f"foot{k}" for k, leg in enumerate(self.legs))

    @property
    def total_mass(self) -> float:
        return self.base_mass + sum(sum(leg.masses) for leg in self.legs)

    @cached_property
    def torque_limit(self) -> np.ndarray:
        if self.torque_limits is None:
            return np.full(self.n_joints, 50.0)
        return np.asarray(self.torque_limits, dtype=float)

    @cached_property
    def B(self) -> np.ndarray:
        B = np.zeros((self.nv, self.n_joints))
        B[3:, :] = np.eye(self.n_joints)
        return B

    def with_(self, **changes) -> "RobotModel":
        from dataclasses import replace

        return replace(self, **changes)

    # -- nominal stance ------------------------------------------------
    @cached_property
    def stance_joints(self) -> np.ndarray:
        return np.array([a for leg in self.legs for a in leg.stance], dtype=float)

    @cached_property
    def stance_height(self) -> float:
        """Base height that puts the feet on the ground in the nominal stance."""
        if not self.legs:
            return self.ground_height
        q = np.zeros(self.nv)
        q[3:] = self.stance_joints
        feet = _evaluate(q, np.zeros(self.nv), self, 1)[2]
        return self.ground_height - float(np.min(feet[:, 1]))

    def stance_q(self) -> np.ndarray:
        q = np.zeros(self.nv)
        q[1] = self.stance_height
        q[3:] = self.stance_joints
        return q

    def stance_state(self) -> "GeneralizedState":
        return GeneralizedState(self.stance_q(), np.zeros(self.nv))

    # -- tables for the kernels ---------------------------------------
    @cached_property
    def tables(self) -> "_Tables":
        return _build_tables(self)


@dataclass(frozen=True)
class GeneralizedState:
    q: np.ndarray
    qdot: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        qd = np.asarray(self.qdot, dtype=float)
        if q.shape != qd.shape or q.ndim != 1:
            raise ValueError("q and qdot must be 1-D with equal size")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
            raise ValueError("state has non-finite entries")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "qdot", qd)

    @property
    def x(self) -> np.ndarray:
        return np.concatenate([self.q, self.qdot])

    @classmethod
    def from_x(cls, x) -> "GeneralizedState":
        x = np.asarray(x, dtype=float)
        n = x.shape[0] // 2
        return cls(x[:n].copy(), x[n:].copy())


@dataclass
class DynamicsPartials:
    dqdd_dq: np.ndarray
    dqdd_dqdot: np.ndarray
    dqdd_du: np.ndarray
    kinematic_hessian_term: np.ndarray
    dphi_dq: np.ndarray  # (n_contacts, nv)
    dJ_dq: np.ndarray  # (n_contacts, 2, nv, nv); [k, row, col, coordinate]
    qdd: np.ndarray


@dataclass(frozen=True)
class _Tables:
    term_point: np.ndarray
    term_sel: np.ndarray
    term_r: np.ndarray
    n_points: int
    body_point: np.ndarray
    body_mass: np.ndarray
    body_inertia: np.ndarray
    body_wsel: np.ndarray
    foot_point: np.ndarray


def _build_tables(model: RobotModel) -> _Tables:
    nv = model.nv
    terms: list[tuple[int, np.ndarray, tuple[float, float]]] = []
    body_point, body_mass, body_inertia, body_wsel = [], [], [], []
    foot_point = []

    pitch = np.zeros(nv)
    pitch[2] = 1.0
    # point 0: base centre of mass
    n_points = 1
    body_point.append(0)
    body_mass.append(model.base_mass)
    body_inertia.append(model.base_inertia)
    body_wsel.append(pitch.copy())

    j0 = 3
    for leg in model.legs:
        hip_term = (pitch.copy(), tuple(leg.hip))
        chain: list[tuple[np.ndarray, tuple[float, float]]] = []
        if leg.hip[0] != 0.0 or leg.hip[1] != 0.0:
            chain.append(hip_term)
        sel = pitch.copy()
        inertias = leg.link_inertias()
        for i, length in enumerate(leg.lengths):
            sel = sel.copy()
            sel[j0 + i] = 1.0
            com = chain + [(sel, (0.0, -0.5 * length))]
            for s, r in com:
                terms.append((n_points, s, r))
            body_point.append(n_points)
            body_mass.append(leg.masses[i])
            body_inertia.append(inertias[i])
            body_wsel.append(sel.copy())
            n_points += 1
            chain = chain + [(sel, (0.0, -length))]
        for s, r in chain:
            terms.append((n_points, s, r))
        foot_point.append(n_points)
        n_points += 1
        j0 += len(leg.lengths)

    T = len(terms)
    term_point = np.array([t[0] for t in terms], dtype=np.int64).reshape(T)
    term_sel = np.array([t[1] for t in terms], dtype=float).reshape(T, nv)
    term_r = np.array([t[2] for t in terms], dtype=float).reshape(T, 2)
    return _Tables(
        term_point=term_point,
        term_sel=term_sel,
        term_r=term_r,
        n_points=n_points,
        body_point=np.array(body_point, dtype=np.int64),
        body_mass=np.array(body_mass, dtype=float),
        body_inertia=np.array(body_inertia, dtype=float),
        body_wsel=np.array(body_wsel, dtype=float).reshape(len(body_point), nv),
        foot_point=np.array(foot_point, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# kernels


@kernel
def point_derivatives(q, term_point, term_sel, term_r, n_points, order):
    """Positions and their first ``order`` (<= 3) derivatives for every point.

    Returns ``pos (P, 2)``, ``J (P, 2, n)``, ``H (P, 2, n, n)`` and
    ``T (P, 2, n, n, n)``; arrays beyond ``order`` are returned zero-sized.
    """
    n = q.shape[0]
    P = n_points
    pos = np.zeros((P, 2))
    J = np.zeros((P, 2, n))
    nh = n if order >= 2 else 0
    nt = n if order >= 3 else 0
    H = np.zeros((P, 2, nh, nh))
    T = np.zeros((P, 2, nt, nt, nt))
    for p in range(P):
        pos[p, 0] = q[0]
        pos[p, 1] = q[1]
        J[p, 0, 0] = 1.0
        J[p, 1, 1] = 1.0
    for t in range(term_point.shape[0]):
        p = term_point[t]
        a = 0.0
        for i in range(n):
            a += term_sel[t, i] * q[i]
        c = np.cos(a)
        s = np.sin(a)
        rx = c * term_r[t, 0] - s * term_r[t, 1]
        rz = s * term_r[t, 0] + c * term_r[t, 1]
        pos[p, 0] += rx
        pos[p, 1] += rz
        # S @ (rx, rz)
        sx = -rz
        sz = rx
        for i in range(n):
            wi = term_sel[t, i]
            if wi == 0.0:
                continue
            J[p, 0, i] += wi * sx
            J[p, 1, i] += wi * sz
            if order < 2:
                continue
            for j in range(n):
                wj = term_sel[t, j]
                if wj == 0.0:
                    continue
                H[p, 0, i, j] -= wi * wj * rx
                H[p, 1, i, j] -= wi * wj * rz
                if order < 3:
                    continue
                for k in range(n):
                    wk = term_sel[t, k]
                    if wk == 0.0:
                        continue
                    T[p, 0, i, j, k] -= wi * wj * wk * sx
                    T[p, 1, i, j, k] -= wi * wj * wk * sz
    return pos, J, H, T


@kernel
def rigid_body_terms(
    q, qd, term_point, term_sel, term_r, n_points,
    body_point, body_mass, body_inertia, body_wsel, foot_point,
    gravity, partials,
):
    """Mass matrix, bias forces, foot kinematics and (optionally) their partials.

    Returns ``M, h, feet_pos (K, 2), feet_J (K, 2, n), feet_H (K, 2, n, n),
    dM (n, n, n) [row, col, coordinate], dh_dq (n, n), dh_dqd (n, n)``.
    """
    n = q.shape[0]
    order = 3 if partials else 2
    pos, J, H, T = point_derivatives(q, term_point, term_sel, term_r, n_points, order)
    M = np.zeros((n, n))
    h = np.zeros(n)
    nd = n if partials else 0
    dM = np.zeros((n, n, nd))
    dh_dq = np.zeros((n, nd))
    dh_dqd = np.zeros((n, nd))
    for b in range(body_point.shape[0]):
        p = body_point[b]
        m = body_mass[b]
        I = body_inertia[b]
        # velocity-product acceleration a = qd' H qd, plus gravity
        acc = np.zeros(2)
        Hqd = np.zeros((2, n))
        for c in range(2):
            for i in range(n):
                s = 0.0
                for j in range(n):
                    s += H[p, c, i, j] * qd[j]
                Hqd[c, i] = s
                acc[c] += s * qd[i]
        acc[1] += gravity
        for i in range(n):
            wi = body_wsel[b, i]
            for j in range(n):
                M[i, j] += m * (J[p, 0, i] * J[p, 0, j] + J[p, 1, i] * J[p, 1, j]) + I * wi * body_wsel[b, j]
            h[i] += m * (J[p, 0, i] * acc[0] + J[p, 1, i] * acc[1])
        if not partials:
            continue
        for i in range(n):
            for j in range(n):
                # d h_i / d qd_j = m Jc_i . 2 H_c[j, :] qd
                dh_dqd[i, j] += m * 2.0 * (J[p, 0, i] * Hqd[0, j] + J[p, 1, i] * Hqd[1, j])
        for k in range(n):
            # qd' T[:, :, :, k] qd
            tq = np.zeros(2)
            for c in range(2):
                s = 0.0
                for i in range(n):
                    for j in range(n):
                        s += T[p, c, i, j, k] * qd[i] * qd[j]
                tq[c] = s
            for i in range(n):
                dh_dq[i, k] += m * (H[p, 0, i, k] * acc[0] + H[p, 1, i, k] * acc[1]
                                    + J[p, 0, i] * tq[0] + J[p, 1, i] * tq[1])
                for j in range(n):
                    dM[i, j, k] += m * (H[p, 0, i, k] * J[p, 0, j] + H[p, 1, i, k] * J[p, 1, j]
                                        + J[p, 0, i] * H[p, 0, j, k] + J[p, 1, i] * H[p, 1, j, k])
    K = foot_point.shape[0]
    feet_pos = np.zeros((K, 2))
    feet_J = np.zeros((K, 2, n))
    feet_H = np.zeros((K, 2, n, n))
    for k in range(K):
        p = foot_point[k]
        feet_pos[k, :] = pos[p, :]
        feet_J[k, :, :] = J[p, :, :]
        feet_H[k, :, :, :] = H[p, :, :, :]
    return M, h, feet_pos, feet_J, feet_H, dM, dh_dq, dh_dqd


def _evaluate(q, qd, model: RobotModel, level: int):
    tb = model.tables
    return rigid_body_terms(
        np.ascontiguousarray(q, dtype=float), np.ascontiguousarray(qd, dtype=float),
        tb.term_point, tb.term_sel, tb.term_r, tb.n_points,
        tb.body_point, tb.body_mass, tb.body_inertia, tb.body_wsel, tb.foot_point,
        float(model.gravity), level >= 2,
    )


# ---------------------------------------------------------------------------
# public operations


def mass_matrix(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    M = _evaluate(q, np.zeros_like(q), model, 1)[0]
    return 0.5 * (M + M.T)


def bias_forces(model: RobotModel, q, qdot) -> np.ndarray:
    return _evaluate(q, qdot, model, 1)[1]


def gravity_forces(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return bias_forces(model, q, np.zeros_like(q))


def foot_kinematics(model: RobotModel, q, k: int) -> tuple[float, float]:
    """Signed foot height above the ground and tangential (x) foot position."""
    if not 0 <= k < model.n_contacts:
        raise IndexError(f"contact index {k} out of range")
    pos = _evaluate(q, np.zeros_like(np.asarray(q, dtype=float)), model, 1)[2]
    return float(pos[k, 1] - model.ground_height), float(pos[k, 0])


def contact_jacobian(model: RobotModel, q, k: int) -> np.ndarray:
    """Rows (tangential, normal) of the world-aligned foot velocity Jacobian."""
    if not 0 <= k < model.n_contacts:
        raise IndexError(f"contact index {k} out of range")
    return _evaluate(q, np.zeros_like(np.asarray(q, dtype=float)), model, 1)[3][k].copy()


def forward_dynamics_partials(model: RobotModel, q, qdot, u, lam, dt) -> DynamicsPartials:
    """Partials of ``qdd = M^-1 (-h + B u + J' lam / dt)`` with ``lam`` frozen.

    ``lam`` is ``(n_contacts, 2)`` in (tangential, normal) per foot.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    u = np.asarray(u, dtype=float)
    lam = np.asarray(lam, dtype=float).reshape(model.n_contacts, 2)
    M, h, feet, Jf, Hf, dM, dh_dq, dh_dqd = _evaluate(q, qdot, model, 2)
    return _partials_from_terms(model, M, h, Jf, Hf, dM, dh_dq, dh_dqd, u, lam, dt)


def _partials_from_terms(model, M, h, Jf, Hf, dM, dh_dq, dh_dqd, u, lam, dt, Minv=None):
    nv = model.nv
    if Minv is None:
        Minv = np.linalg.inv(M)
    gen_impulse = np.einsum("krn,kr->n", Jf, lam) if lam.size else np.zeros(nv)
    qdd = Minv @ (-h + model.B @ u + gen_impulse / dt)
    # d(J' lam)/dq: sum_k sum_r lam[k, r] dJ[k, r, :, c]
    dJt_lam = np.einsum("krnc,kr->nc", Hf, lam) if lam.size else np.zeros((nv, nv))
    kin = Minv @ dJt_lam / dt
    dq = -Minv @ (np.einsum("ijc,j->ic", dM, qdd) + dh_dq) + kin
    dqd = -Minv @ dh_dqd
    du = Minv @ model.B
    return DynamicsPartials(
        dqdd_dq=dq,
        dqdd_dqdot=dqd,
        dqdd_du=du,
        kinematic_hessian_term=kin,
        dphi_dq=Jf[:, 1, :].copy(),
        dJ_dq=Hf,
        qdd=qdd,
    )
