"""Semi-implicit Euler time stepping with hard contact and its Jacobians."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contact import (
    ContactSolution,
    ContactSolverError,
    DelassusSystem,
    LAMBDA_FLOOR,
    delassus_from_operator,
    expand_gradient,
    impulse_gradient,
    solve_candidates,
)
from .model import SEPARATING, GeneralizedState, RobotModel, _evaluate, _partials_from_terms


class StepError(RuntimeError):
    pass


@dataclass
class _Knot:
    """Quantities of one step kept for differentiation."""

    q: np.ndarray
    qdot: np.ndarray
    u: np.ndarray
    dt: float
    M: np.ndarray
    Minv: np.ndarray
    h: np.ndarray
    Jf: np.ndarray  # (K, 2, nv)
    cand: np.ndarray  # candidate point indices
    W: np.ndarray
    vfree: np.ndarray
    drift: np.ndarray
    qd_free: np.ndarray
    qd_next: np.ndarray


@dataclass
class StepResult:
    next_state: GeneralizedState
    contact: ContactSolution
    phi_before: np.ndarray
    phi_after: np.ndarray
    knot: _Knot = field(repr=False, default=None)

    @property
    def impulses(self) -> np.ndarray:
        return self.contact.impulses

    @property
    def modes(self) -> np.ndarray:
        return self.contact.modes


@dataclass
class StepJacobians:
    f_x: np.ndarray
    f_u: np.ndarray
    rho: float
    singular: bool = False


def _as_state(state) -> GeneralizedState:
    if isinstance(state, GeneralizedState):
        return state
    return GeneralizedState.from_x(state)


def _terms(model: RobotModel, q, qd, u, dt):
    M, h, feet, Jf, Hf = _evaluate(q, qd, model, 1)[:5]
    M = 0.5 * (M + M.T)
    Minv = np.linalg.inv(M)
    qd_free = qd + dt * (Minv @ (-h + model.B @ u))
    phi = feet[:, 1] - model.ground_height
    return M, Minv, h, feet, Jf, qd_free, phi


def _candidates(phi, Jf, qd_free, dt):
    return np.flatnonzero((phi <= 0.0) | (phi + dt * (Jf[:, 1, :] @ qd_free) <= 0.0))


def detect_contacts(model: RobotModel, state, u, dt: float) -> np.ndarray:
    """Indices of feet that touch or are predicted to touch the ground."""
    s = _as_state(state)
    _, _, _, _, Jf, qd_free, phi = _terms(model, s.q, s.qdot, np.asarray(u, dtype=float), dt)
    return _candidates(phi, Jf, qd_free, dt)


def _solve(model, q, qd, u, dt, drift_on, candidates=None):
    M, Minv, h, feet, Jf, qd_free, phi = _terms(model, q, qd, u, dt)
    K = model.n_contacts
    cand = _candidates(phi, Jf, qd_free, dt) if candidates is None else np.asarray(candidates, dtype=np.int64)
    lam = np.zeros((K, 2))
    modes = np.zeros(K, dtype=np.int64)
    thetas = np.zeros(K)
    drift_full = np.zeros(K)
    sweeps, change, polished = 0, 0.0, False
    if cand.size:
        Jc = Jf[cand].reshape(-1, model.nv)
        W = Jc @ Minv @ Jc.T
        vfree = Jc @ qd_free
        drift = phi[cand] / dt if drift_on else np.zeros(cand.size)
        lc, mc, tc, sweeps, change, polished = solve_candidates(W, vfree, drift, model.friction, 2)
        lam[cand] = lc
        modes[cand] = mc
        thetas[cand] = tc
        drift_full[cand] = drift
    else:
        W = np.zeros((0, 0))
        vfree = np.zeros(0)
        drift = np.zeros(0)
    qd_next = qd_free + Minv @ np.einsum("krn,kr->n", Jf, lam)
    mask = np.zeros(K, dtype=bool)
    mask[cand] = True
    sol = ContactSolution(
        impulses=lam,
        modes=modes,
        velocities=np.einsum("krn,n->kr", Jf, qd_next),
        thetas=thetas,
        candidates=mask,
        drift=drift_full,
        sweeps=int(sweeps),
        change=float(change),
        polished=bool(polished),
    )
    knot = _Knot(q, qd, u, dt, M, Minv, h, Jf, cand, W, vfree, drift, qd_free, qd_next)
    return sol, phi, knot


def step(model: RobotModel, state, u, dt: float, drift: bool = True) -> StepResult:
    """One velocity-level step; ``drift`` toggles the ``phi/dt`` bias."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    s = _as_state(state)
    u = np.asarray(u, dtype=float)
    try:
        sol, phi, knot = _solve(model, s.q, s.qdot, u, dt, drift)
    except ContactSolverError as e:
        raise StepError(f"contact solve failed at q={s.q.tolist()}: {e}") from e
    q_next = s.q + dt * knot.qd_next
    if not (np.all(np.isfinite(q_next)) and np.all(np.isfinite(knot.qd_next))):
        raise StepError("non-finite state after step")
    phi_after = _evaluate(q_next, knot.qd_next, model, 0)[2][:, 1] - model.ground_height
    return StepResult(GeneralizedState(q_next, knot.qd_next), sol, phi, phi_after, knot)


def step_x(model: RobotModel, x, u, dt: float, drift: bool = True) -> tuple[np.ndarray, StepResult]:
    r = step(model, GeneralizedState.from_x(x), u, dt, drift)
    return r.next_state.x, r


def step_delassus(model: RobotModel, result: StepResult, floor: float = LAMBDA_FLOOR) -> DelassusSystem | None:
    """Active-set system of an evaluated step; None when nothing is active."""
    kn = result.knot
    sol = result.contact
    if kn.cand.size == 0:
        return None
    sub_modes = sol.modes[kn.cand].copy()
    sub_lam = sol.impulses[kn.cand]
    if floor > 0:
        sub_modes[(sub_modes != SEPARATING) & (sub_lam[:, 1] < floor)] = SEPARATING
    if not np.any(sub_modes != SEPARATING):
        return None
    return delassus_from_operator(kn.W, kn.vfree, kn.drift, sub_lam, sub_modes, sol.thetas[kn.cand], model.friction, 2)


def step_jacobians(
    model: RobotModel, state, u, dt: float, rho: float, result: StepResult | None = None, drift: bool = True
) -> StepJacobians:
    """State-transition Jacobians with the relaxed impulse gradient (modes frozen)."""
    s = _as_state(state)
    u = np.asarray(u, dtype=float)
    if result is None:
        result = step(model, s, u, dt, drift)
    kn = result.knot
    nv, nj = model.nv, model.n_joints
    lam = result.contact.impulses
    M, h, _, Jf, Hf, dM, dh_dq, dh_dqd = _evaluate(s.q, s.qdot, model, 2)
    P = _partials_from_terms(model, kn.M, kn.h, Jf, Hf, dM, dh_dq, dh_dqd, u, lam, dt, Minv=kn.Minv)
    # d qd_next / d xi with impulses frozen, xi = (q, qdot, u)
    D = np.empty((nv, 2 * nv + nj))
    D[:, :nv] = dt * P.dqdd_dq
    D[:, nv:2 * nv] = np.eye(nv) + dt * P.dqdd_dqdot
    D[:, 2 * nv:] = dt * P.dqdd_du
    singular = False
    dl = step_delassus(model, result)
    if dl is not None:
        pts = kn.cand[dl.row_point]
        comps = dl.row_comp
        R = Jf[pts, comps, :]  # active constraint rows
        dR_q = np.einsum("mnc,n->mc", Hf[pts, comps], kn.qd_next)
        rhs = R @ D
        rhs[:, :nv] += dR_q
        if drift:
            normal = comps == 1
            rhs[normal, :nv] += R[normal] / dt
        dlam_c = impulse_gradient(dl, rho, rhs=rhs)
        singular = dl.singular
        dlam_sub = expand_gradient(dl, dlam_c, kn.cand.size)
        dlam = np.zeros((model.n_contacts, 2, D.shape[1]))
        dlam[kn.cand] = dlam_sub
        D = D + kn.Minv @ np.einsum("krn,krp->np", Jf, dlam)
    F = np.empty((2 * nv, 2 * nv + nj))
    F[nv:] = D
    F[:nv] = dt * D
    F[:nv, :nv] += np.eye(nv)
    return StepJacobians(f_x=F[:, :2 * nv], f_u=F[:, 2 * nv:], rho=float(rho), singular=singular)


def gravity_compensation(model: RobotModel, q=None) -> np.ndarray:
    """Smallest joint torques holding ``q`` static with all feet loaded.

    Minimizes ``|u|`` over ``B u + sum_k J_k' f_k = g(q)``; the foot forces
    ``f`` are free (internal squeeze is allowed).
    """
    q = model.stance_q() if q is None else np.asarray(q, dtype=float)
    _, h, _, Jf = _evaluate(q, np.zeros_like(q), model, 1)[:4]
    nj = model.n_joints
    A = np.hstack([model.B] + [Jf[k].T for k in range(model.n_contacts)])
    z0 = np.linalg.lstsq(A, h, rcond=None)[0]
    _, sv, Vt = np.linalg.svd(A)
    rank = int(np.sum(sv > 1e-10 * sv[0]))
    null = Vt[rank:].T
    if null.size:
        w = np.linalg.lstsq(null[:nj], -z0[:nj], rcond=None)[0]
        z0 = z0 + null @ w
    return z0[:nj]
