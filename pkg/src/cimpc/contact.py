"""Hard-contact impulses and their gradients.

Per contact point the impulse minimizes the post-step contact kinetic
energy ``v' M_app v`` with ``v = c + M_app^-1 lam`` subject to velocity-level
Signorini and Coulomb cone conditions; contacts are coupled by a nonlinear
block Gauss-Seidel sweep. Contact frames are world aligned and ordered
``(tangential..., normal)``; ``dim`` is 2 for the planar robot and 3 for
spatial problems.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._backend import kernel
from .model import CLAMPING, SEPARATING, SLIDING

MODE_NAMES = {SEPARATING: "Separating", CLAMPING: "Clamping", SLIDING: "Sliding"}

GS_MAX_SWEEPS = 50
GS_TOL = 1e-10
BISECT_TOL = 1e-10
BISECT_MAX_ITER = 80
LAMBDA_FLOOR = 1e-6
TIKHONOV = 1e-10
_SCAN = 128


class DegenerateInertiaError(ValueError):
    """Apparent inertia is not symmetric positive definite."""


class ContactSolverError(RuntimeError):
    def __init__(self, message, residual=None, impulses=None):
        super().__init__(message)
        self.residual = residual
        self.impulses = impulses


# ---------------------------------------------------------------------------
# kernels


@kernel
def _cone_dir(theta, mu, dim):
    E = np.zeros(dim)
    if dim == 2:
        E[0] = mu * np.cos(theta)
    else:
        E[0] = mu * np.cos(theta)
        E[1] = mu * np.sin(theta)
    E[dim - 1] = 1.0
    return E


@kernel
def _cone_eval(theta, G, Mapp, c, mu, dim):
    """Objective and its theta-derivative on the cone boundary with v_n = 0."""
    n = dim - 1
    E = _cone_dir(theta, mu, dim)
    dE = np.zeros(dim)
    dE[0] = -mu * np.sin(theta)
    if dim == 3:
        dE[1] = mu * np.cos(theta)
    g = 0.0
    dg = 0.0
    for i in range(dim):
        g += G[n, i] * E[i]
        dg += G[n, i] * dE[i]
    if g <= 1e-300:
        return np.inf, 0.0, E * 0.0
    ln = -c[n] / g
    dln = c[n] * dg / (g * g)
    lam = E * ln
    dlam = dE * ln + E * dln
    v = c + G @ lam
    dv = G @ dlam
    Mv = Mapp @ v
    f = 0.0
    df = 0.0
    for i in range(dim):
        f += v[i] * Mv[i]
        df += 2.0 * Mv[i] * dv[i]
    return f, df, lam


@kernel
def _refine(lo, hi, G, Mapp, c, mu, dim):
    """Bisection on the sign of df/dtheta inside [lo, hi]."""
    flo, dlo, _ = _cone_eval(lo, G, Mapp, c, mu, dim)
    fhi, dhi, _ = _cone_eval(hi, G, Mapp, c, mu, dim)
    it = 0
    if dlo < 0.0 and dhi > 0.0:
        while hi - lo > BISECT_TOL and it < BISECT_MAX_ITER:
            mid = 0.5 * (lo + hi)
            fm, dm, _ = _cone_eval(mid, G, Mapp, c, mu, dim)
            if dm > 0.0:
                hi = mid
            else:
                lo = mid
            it += 1
        th = 0.5 * (lo + hi)
    else:
        # no sign change: golden-section on the bracket
        gr = 0.6180339887498949
        a = lo
        b = hi
        x1 = b - gr * (b - a)
        x2 = a + gr * (b - a)
        f1 = _cone_eval(x1, G, Mapp, c, mu, dim)[0]
        f2 = _cone_eval(x2, G, Mapp, c, mu, dim)[0]
        while b - a > BISECT_TOL and it < 4 * BISECT_MAX_ITER:
            if f1 < f2:
                b = x2
                x2 = x1
                f2 = f1
                x1 = b - gr * (b - a)
                f1 = _cone_eval(x1, G, Mapp, c, mu, dim)[0]
            else:
                a = x1
                x1 = x2
                f1 = f2
                x2 = a + gr * (b - a)
                f2 = _cone_eval(x2, G, Mapp, c, mu, dim)[0]
            it += 1
        th = 0.5 * (a + b)
        best = th
        fb = _cone_eval(th, G, Mapp, c, mu, dim)[0]
        if flo < fb:
            best = lo
            fb = flo
        if fhi < fb:
            best = hi
        th = best
    return th, it


@kernel
def sliding_kernel(G, Mapp, c, mu, dim):
    """Best impulse on the cone boundary; returns ``(lam, theta, ok)``."""
    if dim == 2:
        best_f = np.inf
        best_th = 0.0
        best_lam = np.zeros(2)
        # try the direction opposing the unconstrained slip first (tie-break)
        first = np.pi if c[0] > 0.0 else 0.0
        for th in (first, np.pi - first):
            f, _, lam = _cone_eval(th, G, Mapp, c, mu, 2)
            if f < best_f:
                best_f = f
                best_th = th
                best_lam = lam
        return best_lam, best_th, np.isfinite(best_f)
    fs = np.empty(_SCAN)
    h = 2.0 * np.pi / _SCAN
    for i in range(_SCAN):
        fs[i] = _cone_eval(i * h, G, Mapp, c, mu, dim)[0]
    best_f = np.inf
    best_th = 0.0
    # refine every sampled local minimum; keep the best
    for i in range(_SCAN):
        fi = fs[i]
        if not np.isfinite(fi):
            continue
        if fi <= fs[(i - 1) % _SCAN] and fi <= fs[(i + 1) % _SCAN]:
            th, _ = _refine((i - 1) * h, (i + 1) * h, G, Mapp, c, mu, dim)
            f = _cone_eval(th, G, Mapp, c, mu, dim)[0]
            if f < best_f:
                best_f = f
                best_th = th
    if not np.isfinite(best_f):
        return np.zeros(dim), 0.0, False
    best_th = best_th % (2.0 * np.pi)
    lam = _cone_eval(best_th, G, Mapp, c, mu, dim)[2]
    return lam, best_th, True


@kernel
def point_kernel(G, c, mu, dim):
    """Solve one contact; returns ``(lam, mode, theta, ok)``."""
    n = dim - 1
    if c[n] >= 0.0:
        return np.zeros(dim), 0, 0.0, True
    Mapp = np.linalg.inv(G)
    lam = -(Mapp @ c)
    tn = 0.0
    for i in range(n):
        tn += lam[i] * lam[i]
    tn = np.sqrt(tn)
    if lam[n] > 0.0 and tn <= mu * lam[n] * (1.0 + 1e-14):
        return lam, 1, 0.0, True
    lam, th, ok = sliding_kernel(G, Mapp, c, mu, dim)
    return lam, 2, th, ok


@kernel
def gauss_seidel_kernel(W, vfree, drift, mu, dim, max_sweeps, tol):
    """Block Gauss-Seidel over contacts sharing the Delassus operator ``W``.

    Returns ``(lam (K, dim), modes, thetas, sweeps, change, ok)``; ``change``
    is the largest impulse update of the last sweep.
    """
    K = drift.shape[0]
    lam = np.zeros((K, dim))
    modes = np.zeros(K, dtype=np.int64)
    thetas = np.zeros(K)
    change = 0.0
    sweeps = 0
    ok = True
    for sweep in range(max_sweeps):
        change = 0.0
        sweeps = sweep + 1
        for k in range(K):
            r0 = k * dim
            c = vfree[r0:r0 + dim].copy()
            for j in range(K):
                if j == k:
                    continue
                c += np.ascontiguousarray(W[r0:r0 + dim, j * dim:(j + 1) * dim]) @ lam[j]
            c[dim - 1] += drift[k]
            G = W[r0:r0 + dim, r0:r0 + dim].copy()
            lk, mk, tk, okk = point_kernel(G, c, mu, dim)
            ok = ok and okk
            d = np.max(np.abs(lk - lam[k]))
            if d > change:
                change = d
            lam[k] = lk
            modes[k] = mk
            thetas[k] = tk
        if change < tol:
            break
    return lam, modes, thetas, sweeps, change, ok


@kernel
def active_system_kernel(W, vfree, drift, modes, thetas, mu, dim):
    """Delassus system ``A lam_contact + b = 0`` for the active contacts.

    Rows: all components of clamping points, the normal row of sliding
    points. Columns: clamping components, sliding normals with ``E`` folded
    in. ``row_point``/``row_comp`` map rows back to (point, component).
    """
    K = modes.shape[0]
    m = 0
    for k in range(K):
        if modes[k] == 1:
            m += dim
        elif modes[k] == 2:
            m += 1
    row_point = np.zeros(m, dtype=np.int64)
    row_comp = np.zeros(m, dtype=np.int64)
    r = 0
    for k in range(K):
        if modes[k] == 1:
            for d in range(dim):
                row_point[r] = k
                row_comp[r] = d
                r += 1
        elif modes[k] == 2:
            row_point[r] = k
            row_comp[r] = dim - 1
            r += 1
    A = np.zeros((m, m))
    b = np.zeros(m)
    for i in range(m):
        gi = row_point[i] * dim + row_comp[i]
        b[i] = vfree[gi]
        if row_comp[i] == dim - 1:
            b[i] += drift[row_point[i]]
        for j in range(m):
            kj = row_point[j]
            if modes[kj] == 1:
                A[i, j] = W[gi, kj * dim + row_comp[j]]
            else:
                E = _cone_dir(thetas[kj], mu, dim)
                s = 0.0
                for d in range(dim):
                    s += W[gi, kj * dim + d] * E[d]
                A[i, j] = s
    return A, b, row_point, row_comp


# ---------------------------------------------------------------------------
# single point


@dataclass(frozen=True)
class ContactPointProblem:
    M_app: np.ndarray
    c: np.ndarray
    mu: float
    dim: int = 2

    def __post_init__(self):
        M = np.asarray(self.M_app, dtype=float)
        c = np.asarray(self.c, dtype=float)
        if self.dim not in (2, 3) or M.shape != (self.dim, self.dim) or c.shape != (self.dim,):
            raise ValueError("problem dimensions must agree with dim in {2, 3}")
        if not np.all(np.isfinite(c)):
            raise ValueError("contact velocity must be finite")
        if self.mu < 0:
            raise ValueError("friction coefficient must be >= 0")
        if np.max(np.abs(M - M.T)) > 1e-9 * max(1.0, np.max(np.abs(M))):
            raise DegenerateInertiaError("apparent inertia is not symmetric")
        try:
            np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            raise DegenerateInertiaError("apparent inertia is not positive definite") from None
        object.__setattr__(self, "M_app", 0.5 * (M + M.T))
        object.__setattr__(self, "c", c)

    @property
    def G(self) -> np.ndarray:
        return np.linalg.inv(self.M_app)

    def velocity(self, lam) -> np.ndarray:
        return self.c + np.linalg.solve(self.M_app, lam)

    def objective(self, lam) -> float:
        v = self.velocity(lam)
        return float(v @ self.M_app @ v)


def solve_contact_point(problem: ContactPointProblem) -> tuple[np.ndarray, int]:
    lam, mode, _, ok = point_kernel(problem.G, problem.c, float(problem.mu), problem.dim)
    if not ok:
        raise ContactSolverError("no feasible sliding direction", impulses=lam)
    return lam, int(mode)


def solve_sliding_cone(problem: ContactPointProblem) -> tuple[np.ndarray, float]:
    """Impulse on the cone boundary with zero normal velocity; returns (lam, theta)."""
    if problem.c[-1] >= 0:
        raise ValueError("sliding solve needs a closing contact (c_n < 0)")
    lam, theta, ok = sliding_kernel(problem.G, problem.M_app, problem.c, float(problem.mu), problem.dim)
    if not ok:
        warnings.warn("cone search found no feasible direction", RuntimeWarning, stacklevel=2)
    return lam, float(theta)


def sliding_direction(theta: float, mu: float, dim: int) -> np.ndarray:
    return _cone_dir(float(theta), float(mu), dim)


# ---------------------------------------------------------------------------
# multiple contacts


@dataclass
class ContactSolution:
    """Impulses for every contact point of a model (zeros where inactive)."""

    impulses: np.ndarray  # (K, dim)
    modes: np.ndarray  # (K,)
    velocities: np.ndarray  # (K, dim) post-step contact velocity
    thetas: np.ndarray
    candidates: np.ndarray  # (K,) bool
    drift: np.ndarray  # (K,) drift term used in the normal constraint
    sweeps: int = 0
    change: float = 0.0
    polished: bool = False

    @property
    def dim(self) -> int:
        return self.impulses.shape[1]

    @property
    def active(self) -> np.ndarray:
        return self.modes != SEPARATING

    def mode_names(self) -> list[str]:
        return [MODE_NAMES[int(m)] for m in self.modes]


def solve_candidates(W, vfree, drift, mu, dim=2, max_sweeps=GS_MAX_SWEEPS, tol=GS_TOL, polish=True):
    """Gauss-Seidel plus an active-set polish on a pre-assembled Delassus operator.

    Returns ``(lam, modes, thetas, sweeps, change, polished)`` for the
    candidate points only.
    """
    W = np.ascontiguousarray(W, dtype=float)
    vfree = np.ascontiguousarray(vfree, dtype=float)
    drift = np.ascontiguousarray(drift, dtype=float)
    lam, modes, thetas, sweeps, change, ok = gauss_seidel_kernel(W, vfree, drift, float(mu), dim, max_sweeps, tol)
    if not ok:
        raise ContactSolverError("contact point solve failed", residual=change, impulses=lam)
    if change >= tol:
        raise ContactSolverError(
            f"Gauss-Seidel did not reach a fixed point in {max_sweeps} sweeps (change {change:.3e})",
            residual=change,
            impulses=lam,
        )
    polished = False
    if polish and np.any(modes != SEPARATING):
        lam_p = _polish(W, vfree, drift, modes, thetas, mu, dim)
        if lam_p is not None:
            lam = lam_p
            polished = True
    return lam, modes, thetas, sweeps, change, polished


def _polish(W, vfree, drift, modes, thetas, mu, dim):
    """Exact solve of the identified active set; None if the modes break."""
    A, b, rp, rc = active_system_kernel(W, vfree, drift, modes, thetas, float(mu), dim)
    if np.linalg.cond(A) > 1e12:
        return None
    x = np.linalg.solve(A, -b)
    lam = np.zeros((len(modes), dim))
    for i, (k, d) in enumerate(zip(rp, rc)):
        if modes[k] == CLAMPING:
            lam[k, d] = x[i]
        else:
            lam[k] = sliding_direction(thetas[k], mu, dim) * x[i]
    for k, m in enumerate(modes):
        if m == SEPARATING:
            continue
        ln = lam[k, -1]
        if ln < 0.0:
            return None
        if m == CLAMPING and np.linalg.norm(lam[k, :-1]) > mu * ln * (1 + 1e-9) + 1e-15:
            return None
    return lam


@dataclass
class DelassusSystem:
    A: np.ndarray
    b: np.ndarray
    clamping: np.ndarray  # point indices
    sliding: np.ndarray
    E_s: np.ndarray  # block diagonal (dim * n_s, n_s)
    lam_contact: np.ndarray
    row_point: np.ndarray
    row_comp: np.ndarray
    dim: int
    singular: bool = False

    @property
    def normal_mask(self) -> np.ndarray:
        return self.row_comp == self.dim - 1

    def residual(self) -> float:
        return float(np.max(np.abs(self.A @ self.lam_contact + self.b))) if self.b.size else 0.0


def delassus_from_operator(W, vfree, drift, lam, modes, thetas, mu, dim, floor=0.0) -> DelassusSystem:
    """Active-set system; points with normal impulse below ``floor`` are dropped."""
    modes = np.array(modes, dtype=np.int64)
    if floor > 0:
        modes[(modes != SEPARATING) & (lam[:, -1] < floor)] = SEPARATING
    if not np.any(modes != SEPARATING):
        raise ValueError("no clamping or sliding contact: Delassus system is empty")
    A, b, rp, rc = active_system_kernel(
        np.ascontiguousarray(W), np.ascontiguousarray(vfree), np.ascontiguousarray(drift),
        modes, np.ascontiguousarray(thetas, dtype=float), float(mu), dim,
    )
    lam_c = np.array([lam[k, d] for k, d in zip(rp, rc)])
    sliding = np.flatnonzero(modes == SLIDING)
    E_s = np.zeros((dim * len(sliding), len(sliding)))
    for i, k in enumerate(sliding):
        E_s[i * dim:(i + 1) * dim, i] = sliding_direction(thetas[k], mu, dim)
    singular = np.linalg.cond(A) > 1e12
    return DelassusSystem(
        A=A, b=b,
        clamping=np.flatnonzero(modes == CLAMPING), sliding=sliding, E_s=E_s,
        lam_contact=lam_c, row_point=rp, row_comp=rc, dim=dim, singular=bool(singular),
    )


def impulse_gradient(delassus: DelassusSystem, rho: float, dA_dxi=None, db_dxi=None, rhs=None):
    """Relaxed-complementarity gradient of the active impulses.

    Solves ``[A + rho D] dlam = -(dA/dxi lam + db/dxi)`` with ``D`` diagonal,
    ``1 / max(lam_l, 1e-6)^2`` on normal rows and zero on tangential rows.
    ``dA_dxi`` has shape ``(m, m, p)``, ``db_dxi`` ``(m, p)``; alternatively
    pass the assembled right-hand side ``rhs`` (= dA lam + db) directly.
    Returns ``(m, p)``.
    """
    if rho < 0:
        raise ValueError("relaxation must be non-negative")
    A = delassus.A
    m = A.shape[0]
    if rhs is None:
        if db_dxi is None:
            raise ValueError("need db_dxi or rhs")
        rhs = np.array(db_dxi, dtype=float).reshape(m, -1)
        if dA_dxi is not None:
            rhs = rhs + np.einsum("ijp,j->ip", np.asarray(dA_dxi, dtype=float), delassus.lam_contact)
    rhs = np.asarray(rhs, dtype=float).reshape(m, -1)
    lam = np.maximum(delassus.lam_contact, LAMBDA_FLOOR)
    D = np.where(delassus.normal_mask, 1.0 / lam**2, 0.0)
    K = A + rho * np.diag(D)
    if delassus.singular or np.linalg.cond(K) > 1e12:
        K = K + TIKHONOV * np.eye(m)
    return -np.linalg.solve(K, rhs)


def expand_gradient(delassus: DelassusSystem, dlam_contact, n_points: int):
    """Map active-set gradients to per-point impulse gradients ``(K, dim, p)``."""
    dim = delassus.dim
    p = dlam_contact.shape[1]
    out = np.zeros((n_points, dim, p))
    slide_dirs = {k: delassus.E_s[i * dim:(i + 1) * dim, i] for i, k in enumerate(delassus.sliding)}
    for i, (k, d) in enumerate(zip(delassus.row_point, delassus.row_comp)):
        if k in slide_dirs:
            out[k] += np.outer(slide_dirs[k], dlam_contact[i])
        else:
            out[k, d] += dlam_contact[i]
    return out


def strict_gradient(delassus: DelassusSystem, dA_dxi, db_dxi):
    """``A^-1 dA A^-1 b - A^-1 db`` (the unrelaxed closed form)."""
    A = delassus.A
    Ainv_b = np.linalg.solve(A, delassus.b)
    t1 = np.einsum("ijp,j->ip", np.asarray(dA_dxi, dtype=float), Ainv_b)
    return np.linalg.solve(A, t1) - np.linalg.solve(A, np.asarray(db_dxi, dtype=float))


def solve_all_contacts(model, state, u, dt, candidates=None, drift=True) -> ContactSolution:
    """Impulses of all feet for one step of ``model`` from ``state`` under ``u``.

    ``candidates`` defaults to the feet found by contact detection.
    """
    from .stepper import _as_state, _solve

    s = _as_state(state)
    return _solve(model, s.q, s.qdot, np.asarray(u, dtype=float), dt, drift, candidates)[0]


def assemble_delassus(model, state, u, dt, contact_solution=None, drift=True) -> DelassusSystem:
    """Active-set Delassus system of one step (all points, no impulse floor)."""
    from .stepper import _as_state, _solve

    s = _as_state(state)
    sol, _, kn = _solve(model, s.q, s.qdot, np.asarray(u, dtype=float), dt, drift)
    if contact_solution is not None:
        sol = contact_solution
    if kn.cand.size == 0 or not np.any(sol.modes[kn.cand] != SEPARATING):
        raise ValueError("no clamping or sliding contact: Delassus system is empty")
    return delassus_from_operator(
        kn.W, kn.vfree, kn.drift, sol.impulses[kn.cand], sol.modes[kn.cand], sol.thetas[kn.cand], model.friction, 2
    )
