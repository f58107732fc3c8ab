import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cimpc.contact import (
    ContactPointProblem,
    ContactSolverError,
    DegenerateInertiaError,
    assemble_delassus,
    delassus_from_operator,
    impulse_gradient,
    solve_all_contacts,
    solve_candidates,
    solve_contact_point,
    solve_sliding_cone,
    strict_gradient,
)
from cimpc.model import CLAMPING, SEPARATING, SLIDING, LegSpec, RobotModel
from cimpc.stepper import gravity_compensation

from oracles import sample_cone_objective


def random_problem(rng, dim):
    L = rng.normal(size=(dim, dim))
    M = L @ L.T + 0.1 * np.eye(dim)
    c = rng.normal(size=dim)
    return ContactPointProblem(M, c, float(rng.uniform(0.05, 1.5)), dim)


def check_point(p, lam, mode, tol=1e-8):
    v = p.velocity(lam)
    assert lam[-1] >= 0
    assert v[-1] >= -tol
    assert abs(v[-1] * lam[-1]) <= tol
    assert np.linalg.norm(lam[:-1]) <= p.mu * lam[-1] + 1e-10
    if mode == SEPARATING:
        assert np.all(lam == 0)
    elif mode == CLAMPING:
        np.testing.assert_allclose(v, 0, atol=1e-9)
    else:
        assert np.linalg.norm(lam[:-1]) == pytest.approx(p.mu * lam[-1], abs=1e-10)
        assert lam[:-1] @ v[:-1] <= 1e-10


def test_separating():
    lam, mode = solve_contact_point(ContactPointProblem(np.eye(2), [0.0, 1.0], 0.7))
    assert mode == SEPARATING and np.all(lam == 0)


def test_zero_normal_velocity_is_separating():
    lam, mode = solve_contact_point(ContactPointProblem(np.eye(2), [0.3, 0.0], 0.7))
    assert mode == SEPARATING and np.all(lam == 0)


def test_resting_point_mass_clamps():
    lam, mode = solve_contact_point(ContactPointProblem(np.eye(2), [0.0, -0.0981], 0.5))
    assert mode == CLAMPING
    np.testing.assert_allclose(lam, [0.0, 0.0981], atol=1e-15)


def test_sliding_point_mass():
    p = ContactPointProblem(np.eye(2), [1.0, -0.0981], 0.5)
    lam, mode = solve_contact_point(p)
    assert mode == SLIDING
    np.testing.assert_allclose(lam, [-0.04905, 0.0981], atol=1e-15)
    np.testing.assert_allclose(p.velocity(lam), [0.95095, 0.0], atol=1e-15)


@pytest.mark.parametrize("ct", [2.0, -0.5, 1e-3])
def test_planar_sliding_opposes_slip(ct):
    lam, _ = solve_sliding_cone(ContactPointProblem(np.eye(2), [ct, -1.0], 0.3))
    assert np.sign(lam[0]) == -np.sign(ct)


def test_isotropic_cone_angle():
    p = ContactPointProblem(np.eye(3), [1.0, 0.0, -1.0], 0.3, 3)
    lam, theta = solve_sliding_cone(p)
    assert theta == pytest.approx(np.pi + np.arctan2(0.0, 1.0), abs=1e-9)
    np.testing.assert_allclose(lam, [-0.3, 0.0, 1.0], atol=1e-9)
    assert solve_contact_point(p)[1] == SLIDING


@pytest.mark.parametrize("seed", range(3))
def test_spatial_sliding_beats_dense_sampling(seed):
    rng = np.random.default_rng(seed)
    while True:
        p = random_problem(rng, 3)
        p = ContactPointProblem(p.M_app, np.r_[p.c[:2] * 5, -abs(p.c[2])], 0.5, 3)
        lam, mode = solve_contact_point(p)
        if mode == SLIDING:
            break
    th = rng.uniform(0, 2 * np.pi, 10_000)
    G = p.G
    best = np.inf
    for t in th:
        E = np.array([0.5 * np.cos(t), 0.5 * np.sin(t), 1.0])
        g = G[2] @ E
        if g > 0:
            best = min(best, p.objective(E * (-p.c[2] / g)))
    assert p.objective(lam) <= best + 1e-8


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**31), dim=st.sampled_from([2, 3]))
def test_point_solution_properties(seed, dim):
    rng = np.random.default_rng(seed)
    p = random_problem(rng, dim)
    lam, mode = solve_contact_point(p)
    check_point(p, lam, mode)
    assert p.objective(lam) <= sample_cone_objective(p.G, p.c, p.mu, 2000, rng) + 1e-8


def test_degenerate_inertia():
    with pytest.raises(DegenerateInertiaError):
        ContactPointProblem(np.diag([1.0, -1.0]), [0.0, -1.0], 0.5)
    with pytest.raises(DegenerateInertiaError):
        ContactPointProblem([[1.0, 2.0], [0.0, 1.0]], [0.0, -1.0], 0.5)
    with pytest.raises(ValueError):
        ContactPointProblem(np.eye(2), [np.inf, -1.0], 0.5)


def test_sweep_limit_reports_last_iterate():
    W = np.array([[1.0, 0.0, 0.9, 0.9], [0.0, 1.0, 0.9, 0.9], [0.9, 0.9, 2.0, 0.0], [0.9, 0.9, 0.0, 2.0]])
    with pytest.raises(ContactSolverError) as e:
        solve_candidates(W, np.array([0.3, -1.0, -0.2, -1.0]), np.zeros(2), 0.4, 2, max_sweeps=1)
    assert e.value.impulses is not None and e.value.residual > 0


@pytest.fixture(scope="module")
def model():
    return RobotModel()


@pytest.fixture(scope="module")
def mirrored():
    legs = (
        LegSpec(hip=(0.3, 0.0), stance=(-0.6, 1.2), name="front"),
        LegSpec(hip=(-0.3, 0.0), stance=(0.6, -1.2), name="hind"),
    )
    return RobotModel(legs=legs)


def test_no_candidates(model):
    s = model.stance_state()
    x = s.x.copy()
    x[1] += 0.5
    sol = solve_all_contacts(model, x, np.zeros(4), 0.01)
    assert not sol.candidates.any()
    assert np.all(sol.impulses == 0) and np.all(sol.modes == SEPARATING)


def test_symmetric_stance_equal_normals(mirrored):
    s = mirrored.stance_state()
    u = gravity_compensation(mirrored)
    sol = solve_all_contacts(mirrored, s, u, 0.025)
    assert sol.impulses[0, 1] == pytest.approx(sol.impulses[1, 1], abs=1e-9)
    assert sol.impulses[0, 0] == pytest.approx(-sol.impulses[1, 0], abs=1e-9)


def test_static_stance_momentum_balance(model):
    dt = 0.025
    sol = solve_all_contacts(model, model.stance_state(), gravity_compensation(model), dt)
    total = sol.impulses[:, 1].sum()
    assert abs(total - model.total_mass * model.gravity * dt) <= 1e-6 * total


def test_gauss_seidel_fixed_point(model):
    rng = np.random.default_rng(3)
    s = model.stance_state()
    for _ in range(20):
        x = s.x.copy()
        x[7:] += rng.normal(scale=0.5, size=7)
        W_sol = solve_all_contacts(model, x, rng.normal(scale=5, size=4), 0.025)
        assert W_sol.change < 1e-10


def test_single_clamping_delassus_is_inverse_apparent_inertia():
    free = RobotModel(base_mass=1.0, base_inertia=1.0, legs=(LegSpec(hip=(0.0, 0.0), lengths=(), masses=(), stance=()),))
    x = np.zeros(6)
    x[1] = -1e-3
    d = assemble_delassus(free, x, np.zeros(0), 0.01)
    np.testing.assert_allclose(d.A, np.eye(2), atol=1e-15)
    assert d.clamping.tolist() == [0] and d.sliding.size == 0


def test_all_separating_is_empty(model):
    x = model.stance_state().x
    x[1] += 0.5
    with pytest.raises(ValueError):
        assemble_delassus(model, x, np.zeros(4), 0.01)


def test_two_clamping_residual(model):
    rng = np.random.default_rng(4)
    s = model.stance_state()
    u = gravity_compensation(model)
    for _ in range(10):
        x = s.x.copy()
        x[7:] += rng.normal(scale=0.05, size=7)
        d = assemble_delassus(model, x, u, 0.025)
        if d.clamping.size == 2:
            np.testing.assert_allclose(d.lam_contact, -np.linalg.solve(d.A, d.b), atol=1e-8)
            assert d.residual() <= 1e-8


def scalar_system(lam):
    return delassus_from_operator(
        np.eye(2), np.array([0.0, -lam]), np.zeros(1), np.array([[0.0, lam]]), np.array([CLAMPING]), np.zeros(1), 1.0, 2
    )


def test_scalar_gradient_examples():
    d = scalar_system(2.0)
    db = np.array([[0.0], [1.0]])
    assert impulse_gradient(d, 0.0, db_dxi=db)[1, 0] == pytest.approx(-1.0, abs=1e-15)
    assert impulse_gradient(d, 4.0, db_dxi=db)[1, 0] == pytest.approx(-0.5, abs=1e-15)
    # tangential rows carry no relaxation
    assert impulse_gradient(d, 4.0, db_dxi=np.array([[1.0], [0.0]]))[0, 0] == pytest.approx(-1.0, abs=1e-15)


def random_delassus(rng):
    m = int(rng.integers(1, 4))
    J = rng.normal(size=(2 * m, 7))
    W = J @ J.T + 0.1 * np.eye(2 * m)
    lam = np.abs(rng.normal(size=(m, 2))) + 0.1
    lam[:, 0] = 0.0
    vfree = -W @ lam.ravel()
    return delassus_from_operator(W, vfree, np.zeros(m), lam, np.full(m, CLAMPING), np.zeros(m), 1.0, 2)


def test_relaxed_rho_zero_equals_strict():
    rng = np.random.default_rng(5)
    for _ in range(100):
        d = random_delassus(rng)
        m = d.A.shape[0]
        dA = rng.normal(size=(m, m, 3))
        db = rng.normal(size=(m, 3))
        g = impulse_gradient(d, 0.0, dA, db)
        s = strict_gradient(d, dA, db)
        assert np.max(np.abs(g - s)) <= 1e-12 * max(1.0, np.max(np.abs(s)))


def test_relaxed_gradient_solves_its_system():
    rng = np.random.default_rng(6)
    for rho in (1e-3, 0.1, 1.0):
        d = random_delassus(rng)
        m = d.A.shape[0]
        db = rng.normal(size=(m, 2))
        g = impulse_gradient(d, rho, db_dxi=db)
        D = np.diag(np.where(d.normal_mask, 1 / np.maximum(d.lam_contact, 1e-6) ** 2, 0.0))
        assert np.max(np.abs((d.A + rho * D) @ g + db)) <= 1e-10


def test_rho_continuity():
    rng = np.random.default_rng(7)
    d = random_delassus(rng)
    db = rng.normal(size=(d.A.shape[0], 1))
    g0 = impulse_gradient(d, 0.0, db_dxi=db)
    bound = np.linalg.cond(d.A) * 1e-6 * np.max(np.abs(g0)) * 10
    assert np.max(np.abs(impulse_gradient(d, 1e-6, db_dxi=db) - g0)) <= bound
    assert np.max(np.abs(impulse_gradient(d, 1e-3, db_dxi=db) - g0)) <= 1e3 * bound
    assert np.all(np.isfinite(impulse_gradient(d, 1.0, db_dxi=db)))


def test_relaxation_shrinks_gradient():
    d = scalar_system(0.5)
    db = np.array([[0.0], [1.0]])
    mags = [abs(impulse_gradient(d, r, db_dxi=db)[1, 0]) for r in (0.0, 0.1, 1.0, 10.0)]
    assert mags == sorted(mags, reverse=True)


def test_negative_rho_rejected():
    with pytest.raises(ValueError):
        impulse_gradient(scalar_system(1.0), -1.0, db_dxi=np.zeros((2, 1)))
