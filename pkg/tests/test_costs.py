import numpy as np
import pytest

from cimpc.costs import (
    AirTimeSchedule,
    CostContext,
    CostWeights,
    ReferenceConfig,
    airtime_cost,
    airtime_residuals,
    cost_value,
    foot_cost,
    foot_residuals,
    regulating_cost,
    symmetric_cost,
    total_cost,
    update_airtime_schedule,
)
from cimpc.model import RobotModel

MODEL = RobotModel()
NX, NV, NU = MODEL.nx, MODEL.nv, MODEL.n_joints


def _fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def _fd_jac(f, x, h=1e-6):
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=-1)


def _random_state(rng, spread=0.2):
    x = MODEL.stance_state().x.copy()
    x[:NV] += rng.uniform(-spread, spread, NV)
    x[NV:] = rng.uniform(-1.0, 1.0, NV)
    return x


def _relerr(a, b):
    return np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(b)))


# -- regulating --------------------------------------------------------------


def test_regulating_zero_at_reference():
    ref = ReferenceConfig.stance(MODEL)
    ev = regulating_cost(MODEL, ref.x_ref, np.zeros(NU), ref, CostWeights())
    assert ev.value == 0.0
    assert not np.any(ev.l_x) and not np.any(ev.l_u)


def test_regulating_pitch_error():
    ref = ReferenceConfig.stance(MODEL)
    x = ref.x_ref.copy()
    x[2] += 0.5
    ev = regulating_cost(MODEL, x, np.zeros(NU), ref, CostWeights())
    assert ev.value == pytest.approx(2.5, abs=1e-12)


def test_regulating_terminal_scales_by_beta_and_ignores_u():
    ref = ReferenceConfig.stance(MODEL)
    x = ref.x_ref.copy()
    x[1] += 0.1
    w = CostWeights()
    run = regulating_cost(MODEL, x, np.zeros(NU), ref, w)
    term = regulating_cost(MODEL, x, np.full(NU, 7.0), ref, w, is_terminal=True)
    assert term.value == pytest.approx(w.beta * run.value, rel=1e-14)
    assert not np.any(term.l_u) and not np.any(term.l_uu)


def test_regulating_gradient_fd():
    rng = np.random.default_rng(1)
    ref = ReferenceConfig.stance(MODEL, dz=0.1)
    w = CostWeights()
    for _ in range(10):
        x, u = _random_state(rng), rng.normal(size=NU)
        ev = regulating_cost(MODEL, x, u, ref, w)
        gx = _fd_grad(lambda z: regulating_cost(MODEL, z, u, ref, w).value, x)
        gu = _fd_grad(lambda z: regulating_cost(MODEL, x, z, ref, w).value, u)
        assert _relerr(ev.l_x, gx) < 1e-6
        assert _relerr(ev.l_u, gu) < 1e-6


# -- foot --------------------------------------------------------------------


def _sliding_state(dz=0.0, vx=1.0):
    """Both feet at height ``dz`` moving tangentially at ``vx`` (pure base translation)."""
    x = MODEL.stance_state().x.copy()
    x[1] += dz
    x[NV] = vx
    return x


def test_foot_cost_zero_when_feet_still():
    x = MODEL.stance_state().x
    assert foot_cost(MODEL, x, CostWeights(foot=True)).value == 0.0


def test_foot_cost_half_on_ground():
    ev = foot_cost(MODEL, _sliding_state(), CostWeights(foot=True))
    assert ev.value == pytest.approx(2 * 0.5, abs=1e-12)  # two feet, S(0) = 0.5


def test_foot_cost_vanishes_when_lifted():
    ev = foot_cost(MODEL, _sliding_state(dz=0.3), CostWeights(foot=True))
    assert ev.value == pytest.approx(2 / (1 + np.exp(9.0)), rel=1e-10)


def test_foot_cost_monotone_in_height():
    vals = [foot_cost(MODEL, _sliding_state(dz=h), CostWeights(foot=True)).value for h in np.linspace(0, 0.3, 16)]
    assert np.all(np.diff(vals) < 0)


def test_foot_cost_gradient_and_gn_hessian():
    rng = np.random.default_rng(2)
    w = CostWeights(foot=True)
    for _ in range(10):
        x = _random_state(rng, 0.05)
        ev = foot_cost(MODEL, x, w)
        g = _fd_grad(lambda z: foot_cost(MODEL, z, w).value, x)
        assert _relerr(ev.l_x, g) < 1e-6
        # Gauss-Newton oracle built from finite-difference residual Jacobians
        Jr = _fd_jac(lambda z: foot_residuals(MODEL, z, w)[0], x)
        assert _relerr(ev.l_xx, 2 * Jr.T @ Jr) < 1e-5


# -- air time ----------------------------------------------------------------


def test_airtime_inactive():
    sch = AirTimeSchedule.empty(MODEL.n_contacts, 20)
    assert airtime_cost(MODEL, _sliding_state(dz=0.1), sch, 3).value == 0.0


def test_airtime_contribution():
    sch = AirTimeSchedule.empty(MODEL.n_contacts, 20)
    sch.weights[0, 4] = 2e3
    ev = airtime_cost(MODEL, _sliding_state(dz=0.05), sch, 4)
    assert ev.value == pytest.approx(5.0, rel=1e-10)


def test_airtime_gradient_and_gn_hessian():
    rng = np.random.default_rng(3)
    sch = AirTimeSchedule(np.full((MODEL.n_contacts, 20), 2e3))
    for _ in range(10):
        x = _random_state(rng)
        ev = airtime_cost(MODEL, x, sch, 7)
        g = _fd_grad(lambda z: airtime_cost(MODEL, z, sch, 7).value, x)
        assert _relerr(ev.l_x, g) < 1e-6
        Jr = _fd_jac(lambda z: airtime_residuals(MODEL, z, sch, 7)[0], x)
        assert _relerr(ev.l_xx, 2 * Jr.T @ Jr) < 1e-5


def test_schedule_empty_when_no_long_swing():
    xs = np.tile(MODEL.stance_state().x, (21, 1))
    new = update_airtime_schedule(AirTimeSchedule.empty(2, 20), xs, MODEL, CostWeights(airtime=True))
    assert not np.any(new.weights)


def test_schedule_activates_long_swing():
    w = CostWeights(airtime=True)
    xs = np.tile(MODEL.stance_state().x, (21, 1))
    # lift the front foot by bending its knee over the whole horizon
    xs[:, 4] += 0.4
    new = update_airtime_schedule(AirTimeSchedule.empty(2, 20), xs, MODEL, w)
    assert np.all(new.weights[0, w.i_t:w.i_t + 4] == w.c_a)
    assert np.count_nonzero(new.weights) == 4
    assert set(np.unique(new.weights)) <= {0.0, w.c_a}


def test_schedule_shift():
    prev = AirTimeSchedule.empty(2, 20)
    prev.weights[1, 5] = 2e3
    xs = np.tile(MODEL.stance_state().x, (21, 1))
    new = update_airtime_schedule(prev, xs, MODEL, CostWeights(airtime=True))
    assert new.weights[1, 4] == 2e3 and np.count_nonzero(new.weights) == 1
    prev.weights[:] = 0
    prev.weights[0, 0] = 2e3
    assert not np.any(update_airtime_schedule(prev, xs, MODEL, CostWeights()).weights)


# -- symmetric ---------------------------------------------------------------


def test_symmetric_examples():
    w = CostWeights(symmetric=True)
    assert symmetric_cost(MODEL, np.array([3.0, -2.0, 3.0, -2.0]), w).value == 0.0
    assert symmetric_cost(MODEL, np.array([0.0, 10.0, 0.0, 6.0]), w).value == pytest.approx(0.16, abs=1e-14)


def test_symmetric_gradient_exact():
    w = CostWeights(symmetric=True)
    C = np.asarray(w.C_2)
    u = np.random.default_rng(4).normal(size=NU) * 10
    ev = symmetric_cost(MODEL, u, w)
    assert np.allclose(ev.l_u, 2 * w.c_s * C.T @ C @ u, rtol=1e-14, atol=0)
    g = _fd_grad(lambda z: symmetric_cost(MODEL, z, w).value, u, h=1e-3)
    assert _relerr(ev.l_u, g) < 1e-10


# -- total -------------------------------------------------------------------


def test_total_is_sum_and_terminal_regulating_only():
    rng = np.random.default_rng(5)
    w = CostWeights(foot=True, airtime=True, symmetric=True)
    ref = ReferenceConfig.stance(MODEL, dz=0.2)
    sch = AirTimeSchedule(np.full((2, 20), 2e3))
    ctx = CostContext(MODEL, w, ref, sch)
    x, u = _random_state(rng), rng.normal(size=NU)
    parts = [regulating_cost(MODEL, x, u, ref, w), foot_cost(MODEL, x, w), airtime_cost(MODEL, x, sch, 3),
             symmetric_cost(MODEL, u, w)]
    tot = total_cost(x, u, ctx, 3)
    assert tot.value == pytest.approx(sum(p.value for p in parts), rel=1e-14)
    assert cost_value(x, u, ctx, 3) == pytest.approx(tot.value, rel=1e-13)
    term = total_cost(x, u * 100, ctx, 20, is_terminal=True)
    assert term.value == pytest.approx(regulating_cost(MODEL, x, None, ref, w, True).value, rel=1e-14)
    assert cost_value(x, None, ctx, 20, True) == pytest.approx(term.value, rel=1e-13)


def test_total_zero_at_reference():
    ref = ReferenceConfig.stance(MODEL)
    ctx = CostContext(MODEL, CostWeights(), ref)
    assert total_cost(ref.x_ref, np.zeros(NU), ctx).value == 0.0


def test_costs_nonnegative_and_hessians_psd():
    rng = np.random.default_rng(6)
    w = CostWeights(foot=True, airtime=True, symmetric=True)
    ctx = CostContext(MODEL, w, ReferenceConfig.stance(MODEL), AirTimeSchedule(np.full((2, 20), 2e3)))
    for _ in range(100):
        x, u = _random_state(rng), rng.normal(size=NU) * 5
        ev = total_cost(x, u, ctx, rng.integers(20))
        assert ev.value >= 0
        H = np.block([[ev.l_xx, ev.l_xu], [ev.l_xu.T, ev.l_uu]])
        assert np.allclose(H, H.T)
        np.linalg.cholesky(H + 1e-12 * np.eye(H.shape[0]))


def test_weight_validation():
    with pytest.raises(ValueError):
        CostWeights(w_pos=-1)
    with pytest.raises(ValueError):
        CostWeights(beta=0)
    with pytest.raises(ValueError):
        CostWeights(W_x=(1.0,)).state_weights(MODEL)
