import numpy as np
import pytest

from softmpc import dynamics as dyn
from softmpc.dynamics import VehicleParams, comfort_quantities, f_continuous, f_discrete, jacobians, state
from softmpc.path import circular_path, clothoid_path, straight_path

PARAMS = VehicleParams()


def test_steady_straight_driving():
    path = straight_path(300.0)
    xdot = f_continuous(state(v=10.0), np.zeros(2), path, PARAMS)
    np.testing.assert_allclose(xdot, [10.0, 0, 0, 0, 0, 0, 0], atol=1e-14)


def test_accel_filter_at_equilibrium():
    path = straight_path(300.0)
    xdot = f_continuous(state(v=10.0, a=2.0), np.array([0.0, 2.0]), path, PARAMS)
    assert xdot[dyn.IDX_S] == pytest.approx(10.0)
    assert xdot[dyn.IDX_V] == pytest.approx(2.0)
    assert xdot[dyn.IDX_A] == pytest.approx(0.0)  # a_req == a


def test_continuous_model_against_symbolic_evaluation():
    # circle R=100, x=(0, 0.5, 0.02, 0.01, 0, 15, 0), u=(0.01, 0); values frozen
    # from an independent symbolic evaluation of the model equations.
    path = circular_path(radius=100.0, arc=200.0)
    x = state(s=0.0, e_y=0.5, e_psi=0.02, delta=0.01, alpha=0.0, v=15.0, a=0.0)
    u = np.array([0.01, 0.0])
    xdot = f_continuous(x, u, path, PARAMS)
    expected = [15.072361909546399, 0.2999800003999962, -0.09899775695753016,
                0.0, 0.0, 0.0, 0.0]
    np.testing.assert_allclose(xdot, expected, rtol=1e-12, atol=1e-13)


def test_singularity_raises():
    path = circular_path(radius=10.0, arc=50.0)
    with pytest.raises(dyn.FrenetSingularity):
        f_continuous(state(e_y=10.0, v=5.0), np.zeros(2), path, PARAMS)


def test_discrete_zero_step_limit():
    path = straight_path(100.0)
    x = state(s=5.0, e_y=0.1, e_psi=0.02, delta=0.01, alpha=0.05, v=12.0, a=0.5)
    x_next = f_discrete(x, np.array([0.02, 1.0]), path, PARAMS, t_s=1e-9)
    np.testing.assert_allclose(x_next, x, atol=1e-7)


def test_discrete_matches_fine_step_euler():
    # one RK4 step vs a t_s/1000 Euler oracle; t_s small enough that both
    # resolve the fast steering filter to the 1e-6 comparison level
    path = straight_path(100.0)
    x = state(s=5.0, e_y=0.2, e_psi=0.01, delta=0.02, alpha=0.0, v=15.0, a=0.0)
    u = np.array([0.03, 1.5])
    t_s = 0.01
    x_rk4 = f_discrete(x, u, path, PARAMS, t_s)
    x_euler = x.copy()
    n_sub = 20_000  # first-order oracle needs h ~ 5e-7 to sit below the 1e-6 bar
    for _ in range(n_sub):
        x_euler = x_euler + (t_s / n_sub) * f_continuous(x_euler, u, path, PARAMS)
    np.testing.assert_allclose(x_rk4, x_euler, atol=1e-6)


def test_standstill_speed_projection():
    path = straight_path(100.0)
    x = state(s=5.0, v=0.0)
    x_next = f_discrete(x, np.array([0.0, PARAMS.accel_max]), path, PARAMS, 0.1,
                        project_speed=True)
    assert x_next[dyn.IDX_V] >= 0.0
    # hard braking from standstill must not produce reverse motion
    x_brake = f_discrete(state(s=5.0, v=0.0, a=-1.0),
                         np.array([0.0, PARAMS.accel_min]),
                         path, PARAMS, 0.1, project_speed=True)
    assert x_brake[dyn.IDX_V] == 0.0


def test_rk4_order_of_accuracy():
    # halving the step should shrink the one-step error by >= 16x (O(h^5) local)
    path = clothoid_path(200.0, 1e-4, spacing=0.2)
    x = state(s=20.0, e_y=0.3, e_psi=0.02, delta=0.03, alpha=0.1, v=18.0, a=0.5)
    u = np.array([0.05, 1.0])

    def reference(x0, h, substeps=400):
        xs = x0.copy()
        for _ in range(substeps):
            xs = f_discrete(xs, u, path, PARAMS, h / substeps)
        return xs

    errs = []
    for h in (0.2, 0.1):
        err = np.linalg.norm(f_discrete(x, u, path, PARAMS, h) - reference(x, h))
        errs.append(err)
    assert errs[0] / errs[1] >= 16.0


def _fd_jacobians(x, u, path, t_s, h=1e-6):
    A = np.zeros((dyn.NX, dyn.NX))
    B = np.zeros((dyn.NX, dyn.NU))
    for j in range(dyn.NX):
        dx = np.zeros(dyn.NX)
        dx[j] = h
        A[:, j] = (f_discrete(x + dx, u, path, PARAMS, t_s)
                   - f_discrete(x - dx, u, path, PARAMS, t_s)) / (2.0 * h)
    for j in range(dyn.NU):
        du = np.zeros(dyn.NU)
        du[j] = h
        B[:, j] = (f_discrete(x, u + du, path, PARAMS, t_s)
                   - f_discrete(x, u - du, path, PARAMS, t_s)) / (2.0 * h)
    return A, B


def test_jacobians_match_finite_differences_on_random_states():
    path = clothoid_path(400.0, 5e-5, spacing=0.5)
    rng = np.random.default_rng(42)
    t_s = 0.1
    for _ in range(200):
        x = state(
            s=rng.uniform(5.0, 360.0),
            e_y=rng.uniform(-1.5, 1.5),
            e_psi=rng.uniform(-0.25, 0.25),
            delta=rng.uniform(-0.4, 0.4),
            alpha=rng.uniform(-0.5, 0.5),
            v=rng.uniform(0.0, 30.0),
            a=rng.uniform(-6.0, 3.0),
        )
        u = np.array([rng.uniform(-0.4, 0.4), rng.uniform(-6.0, 3.0)])
        A, B = jacobians(x, u, path, PARAMS, t_s)
        A_fd, B_fd = _fd_jacobians(x, u, path, t_s)
        scale_A = np.maximum(np.abs(A_fd), 1.0)
        scale_B = np.maximum(np.abs(B_fd), 1.0)
        assert np.max(np.abs(A - A_fd) / scale_A) < 1e-4
        assert np.max(np.abs(B - B_fd) / scale_B) < 1e-4


def test_jacobian_lateral_coupling_block():
    # straight path, delta=0: de_y+/de_psi equals v*t_s to first order in t_s
    path = straight_path(200.0)
    v = 20.0
    t_s = 0.01
    A, _ = jacobians(state(s=10.0, v=v), np.zeros(2), path, PARAMS, t_s)
    assert A[dyn.IDX_EY, dyn.IDX_EPSI] == pytest.approx(v * t_s, rel=1e-3)


def test_input_column_structure():
    path = straight_path(200.0)
    x = state(s=10.0, v=15.0)
    _, _, B_cont = dyn._f_and_jac(x, np.zeros(2), path, PARAMS)
    # a_req only drives the acceleration row in continuous time
    col = B_cont[:, 1]
    assert col[dyn.IDX_A] == pytest.approx(PARAMS.accel_tc)
    assert np.all(col[:dyn.IDX_A] == 0.0)


def test_comfort_quantities():
    assert comfort_quantities(state(v=0.0, delta=0.3, alpha=1.0), PARAMS) == (0.0, 0.0)
    a_y, j_y = comfort_quantities(state(v=20.0, delta=0.01), PARAMS)
    assert a_y == pytest.approx(1.3793563236782354, rel=1e-12)
    assert j_y == 0.0
    a_y, j_y = comfort_quantities(state(v=10.0, delta=0.0, alpha=0.1), PARAMS)
    assert a_y == 0.0
    assert j_y == pytest.approx(3.4482758620689653, rel=1e-12)


def test_comfort_even_in_speed_sign():
    x_pos = state(v=12.0, delta=0.1, alpha=0.2)
    x_neg = state(v=-12.0, delta=0.1, alpha=0.2)
    assert comfort_quantities(x_pos, PARAMS) == comfort_quantities(x_neg, PARAMS)


def test_comfort_jacobians_match_fd():
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = state(v=rng.uniform(0, 30), delta=rng.uniform(-0.4, 0.4),
                  alpha=rng.uniform(-0.5, 0.5))
        g_ay, g_jy = dyn.comfort_jacobians(x, PARAMS)
        h = 1e-7
        for j in range(dyn.NX):
            dx = np.zeros(dyn.NX)
            dx[j] = h
            ay_p, jy_p = comfort_quantities(x + dx, PARAMS)
            ay_m, jy_m = comfort_quantities(x - dx, PARAMS)
            assert g_ay[j] == pytest.approx((ay_p - ay_m) / (2 * h), abs=1e-5)
            assert g_jy[j] == pytest.approx((jy_p - jy_m) / (2 * h), abs=1e-5)


def test_params_from_config_mapping():
    params = dyn.params_from_config({"wheelbase": "3.1", "v_max": "40"})
    assert params.wheelbase == 3.1
    assert params.v_max == 40.0
    assert params.steer_w0 == 15.0  # default retained
