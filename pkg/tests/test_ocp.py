import numpy as np
import pytest

from softmpc import dynamics as dyn
from softmpc import ocp
from softmpc.dynamics import VehicleParams
from softmpc.environment import NO_BOUND, DisturbanceProfile, nominal_profile
from softmpc.path import straight_path
from softmpc.sqp import STATUS_INFEASIBLE, STATUS_OPTIMAL, solve

PARAMS = VehicleParams()
PATH = straight_path(600.0)
HORIZON = ocp.HorizonConfig(n_cost=8, n_constraint=40, t_s=0.1)
STACK = ocp.ConstraintStack(params=PARAMS)
TERMINAL = ocp.TerminalSets()

MODE_E1 = ocp.RelaxationMode(
    name="E1", priority=1, relax={"g_follow": "delta_g"},
    ceilings={"delta_g": 30.0})
MODE_E2 = ocp.RelaxationMode(
    name="E2", priority=2,
    relax={"g_follow": "delta_g", "a_req_comfort_lb": "delta_a"},
    ceilings={"delta_g": 30.0, "delta_a": 6.0})
MODE_E3 = ocp.RelaxationMode(
    name="E3", priority=3,
    relax={"a_y_ub": "d_ay_hi", "a_y_lb": "d_ay_lo",
           "j_y_ub": "d_jy_hi", "j_y_lb": "d_jy_lo"},
    ceilings={"d_ay_hi": 4.0, "d_ay_lo": 4.0, "d_jy_hi": 12.0, "d_jy_lo": 12.0},
    drop=("g_lon_safe", "g_follow"))


def _weights(v_ref=7.0):
    return ocp.terminal_weights(PATH, PARAMS, HORIZON.t_s, v_ref)


def _refs(x0_s, v_ref=7.0, e_y_ref=0.0):
    return ocp.build_reference(x0_s, v_ref, e_y_ref, HORIZON, PARAMS)


def _free_profile():
    return nominal_profile(HORIZON.n_constraint, PATH.lane_width)


def test_horizon_config_validation():
    with pytest.raises(ValueError):
        ocp.HorizonConfig(n_cost=10, n_constraint=5)
    with pytest.raises(ValueError):
        ocp.HorizonConfig(t_s=0.0)


def test_mode_selector_row_sums():
    for mode in (MODE_E1, MODE_E2, MODE_E3):
        E = mode.selector()
        relaxed_rows = [ocp.ROW_LABELS.index(lbl) for lbl in mode.relax]
        sums = E.sum(axis=1)
        for k in range(len(ocp.ROW_LABELS)):
            assert sums[k] == (1.0 if k in relaxed_rows else 0.0)


def test_mode_requires_known_labels_and_ceilings():
    with pytest.raises(ValueError, match="unknown row label"):
        ocp.RelaxationMode(name="x", priority=1, relax={"nope": "c"},
                           ceilings={"c": 1.0})
    with pytest.raises(ValueError, match="ceiling"):
        ocp.RelaxationMode(name="x", priority=1, relax={"g_follow": "c"},
                           ceilings={})


def test_eval_constraint_examples():
    # worked arithmetic for the headway and yield rows
    x = dyn.state(s=40.0, v=10.0)
    u = np.zeros(2)
    vals = STACK.evaluate(x, u, sigma=45.0, beta_lo=-1.75, beta_hi=1.75)
    i = {lbl: k for k, lbl in enumerate(ocp.ROW_LABELS)}
    assert vals[i["g_lon_safe"]] == pytest.approx(-5.0)
    assert vals[i["g_follow"]] == pytest.approx(40.0 + 1.5 * 10.0 - 45.0)  # +10
    assert vals[i["g_lat_ub"]] == pytest.approx(-1.75)
    assert vals[i["g_lat_lb"]] == pytest.approx(-1.75)


def test_eval_constraints_window_sentinel():
    x = dyn.state(s=40.0, v=10.0)
    vals = STACK.evaluate(x, np.zeros(2), sigma=NO_BOUND, beta_lo=-1.75, beta_hi=1.75)
    i = {lbl: k for k, lbl in enumerate(ocp.ROW_LABELS)}
    assert vals[i["g_lon_safe"]] == -np.inf
    assert vals[i["g_follow"]] == -np.inf


def test_stack_linearization_matches_finite_differences():
    rng = np.random.default_rng(2)
    for _ in range(25):
        x = dyn.state(s=rng.uniform(5, 50), e_y=rng.uniform(-1, 1),
                      e_psi=rng.uniform(-0.2, 0.2), delta=rng.uniform(-0.3, 0.3),
                      alpha=rng.uniform(-0.4, 0.4), v=rng.uniform(0, 25),
                      a=rng.uniform(-4, 2))
        u = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-5, 2)])
        sigma, lo, hi = 60.0, -1.75, 1.75
        vals, Cx, Cu, kept = STACK.linearize(x, u, sigma, lo, hi)
        h = 1e-7
        for j in range(dyn.NX):
            dx = np.zeros(dyn.NX)
            dx[j] = h
            fp = STACK.evaluate(x + dx, u, sigma, lo, hi)[kept]
            fm = STACK.evaluate(x - dx, u, sigma, lo, hi)[kept]
            np.testing.assert_allclose(Cx[:, j], (fp - fm) / (2 * h), atol=1e-5)
        for j in range(dyn.NU):
            du = np.zeros(dyn.NU)
            du[j] = h
            fp = STACK.evaluate(x, u + du, sigma, lo, hi)[kept]
            fm = STACK.evaluate(x, u - du, sigma, lo, hi)[kept]
            np.testing.assert_allclose(Cu[:, j], (fp - fm) / (2 * h), atol=1e-5)


def test_reference_is_kinematically_consistent():
    x_refs, u_refs = ocp.build_reference(10.0, 15.0, 0.0, HORIZON, PARAMS)
    t_s = HORIZON.t_s
    v = x_refs[:, dyn.IDX_V]
    s = x_refs[:, dyn.IDX_S]
    np.testing.assert_allclose(np.diff(s), 0.5 * (v[1:] + v[:-1]) * t_s, atol=1e-12)
    assert v[HORIZON.n_cost] == 15.0  # cruise portion untouched
    assert v[-1] == pytest.approx(max(15.0 - 2.5 * (HORIZON.n_constraint - HORIZON.n_cost) * t_s, 0.0))


def test_terminal_weights_block_structure():
    w = _weights()
    P = w.P
    lon, lat = list(dyn.LON_IDX), list(dyn.LAT_IDX)
    # no coupling between the chains
    assert np.max(np.abs(P[np.ix_(lon, lat)])) == 0.0
    assert np.all(np.linalg.eigvalsh(P) > 0.0)


def test_terminal_cost_lyapunov_decrease():
    # p(x+) - p(x) <= -q(x, Kx) on the linearized model, 1000 tube samples
    w = _weights()
    x_ref = dyn.state(s=1.0, v=7.0)  # same operating point the weights use
    A, B = dyn.jacobians(x_ref, np.zeros(2), PATH, PARAMS, HORIZON.t_s)
    rng = np.random.default_rng(4)
    scale = np.array([1.0, 0.5, 0.1, 0.1, 0.2, 1.0, 0.5])
    for _ in range(1000):
        e = rng.uniform(-1.0, 1.0, dyn.NX) * scale
        u = -w.K @ e
        e_next = A @ e + B @ u
        p_now = e @ w.P @ e
        p_next = e_next @ w.P @ e_next
        q_now = e @ w.Q @ e + u @ w.R @ u
        assert p_next - p_now <= -q_now + 1e-8


def test_nominal_problem_reduces_to_tracking_without_ru():
    weights = _weights()
    x0 = dyn.state(s=5.0, e_y=0.3, v=7.0)
    x_refs, u_refs = _refs(5.0)
    nlp = ocp.build_nominal(x0, PATH, PARAMS, weights, HORIZON, STACK,
                            _free_profile(), TERMINAL, x_refs, u_refs,
                            u_init=u_refs)
    rep = solve(nlp)
    assert rep.status == STATUS_OPTIMAL
    # lateral error regulated toward the reference
    assert abs(rep.xs[HORIZON.n_cost, dyn.IDX_EY]) < 0.1
    # standstill terminal reached (within the tolerance band)
    assert abs(rep.xs[-1, dyn.IDX_V]) < 2e-4


def test_variable_count_is_inputs_times_horizon():
    weights = _weights()
    x_refs, u_refs = _refs(0.0)
    nlp = ocp.build_nominal(dyn.state(v=7.0), PATH, PARAMS, weights, HORIZON,
                            STACK, _free_profile(), TERMINAL, x_refs, u_refs)
    assert nlp.horizon * nlp.nu == 2 * HORIZON.n_constraint
    assert nlp.n_gamma == 0


def test_zero_slack_relaxed_equals_nominal_feasible_set():
    # identical accept/reject verdicts on random candidate trajectories
    weights = _weights()
    rng = np.random.default_rng(9)
    profile = _free_profile()
    x_refs, u_refs = _refs(0.0)
    x0 = dyn.state(s=0.0, v=7.0)
    for _ in range(100):
        us = np.stack([rng.uniform(-0.05, 0.05, HORIZON.n_constraint),
                       rng.uniform(-4.0, 2.0, HORIZON.n_constraint)], axis=1)
        xs = [x0]
        for n in range(HORIZON.n_constraint):
            xs.append(dyn.f_discrete(xs[-1], us[n], PATH, PARAMS, HORIZON.t_s))
        xs = np.array(xs)
        res_nom = ocp.eval_constraints(xs, us, STACK, profile)
        E = MODE_E2.selector()
        lift = E @ np.zeros(MODE_E2.n_channels)
        res_rel = res_nom - lift[:, None]
        assert np.array_equal(res_nom <= 1e-9, res_rel <= 1e-9)


def test_relaxed_lifts_only_selected_rows():
    weights = _weights()
    x0 = dyn.state(s=0.0, v=7.0)
    x_refs, u_refs = _refs(0.0)
    # lead vehicle at 5 m/s whose yield bound starts inside the desired
    # headway: g_follow violated at the fixed initial state
    M = HORIZON.n_constraint
    sigma = 8.0 + 5.0 * HORIZON.t_s * np.arange(M + 1)
    profile = DisturbanceProfile(yield_bound=sigma,
                                 corridor_lo=np.full(M + 1, -1.75),
                                 corridor_hi=np.full(M + 1, 1.75),
                                 window=(0, M))
    nom = ocp.build_nominal(x0, PATH, PARAMS, weights, HORIZON, STACK, profile,
                            TERMINAL, x_refs, u_refs, u_init=u_refs)
    rep_nom = solve(nom)
    # headway violated at stage 0 (8 < 0 + 1.5*7) and not relaxable
    assert rep_nom.status == STATUS_INFEASIBLE

    slack = np.array([8.0])  # lifts g_follow enough at the initial state
    rel = ocp.build_relaxed(x0, PATH, PARAMS, weights, HORIZON, STACK, profile,
                            TERMINAL, MODE_E1, slack, x_refs, u_refs,
                            u_init=u_refs)
    rep_rel = solve(rel)
    assert rep_rel.status == STATUS_OPTIMAL
    res = ocp.eval_constraints(rep_rel.xs, rep_rel.us, STACK, profile)
    hard = MODE_E1.hard_row_indices()
    assert np.max(res[hard]) <= 1e-6
    follow = ocp.ROW_LABELS.index("g_follow")
    assert np.max(res[follow]) <= slack[0] + 1e-6
    assert np.max(res[follow]) > 1e-3  # the lift was actually used


def test_relaxed_rejects_slack_beyond_ceiling():
    weights = _weights()
    x_refs, u_refs = _refs(0.0)
    with pytest.raises(ValueError, match="ceiling"):
        ocp.build_relaxed(dyn.state(v=15.0), PATH, PARAMS, weights, HORIZON,
                          STACK, _free_profile(), TERMINAL, MODE_E1,
                          np.array([31.0]), x_refs, u_refs)


def test_mode_e3_drops_longitudinal_rows():
    weights = _weights()
    x0 = dyn.state(s=50.0, v=7.0)
    x_refs, u_refs = _refs(50.0)
    M = HORIZON.n_constraint
    # yield bound behind the vehicle: impossible unless the rows are dropped
    profile = DisturbanceProfile(yield_bound=np.full(M + 1, 10.0),
                                 corridor_lo=np.full(M + 1, -1.75),
                                 corridor_hi=np.full(M + 1, 1.75),
                                 window=(0, M))
    nom = ocp.build_nominal(x0, PATH, PARAMS, weights, HORIZON, STACK, profile,
                            TERMINAL, x_refs, u_refs, u_init=u_refs)
    assert solve(nom).status == STATUS_INFEASIBLE
    rel = ocp.build_relaxed(x0, PATH, PARAMS, weights, HORIZON, STACK, profile,
                            TERMINAL, MODE_E3, np.zeros(4), x_refs, u_refs,
                            u_init=u_refs)
    assert solve(rel).status == STATUS_OPTIMAL


def test_slack_problem_zero_when_nominal_feasible():
    weights = _weights()
    x0 = dyn.state(s=5.0, v=7.0)
    x_refs, u_refs = _refs(5.0)
    nlp = ocp.build_slack_problem(x0, PATH, PARAMS, weights, HORIZON, STACK,
                                  _free_profile(), TERMINAL, MODE_E2,
                                  x_refs, u_refs, u_init=u_refs)
    rep = solve(nlp)
    assert rep.status in (STATUS_OPTIMAL, "max-iter")
    # interior-point center offset allowed; the oracle layer resolves
    # feasible instances to an exact zero via its nominal-first shortcut
    np.testing.assert_allclose(rep.gamma, 0.0, atol=5e-5)


def test_slack_problem_recovers_needed_headway_lift():
    weights = _weights()
    x0 = dyn.state(s=0.0, v=7.0)
    x_refs, u_refs = _refs(0.0)
    M = HORIZON.n_constraint
    sigma = 8.0 + 5.0 * HORIZON.t_s * np.arange(M + 1)
    profile = DisturbanceProfile(yield_bound=sigma,
                                 corridor_lo=np.full(M + 1, -1.75),
                                 corridor_hi=np.full(M + 1, 1.75),
                                 window=(0, M))
    nlp = ocp.build_slack_problem(x0, PATH, PARAMS, weights, HORIZON, STACK,
                                  profile, TERMINAL, MODE_E1, x_refs, u_refs,
                                  u_init=u_refs)
    rep = solve(nlp)
    assert rep.status == STATUS_OPTIMAL
    # at stage 0 the headway row is violated by s + t_gap v - sigma = 2.5
    # and no input can change the initial state: slack must cover it
    assert rep.gamma[0] >= 2.5 - 1e-6
    # self-consistency: the relaxed problem accepts the recovered slack
    rel = ocp.build_relaxed(x0, PATH, PARAMS, weights, HORIZON, STACK, profile,
                            TERMINAL, MODE_E1, np.minimum(rep.gamma + 1e-6, 30.0),
                            x_refs, u_refs, u_init=rep.us)
    assert solve(rel).status == STATUS_OPTIMAL
