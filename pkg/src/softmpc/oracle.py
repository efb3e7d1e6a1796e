"""Ground-truth slack computation and labeled-dataset generation.

The surrogate inputs fix a canonical layout per relaxation family:

* longitudinal modes: theta = [yield-bound offsets over the horizon,
  0 (position entry), speed, acceleration]; position invariance is exploited
  by storing bounds relative to the vehicle, with the position entry kept in
  the layout.
* lateral mode: theta = [corridor lower bounds, corridor upper bounds,
  speed, lateral error, heading error, steering angle, steering rate].

Each oracle call reconstructs the decoupled subproblem implied by theta
(longitudinal chain s/v/a or lateral chain e_y/e_psi/delta/alpha), solves
the minimal-slack problem, and snaps interior-point center offsets below
snap_tol to an exact zero so feasible instances report a zero slack.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from .dynamics import VehicleParams
from .environment import DisturbanceProfile, NO_BOUND
from .ocp import ConstraintStack, HorizonConfig, RelaxationMode, TerminalSets, build_reference
from .sqp import STATUS_OPTIMAL, NlpDescription, SolverOptions, SolveReport, solve

SNAP_TOL = 1e-3     # below the dataset's brute-force grid resolution
SIGMA_CAP = 250.0   # relative yield bound treated as unconstrained

# slack problems carry multipliers up to the ceiling scale; starting the
# penalty above that spares most of the escalation ladder on infeasible
# samples without affecting exactness. KKT targets match the labeling
# accuracy actually needed (slacks to the grid resolution), not the
# controller-grade defaults
ORACLE_SOLVER_OPTS = SolverOptions(penalty_init=1e4, penalty_max=1e4,
                                   max_sqp_iter=20, max_ip_iter=50,
                                   ip_stall_limit=10,
                                   tol_stationarity=1e-5,
                                   tol_feasibility=1e-7,
                                   tol_complementarity=1e-6)


@dataclass(frozen=True)
class ScenarioTemplate:
    """Canonical placement of the collision window for one scenario family.

    kind selects the decoupled subsystem the slack problem runs on. v_ref is
    the cruise reference the subproblem tracks; lane geometry serves the
    lateral corridor rows.
    """
    kind: str                      # "lon" | "lat"
    horizon: HorizonConfig
    params: VehicleParams
    stack: ConstraintStack
    terminal: TerminalSets
    v_ref: float = 20.0
    lane_width: float = 3.5

    def __post_init__(self):
        if self.kind not in ("lon", "lat"):
            raise ValueError("template kind must be 'lon' or 'lat'")

    @property
    def n_window(self) -> int:
        return self.horizon.n_constraint + 1

    @property
    def theta_dim(self) -> int:
        if self.kind == "lon":
            return self.n_window + 3
        return 2 * self.n_window + 5


# ---------------------------------------------------------------------------
# theta construction (shared by the controller and the dataset generator)
# ---------------------------------------------------------------------------


def theta_lon(x: np.ndarray, profile: DisturbanceProfile) -> np.ndarray:
    """Longitudinal surrogate input from the full state and profile."""
    s = x[dyn.IDX_S]
    rel = np.minimum(profile.yield_bound - s, SIGMA_CAP)
    rel = np.where(np.isfinite(rel), rel, SIGMA_CAP)
    return np.concatenate([rel, [0.0, x[dyn.IDX_V], x[dyn.IDX_A]]])


def theta_lat(x: np.ndarray, profile: DisturbanceProfile) -> np.ndarray:
    """Lateral surrogate input from the full state and profile."""
    return np.concatenate([
        profile.corridor_lo, profile.corridor_hi,
        [x[dyn.IDX_V], x[dyn.IDX_EY], x[dyn.IDX_EPSI],
         x[dyn.IDX_DELTA], x[dyn.IDX_ALPHA]]])


def build_theta(template: ScenarioTemplate, x: np.ndarray,
                profile: DisturbanceProfile) -> np.ndarray:
    return theta_lon(x, profile) if template.kind == "lon" else theta_lat(x, profile)


# ---------------------------------------------------------------------------
# decoupled subproblems
# ---------------------------------------------------------------------------


def _lon_discrete(params: VehicleParams, t_s: float):
    """Fourth-order Taylor step of the linear longitudinal chain (s, v, a).

    Identical to the longitudinal block of the full vehicle RK4 step on a
    straight path with the lateral states at rest.
    """
    L = np.array([[0.0, 1.0, 0.0],
                  [0.0, 0.0, 1.0],
                  [0.0, 0.0, -params.accel_tc]])
    Bc = np.array([[0.0], [0.0], [params.accel_tc]])
    # A = sum_{k=0..4} (t_s L)^k / k!
    A = np.eye(3)
    P = np.eye(3)
    fact = 1.0
    for k in range(1, 5):
        P = P @ (t_s * L)
        fact *= k
        A = A + P / fact
    # B = (sum_{k=1..4} t_s^k L^{k-1} / k!) Bc
    Bacc = np.zeros((3, 3))
    P = np.eye(3)
    fact = 1.0
    for k in range(1, 5):
        fact *= k
        Bacc = Bacc + P * (t_s ** k) / fact
        P = P @ L
    B = Bacc @ Bc
    return A, B


def _lon_nlp(template: ScenarioTemplate, theta: np.ndarray,
             mode: RelaxationMode, with_slack: bool) -> NlpDescription:
    h = template.horizon
    p = template.params
    st = template.stack
    M = h.n_constraint
    sigma = np.asarray(theta[:M + 1], dtype=float)
    s0, v0, a0 = theta[M + 1], theta[M + 2], theta[M + 3]
    x0 = np.array([s0, v0, a0])

    A_d, B_d = _lon_discrete(p, h.t_s)
    x_refs7, u_refs7 = build_reference(s0, template.v_ref, 0.0, h, p)
    ref_s = x_refs7[:, dyn.IDX_S]
    ref_v = x_refs7[:, dyn.IDX_V]
    ref_a = x_refs7[:, dyn.IDX_A]

    relax_follow = "g_follow" in mode.relax
    relax_comfort = "a_req_comfort_lb" in mode.relax
    drop_lon = "g_lon_safe" in mode.drop
    drop_follow = "g_follow" in mode.drop
    chan = {ch: j for j, ch in enumerate(mode.channels)}
    q = mode.n_channels if with_slack else 0

    def rows(n, x, u):
        s, v, a = x
        vals = [v - p.v_max, -v,
                a - p.accel_max, p.accel_min - a,
                u[0] - p.accel_max, p.accel_min - u[0],
                st.a_req_comfort_min - u[0]]
        Cx = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
                       [0.0, 0.0, 1.0], [0.0, 0.0, -1.0],
                       [0.0, 0.0, 0.0], [0.0, 0.0, 0.0],
                       [0.0, 0.0, 0.0]])
        Cu = np.array([[0.0], [0.0], [0.0], [0.0], [1.0], [-1.0], [-1.0]])
        Cg_rows = [None] * 7
        if q and relax_comfort:
            g = np.zeros(q)
            g[chan["delta_a"]] = -1.0
            Cg_rows[6] = g
        if not drop_lon:
            vals.append(s - sigma[n])
            Cx = np.vstack([Cx, [1.0, 0.0, 0.0]])
            Cu = np.vstack([Cu, [0.0]])
            Cg_rows.append(None)
        if not drop_follow:
            vals.append(s + st.t_gap * v - sigma[n])
            Cx = np.vstack([Cx, [1.0, st.t_gap, 0.0]])
            Cu = np.vstack([Cu, [0.0]])
            if q and relax_follow:
                g = np.zeros(q)
                g[chan["delta_g"]] = -1.0
                Cg_rows.append(g)
            else:
                Cg_rows.append(None)
        v_arr = np.asarray(vals)
        Cg = None
        if q:
            Cg = np.zeros((v_arr.size, q))
            for i, g in enumerate(Cg_rows):
                if g is not None:
                    Cg[i] = g
        return v_arr, Cx, Cu, Cg

    tol = template.terminal.standstill_tol
    margin = template.terminal.stop_margin
    with_yield = not drop_lon

    def terminal_rows(x):
        s, v, a = x
        vals = [v - tol, -v - tol, a - tol, -a - tol]
        Cx = [[0.0, 1.0, 0.0], [0.0, -1.0, 0.0],
              [0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]
        if with_yield:
            vals.append(s - (sigma[M] - margin))
            Cx.append([1.0, 0.0, 0.0])
        v_arr = np.asarray(vals)
        Cg = np.zeros((v_arr.size, q)) if q else None
        return v_arr, np.asarray(Cx), Cg

    W = np.zeros((M, 4, 4))
    # input tie-break regularization: picks among equivalent inputs without
    # moving the constraint-pinned slack optimum
    W[:, 3, 3] = 1e-4
    ref = np.zeros((M, 4))
    ref[:, 0] = ref_s[:M]
    ref[:, 1] = ref_v[:M]
    ref[:, 2] = ref_a[:M]
    ref[:, 3] = u_refs7[:, 1]
    u_init = u_refs7[:, 1:2]

    kw = {}
    if q:
        kw = dict(n_gamma=q, gamma_weight=2.0 * h.n_cost * np.eye(q),
                  gamma_linear=np.full(q, 0.5),
                  gamma_lo=np.zeros(q), gamma_hi=mode.ceiling_vector())
    return NlpDescription(
        nx=3, nu=1, horizon=M, x0=x0,
        dyn_f=lambda n, x, u: A_d @ x + B_d @ u,
        dyn_jac=lambda n, x, u: (A_d, B_d),
        cost_W=W, cost_ref=ref, cost_P=np.zeros((3, 3)),
        cost_ref_M=np.array([ref_s[M], ref_v[M], ref_a[M]]),
        stage_rows=rows, terminal_rows=terminal_rows, u_init=u_init, **kw)


def _lat_nlp(template: ScenarioTemplate, theta: np.ndarray,
             mode: RelaxationMode, with_slack: bool) -> NlpDescription:
    h = template.horizon
    p = template.params
    M = h.n_constraint
    nw = M + 1
    beta_lo = np.asarray(theta[:nw], dtype=float)
    beta_hi = np.asarray(theta[nw:2 * nw], dtype=float)
    v, ey0, epsi0, delta0, alpha0 = theta[2 * nw:]
    x0 = np.array([ey0, epsi0, delta0, alpha0])
    l = p.wheelbase
    w0, w1 = p.steer_w0, p.steer_w1
    t_s = h.t_s

    invaded = beta_lo > 0.0
    e_y_ref = template.lane_width if np.any(invaded) else 0.0

    def f(n, x, u):
        def fc(xx):
            ey, epsi, delta, alpha = xx
            return np.array([v * math.sin(epsi),
                             v * math.tan(delta) / l,
                             alpha,
                             w0 ** 2 * (u[0] - delta) - 2.0 * w0 * w1 * alpha])
        k1 = fc(x)
        k2 = fc(x + 0.5 * t_s * k1)
        k3 = fc(x + 0.5 * t_s * k2)
        k4 = fc(x + t_s * k3)
        return x + (t_s / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def jac_cont(x):
        ey, epsi, delta, alpha = x
        A = np.zeros((4, 4))
        A[0, 1] = v * math.cos(epsi)
        A[1, 2] = v * (1.0 + math.tan(delta) ** 2) / l
        A[2, 3] = 1.0
        A[3, 2] = -w0 ** 2
        A[3, 3] = -2.0 * w0 * w1
        B = np.array([[0.0], [0.0], [0.0], [w0 ** 2]])
        return A, B

    def jac(n, x, u):
        hh = t_s
        J1, Bc = jac_cont(x)
        def fc(xx):
            ey, epsi, delta, alpha = xx
            return np.array([v * math.sin(epsi),
                             v * math.tan(delta) / l,
                             alpha,
                             w0 ** 2 * (u[0] - delta) - 2.0 * w0 * w1 * alpha])
        k1 = fc(x)
        x2 = x + 0.5 * hh * k1
        J2, _ = jac_cont(x2)
        k2 = fc(x2)
        x3 = x + 0.5 * hh * k2
        J3, _ = jac_cont(x3)
        k3 = fc(x3)
        x4 = x + hh * k3
        J4, _ = jac_cont(x4)
        I = np.eye(4)
        K1 = J1
        K2 = J2 @ (I + 0.5 * hh * K1)
        K3 = J3 @ (I + 0.5 * hh * K2)
        K4 = J4 @ (I + hh * K3)
        A = I + (hh / 6.0) * (K1 + 2 * K2 + 2 * K3 + K4)
        K1u = Bc
        K2u = Bc + J2 @ (0.5 * hh * K1u)
        K3u = Bc + J3 @ (0.5 * hh * K2u)
        K4u = Bc + J4 @ (hh * K3u)
        B = (hh / 6.0) * (K1u + 2 * K2u + 2 * K3u + K4u)
        return A, B

    chan = {ch: j for j, ch in enumerate(mode.channels)}
    q = mode.n_channels if with_slack else 0
    tube = template.terminal.tube
    tube_w = np.array([tube[dyn.IDX_EY], tube[dyn.IDX_EPSI],
                       tube[dyn.IDX_DELTA], tube[dyn.IDX_ALPHA]])
    N = h.n_cost

    def rows(n, x, u):
        ey, epsi, delta, alpha = x
        tan_d = math.tan(delta)
        sec2 = 1.0 + tan_d * tan_d
        a_y = v * v * tan_d / l
        j_y = v * v * alpha * sec2 / l
        g_ay = np.array([0.0, 0.0, v * v * sec2 / l, 0.0])
        g_jy = np.array([0.0, 0.0, v * v * alpha * 2.0 * tan_d * sec2 / l,
                         v * v * sec2 / l])
        vals = [epsi - p.e_psi_max, -epsi - p.e_psi_max,
                delta - p.delta_max, -delta - p.delta_max,
                u[0] - p.delta_max, -u[0] - p.delta_max,
                alpha - p.alpha_max, -alpha - p.alpha_max,
                a_y - p.lat_accel_max, -a_y - p.lat_accel_max,
                j_y - p.lat_jerk_max, -j_y - p.lat_jerk_max,
                ey - beta_hi[n], beta_lo[n] - ey]
        Cx = np.zeros((14, 4))
        Cx[0, 1], Cx[1, 1] = 1.0, -1.0
        Cx[2, 2], Cx[3, 2] = 1.0, -1.0
        Cx[6, 3], Cx[7, 3] = 1.0, -1.0
        Cx[8] = g_ay
        Cx[9] = -g_ay
        Cx[10] = g_jy
        Cx[11] = -g_jy
        Cx[12, 0], Cx[13, 0] = 1.0, -1.0
        Cu = np.zeros((14, 1))
        Cu[4, 0], Cu[5, 0] = 1.0, -1.0
        if n >= N:
            err = x - np.array([e_y_ref, 0.0, 0.0, 0.0])
            vals.extend(list(err - tube_w))
            vals.extend(list(-err - tube_w))
            Cx = np.vstack([Cx, np.eye(4), -np.eye(4)])
            Cu = np.vstack([Cu, np.zeros((8, 1))])
        v_arr = np.asarray(vals)
        Cg = None
        if q:
            Cg = np.zeros((v_arr.size, q))
            Cg[8, chan["d_ay_hi"]] = -1.0
            Cg[9, chan["d_ay_lo"]] = -1.0
            Cg[10, chan["d_jy_hi"]] = -1.0
            Cg[11, chan["d_jy_lo"]] = -1.0
        return v_arr, Cx, Cu, Cg

    def terminal_rows(x):
        vals = np.array([x[0] - beta_hi[M], beta_lo[M] - x[0]])
        Cx = np.array([[1.0, 0, 0, 0], [-1.0, 0, 0, 0]])
        Cg = np.zeros((2, q)) if q else None
        return vals, Cx, Cg

    W = np.zeros((M, 5, 5))
    W[:, 4, 4] = 1e-4
    ref = np.zeros((M, 5))
    ref[:, 0] = e_y_ref

    kw = {}
    if q:
        kw = dict(n_gamma=q, gamma_weight=2.0 * h.n_cost * np.eye(q),
                  gamma_linear=np.full(q, 0.5),
                  gamma_lo=np.zeros(q), gamma_hi=mode.ceiling_vector())
    return NlpDescription(
        nx=4, nu=1, horizon=M, x0=x0,
        dyn_f=f, dyn_jac=jac,
        cost_W=W, cost_ref=ref, cost_P=np.zeros((4, 4)),
        cost_ref_M=np.array([e_y_ref, 0.0, 0.0, 0.0]),
        stage_rows=rows, terminal_rows=terminal_rows,
        u_init=np.zeros((M, 1)), **kw)


def oracle_solve(template: ScenarioTemplate, mode: RelaxationMode,
                 theta: np.ndarray, opts: SolverOptions | None = None
                 ) -> tuple[bool, np.ndarray | None, SolveReport]:
    """Minimal slack for one surrogate input; (feasible, slack, report).

    Slack center offsets below SNAP_TOL collapse to exact zeros, so feasible
    nominal instances report a zero slack vector. A run that ends at the
    iteration cap but with a feasible point still counts as feasible with
    the slack it found; everything else is conservatively infeasible.
    """
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (template.theta_dim,):
        raise ValueError(
            f"theta has shape {theta.shape}, expected ({template.theta_dim},)")
    if template.kind == "lon":
        nlp = _lon_nlp(template, theta, mode, with_slack=True)
    else:
        nlp = _lat_nlp(template, theta, mode, with_slack=True)
    rep = solve(nlp, opts or ORACLE_SOLVER_OPTS)
    feasible = rep.status == STATUS_OPTIMAL or (
        rep.status != "infeasible"
        and rep.infeasibility_measure <= 1e-6)
    if not feasible:
        return False, None, rep
    slack = rep.gamma.copy()
    slack[np.abs(slack) < SNAP_TOL] = 0.0
    slack = np.clip(slack, 0.0, mode.ceiling_vector())
    return True, slack, rep


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LonSampler:
    """Parameter ranges for synthetic yield-bound profiles (cut-in shaped)."""
    v0: tuple = (3.0, 28.0)
    a0: tuple = (-6.0, 2.5)
    gap0: tuple = (2.0, 90.0)
    lead_speed: tuple = (0.0, 25.0)
    drop: tuple = (0.0, 35.0)
    drop_start: tuple = (0.0, 70.0)
    drop_len: tuple = (1.0, 25.0)
    lead_speed_after: tuple = (0.0, 20.0)

    names = ("v0", "a0", "gap0", "lead_speed", "drop", "drop_start",
             "drop_len", "lead_speed_after")


@dataclass(frozen=True)
class LatSampler:
    """Parameter ranges for corridor-switch profiles and lateral states."""
    v: tuple = (5.0, 28.0)
    e_y: tuple = (-0.3, 3.8)
    e_psi: tuple = (-0.15, 0.15)
    delta: tuple = (-0.1, 0.1)
    alpha: tuple = (-0.3, 0.3)
    invade_start: tuple = (1.0, 130.0)   # beyond the horizon: no invasion

    names = ("v", "e_y", "e_psi", "delta", "alpha", "invade_start")


def _latin_hypercube(rng: np.random.Generator, count: int, dims: int) -> np.ndarray:
    """Stratified unit-cube samples, one per stratum per dimension."""
    u = (rng.random((count, dims)) + np.arange(count)[:, None]) / count
    for j in range(dims):
        u[:, j] = u[rng.permutation(count), j]
    return u


def _lon_theta_from_params(template: ScenarioTemplate, p: dict) -> np.ndarray:
    M = template.horizon.n_constraint
    t_s = template.horizon.t_s
    n = np.arange(M + 1, dtype=float)
    pre = p["gap0"] + p["lead_speed"] * t_s * n
    j0 = p["drop_start"]
    jlen = max(p["drop_len"], 1e-9)
    ramp = np.clip((n - j0) / jlen, 0.0, 1.0)
    after_start = j0 + jlen
    post_extra = np.maximum(n - after_start, 0.0) * (p["lead_speed_after"] - p["lead_speed"]) * t_s
    sigma = pre - ramp * p["drop"] + post_extra
    sigma = np.minimum(np.maximum(sigma, 0.3), SIGMA_CAP)
    return np.concatenate([sigma, [0.0, p["v0"], p["a0"]]])


def _lat_theta_from_params(template: ScenarioTemplate, p: dict) -> np.ndarray:
    M = template.horizon.n_constraint
    half = 0.5 * template.lane_width
    n = np.arange(M + 1, dtype=float)
    invaded = n >= p["invade_start"]
    lo = np.where(invaded, half, -half)
    hi = np.where(invaded, 3.0 * half, half)
    return np.concatenate([lo, hi, [p["v"], p["e_y"], p["e_psi"],
                                    p["delta"], p["alpha"]]])


def sample_thetas(template: ScenarioTemplate, sampler, count: int,
                  seed: int) -> np.ndarray:
    """Deterministic Latin-hypercube draw mapped to theta vectors."""
    rng = np.random.default_rng(seed)
    names = sampler.names
    unit = _latin_hypercube(rng, count, len(names))
    thetas = np.empty((count, template.theta_dim))
    for i in range(count):
        p = {}
        for j, name in enumerate(names):
            lo, hi = getattr(sampler, name)
            p[name] = lo + unit[i, j] * (hi - lo)
        if template.kind == "lon":
            thetas[i] = _lon_theta_from_params(template, p)
        else:
            thetas[i] = _lat_theta_from_params(template, p)
    return thetas


_WORKER_CTX = {}


def _dataset_worker_init(template, mode, opts):
    _WORKER_CTX["template"] = template
    _WORKER_CTX["mode"] = mode
    _WORKER_CTX["opts"] = opts


def _dataset_worker(args):
    i, theta = args
    feasible, slack, _ = oracle_solve(_WORKER_CTX["template"],
                                      _WORKER_CTX["mode"], theta,
                                      _WORKER_CTX["opts"])
    return i, bool(feasible), slack


def generate_dataset(template: ScenarioTemplate, mode: RelaxationMode,
                     count: int, seed: int, sampler=None,
                     opts: SolverOptions | None = None,
                     workers: int | None = None):
    """Labeled samples (theta, feasible, slack) for one relaxation mode.

    Samples are independent, so labeling fans out over worker processes;
    results are reassembled by sample index, keeping the dataset identical
    regardless of worker count.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if sampler is None:
        sampler = LonSampler() if template.kind == "lon" else LatSampler()
    thetas = sample_thetas(template, sampler, count, seed)

    if workers is None:
        workers = os.cpu_count() or 1
    results = [None] * count
    if workers > 1 and count > 8:
        import multiprocessing as mp
        ctx = mp.get_context("fork")
        with ctx.Pool(workers, initializer=_dataset_worker_init,
                      initargs=(template, mode, opts)) as pool:
            for i, feasible, slack in pool.imap_unordered(
                    _dataset_worker, list(enumerate(thetas)), chunksize=4):
                results[i] = (feasible, slack)
    else:
        _dataset_worker_init(template, mode, opts)
        for i in range(count):
            _, feasible, slack = _dataset_worker((i, thetas[i]))
            results[i] = (feasible, slack)

    rows = []
    n_feasible = 0
    for i in range(count):
        feasible, slack = results[i]
        n_feasible += int(feasible)
        rows.append((thetas[i], feasible, slack))
    balance = n_feasible / count
    return rows, balance


def save_dataset(rows, filename: str, template: ScenarioTemplate,
                 mode: RelaxationMode, seed: int, balance: float,
                 sampler=None) -> None:
    """CSV with theta/label/slack columns plus a JSON metadata sidecar."""
    d = len(rows[0][0])
    n_ch = mode.n_channels
    with open(filename, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"theta_{i}" for i in range(d)] + ["feasible"] + \
                 [f"delta_{c}" for c in mode.channels]
        writer.writerow(header)
        for theta, feasible, slack in rows:
            rec = [repr(float(t)) for t in theta] + [int(feasible)]
            if slack is None:
                rec += [""] * n_ch
            else:
                rec += [repr(float(sv)) for sv in slack]
            writer.writerow(rec)
    meta = {
        "mode": mode.name,
        "priority": mode.priority,
        "kind": template.kind,
        "theta_dim": d,
        "window_len": template.n_window,
        "channels": list(mode.channels),
        "ceilings": [float(c) for c in mode.ceiling_vector()],
        "count": len(rows),
        "seed": seed,
        "feasible_fraction": balance,
        "v_ref": template.v_ref,
        "lane_width": template.lane_width,
        "sampler": {name: list(getattr(sampler, name)) for name in sampler.names}
        if sampler is not None else None,
    }
    with open(filename.rsplit(".", 1)[0] + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def load_dataset(filename: str):
    """Returns (thetas (n, d), feasible (n,), slacks (n, c) with NaN rows)."""
    with open(filename, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("theta_"))
        n_ch = sum(1 for h in header if h.startswith("delta_"))
        thetas, feas, slacks = [], [], []
        for rec in reader:
            thetas.append([float(v) for v in rec[:d]])
            feas.append(bool(int(rec[d])))
            tail = rec[d + 1:d + 1 + n_ch]
            if tail and tail[0] != "":
                slacks.append([float(v) for v in tail])
            else:
                slacks.append([np.nan] * n_ch)
    return np.asarray(thetas), np.asarray(feas, dtype=bool), np.asarray(slacks)
