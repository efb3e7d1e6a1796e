"""Optimal-control problem assembly for the soft-constrained vehicle MPC.

Builds three problem flavors on top of the generic horizon NLP:

* the nominal problem (hard constraint stack),
* the relaxed problem (selected rows lifted by a fixed slack vector),
* the slack problem (slack channels as decision variables, minimal norm).

The constraint stack stacks bound/comfort rows on states and inputs with the
environment-coupled rows (yield bound, lane corridor, time headway), each row
carrying a stable label used by relaxation-mode selectors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import dynamics as dyn
from .dynamics import NU, NX, VehicleParams
from .environment import DisturbanceProfile
from .path import PathGeometry
from .sqp import NlpDescription

# ---------------------------------------------------------------------------
# horizon and weights
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HorizonConfig:
    """Cost horizon, constraint horizon and sampling time."""
    n_cost: int = 20
    n_constraint: int = 100
    t_s: float = 0.1

    def __post_init__(self):
        if not (self.n_constraint >= self.n_cost >= 1):
            raise ValueError("need n_constraint >= n_cost >= 1")
        if self.t_s <= 0.0:
            raise ValueError("t_s must be positive")


@dataclass(frozen=True)
class CostWeights:
    """Quadratic tracking weights; terminal matrix from decoupled LQR."""
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray        # terminal LQR gain (u = -K (x - ref)), for analysis

    @staticmethod
    def default_q() -> np.ndarray:
        return np.diag([0.0, 5.0, 10.0, 1.0, 1.0, 2.0, 1.0])

    @staticmethod
    def default_r() -> np.ndarray:
        return np.diag([10.0, 5.0])


def terminal_weights(path: PathGeometry, params: VehicleParams, t_s: float,
                     v_ref: float, Q: np.ndarray | None = None,
                     R: np.ndarray | None = None,
                     detect_reg: float = 1e-6) -> CostWeights:
    """Terminal cost from two decoupled discrete Riccati solutions.

    The model linearized at the straight-path reference decouples into a
    longitudinal chain (s, v, a) and a lateral chain (e_y, e_psi, delta,
    alpha). Each block gets its own discrete-time Riccati solution; a small
    diagonal regularization keeps the (possibly zero-weighted) position mode
    detectable, which preserves the Lyapunov decrease for the original Q.
    """
    Q = CostWeights.default_q() if Q is None else np.asarray(Q, dtype=float)
    R = CostWeights.default_r() if R is None else np.asarray(R, dtype=float)

    x_ref = dyn.state(s=max(path.s_min + 1.0, 1.0), v=v_ref)
    u_ref = np.zeros(NU)
    A, B = dyn.jacobians(x_ref, u_ref, path, params, t_s)

    lon = list(dyn.LON_IDX)
    lat = list(dyn.LAT_IDX)
    P = np.zeros((NX, NX))
    K = np.zeros((NU, NX))
    for idx, u_col in ((lon, 1), (lat, 0)):
        A_b = A[np.ix_(idx, idx)]
        B_b = B[np.ix_(idx, [u_col])]
        Q_b = Q[np.ix_(idx, idx)] + detect_reg * np.eye(len(idx))
        R_b = R[u_col:u_col + 1, u_col:u_col + 1]
        P_b = scipy.linalg.solve_discrete_are(A_b, B_b, Q_b, R_b)
        K_b = np.linalg.solve(R_b + B_b.T @ P_b @ B_b, B_b.T @ P_b @ A_b)
        P[np.ix_(idx, idx)] = P_b
        K[np.ix_([u_col], idx)] = K_b
    return CostWeights(Q=Q, R=R, P=P, K=K)


@dataclass(frozen=True)
class TerminalSets:
    """Stabilizing tube widths (error-state box) and safe-set parameters.

    tube widths apply to x - ref on steps beyond the cost horizon; the safe
    set demands standstill behind the yield bound at the final step.
    Non-finite widths disable the corresponding row.
    """
    tube: np.ndarray = field(default_factory=lambda: np.array(
        [np.inf, 2.5, 0.3, 0.5, 0.6, 36.0, 12.0]))
    stop_margin: float = 2.0       # distance kept behind the final yield bound
    # narrow band instead of exact equalities: keeps the terminal rows
    # strictly complementary, which the interior-point solver needs
    standstill_tol: float = 1e-4


# ---------------------------------------------------------------------------
# constraint stack
# ---------------------------------------------------------------------------

H_ROW_LABELS = (
    "e_psi_ub", "e_psi_lb", "delta_ub", "delta_lb", "delta_sp_ub",
    "delta_sp_lb", "v_ub", "v_lb", "a_ub", "a_lb", "a_req_ub", "a_req_lb",
    "a_req_comfort_lb", "alpha_ub", "alpha_lb",
    "a_y_ub", "a_y_lb", "j_y_ub", "j_y_lb",
)
G_ROW_LABELS = ("g_lon_safe", "g_lat_ub", "g_lat_lb", "g_follow")
ROW_LABELS = H_ROW_LABELS + G_ROW_LABELS
N_H = len(H_ROW_LABELS)
N_G = len(G_ROW_LABELS)


@dataclass(frozen=True)
class ConstraintStack:
    """Row definitions shared by all problem flavors for one scenario."""
    params: VehicleParams
    t_gap: float = 1.5
    d_safe: float = 6.0
    a_req_comfort_min: float = -3.0

    def row_index(self, label: str) -> int:
        return ROW_LABELS.index(label)

    def evaluate(self, x: np.ndarray, u: np.ndarray,
                 sigma: float, beta_lo: float, beta_hi: float) -> np.ndarray:
        """Signed residuals of every row at one step; <= 0 means satisfied.

        Rows tied to an empty collision window evaluate to -inf.
        """
        p = self.params
        a_y, j_y = dyn.comfort_quantities(x, p)
        s, e_y, e_psi, delta, alpha, v, a = x
        lon_active = math.isfinite(sigma)
        vals = np.array([
            e_psi - p.e_psi_max,
            -e_psi - p.e_psi_max,
            delta - p.delta_max,
            -delta - p.delta_max,
            u[0] - p.delta_max,
            -u[0] - p.delta_max,
            v - p.v_max,
            -v,
            a - p.accel_max,
            p.accel_min - a,
            u[1] - p.accel_max,
            p.accel_min - u[1],
            self.a_req_comfort_min - u[1],
            alpha - p.alpha_max,
            -alpha - p.alpha_max,
            a_y - p.lat_accel_max,
            -a_y - p.lat_accel_max,
            j_y - p.lat_jerk_max,
            -j_y - p.lat_jerk_max,
            (s - sigma) if lon_active else -np.inf,
            e_y - beta_hi,
            beta_lo - e_y,
            (s + self.t_gap * v - sigma) if lon_active else -np.inf,
        ])
        return vals

    def linearize(self, x: np.ndarray, u: np.ndarray, sigma: float,
                  beta_lo: float, beta_hi: float):
        """(vals, Cx, Cu) with rows on an empty window dropped, plus the
        indices of the rows kept (into ROW_LABELS)."""
        p = self.params
        vals = self.evaluate(x, u, sigma, beta_lo, beta_hi)
        g_ay, g_jy = dyn.comfort_jacobians(x, p)
        Cx = np.zeros((N_H + N_G, NX))
        Cu = np.zeros((N_H + N_G, NU))
        i = {label: k for k, label in enumerate(ROW_LABELS)}
        Cx[i["e_psi_ub"], dyn.IDX_EPSI] = 1.0
        Cx[i["e_psi_lb"], dyn.IDX_EPSI] = -1.0
        Cx[i["delta_ub"], dyn.IDX_DELTA] = 1.0
        Cx[i["delta_lb"], dyn.IDX_DELTA] = -1.0
        Cu[i["delta_sp_ub"], 0] = 1.0
        Cu[i["delta_sp_lb"], 0] = -1.0
        Cx[i["v_ub"], dyn.IDX_V] = 1.0
        Cx[i["v_lb"], dyn.IDX_V] = -1.0
        Cx[i["a_ub"], dyn.IDX_A] = 1.0
        Cx[i["a_lb"], dyn.IDX_A] = -1.0
        Cu[i["a_req_ub"], 1] = 1.0
        Cu[i["a_req_lb"], 1] = -1.0
        Cu[i["a_req_comfort_lb"], 1] = -1.0
        Cx[i["alpha_ub"], dyn.IDX_ALPHA] = 1.0
        Cx[i["alpha_lb"], dyn.IDX_ALPHA] = -1.0
        Cx[i["a_y_ub"]] = g_ay
        Cx[i["a_y_lb"]] = -g_ay
        Cx[i["j_y_ub"]] = g_jy
        Cx[i["j_y_lb"]] = -g_jy
        Cx[i["g_lon_safe"], dyn.IDX_S] = 1.0
        Cx[i["g_lat_ub"], dyn.IDX_EY] = 1.0
        Cx[i["g_lat_lb"], dyn.IDX_EY] = -1.0
        Cx[i["g_follow"], dyn.IDX_S] = 1.0
        Cx[i["g_follow"], dyn.IDX_V] = self.t_gap
        keep = np.isfinite(vals)
        idx = np.where(keep)[0]
        return vals[idx], Cx[idx], Cu[idx], idx


@dataclass(frozen=True)
class RelaxationMode:
    """Selector of relaxable rows with priority rank and slack ceilings.

    relax maps row labels to slack channel names; drop lists rows removed
    entirely. Channel order fixes the slack vector layout.
    """
    name: str
    priority: int
    relax: dict            # row label -> channel name
    ceilings: dict         # channel name -> max slack
    drop: tuple = ()

    def __post_init__(self):
        for label in self.relax:
            if label not in ROW_LABELS:
                raise ValueError(f"unknown row label {label!r}")
        for label in self.drop:
            if label not in ROW_LABELS:
                raise ValueError(f"unknown row label {label!r}")
        for ch in self.relax.values():
            if ch not in self.ceilings:
                raise ValueError(f"channel {ch!r} missing a ceiling")

    @property
    def channels(self) -> tuple:
        seen = []
        for ch in self.relax.values():
            if ch not in seen:
                seen.append(ch)
        return tuple(seen)

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    def ceiling_vector(self) -> np.ndarray:
        return np.array([self.ceilings[ch] for ch in self.channels], dtype=float)

    def selector(self) -> np.ndarray:
        """E matrix over the full row stack: one slack channel per relaxed row."""
        E = np.zeros((len(ROW_LABELS), self.n_channels))
        chan_idx = {ch: j for j, ch in enumerate(self.channels)}
        for label, ch in self.relax.items():
            E[ROW_LABELS.index(label), chan_idx[ch]] = 1.0
        return E

    def hard_row_indices(self) -> np.ndarray:
        """Rows neither relaxed nor dropped (must hold exactly)."""
        out = [k for k, label in enumerate(ROW_LABELS)
               if label not in self.relax and label not in self.drop]
        return np.asarray(out, dtype=int)


NOMINAL_MODE = RelaxationMode(name="nominal", priority=0, relax={}, ceilings={})


# ---------------------------------------------------------------------------
# reference generation
# ---------------------------------------------------------------------------


def build_reference(x0_s: float, v_ref: float, e_y_ref: float,
                    horizon: HorizonConfig, params: VehicleParams,
                    brake_decel: float = 2.5) -> tuple[np.ndarray, np.ndarray]:
    """Per-step reference over the horizon: cruise, then a comfortable stop.

    Within the cost horizon the reference cruises at v_ref; beyond it the
    speed ramps down at brake_decel so the standstill terminal set stays
    inside the stabilizing tube. Returns (x_refs (M+1, NX), u_refs (M, NU)).
    """
    M, N, t_s = horizon.n_constraint, horizon.n_cost, horizon.t_s
    v = np.empty(M + 1)
    v[:N + 1] = v_ref
    for n in range(N, M):
        v[n + 1] = max(v[n] - brake_decel * t_s, 0.0)
    s = x0_s + np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * t_s)])
    a = np.concatenate([np.diff(v) / t_s, [0.0]])
    x_refs = np.zeros((M + 1, NX))
    x_refs[:, dyn.IDX_S] = s
    x_refs[:, dyn.IDX_EY] = e_y_ref
    x_refs[:, dyn.IDX_V] = v
    x_refs[:, dyn.IDX_A] = a
    u_refs = np.zeros((M, NU))
    u_refs[:, 1] = a[:M]
    return x_refs, u_refs


# ---------------------------------------------------------------------------
# problem builders
# ---------------------------------------------------------------------------

_TAIL_INPUT_REG = 1e-6


def _stage_cost_arrays(weights: CostWeights, horizon: HorizonConfig,
                       x_refs: np.ndarray, u_refs: np.ndarray,
                       slack_objective: bool = False):
    M, N = horizon.n_constraint, horizon.n_cost
    nz = NX + NU
    W = np.zeros((M, nz, nz))
    ref = np.zeros((M, nz))
    Wfull = np.zeros((nz, nz))
    Wfull[:NX, :NX] = weights.Q
    Wfull[NX:, NX:] = weights.R
    Wtail = np.zeros((nz, nz))
    Wtail[NX:, NX:] = _TAIL_INPUT_REG * np.eye(NU)
    for n in range(M):
        # the slack problem minimizes the slack norm alone; tracking weights
        # are dropped and only the tie-breaking input regularization stays
        W[n] = Wtail if (slack_objective or n >= N) else Wfull
        ref[n, :NX] = x_refs[n]
        ref[n, NX:] = u_refs[n]
    # the mid-horizon terminal cost lands on the state block of stage N
    if slack_objective:
        P_M = np.zeros((NX, NX))
    elif N < M:
        W[N][:NX, :NX] += weights.P
        P_M = np.zeros((NX, NX))
    else:
        P_M = weights.P.copy()
    return W, ref, P_M


def _make_stage_rows(stack: ConstraintStack, profile: DisturbanceProfile,
                     mode: RelaxationMode, slack_fixed: np.ndarray | None,
                     n_gamma: int, horizon: HorizonConfig, x_refs: np.ndarray,
                     tube: np.ndarray):
    """Stage row provider combining the stack, tube rows and relaxation."""
    E_full = mode.selector() if mode.n_channels else None
    drop_idx = {ROW_LABELS.index(lbl) for lbl in mode.drop}
    N = horizon.n_cost
    tube_idx = np.where(np.isfinite(tube))[0]
    tube_w = tube[tube_idx]

    def rows(n, x, u):
        vals, Cx, Cu, kept = stack.linearize(
            x, u, profile.yield_bound[n],
            profile.corridor_lo[n], profile.corridor_hi[n])
        if drop_idx:
            keep_mask = np.array([k not in drop_idx for k in kept])
            vals, Cx, Cu, kept = (vals[keep_mask], Cx[keep_mask],
                                  Cu[keep_mask], kept[keep_mask])
        Cg = None
        if E_full is not None:
            E_kept = E_full[kept]
            if slack_fixed is not None:
                vals = vals - E_kept @ slack_fixed
            elif n_gamma:
                Cg = -E_kept
        if n >= N:
            # stabilizing tube on the error state
            err = x[tube_idx] - x_refs[n][tube_idx]
            t_vals = np.concatenate([err - tube_w, -err - tube_w])
            t_Cx = np.zeros((2 * tube_idx.size, NX))
            for j, k in enumerate(tube_idx):
                t_Cx[j, k] = 1.0
                t_Cx[tube_idx.size + j, k] = -1.0
            vals = np.concatenate([vals, t_vals])
            Cx = np.vstack([Cx, t_Cx])
            Cu = np.vstack([Cu, np.zeros((2 * tube_idx.size, NU))])
            if Cg is not None:
                Cg = np.vstack([Cg, np.zeros((2 * tube_idx.size, n_gamma))])
        return vals, Cx, Cu, Cg

    return rows


def _make_terminal_rows(profile: DisturbanceProfile, terminal: TerminalSets,
                        x_refs: np.ndarray, n_gamma: int,
                        mode: RelaxationMode = None):
    M = len(profile) - 1
    sigma_M = profile.yield_bound[M]
    beta_lo = profile.corridor_lo[M]
    beta_hi = profile.corridor_hi[M]
    tol = terminal.standstill_tol
    # a mode that drops the longitudinal stack rows abandons the yielding
    # strategy; the terminal stop-behind row encodes the same bound
    drop_yield = mode is not None and "g_lon_safe" in mode.drop
    with_yield = math.isfinite(sigma_M) and not drop_yield

    def rows(x):
        vals = [x[dyn.IDX_V] - tol, -x[dyn.IDX_V] - tol,
                x[dyn.IDX_A] - tol, -x[dyn.IDX_A] - tol,
                x[dyn.IDX_EY] - beta_hi, beta_lo - x[dyn.IDX_EY]]
        Cx = np.zeros((7, NX))
        Cx[0, dyn.IDX_V] = 1.0
        Cx[1, dyn.IDX_V] = -1.0
        Cx[2, dyn.IDX_A] = 1.0
        Cx[3, dyn.IDX_A] = -1.0
        Cx[4, dyn.IDX_EY] = 1.0
        Cx[5, dyn.IDX_EY] = -1.0
        if with_yield:
            vals.append(x[dyn.IDX_S] - (sigma_M - terminal.stop_margin))
            Cx[6, dyn.IDX_S] = 1.0
        else:
            Cx = Cx[:6]
        v = np.asarray(vals)
        Cg = np.zeros((v.size, n_gamma)) if n_gamma else None
        return v, Cx, Cg

    return rows


def _base_nlp(x_k, path: PathGeometry, params: VehicleParams,
              weights: CostWeights, horizon: HorizonConfig,
              x_refs, u_refs, stage_rows, terminal_rows,
              u_init=None, slack_objective=False, **gamma_kw) -> NlpDescription:
    t_s = horizon.t_s
    W, ref, P_M = _stage_cost_arrays(weights, horizon, x_refs, u_refs,
                                     slack_objective=slack_objective)
    return NlpDescription(
        nx=NX, nu=NU, horizon=horizon.n_constraint, x0=np.asarray(x_k, dtype=float),
        dyn_f=lambda n, x, u: dyn.f_discrete(x, u, path, params, t_s),
        dyn_jac=lambda n, x, u: dyn.jacobians(x, u, path, params, t_s),
        cost_W=W, cost_ref=ref, cost_P=P_M, cost_ref_M=x_refs[horizon.n_constraint],
        stage_rows=stage_rows, terminal_rows=terminal_rows,
        u_init=u_init, **gamma_kw)


def build_nominal(x_k, path, params, weights, horizon, stack: ConstraintStack,
                  profile: DisturbanceProfile, terminal: TerminalSets,
                  x_refs, u_refs, u_init=None) -> NlpDescription:
    """Hard-constrained tracking problem over the full constraint horizon."""
    _check_profile(profile, horizon)
    rows = _make_stage_rows(stack, profile, NOMINAL_MODE, None, 0,
                            horizon, x_refs, terminal.tube)
    term = _make_terminal_rows(profile, terminal, x_refs, 0)
    return _base_nlp(x_k, path, params, weights, horizon, x_refs, u_refs,
                     rows, term, u_init=u_init)


def build_relaxed(x_k, path, params, weights, horizon, stack, profile,
                  terminal, mode: RelaxationMode, slack: np.ndarray,
                  x_refs, u_refs, u_init=None) -> NlpDescription:
    """Problem with the mode's rows lifted by a fixed slack vector."""
    _check_profile(profile, horizon)
    slack = np.asarray(slack, dtype=float)
    if slack.shape != (mode.n_channels,):
        raise ValueError(f"slack must have shape ({mode.n_channels},)")
    ceil = mode.ceiling_vector()
    if np.any(slack < -1e-12) or np.any(slack > ceil + 1e-9):
        raise ValueError("slack outside [0, ceiling] for mode " + mode.name)
    rows = _make_stage_rows(stack, profile, mode, slack, 0,
                            horizon, x_refs, terminal.tube)
    term = _make_terminal_rows(profile, terminal, x_refs, 0, mode=mode)
    return _base_nlp(x_k, path, params, weights, horizon, x_refs, u_refs,
                     rows, term, u_init=u_init)


def build_slack_problem(x_k, path, params, weights, horizon, stack, profile,
                        terminal, mode: RelaxationMode, x_refs, u_refs,
                        u_init=None) -> NlpDescription:
    """Minimal-norm slack problem: channels become global decision variables.

    Constant move blocking holds each channel at one value across the
    horizon, so the squared-norm objective reduces to the blocked vector
    scaled by the cost-horizon length.
    """
    _check_profile(profile, horizon)
    q = mode.n_channels
    if q == 0:
        raise ValueError("slack problem needs a mode with relaxable rows")
    rows = _make_stage_rows(stack, profile, mode, None, q,
                            horizon, x_refs, terminal.tube)
    term = _make_terminal_rows(profile, terminal, x_refs, q, mode=mode)
    return _base_nlp(
        x_k, path, params, weights, horizon, x_refs, u_refs, rows, term,
        u_init=u_init, slack_objective=True, n_gamma=q,
        gamma_weight=2.0 * horizon.n_cost * np.eye(q),
        # linear bias keeps at-zero bounds strictly complementary and pins
        # unused channels to zero; constraint-pinned channels are unaffected
        # and flat directions shift by far less than the oracle tolerance
        gamma_linear=np.full(q, 0.5),
        gamma_lo=np.zeros(q), gamma_hi=mode.ceiling_vector())


def _check_profile(profile: DisturbanceProfile, horizon: HorizonConfig):
    if len(profile) != horizon.n_constraint + 1:
        raise ValueError(
            f"profile covers {len(profile)} steps, expected {horizon.n_constraint + 1}")


def eval_constraints(xs: np.ndarray, us: np.ndarray, stack: ConstraintStack,
                     profile: DisturbanceProfile) -> np.ndarray:
    """Residual matrix (n_rows, M) of the full stack along a trajectory."""
    M = us.shape[0]
    out = np.empty((len(ROW_LABELS), M))
    for n in range(M):
        out[:, n] = stack.evaluate(xs[n], us[n], profile.yield_bound[n],
                                   profile.corridor_lo[n], profile.corridor_hi[n])
    return out
