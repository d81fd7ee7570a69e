"""Powered descent guidance: 3-DoF fuel-optimal landing at the origin.

State (per node): position [m] x3, velocity [m/s] x3, mass [kg].  Control
is the thrust vector [N].  Horizon is ``n_nodes`` with ``n_nodes - 1``
backward-Euler intervals; thrust is a decision variable on the intervals
only.

Decision vector layout (frozen): states row-major (node, component)
followed by controls row-major, n_z = 7*N + 3*(N-1).

Parameter vector theta (frozen): the 7-component initial state.

Constraint rows are rescaled per block so converged dual magnitudes stay
O(1); the scale factors live on PdgParams and the scaled rows are what
the ParametricNLP reports everywhere (violations, duals, Lagrangian).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..nlp import (LayoutBuilder, ParametricNLP, PrimalDualPoint,
                   grouped_fd_hessian)

N_STATE = 7
N_CTRL = 3


@dataclass(frozen=True, eq=False)
class PdgParams:
    """Problem constants plus (optionally) one sampled initial state."""

    n_nodes: int = 21
    t_final: float = 30.0
    gravity: float = 3.72076
    isp: float = 225.0
    g0: float = 9.80665
    m_dry: float = 2200.0
    rho_min: float = 18000.0
    rho_max: float = 48000.0
    v_max: float = 500.0
    w_u: float = 1.0e6
    pos_xy_max: float = 2500.0
    alt_min: float = 500.0
    alt_max: float = 2000.0
    v_xy_max: float = 80.0
    v_z_min: float = -100.0
    m_wet_min: float = 2200.0
    m_wet_max: float = 6600.0
    burn_margin: float = 1.05
    accel_margin: float = 0.8
    scale_pos: float = 100.0
    scale_vel: float = 500.0
    scale_mass: float = 100.0
    z_init: tuple | None = None

    @property
    def n_intervals(self) -> int:
        return self.n_nodes - 1

    @property
    def dt(self) -> float:
        return self.t_final / self.n_intervals

    @property
    def alpha_fuel(self) -> float:
        """Fuel consumption rate per newton of thrust, 1/(Isp*g0)."""
        return 1.0 / (self.isp * self.g0)

    @property
    def n_z(self) -> int:
        return N_STATE * self.n_nodes + N_CTRL * self.n_intervals

    @property
    def n_theta(self) -> int:
        return N_STATE

    @property
    def theta(self) -> np.ndarray:
        if self.z_init is None:
            raise ValueError("params carry no instance; sample or set one first")
        return np.asarray(self.z_init, dtype=np.float64)

    def with_theta(self, theta) -> "PdgParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (N_STATE,):
            raise ValueError(f"expected a {N_STATE}-vector, got {theta.shape}")
        return dataclasses.replace(self, z_init=tuple(theta))


def split_z(params: PdgParams, z):
    nn = params.n_nodes
    X = ad.reshape(z[: nn * N_STATE], (nn, N_STATE))
    U = ad.reshape(z[nn * N_STATE:], (params.n_intervals, N_CTRL))
    return X, U


def pack_z(params: PdgParams, X, U):
    return np.concatenate([np.asarray(X).reshape(-1), np.asarray(U).reshape(-1)])


def _check_mass(mass_values):
    if np.any(np.asarray(mass_values) <= 0.0):
        raise ad.EvaluationError("nonpositive mass in descent dynamics")


def pdg_dynamics(x, u, params: PdgParams):
    """Continuous-time state derivative; x is (K, 7), u is thrust (K, 3)."""
    m_val = x.value[:, 6] if isinstance(x, ad.Node) else np.asarray(x)[:, 6]
    _check_mass(m_val)
    v = x[:, 3:6]
    m = ad.reshape(x[:, 6], (np.asarray(m_val).shape[0], 1))
    acc = u / m
    g_vec = np.array([0.0, 0.0, params.gravity])
    mdot = ad.reshape(-params.alpha_fuel * ad.norm(u, axis=1),
                      (np.asarray(m_val).shape[0], 1))
    return ad.concat([v, acc - g_vec, mdot], axis=1)


def pdg_jac_x(x, u, params: PdgParams):
    """d(dynamics)/d(state), shape (K, 7, 7)."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    _check_mass(x[:, 6])
    K = x.shape[0]
    J = np.zeros((K, N_STATE, N_STATE))
    J[:, 0, 3] = J[:, 1, 4] = J[:, 2, 5] = 1.0
    J[:, 3:6, 6] = -u / x[:, 6:7] ** 2
    return J


def pdg_jac_u(x, u, params: PdgParams):
    """d(dynamics)/d(thrust), shape (K, 7, 3); ||T|| direction is 0 at T = 0."""
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    K = x.shape[0]
    J = np.zeros((K, N_STATE, N_CTRL))
    inv_m = 1.0 / x[:, 6]
    J[:, 3, 0] = J[:, 4, 1] = J[:, 5, 2] = inv_m
    mag = np.linalg.norm(u, axis=1)
    safe = np.where(mag > 0.0, mag, 1.0)
    J[:, 6, :] = -params.alpha_fuel * u / safe[:, None]
    return J


def pdg_cost_hessian(params: PdgParams) -> np.ndarray:
    H = np.zeros((params.n_z, params.n_z))
    k = N_STATE * params.n_nodes
    np.fill_diagonal(H[k:, k:], 2.0 * params.dt / params.w_u)
    return H


def _hessian_sparsity(p: PdgParams):
    """Column groups and spans for the Lagrangian curvature.

    Second derivatives stay inside one interval: thrust-over-mass and the
    burn-rate norm couple (x_{k+1}, u_k), the velocity and thrust
    magnitude rows are quadratic per node.  One group per component
    suffices because consecutive blocks never share a row.
    """
    nn, ni = p.n_nodes, p.n_intervals
    base = nn * N_STATE

    def xb(k):
        return np.arange(k * N_STATE, (k + 1) * N_STATE)

    def ub(k):
        return np.arange(base + k * N_CTRL, base + (k + 1) * N_CTRL)

    spans = [None] * p.n_z
    groups = []
    for s in range(N_STATE):
        groups.append(np.array([k * N_STATE + s for k in range(nn)]))
    for k in range(nn):
        span = xb(k) if k == 0 else np.concatenate([xb(k), ub(k - 1)])
        for s in range(N_STATE):
            spans[k * N_STATE + s] = span
    for c in range(N_CTRL):
        groups.append(np.array([base + k * N_CTRL + c for k in range(ni)]))
    for k in range(ni):
        span = np.concatenate([ub(k), xb(k + 1)])
        for c in range(N_CTRL):
            spans[base + k * N_CTRL + c] = span
    return groups, spans


def build_pdg_nlp(params: PdgParams | None = None) -> ParametricNLP:
    p = params or PdgParams()
    nn, ni = p.n_nodes, p.n_intervals
    dt = p.dt
    state_scale = np.array([p.scale_pos] * 3 + [p.scale_vel] * 3 + [p.scale_mass])
    rho_mid = 0.5 * (p.rho_min + p.rho_max)

    def cost(z, theta):
        _, U = split_z(p, z)
        return ad.vsum(ad.square(U)) * (dt / p.w_u)

    def constraints(z, theta):
        X, U = split_z(p, z)
        x_init = np.asarray(theta, dtype=np.float64)
        r_init = (X[0] - x_init) * state_scale
        F = pdg_dynamics(X[1:], U, p)
        R = ad.reshape((X[1:] - X[:-1] - dt * F) * state_scale, (ni * N_STATE,))
        m_low = (p.m_dry - X[:, 6]) * p.scale_mass
        t_low = ad.reshape(-p.rho_max - U, (ni * N_CTRL,))
        t_up = ad.reshape(U - p.rho_max, (ni * N_CTRL,))
        v2 = ad.vsum(ad.square(X[:, 3:6]), axis=1)
        v_norm = (v2 - p.v_max ** 2) * (1.0 / (2.0 * p.v_max))
        u2 = ad.vsum(ad.square(U), axis=1)
        tm_low = (p.rho_min ** 2 - u2) * (1.0 / (2.0 * rho_mid))
        tm_up = (u2 - p.rho_max ** 2) * (1.0 / (2.0 * rho_mid))
        r_term = X[nn - 1, 0:6] * state_scale[0:6]
        return ad.concat([r_init, -r_init, R, -R, m_low, t_low, t_up,
                          v_norm, tm_low, tm_up, r_term, -r_term])

    lb = LayoutBuilder(n_steps=nn)
    lb.add("init_upper", [0] * N_STATE)
    lb.add("init_lower", [0] * N_STATE)
    dyn_steps = np.repeat(np.arange(ni), N_STATE)
    lb.add("dyn_upper", dyn_steps)
    lb.add("dyn_lower", dyn_steps)
    lb.add("mass_lower", np.arange(nn))
    thrust_steps = np.repeat(np.arange(ni), N_CTRL)
    lb.add("thrust_lower", thrust_steps)
    lb.add("thrust_upper", thrust_steps)
    lb.add("vel_norm", np.arange(nn))
    lb.add("tmag_lower", np.arange(ni))
    lb.add("tmag_upper", np.arange(ni))
    lb.add("term_upper", [nn - 1] * 6)
    lb.add("term_lower", [nn - 1] * 6)
    layout = lb.build()

    hess = pdg_cost_hessian(p)
    groups, spans = _hessian_sparsity(p)

    def lagrangian_hessian(z, lam, theta):
        lam = np.asarray(lam, dtype=np.float64)
        th = np.asarray(theta, dtype=np.float64)

        def grad_L(zz):
            tape = ad.Tape()
            zn = tape.var(zz)
            L = cost(zn, th) + ad.dot(lam, constraints(zn, th))
            return ad.gradient(L, zn)

        return grouped_fd_hessian(grad_L, z, groups, spans)

    return ParametricNLP(
        name="pdg",
        n_z=p.n_z,
        n_p=p.n_theta,
        n_c=layout.n_c,
        cost=cost,
        constraints=constraints,
        layout=layout,
        cost_hessian=lambda z, theta: hess,
        lagrangian_hessian=lagrangian_hessian,
        meta={"problem": "pdg", "params": p, "n_state": N_STATE,
              "n_ctrl": N_CTRL, "n_nodes": nn, "n_ctrl_steps": ni, "dt": dt},
    )


def _min_peak_accel(p0: float, v0: float, horizon: float) -> float:
    """Smallest accel bound that can bring (p0, v0) to rest at 0 in time T.

    For |u| <= a and v(T) = 0 the extreme final positions are reached by
    the two one-switch bang-bang profiles; the target is reachable iff it
    lies between them, which is monotone in a, so bisection applies.
    """

    def reachable(a: float) -> bool:
        ends = []
        for sign in (1.0, -1.0):
            s = 0.5 * (horizon - sign * v0 / a)
            if not 0.0 <= s <= horizon:
                continue
            rest = horizon - s
            end = (p0 + v0 * s + sign * a * s * s / 2.0
                   + (v0 + sign * a * s) * rest - sign * a * rest * rest / 2.0)
            ends.append(end)
        if not ends:
            return False
        return min(ends) <= 0.0 <= max(ends)

    hi = 1e-3
    while not reachable(hi):
        hi *= 2.0
        if hi > 1e9:
            return np.inf
    lo = 0.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if reachable(mid):
            hi = mid
        else:
            lo = mid
    return hi


def min_landing_accel(params: PdgParams, z_init) -> float:
    """Euclidean peak thrust acceleration needed by the per-axis bound."""
    z = np.asarray(z_init, dtype=np.float64)
    ax = _min_peak_accel(z[0], z[3], params.t_final)
    ay = _min_peak_accel(z[1], z[4], params.t_final)
    az = _min_peak_accel(z[2], z[5], params.t_final)
    return float(np.sqrt(ax ** 2 + ay ** 2 + (az + params.gravity) ** 2))


def sample_pdg_params(params: PdgParams, rng: np.random.Generator,
                      max_attempts: int = 1000) -> PdgParams:
    """Draw an initial state uniformly over the documented ranges.

    Draws are screened for structural feasibility: enough propellant for a
    minimum-thrust burn over the full horizon, and enough peak thrust
    acceleration (with margin) for a bang-bang transfer to the pad.
    """
    p = params
    min_burn = p.t_final * p.alpha_fuel * p.rho_min
    for _ in range(max_attempts):
        z = np.array([
            rng.uniform(-p.pos_xy_max, p.pos_xy_max),
            rng.uniform(-p.pos_xy_max, p.pos_xy_max),
            rng.uniform(p.alt_min, p.alt_max),
            rng.uniform(-p.v_xy_max, p.v_xy_max),
            rng.uniform(-p.v_xy_max, p.v_xy_max),
            rng.uniform(p.v_z_min, 0.0),
            rng.uniform(p.m_wet_min, p.m_wet_max),
        ])
        if z[6] < p.m_dry + p.burn_margin * min_burn:
            continue
        if min_landing_accel(p, z) > p.accel_margin * p.rho_max / z[6]:
            continue
        return p.with_theta(z)
    raise RuntimeError("initial-state sampling failed after max attempts")


def straight_line_guess(params: PdgParams) -> PrimalDualPoint:
    """Primal-dual warm start: linear descent profile, mid-range thrust, zero duals.

    Positions interpolate to the pad, velocity is the constant transit
    rate, mass follows the constant-thrust burn, and every thrust node
    carries the midpoint magnitude pointed straight up.
    """
    p = params
    z0 = p.theta
    nn = p.n_nodes
    tau = np.linspace(0.0, 1.0, nn)
    X = np.zeros((nn, N_STATE))
    X[:, 0:3] = (1.0 - tau)[:, None] * z0[0:3][None, :]
    X[:, 3:6] = -z0[0:3][None, :] / p.t_final
    rho_mid = 0.5 * (p.rho_min + p.rho_max)
    burn_rate = p.alpha_fuel * rho_mid
    X[:, 6] = z0[6] - burn_rate * tau * p.t_final
    X[0] = z0  # node 0 matches the pinned initial state exactly
    U = np.zeros((p.n_intervals, N_CTRL))
    U[:, 2] = rho_mid
    z = pack_z(p, X, U)
    nlp_rows = build_pdg_layout_size(p)
    return PrimalDualPoint(z=z, lam=np.zeros(nlp_rows))


def build_pdg_layout_size(params: PdgParams) -> int:
    nn, ni = params.n_nodes, params.n_intervals
    return (2 * N_STATE            # initial-state pin pairs
            + 2 * ni * N_STATE     # dynamics pairs
            + nn                   # mass floor
            + 2 * ni * N_CTRL      # thrust box
            + nn                   # velocity norm
            + 2 * ni               # thrust magnitude annulus
            + 2 * 6)               # terminal pin pairs
