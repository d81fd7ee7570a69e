"""Rover path planning: bicycle kinematics with obstacle keep-out discs.

State (per node): x, y position [m], heading xi [rad], steering angle
delta [rad], speed v [m/s], acceleration a [m/s^2].  Controls are the
commanded steering angle and commanded acceleration, which enter through
first-order lags.  The trajectory has ``n_intervals`` backward-Euler steps
over ``n_intervals + 1`` nodes; controls are decision variables at every
node but only the first ``n_intervals`` enter the dynamics.

Decision vector layout (frozen): states row-major (node, component)
followed by controls row-major, n_z = 6*(N+1) + 2*(N+1).

Parameter vector theta (frozen): initial state (6), goal pose (3),
obstacle centers row-major (n_obstacles x 2).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..nlp import LayoutBuilder, ParametricNLP, grouped_fd_hessian

N_STATE = 6
N_CTRL = 2


@dataclass(frozen=True, eq=False)
class RoverParams:
    """Problem constants plus (optionally) one sampled instance.

    ``z_init``, ``z_goal`` and ``obstacles`` are None on a bare
    constants-only object; samplers return copies with them filled in.
    """

    n_intervals: int = 61
    t_final: float = 30.0
    wheelbase: float = 2.7
    r_dist: float = 0.075
    delta_bound: float = np.pi / 2.0
    v_min: float = 0.0
    v_max: float = 0.2778
    alpha_bound: float = 0.3
    w_jerk: float = 0.5
    w_acc: float = 1.0
    lag_steer: float = 1.0
    lag_acc: float = 1.0
    n_obstacles: int = 5
    workspace: float = 10.0
    goal_dist_min: float = 3.0
    goal_dist_max: float = 7.0
    cross_track: float = 1.0
    z_init: tuple | None = None
    z_goal: tuple | None = None
    obstacles: tuple | None = None

    @property
    def n_nodes(self) -> int:
        return self.n_intervals + 1

    @property
    def dt(self) -> float:
        return self.t_final / self.n_intervals

    @property
    def n_z(self) -> int:
        return (N_STATE + N_CTRL) * self.n_nodes

    @property
    def n_theta(self) -> int:
        return N_STATE + 3 + 2 * self.n_obstacles

    @property
    def theta(self) -> np.ndarray:
        """Flatten the instance fields into the NLP parameter vector."""
        if self.z_init is None or self.z_goal is None or self.obstacles is None:
            raise ValueError("params carry no instance; sample or set one first")
        return np.concatenate([
            np.asarray(self.z_init, dtype=np.float64),
            np.asarray(self.z_goal, dtype=np.float64),
            np.asarray(self.obstacles, dtype=np.float64).reshape(-1),
        ])

    def with_instance(self, z_init, z_goal, obstacles) -> "RoverParams":
        return dataclasses.replace(
            self,
            z_init=tuple(np.asarray(z_init, dtype=np.float64)),
            z_goal=tuple(np.asarray(z_goal, dtype=np.float64)),
            obstacles=tuple(map(tuple, np.asarray(obstacles, dtype=np.float64))),
        )

    def with_theta(self, theta) -> "RoverParams":
        x_init, goal, obs = unpack_theta(self, theta)
        return self.with_instance(x_init, goal, obs)


def unpack_theta(params: RoverParams, theta):
    theta = np.asarray(theta, dtype=np.float64)
    x_init = theta[:N_STATE]
    goal = theta[N_STATE:N_STATE + 3]
    obstacles = theta[N_STATE + 3:].reshape(params.n_obstacles, 2)
    return x_init, goal, obstacles


def split_z(params: RoverParams, z):
    nn = params.n_nodes
    X = ad.reshape(z[: nn * N_STATE], (nn, N_STATE))
    U = ad.reshape(z[nn * N_STATE:], (nn, N_CTRL))
    return X, U


def pack_z(params: RoverParams, X, U):
    return np.concatenate([np.asarray(X).reshape(-1), np.asarray(U).reshape(-1)])


def _check_steering(delta_values, params: RoverParams):
    lim = np.pi / 2.0 - 1e-6
    if np.any(np.abs(delta_values) >= lim):
        raise ad.EvaluationError("steering angle out of the tan domain")


def rover_dynamics(x, u, params: RoverParams):
    """Continuous-time state derivative; x is (K, 6), u is (K, 2)."""
    delta_val = x.value[:, 3] if isinstance(x, ad.Node) else np.asarray(x)[:, 3]
    _check_steering(delta_val, params)
    xi = x[:, 2]
    delta = x[:, 3]
    v = x[:, 4]
    acc = x[:, 5]
    return ad.stack([
        v * ad.cos(xi),
        v * ad.sin(xi),
        v * ad.tan(delta) * (1.0 / params.wheelbase),
        params.lag_steer * (u[:, 0] - delta),
        acc,
        params.lag_acc * (u[:, 1] - acc),
    ], axis=-1)


def rover_jac_x(x, u, params: RoverParams):
    """d(dynamics)/d(state), shape (K, 6, 6)."""
    x = np.asarray(x, dtype=np.float64)
    _check_steering(x[:, 3], params)
    K = x.shape[0]
    xi, delta, v = x[:, 2], x[:, 3], x[:, 4]
    J = np.zeros((K, N_STATE, N_STATE))
    J[:, 0, 2] = -v * np.sin(xi)
    J[:, 0, 4] = np.cos(xi)
    J[:, 1, 2] = v * np.cos(xi)
    J[:, 1, 4] = np.sin(xi)
    sec2 = 1.0 / np.cos(delta) ** 2
    J[:, 2, 3] = v * sec2 / params.wheelbase
    J[:, 2, 4] = np.tan(delta) / params.wheelbase
    J[:, 3, 3] = -params.lag_steer
    J[:, 4, 5] = 1.0
    J[:, 5, 5] = -params.lag_acc
    return J


def rover_jac_u(x, u, params: RoverParams):
    """d(dynamics)/d(control), shape (K, 6, 2)."""
    K = np.asarray(x).shape[0]
    J = np.zeros((K, N_STATE, N_CTRL))
    J[:, 3, 0] = params.lag_steer
    J[:, 5, 1] = params.lag_acc
    return J


def rover_cost_hessian(params: RoverParams) -> np.ndarray:
    """Exact (constant) Hessian of the quadratic jerk + acceleration cost."""
    nn = params.n_nodes
    H = np.zeros((params.n_z, params.n_z))
    for t in range(params.n_intervals):
        i = t * N_STATE + 3          # steering angle of node t
        j = (t + 1) * N_STATE + 3
        H[i, i] += 2.0 * params.w_jerk
        H[j, j] += 2.0 * params.w_jerk
        H[i, j] -= 2.0 * params.w_jerk
        H[j, i] -= 2.0 * params.w_jerk
    for t in range(nn):
        k = t * N_STATE + 5          # acceleration state of node t
        H[k, k] += 2.0 * params.w_acc
    return H


def _hessian_sparsity(p: RoverParams):
    """Column groups and spans for the Lagrangian curvature.

    Dynamics are nonlinear only in the implicit-step states, obstacles
    are quadratic per node, and controls enter every row linearly with
    no cost term, so control columns are identically zero.  The jerk
    cost ties neighboring steering angles, which forces a stride of
    three on that one state offset.
    """
    nn = p.n_nodes

    def xb(k):
        return np.arange(k * N_STATE, (k + 1) * N_STATE)

    spans = [None] * p.n_z
    groups = []
    for s in range(N_STATE):
        if s == 3:
            continue
        groups.append(np.array([k * N_STATE + s for k in range(nn)]))
        for k in range(nn):
            spans[k * N_STATE + s] = xb(k)
    for r in range(3):
        groups.append(np.array([k * N_STATE + 3 for k in range(r, nn, 3)]))
    for k in range(nn):
        lo = max(k - 1, 0)
        hi = min(k + 1, nn - 1)
        spans[k * N_STATE + 3] = np.arange(lo * N_STATE, (hi + 1) * N_STATE)
    return groups, spans


def build_rover_nlp(params: RoverParams | None = None) -> ParametricNLP:
    p = params or RoverParams()
    nn, ni = p.n_nodes, p.n_intervals
    dt = p.dt
    state_lb = np.array([-p.delta_bound, p.v_min, -p.alpha_bound])
    state_ub = np.array([p.delta_bound, p.v_max, p.alpha_bound])
    ctrl_lb = np.array([-p.delta_bound, -p.alpha_bound])
    ctrl_ub = np.array([p.delta_bound, p.alpha_bound])
    r2 = p.r_dist ** 2

    def cost(z, theta):
        X, _ = split_z(p, z)
        delta = X[:, 3]
        acc = X[:, 5]
        jerk = delta[1:] - delta[:-1]
        return (p.w_jerk * ad.vsum(ad.square(jerk))
                + p.w_acc * ad.vsum(ad.square(acc)))

    def constraints(z, theta):
        x_init, goal, obstacles = unpack_theta(p, theta)
        X, U = split_z(p, z)
        r_init = X[0] - x_init
        F = rover_dynamics(X[1:], U[:-1], p)
        R = ad.reshape(X[1:] - X[:-1] - dt * F, (ni * N_STATE,))
        S = X[:, 3:6]
        s_low = ad.reshape(state_lb - S, (nn * 3,))
        s_up = ad.reshape(S - state_ub, (nn * 3,))
        Uc = U[:-1]
        c_low = ad.reshape(ctrl_lb - Uc, (ni * N_CTRL,))
        c_up = ad.reshape(Uc - ctrl_ub, (ni * N_CTRL,))
        P = ad.reshape(X[:-1, 0:2], (ni, 1, 2))
        d2 = ad.vsum(ad.square(P - obstacles.reshape(1, p.n_obstacles, 2)), axis=2)
        obs = ad.reshape(r2 - d2, (ni * p.n_obstacles,))
        r_term = X[nn - 1, 0:3] - goal
        return ad.concat([r_init, -r_init, R, -R, s_low, s_up,
                          c_low, c_up, obs, r_term, -r_term])

    lb = LayoutBuilder(n_steps=nn)
    lb.add("init_upper", [0] * N_STATE)
    lb.add("init_lower", [0] * N_STATE)
    dyn_steps = np.repeat(np.arange(ni), N_STATE)
    lb.add("dyn_upper", dyn_steps)
    lb.add("dyn_lower", dyn_steps)
    bound_steps = np.repeat(np.arange(nn), 3)
    lb.add("state_lower", bound_steps)
    lb.add("state_upper", bound_steps)
    ctrl_steps = np.repeat(np.arange(ni), N_CTRL)
    lb.add("ctrl_lower", ctrl_steps)
    lb.add("ctrl_upper", ctrl_steps)
    lb.add("obstacle", np.repeat(np.arange(ni), p.n_obstacles))
    lb.add("term_upper", [nn - 1] * 3)
    lb.add("term_lower", [nn - 1] * 3)
    layout = lb.build()

    hess = rover_cost_hessian(p)
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
        name="rover",
        n_z=p.n_z,
        n_p=p.n_theta,
        n_c=layout.n_c,
        cost=cost,
        constraints=constraints,
        layout=layout,
        cost_hessian=lambda z, theta: hess,
        lagrangian_hessian=lagrangian_hessian,
        meta={"problem": "rover", "params": p, "n_state": N_STATE,
              "n_ctrl": N_CTRL, "n_nodes": nn, "n_ctrl_steps": ni, "dt": dt},
    )


def sample_rover_params(params: RoverParams, rng: np.random.Generator,
                        max_attempts: int = 1000) -> RoverParams:
    """Draw one problem instance: start pose, goal pose, obstacle centers.

    The start pose is uniform in the workspace square with the rover at
    rest; the goal sits at a uniform distance along a uniform bearing,
    facing along the travel direction.  Obstacles are spread uniformly
    along the start-goal segment with a uniform cross-track offset,
    re-drawn if they land within ``r_dist`` of either endpoint.
    """
    p = params
    start_xy = rng.uniform(0.0, p.workspace, size=2)
    xi0 = rng.uniform(-np.pi, np.pi)
    x_init = np.array([start_xy[0], start_xy[1], xi0, 0.0, 0.0, 0.0])
    dist = rng.uniform(p.goal_dist_min, p.goal_dist_max)
    bearing = rng.uniform(-np.pi, np.pi)
    direction = np.array([np.cos(bearing), np.sin(bearing)])
    goal_xy = start_xy + dist * direction
    # the terminal constraint pins the raw heading value, so store the
    # 2-pi representative nearest the start heading (turn the short way)
    heading = xi0 + np.remainder(bearing - xi0 + np.pi, 2.0 * np.pi) - np.pi
    goal = np.array([goal_xy[0], goal_xy[1], heading])
    perp = np.array([-direction[1], direction[0]])
    obstacles = np.zeros((p.n_obstacles, 2))
    for i in range(p.n_obstacles):
        for _ in range(max_attempts):
            along = rng.uniform(0.0, dist)
            across = rng.uniform(-p.cross_track, p.cross_track)
            c = start_xy + along * direction + across * perp
            if (np.linalg.norm(c - start_xy) >= p.r_dist
                    and np.linalg.norm(c - goal_xy) >= p.r_dist):
                obstacles[i] = c
                break
        else:
            raise RuntimeError("obstacle placement failed after max attempts")
    return p.with_instance(x_init, goal, obstacles)


def rover_initial_guess(params: RoverParams) -> np.ndarray:
    """Cold-start primal guess: states interpolated start to goal, controls 0.

    The speed profile is a constant cruise: at zero speed the heading rows
    of the linearized dynamics lose all control authority, and the cruise
    must be fast enough that accumulated steering can turn the heading by
    pi within the horizon or the first subproblem has no solution.
    """
    p = params
    x_init, goal, _ = unpack_theta(p, p.theta)
    dist = float(np.hypot(goal[0] - x_init[0], goal[1] - x_init[1]))
    cruise = float(np.clip(max(dist / p.t_final, 0.75 * p.v_max),
                           0.05 * p.v_max, p.v_max))
    x_goal = np.array([goal[0], goal[1], goal[2], 0.0, cruise, 0.0])
    tau = np.linspace(0.0, 1.0, p.n_nodes)[:, None]
    start = x_init.copy()
    start[4] = cruise
    X = (1.0 - tau) * start[None, :] + tau * x_goal[None, :]
    X[0] = x_init
    U = np.zeros((p.n_nodes, N_CTRL))
    return pack_z(p, X, U)
