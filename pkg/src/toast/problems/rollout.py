"""Implicit (backward-Euler) rollout shared by both problem families.

Each step solves  x_{t+1} = x_t + dt * f(x_{t+1}, u_t)  by fixed-point
iteration with a Newton fallback.  The tape op differentiates the converged
step with the implicit-function rule (one linear solve against
I - dt * df/dx at the solution), so training gradients through rollouts are
exact rather than truncated.
"""

from __future__ import annotations

import numpy as np

from .. import autodiff as ad


class RolloutError(Exception):
    """Implicit step failed; carries the failing step index."""

    def __init__(self, step: int, message: str):
        super().__init__(f"rollout step {step}: {message}")
        self.step = step


_FP_ITERS = 12  # fixed-point attempts before switching to Newton


def implicit_step(f, jac_x, x, u, dt, tol=1e-10, max_iter=50):
    """Solve y = x + dt*f(y, u) for one step; x, u are (K, n) and (K, m).

    Returns y with residual ||y - x - dt f(y,u)||_inf at (or typically well
    below) ``tol``; raises on non-convergence or a dynamics domain error.
    """
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    for _ in range(_FP_ITERS):
        y_next = x + dt * f(y, u)
        step = np.max(np.abs(y_next - y))
        y = y_next
        if not np.isfinite(step):
            break
        if step <= 0.25 * tol:
            r = y - x - dt * f(y, u)
            if np.max(np.abs(r)) <= tol:
                return y
    # Newton on r(y) = y - x - dt f(y, u)
    n = x.shape[-1]
    eye = np.eye(n)
    for _ in range(max_iter - _FP_ITERS):
        if not np.all(np.isfinite(y)):
            raise ValueError("iterate diverged")
        r = y - x - dt * f(y, u)
        rmax = np.max(np.abs(r))
        if rmax <= tol:
            # polish once more toward machine precision so downstream
            # feasibility checks see exact dynamics rows
            J = eye - dt * jac_x(y, u)
            y = y - np.linalg.solve(J, r[..., None])[..., 0]
            return y
        J = eye - dt * jac_x(y, u)
        y = y - np.linalg.solve(J, r[..., None])[..., 0]
    r = y - x - dt * f(y, u)
    if np.max(np.abs(r)) <= tol:
        return y
    raise ValueError(f"implicit solve stalled at residual {np.max(np.abs(r)):.2e}")


def rollout(f, jac_x, x0, controls, dt, tol=1e-10, max_iter=50):
    """Integrate a control sequence; returns states (K, T+1, n).

    ``x0`` is (K, n), ``controls`` is (K, T, m); a single trajectory can be
    passed with K = 1 slices.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    T = controls.shape[-2]
    states = [x0]
    x = x0
    for t in range(T):
        try:
            x = implicit_step(f, jac_x, x, controls[..., t, :], dt,
                              tol=tol, max_iter=max_iter)
        except (ValueError, ad.EvaluationError, np.linalg.LinAlgError) as e:
            raise RolloutError(t, str(e)) from e
        states.append(x)
    return np.stack(states, axis=-2)


class ImplicitStepOp(ad.CustomOp):
    """Tape op for one implicit step: exact implicit-function backward rule."""

    name = "implicit_step"

    def __init__(self, f, jac_x, jac_u, dt, step_index, tol=1e-10, max_iter=50):
        self.f = f
        self.jac_x = jac_x
        self.jac_u = jac_u
        self.dt = dt
        self.step_index = step_index
        self.tol = tol
        self.max_iter = max_iter

    def forward(self, values, ctx):
        x, u = values
        try:
            return implicit_step(self.f, self.jac_x, x, u, self.dt,
                                 tol=self.tol, max_iter=self.max_iter)
        except (ValueError, np.linalg.LinAlgError) as e:
            raise RolloutError(self.step_index, str(e)) from e

    def vjp(self, values, value, g, lead, ctx):
        x, u = values
        y = value
        n = y.shape[-1]
        J = np.eye(n) - self.dt * self.jac_x(y, u)      # (K, n, n)
        Jt = np.swapaxes(J, -1, -2)
        w = np.linalg.solve(Jt, g[..., None])[..., 0]   # adjoint of the residual
        Ju = self.jac_u(y, u)                           # (K, n, m)
        gu = self.dt * np.matmul(w[..., None, :], Ju)[..., 0, :]
        return [w, gu]


def rollout_on_tape(tape, f, jac_x, jac_u, x0, controls_node, dt,
                    tol=1e-10, max_iter=50):
    """Differentiable rollout: states node of shape (K, T+1, n).

    ``x0`` is a constant (K, n) array (initial states come from problem
    parameters, not from the network), ``controls_node`` is a tape node of
    shape (K, T, m).
    """
    K, T, m = controls_node.shape
    x = tape.const(np.asarray(x0, dtype=np.float64))
    states = [x]
    for t in range(T):
        u_t = controls_node[:, t, :]
        op = ImplicitStepOp(f, jac_x, jac_u, dt, t, tol=tol, max_iter=max_iter)
        x = tape.custom(op, [x, u_t])
        states.append(x)
    return ad.stack(states, axis=1)
