"""SQP solver with an l1-merit line search and damped BFGS updates.

Accepts primal and dual warm starts, reports iteration counts, wall time,
and the final KKT residuals.  The quadratic subproblem is handed to
``toast.qp.solve_qp`` together with the +/- row pairing extracted from the
constraint layout so decomposed equalities are treated as single rows.
When a linearization is infeasible (the QP reports a certificate), the
constraint targets are pulled toward the current point in a short ladder
of relaxation factors and the penalty parameter grows enough that the
partial feasibility step still decreases the merit.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from . import nlp as nlpmod
from .autodiff import EvaluationError
from .nlp import KktResidual, ParametricNLP, PrimalDualPoint
from .qp import QpError, solve_qp


class LineSearchError(Exception):
    """No acceptable step length along the current direction."""


@dataclass
class SolveOptions:
    kkt_tol: float = 1e-6
    max_iter: int = 200
    mu_init: float = 10.0
    mu_factor: float = 1.1
    armijo: float = 1e-4
    backtrack: float = 0.5
    min_step: float = 1e-10
    bfgs_damping: float = 0.2
    qp_tol: float = 1e-8
    qp_max_iter: int = 100
    reg_init: float = 1e-8
    watchdog: int = 8
    trace_path: str | None = None

    def __post_init__(self):
        if self.kkt_tol <= 0 or self.qp_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")


@dataclass
class SolveResult:
    point: PrimalDualPoint
    status: str
    iterations: int
    wall_time: float
    kkt: KktResidual
    cost: float

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _convexified(H, E):
    """Shift H so its curvature on the null space of E is safely positive.

    Only the reduced Hessian has to be positive definite for the
    subproblem; a shift sized by the full-space minimum eigenvalue acts
    as a proximal term that crushes the Newton step even at points where
    the reduced curvature is already excellent.  The floor is relative
    to the curvature scale so the shifted matrix stays invertible to
    working precision.
    """
    n = H.shape[0]
    if E.shape[0]:
        Q = np.linalg.qr(E.T, mode="complete")[0]
        Z = Q[:, E.shape[0]:]
        Hr = Z.T @ H @ Z
        Hr = 0.5 * (Hr + Hr.T)
    else:
        Hr = H
    k = Hr.shape[0]
    if k == 0:
        return H
    floor = 1e-6 * max(1.0, float(np.max(np.abs(Hr))))
    try:
        np.linalg.cholesky(Hr + floor * np.eye(k))
        return H + 2.0 * floor * np.eye(n)
    except np.linalg.LinAlgError:
        w = float(np.linalg.eigvalsh(Hr)[0])
        return H + (abs(w) + floor) * np.eye(n)


def _kkt_from_parts(g, lam, grad_f, jac) -> KktResidual:
    stat = float(np.max(np.abs(grad_f + jac.T @ lam)))
    prim = float(max(np.max(g), 0.0))
    comp = float(np.max(np.abs(lam * g)))
    return KktResidual(stat, prim, comp)


def negated_row_pairs(layout, jac) -> list:
    """(upper, lower) row index pairs whose Jacobian rows are exact negations.

    Blocks named ``<x>_upper``/``<x>_lower`` are candidates; box-bound
    blocks share the naming but are not negations, so each pair is verified
    against the Jacobian (negation is bitwise for rows built as R and -R).
    """
    pairs = []
    for name in layout.block_names():
        if not name.endswith("_upper"):
            continue
        sibling = name[:-6] + "_lower"
        if sibling not in layout.blocks:
            continue
        u0, u1 = layout.blocks[name]
        l0, l1 = layout.blocks[sibling]
        if u1 - u0 != l1 - l0:
            continue
        if np.array_equal(jac[u0:u1], -jac[l0:l1]):
            pairs.extend((u0 + i, l0 + i) for i in range(u1 - u0))
    return pairs


def merit_directional_derivative(grad_f, g, step, mu, jac=None) -> float:
    """Directional derivative of the l1 merit along a subproblem step.

    Without the Jacobian the step is assumed to zero the linearized
    constraints (J p <= -g), the usual case for an exact QP solution;
    with it the credit is only the actual linearized violation decrease,
    which also covers relaxed subproblems.
    """
    v0 = np.sum(np.maximum(g, 0.0))
    v1 = np.sum(np.maximum(g + jac @ step, 0.0)) if jac is not None else 0.0
    return float(grad_f @ step - mu * (v0 - v1))


def _relaxed_bounds(g, pairs, tau):
    """Pull infeasible linearized targets toward the current point.

    Equality pairs keep their two-sided structure with the target scaled
    by ``tau``; violated one-sided rows relax by the same factor.  Rows
    already satisfied at the current point are untouched, so the relaxed
    subproblem never cuts into the region the full one allowed.
    """
    b = -g
    scale = np.where(b < 0.0, tau, 1.0)
    for i, j in pairs:
        if g[i] == -g[j]:
            scale[i] = tau
            scale[j] = tau
    return b * scale


def line_search(nlp: ParametricNLP, theta, z, step, mu,
                opts: SolveOptions, merit0=None, deriv=None,
                alpha0=1.0) -> float:
    """Backtracking Armijo search on the l1 merit; returns the step length."""
    if merit0 is None:
        merit0 = nlpmod.l1_merit(nlp, z, theta, mu)
    if deriv is None:
        _, g, grad_f, _ = nlpmod.evaluate_with_derivatives(nlp, z, theta)
        deriv = merit_directional_derivative(grad_f, g, step, mu)
    if deriv >= 0.0:
        raise LineSearchError(f"not a descent direction (D = {deriv:.3e})")
    alpha = alpha0
    while alpha >= opts.min_step:
        try:
            trial = nlpmod.l1_merit(nlp, z + alpha * step, theta, mu)
        except EvaluationError:
            trial = np.inf
        if trial <= merit0 + opts.armijo * alpha * deriv:
            return alpha
        alpha *= opts.backtrack
    raise LineSearchError("step length fell below the minimum")


def _second_order_correction(nlp, theta, z, step, jac, pairs, g_base):
    """Minimum-norm correction for constraint curvature at the trial point.

    Equality curvature makes the l1 merit reject good full steps.  The
    correction d solves J_W d = -g(z + step) in the least-squares sense
    over the equality rows and any rows the trial point violates, which
    cancels the second-order violation growth without touching the step's
    descent properties.  Returns the corrected step or None.
    """
    try:
        g_plus = nlpmod.constraint_values(nlp, z + step, theta)
    except EvaluationError:
        return None
    eq_up = np.zeros(g_plus.shape[0], dtype=bool)
    eq_low = np.zeros(g_plus.shape[0], dtype=bool)
    for i, j in pairs:
        if g_base[i] == -g_base[j]:   # true equality, one representative
            eq_up[i] = True
            eq_low[j] = True
    # violated rows need the correction; rows sitting on their bound are
    # pinned so the correction cannot push them across it
    rows = eq_up | ((g_plus > -1e-9) & ~eq_low)
    if not np.any(rows):
        return None
    Jw = jac[rows]
    target = -g_plus[rows]
    JJt = Jw @ Jw.T
    JJt[np.diag_indices_from(JJt)] += 1e-12 * max(float(np.trace(JJt)), 1.0)
    try:
        d = Jw.T @ np.linalg.solve(JJt, target)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(d)):
        return None
    return step + d


def _write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "merit", "alpha", "mu",
                         "r_stat", "r_prim", "r_comp", "qp_iterations"])
        writer.writerows(rows)


def solve_nlp(nlp: ParametricNLP, theta, warm: PrimalDualPoint | None = None,
              opts: SolveOptions | None = None) -> SolveResult:
    """Solve one NLP instance from a (possibly cold) primal-dual start."""
    opts = opts or SolveOptions()
    theta = np.asarray(theta, dtype=np.float64)
    if warm is None:
        warm = PrimalDualPoint(np.zeros(nlp.n_z), np.zeros(nlp.n_c))
    z = np.asarray(warm.z, dtype=np.float64).copy()
    lam = np.maximum(np.asarray(warm.lam, dtype=np.float64), 0.0)
    if z.shape != (nlp.n_z,) or lam.shape != (nlp.n_c,):
        raise ValueError("warm start has the wrong dimensions")

    t0 = time.perf_counter()
    trace = []

    def finish(status, iterations, kkt, cost):
        if opts.trace_path is not None:
            _write_trace(opts.trace_path, trace)
        return SolveResult(
            point=PrimalDualPoint(z, lam),
            status=status,
            iterations=iterations,
            wall_time=time.perf_counter() - t0,
            kkt=kkt,
            cost=float(cost),
        )

    try:
        f, g, grad_f, jac = nlpmod.evaluate_with_derivatives(nlp, z, theta)
    except EvaluationError:
        bad = KktResidual(np.inf, np.inf, np.inf)
        return finish("evaluation-failure", 0, bad, np.nan)

    kkt = _kkt_from_parts(g, lam, grad_f, jac)
    if kkt.max <= opts.kkt_tol:
        return finish("converged", 0, kkt, f)

    pairs = negated_row_pairs(nlp.layout, jac)
    use_exact = nlp.lagrangian_hessian is not None
    if nlp.cost_hessian is not None:
        B = np.array(nlp.cost_hessian(z, theta), dtype=np.float64)
    else:
        B = np.eye(nlp.n_z)
    mu = max(opts.mu_init, opts.mu_factor * float(np.max(lam, initial=0.0)))
    reg = opts.reg_init
    prev_step = None
    ck = None
    force_ls = False
    rearm_below = np.inf

    def restore():
        # abandon the probation phase and return to the checkpoint, penalty
        # state included; block new probations until the residual halves so
        # the same wander cannot repeat back to back
        nonlocal z, lam, f, g, grad_f, jac, B, kkt, prev_step, ck, force_ls
        nonlocal mu, reg, rearm_below
        z, lam = ck["z"], ck["lam"]
        f, g, grad_f, jac = ck["f"], ck["g"], ck["grad_f"], ck["jac"]
        B, kkt = ck["B"], ck["kkt"]
        mu, reg = ck["mu"], ck["reg"]
        rearm_below = 0.5 * kkt.max
        prev_step = None
        ck = None
        force_ls = True

    tau_ladder = (0.5, 0.25, 0.1, 0.02)

    for it in range(1, opts.max_iter + 1):
        if use_exact:
            try:
                H_exact = np.asarray(
                    nlp.lagrangian_hessian(z, lam, theta), dtype=np.float64)
            except EvaluationError:
                pass  # keep the previous curvature for this iteration
            else:
                # lower rows of decomposed equalities carry the negated
                # value, which picks the equality pairs out of the box pairs
                eq_up = [i for i, j in pairs if g[i] == -g[j]]
                B = _convexified(H_exact, jac[eq_up])
        qp = None
        b_qp = -g
        tau_used = 1.0
        reg_tries = 0
        tau_idx = 0
        while qp is None:
            try:
                qp = solve_qp(B + reg * np.eye(nlp.n_z), grad_f, jac, b_qp,
                              warm_primal=prev_step, warm_dual=lam,
                              tol=opts.qp_tol, max_iter=opts.qp_max_iter,
                              pair_rows=pairs)
            except QpError as err:
                import os
                if os.environ.get("SQP_DUMP"):
                    np.savez(f"/tmp/qpfail_it{it}.npz",
                             H=B + reg * np.eye(nlp.n_z), c=grad_f, A=jac,
                             b=b_qp, pairs=np.asarray(pairs, dtype=np.int64),
                             warm=(prev_step if prev_step is not None
                                   else np.zeros(0)),
                             lam=lam)
                    print(f"dumped it={it} err={err} inf={err.infeasible} "
                          f"rs={err.r_stat:.3e} rp={err.r_prim:.3e} "
                          f"rc={err.r_comp:.3e}")
                if err.infeasible:
                    if tau_idx >= len(tau_ladder):
                        if ck is None:
                            return finish("qp-failure", it - 1, kkt, f)
                        restore()
                        break
                    tau_used = tau_ladder[tau_idx]
                    tau_idx += 1
                    b_qp = _relaxed_bounds(g, pairs, tau_used)
                else:
                    reg_tries += 1
                    if reg_tries >= 4:
                        if ck is None:
                            return finish("qp-failure", it - 1, kkt, f)
                        restore()
                        break
                    reg *= 2.0
        if qp is None:
            continue
        step, lam_qp = qp.step, qp.duals

        v0 = float(np.sum(np.maximum(g, 0.0)))
        v1 = float(np.sum(np.maximum(g + jac @ step, 0.0)))
        gfp = float(grad_f @ step)
        mu_req = opts.mu_factor * float(np.max(lam_qp, initial=0.0))
        if tau_used < 1.0 and v0 - v1 > 1e-12 and gfp > 0.0:
            # a partial step may climb the objective; the penalty must be
            # large enough that the feasibility gain still pulls the merit
            # down
            mu_req = max(mu_req, 2.0 * gfp / (v0 - v1))
        mu_req = max(mu_req, opts.mu_init)
        if mu_req >= mu:
            mu = mu_req
        else:
            # an episode of large multipliers (a thin relaxed subproblem)
            # must not poison the merit forever; decay toward the current
            # requirement instead of ratcheting
            mu = max(mu_req, 1e-2 * mu)
        merit0 = f + mu * v0
        deriv = gfp - mu * (v0 - v1)

        # watchdog bookkeeping: bank probation progress once the merit drops
        # below the checkpoint, give up on the probation when the budget runs
        # out or the model turns uphill
        if ck is not None:
            ck_merit = ck["f"] + mu * ck["v0"]
            ck_deriv = ck["gfp"] - mu * (ck["v0"] - ck["v1"])
            if merit0 <= ck_merit + opts.armijo * min(ck_deriv, 0.0):
                ck = None
                rearm_below = np.inf
            elif it - ck["it"] >= opts.watchdog or deriv >= 0.0:
                restore()
                continue
        rescue_eval = None
        if deriv >= 0.0:
            # the merit model is exhausted; at residual scale this is
            # usually rounding noise in the directional derivative, so
            # accept the Newton step iff it halves the KKT residual
            try:
                ev = nlpmod.evaluate_with_derivatives(nlp, z + step, theta)
                kkt_c = _kkt_from_parts(ev[1], lam_qp, ev[2], ev[3])
                if kkt_c.max <= 0.5 * kkt.max:
                    rescue_eval = ev
            except EvaluationError:
                pass
            if rescue_eval is None:
                return finish("line-search-failure", it - 1, kkt, f)

        # full step, then a second-order correction, then a probation step
        # under the watchdog, then backtracking
        trial_step = step
        # duals of a relaxed subproblem price the relaxation, not the
        # constraints; adopting them would contaminate the multiplier
        # estimates (and through them the Lagrangian curvature)
        lam_trial = lam_qp if tau_used == 1.0 else lam
        alpha = 1.0 if rescue_eval is not None else None
        if alpha is None and not force_ls:
            try:
                m_full = nlpmod.l1_merit(nlp, z + step, theta, mu)
            except EvaluationError:
                m_full = np.inf
            if m_full <= merit0 + opts.armijo * deriv:
                alpha = 1.0
            else:
                step_soc = _second_order_correction(nlp, theta, z, step,
                                                    jac, pairs, g)
                m_soc = np.inf
                if step_soc is not None:
                    try:
                        m_soc = nlpmod.l1_merit(nlp, z + step_soc, theta, mu)
                    except EvaluationError:
                        m_soc = np.inf
                    if m_soc <= merit0 + opts.armijo * deriv:
                        trial_step = step_soc
                        alpha = 1.0
                if alpha is None:
                    # probation: take the step anyway and let the next few
                    # iterations justify it, keeping a return point
                    m_best = min(m_full, m_soc)
                    if np.isfinite(m_best) and kkt.max < rearm_below:
                        if m_soc < m_full:
                            trial_step = step_soc
                        alpha = 1.0
                        if ck is None:
                            ck = {"it": it, "z": z, "lam": lam, "f": f,
                                  "g": g, "grad_f": grad_f, "jac": jac,
                                  "B": B, "kkt": kkt, "mu": mu, "reg": reg,
                                  "v0": v0, "v1": v1, "gfp": gfp}
        force_ls = False
        if alpha is None:
            try:
                alpha = line_search(nlp, theta, z, step, mu, opts,
                                    merit0=merit0, deriv=deriv,
                                    alpha0=opts.backtrack)
            except LineSearchError:
                if ck is None:
                    return finish("line-search-failure", it - 1, kkt, f)
                restore()
                continue

        import os
        if os.environ.get("SQP_TRACE"):
            print(f"it={it:3d} kkt={kkt.max:.3e} tau={tau_used:.2f} "
                  f"|p|={np.max(np.abs(step)):.2e} a={alpha:.2e} "
                  f"mu={mu:.2e} |lam_qp|={np.max(lam_qp, initial=0):.2e} "
                  f"gfp={gfp:+.2e} v0={v0:.2e} v1={v1:.2e} "
                  f"ck={'Y' if ck is not None else 'n'}"
                  f"{' soc' if trial_step is not step else ''}"
                  f"{' resc' if rescue_eval is not None else ''}")
        z_new = z + alpha * trial_step
        lam_new = lam_trial
        if rescue_eval is not None:
            f_new, g_new, grad_f_new, jac_new = rescue_eval
        else:
            try:
                f_new, g_new, grad_f_new, jac_new = (
                    nlpmod.evaluate_with_derivatives(nlp, z_new, theta))
            except EvaluationError:
                return finish("evaluation-failure", it - 1, kkt, f)

        if not use_exact:
            # BFGS on the Lagrangian gradient change at the incoming
            # multipliers; steps at rounding scale carry no curvature
            # signal and only erode B
            s = z_new - z
            grad_L_new = grad_f_new + jac_new.T @ lam_new
            grad_L_old = grad_f + jac.T @ lam_new
            yvec = grad_L_new - grad_L_old
            Bs = B @ s
            sBs = float(s @ Bs)
            sy = float(s @ yvec)
            too_small = np.max(np.abs(s)) < 1e-11 * (1.0 + np.max(np.abs(z)))
            if sBs > 1e-16 and not too_small:
                if sy < opts.bfgs_damping * sBs:
                    theta_mix = (1.0 - opts.bfgs_damping) * sBs / (sBs - sy)
                    yvec = theta_mix * yvec + (1.0 - theta_mix) * Bs
                    sy = float(s @ yvec)
                if sy > 1e-16:
                    B = (B - np.outer(Bs, Bs) / sBs
                         + np.outer(yvec, yvec) / sy)

        z, lam = z_new, lam_new
        f, g, grad_f, jac = f_new, g_new, grad_f_new, jac_new
        prev_step = step
        # the probation block lifts gradually: a crawl that makes no
        # residual progress still deserves a fresh probation eventually
        rearm_below *= 1.15
        kkt = _kkt_from_parts(g, lam, grad_f, jac)
        trace.append([it, merit0, alpha, mu,
                      kkt.stationarity, kkt.primal, kkt.complementarity,
                      qp.iterations])
        if kkt.max <= opts.kkt_tol:
            return finish("converged", it, kkt, f)

    return finish("iteration-limit", opts.max_iter, kkt, f)
