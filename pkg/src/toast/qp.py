"""Dense convex QP solver for the SQP subproblems.

Solves  min 1/2 p'Hp + c'p  s.t.  Ap <= b  and returns nonnegative duals.

Equality constraints arrive decomposed as +/- row pairs.  Callers that
know the pairing (the SQP layer does) pass ``pair_rows``; each pair
collapses into a two-sided row l <= a'p <= u, rows with l == u are
eliminated exactly through a QR null-space reduction, and the remaining
box-constrained problem goes to a predictor-corrector interior-point
iteration.  The reported dual vector is split back to one nonnegative
entry per original row, with equality duals recovered from stationarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class QpError(Exception):
    """Subproblem did not reach the requested tolerance."""

    def __init__(self, message, r_stat=np.inf, r_prim=np.inf, r_comp=np.inf,
                 infeasible=False):
        super().__init__(message)
        self.r_stat = r_stat
        self.r_prim = r_prim
        self.r_comp = r_comp
        self.infeasible = infeasible


@dataclass
class QpResult:
    step: np.ndarray
    duals: np.ndarray
    iterations: int
    r_stat: float
    r_prim: float
    r_comp: float

    def __iter__(self):
        # allows ``step, duals = solve_qp(...)``
        yield self.step
        yield self.duals


def kkt_errors(H, c, A, b, p, y):
    """Unscaled stationarity / primal / complementarity max-norms."""
    r_stat = float(np.max(np.abs(H @ p + c + (A.T @ y if len(b) else 0.0))))
    if len(b):
        slack = A @ p - b
        r_prim = float(max(np.max(slack), 0.0))
        r_comp = float(np.max(np.abs(y * slack)))
    else:
        r_prim = 0.0
        r_comp = 0.0
    return r_stat, r_prim, r_comp


def _merge_rows(A, b, pair_rows):
    """Collapse +/- pairs into two-sided rows.

    Returns (A_int, l, u, up_rows, low_rows) where internal row k is the
    original row up_rows[k] with upper bound b[up] and lower bound
    -b[low_rows[k]] (-inf when unpaired, low_rows[k] == -1).
    """
    m = A.shape[0]
    low_of = np.full(m, -1, dtype=np.int64)
    if pair_rows is not None and len(pair_rows):
        seen = set()
        for i, j in pair_rows:
            i, j = int(i), int(j)
            if not (0 <= i < m and 0 <= j < m) or i == j:
                raise ValueError(f"invalid row pair ({i}, {j})")
            if i in seen or j in seen:
                raise ValueError(f"row in more than one pair: ({i}, {j})")
            seen.update((i, j))
            low_of[i] = j
    is_low = np.zeros(m, dtype=bool)
    is_low[low_of[low_of >= 0]] = True
    up_rows = np.flatnonzero(~is_low)
    low_rows = low_of[up_rows]
    u = b[up_rows].copy()
    l = np.full(up_rows.size, -np.inf)
    paired = low_rows >= 0
    l[paired] = -b[low_rows[paired]]
    if np.any(l > u):
        raise ValueError("row pair with crossing bounds")
    return A[up_rows].copy(), l, u, up_rows, low_rows


def _split_duals(nu, up_rows, low_rows, m):
    """Nonnegative per-row duals from free-sign two-sided duals."""
    lam = np.zeros(m)
    lam[up_rows] = np.maximum(nu, 0.0)
    paired = low_rows >= 0
    lam[low_rows[paired]] = np.maximum(-nu[paired], 0.0)
    return lam


def _box_kkt_errors(H, c, A, l, u, x, y):
    """Residuals of the two-sided system; y is free-sign."""
    r_stat = float(np.max(np.abs(H @ x + c + (A.T @ y if A.shape[0] else 0.0))))
    if not A.shape[0]:
        return r_stat, 0.0, 0.0
    s = A @ x
    r_prim = float(max(np.max(np.maximum(s - u, l - s)), 0.0))
    up_part = np.maximum(y, 0.0) * np.where(np.isfinite(u), s - u, 0.0)
    lo_part = np.minimum(y, 0.0) * np.where(np.isfinite(l), s - l, 0.0)
    r_comp = float(max(np.max(np.abs(up_part)), np.max(np.abs(lo_part))))
    return r_stat, r_prim, r_comp


def _residual_scales(H, c, A, x, y):
    """Magnitudes that put the three residuals on a common relative footing.

    An absolute stationarity target below the rounding noise of forming
    H x + A' y is unreachable, so tolerances are measured against the
    terms that produce that noise (and likewise duals for the
    complementarity products).
    """
    hx = float(np.max(np.abs(H @ x), initial=0.0))
    cmax = float(np.max(np.abs(c), initial=0.0))
    if A.shape[0]:
        aty = float(np.max(np.abs(A.T @ y), initial=0.0))
        ymax = float(np.max(np.abs(y), initial=0.0))
        ax = float(np.max(np.abs(A @ x), initial=0.0))
    else:
        aty = ymax = ax = 0.0
    s_stat = 1.0 + max(hx, cmax, aty)
    s_prim = 1.0 + ax
    s_comp = 1.0 + ymax
    return s_stat, s_prim, s_comp


def _ruiz_equilibrate(H, c, A, iters=10):
    """Scale the stacked KKT data toward unit row/col norms.

    Returns scaled copies plus (d, e, c_cost): x = d * x_hat and
    y = e * y_hat / c_cost recover unscaled variables; bounds scale as
    e * bound.
    """
    n = H.shape[0]
    m = A.shape[0]
    H = H.copy()
    A = A.copy()
    c = c.copy()
    d = np.ones(n)
    e = np.ones(m)
    for _ in range(iters):
        col = np.maximum(np.max(np.abs(H), axis=0),
                         np.max(np.abs(A), axis=0) if m else 0.0)
        row = np.max(np.abs(A), axis=1) if m else np.ones(0)
        dx = 1.0 / np.sqrt(np.maximum(col, 1e-12))
        de = 1.0 / np.sqrt(np.maximum(row, 1e-12))
        dx = np.clip(dx, 1e-6, 1e6)
        de = np.clip(de, 1e-6, 1e6)
        H *= dx[:, None] * dx[None, :]
        c *= dx
        if m:
            A *= de[:, None] * dx[None, :]
        d *= dx
        e *= de
    gamma = max(np.mean(np.max(np.abs(H), axis=0)), np.max(np.abs(c), initial=0.0))
    c_cost = 1.0 / max(gamma, 1e-12)
    H *= c_cost
    c *= c_cost
    return H, c, A, d, e, c_cost


def _max_step(v, dv):
    """Largest alpha with v + alpha * dv >= 0 (v > 0 componentwise)."""
    neg = dv < 0.0
    if not np.any(neg):
        return np.inf
    return float(np.min(-v[neg] / dv[neg]))


def _ipm_box(H, c, A, l, u, *, warm_x=None, tol=1e-8, accept=None,
             max_iter=100):
    """min 1/2 x'Hx + c'x  s.t.  l <= Ax <= u; returns free-sign duals.

    Predictor-corrector interior point with a barrier on each finite
    side.  Convergence is judged every iteration on the original
    (unequilibrated) residuals, each measured relative to the magnitude
    of the terms that form it.  ``tol`` is the aim; when the iteration
    stalls short of it, the best iterate still counts as solved if it is
    inside the looser ``accept`` band.  Raises QpError otherwise; the
    infeasible flag is set when the primal residual is the one stuck.
    """
    if accept is None:
        accept = tol
    n = H.shape[0]
    m = A.shape[0]
    if m == 0:
        try:
            x = np.linalg.solve(H, -c)
            for _ in range(2):
                x = x + np.linalg.solve(H, -c - H @ x)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(H, -c, rcond=None)[0]
        r = float(np.max(np.abs(H @ x + c), initial=0.0))
        s_stat, _, _ = _residual_scales(H, c, A, x, np.zeros(0))
        if r > accept * s_stat:
            raise QpError("unconstrained stationarity not reached", r, 0.0, 0.0)
        return x, np.zeros(0), 0, (r, 0.0, 0.0)

    # rows annihilated by a null-space reduction (a variable pinned by
    # eliminated equalities) reach here as numerically zero rows; they
    # constrain nothing but would blow up the equilibration, so settle
    # them by inspection and solve without them
    row_norm = np.max(np.abs(A), axis=1)
    keep = row_norm > 1e-12 * max(float(np.max(row_norm)), 1.0)
    if not np.all(keep):
        viol = float(np.max(np.maximum(l[~keep], -u[~keep]), initial=0.0))
        if viol > accept:
            raise QpError("vacuous row excludes the feasible set",
                          0.0, viol, 0.0, infeasible=True)
        x, y_kept, its, res = _ipm_box(H, c, A[keep], l[keep], u[keep],
                                       warm_x=warm_x, tol=tol, accept=accept,
                                       max_iter=max_iter)
        y = np.zeros(m)
        y[keep] = y_kept
        return x, y, its, res

    Hs, cs, As, d, e, c_cost = _ruiz_equilibrate(H, c, A)
    ls = e * l
    us = e * u
    iu = np.flatnonzero(np.isfinite(us))
    il = np.flatnonzero(np.isfinite(ls))
    nbar = iu.size + il.size
    AsT = As.T

    xs = warm_x / d if warm_x is not None else np.zeros(n)
    ax = As @ xs
    su = np.maximum(us[iu] - ax[iu], 1.0)
    sl = np.maximum(ax[il] - ls[il], 1.0)
    lu = np.ones(iu.size)
    ll = np.ones(il.size)

    def scatter(vu, vl):
        out = np.zeros(m)
        out[iu] = vu
        out[il] = out[il] - vl
        return out

    best = None
    for it in range(max_iter + 1):
        y = scatter(lu, ll)
        xu_ = d * xs
        yu_ = e * y / c_cost
        r_stat, r_prim, r_comp = _box_kkt_errors(H, c, A, l, u, xu_, yu_)
        s_stat, s_prim, s_comp = _residual_scales(H, c, A, xu_, yu_)
        worst = max(r_stat / s_stat, r_prim / s_prim, r_comp / s_comp)
        if best is None or worst < best[0]:
            best = (worst, xu_, yu_, r_stat, r_prim, r_comp)
        if worst <= tol:
            return xu_, yu_, it, (r_stat, r_prim, r_comp)
        if it == max_iter:
            break

        ax = As @ xs
        r_d = Hs @ xs + cs + AsT @ y
        r_pu = ax[iu] + su - us[iu]
        r_pl = ax[il] - sl - ls[il]
        mu = (lu @ su + ll @ sl) / nbar

        with np.errstate(over="ignore", invalid="ignore"):
            D = np.zeros(m)
            D[iu] += lu / su
            D[il] += ll / sl
            M = Hs + (AsT * D) @ As
        if not np.all(np.isfinite(M)):
            break
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            try:
                L = np.linalg.cholesky(M + 1e-10 * np.trace(M) / n * np.eye(n))
            except np.linalg.LinAlgError as exc:
                raise QpError(f"normal equations not positive definite: {exc}",
                              *best[3:])

        def direction(r_cu, r_cl):
            with np.errstate(over="ignore", invalid="ignore"):
                qu = (lu * r_pu - r_cu) / su
                ql = (ll * r_pl + r_cl) / sl
                q = np.zeros(m)
                q[iu] = qu
                q[il] = q[il] + ql
                rhs = -r_d - AsT @ q
                dx = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
                adx = As @ dx
                dsu = -r_pu - adx[iu]
                dlu = -(r_cu + lu * dsu) / su
                dsl = r_pl + adx[il]
                dll = -(r_cl + ll * dsl) / sl
            return dx, dsu, dlu, dsl, dll

        # affine scaling predictor sets the centering weight
        dx, dsu, dlu, dsl, dll = direction(lu * su, ll * sl)
        a_p = min(1.0, _max_step(su, dsu), _max_step(sl, dsl))
        a_d = min(1.0, _max_step(lu, dlu), _max_step(ll, dll))
        mu_aff = ((lu + a_d * dlu) @ (su + a_p * dsu)
                  + (ll + a_d * dll) @ (sl + a_p * dsl)) / nbar
        sig = min(max(mu_aff / max(mu, 1e-300), 0.0) ** 3, 1.0)

        r_cu = lu * su + dlu * dsu - sig * mu
        r_cl = ll * sl + dll * dsl - sig * mu
        dx, dsu, dlu, dsl, dll = direction(r_cu, r_cl)
        if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dlu))
                and np.all(np.isfinite(dll))):
            break

        eta = 0.995 if mu > 1e-8 else 0.9995
        alpha = min(1.0, eta * min(_max_step(su, dsu), _max_step(sl, dsl),
                                   _max_step(lu, dlu), _max_step(ll, dll)))
        import os
        if os.environ.get("IPM_DEBUG"):
            print(f"  ipm it={it} mu={mu:.3e} sig={sig:.3e} alpha={alpha:.3e} "
                  f"rs={r_stat:.3e} rp={r_prim:.3e} rc={r_comp:.3e}")
        if alpha < 1e-12:
            break
        xs = xs + alpha * dx
        su = su + alpha * dsu
        sl = sl + alpha * dsl
        lu = lu + alpha * dlu
        ll = ll + alpha * dll

    worst, xu_, yu_, r_stat, r_prim, r_comp = best
    if worst <= accept:
        return xu_, yu_, it, (r_stat, r_prim, r_comp)
    # the residual is unscaled, so the feasibility yardstick must be too
    bscale = 1.0 + max(np.max(np.abs(u[iu]), initial=0.0),
                       np.max(np.abs(l[il]), initial=0.0))
    raise QpError("interior point iteration stalled",
                  r_stat, r_prim, r_comp,
                  infeasible=bool(r_prim > 1e-6 * bscale
                                  and r_prim > 1e3 * tol))


def solve_qp(H, c, A=None, b=None, *, warm_primal=None, warm_dual=None,
             tol=1e-8, max_iter=100, pair_rows=None) -> QpResult:
    """Minimize 1/2 p'Hp + c'p subject to Ap <= b.

    Raises QpError when the tolerance is not reached within ``max_iter``
    interior-point iterations or the subproblem looks primal infeasible.
    A warm primal/dual pair already satisfying the KKT conditions
    returns immediately with zero iterations; otherwise the primal seeds
    the iteration.
    """
    H = np.asarray(H, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    n = H.shape[0]
    if A is None or b is None or np.size(b) == 0:
        A = np.zeros((0, n))
        b = np.zeros(0)
    A = np.asarray(A, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = A.shape[0]

    if m == 0:
        x, _, its, (rs, rp, rc) = _ipm_box(H, c, A, np.zeros(0), np.zeros(0),
                                           tol=tol, max_iter=max_iter)
        return QpResult(x, np.zeros(0), its, rs, rp, rc)

    if warm_primal is not None and warm_dual is not None:
        lam0 = np.maximum(warm_dual, 0.0)
        rs, rp, rc = kkt_errors(H, c, A, b, warm_primal, lam0)
        ss, sp, sc = _residual_scales(H, c, A, warm_primal, lam0)
        if max(rs / ss, rp / sp, rc / sc) <= tol:
            return QpResult(warm_primal.copy(), lam0, 0, rs, rp, rc)

    A_int, l_int, u_int, up_rows, low_rows = _merge_rows(A, b, pair_rows)
    eq = l_int == u_int

    # the interior point aims a digit lower than the caller asked for:
    # its superlinear tail makes the extra iteration cheap and the first
    # iterate under a threshold otherwise lands right at it; a stall
    # inside the caller's band still counts
    if np.any(eq):
        x, nu_int, its = _solve_with_equalities(
            H, c, A_int, l_int, u_int, eq, warm_primal, 0.1 * tol, tol,
            max_iter)
    else:
        x, nu_int, its, _ = _ipm_box(
            H, c, A_int, l_int, u_int, warm_x=warm_primal,
            tol=0.1 * tol, accept=tol, max_iter=max_iter)

    lam = _split_duals(nu_int, up_rows, low_rows, m)
    r_stat, r_prim, r_comp = kkt_errors(H, c, A, b, x, lam)
    ss, sp, sc = _residual_scales(H, c, A, x, lam)
    if max(r_stat / ss, r_prim / sp, r_comp / sc) > tol:
        raise QpError("tolerance lost in dual recovery",
                      r_stat, r_prim, r_comp)
    return QpResult(x, lam, its, r_stat, r_prim, r_comp)


def _solve_with_equalities(H, c, A_int, l_int, u_int, eq, warm_x,
                           tol, accept, max_iter):
    """Eliminate the l == u rows exactly, solve the reduced box QP.

    With E x = h the feasible set is x = x_p + Z w for an orthonormal null
    basis Z, so the inequalities become box constraints on w and the
    interior-point iteration never sees the stiff equality rows.
    Equality duals come back out of stationarity through the same QR
    factors.
    """
    n = H.shape[0]
    E = A_int[eq]
    h = u_int[eq]
    C = A_int[~eq]
    lc = l_int[~eq]
    uc = u_int[~eq]

    Q, R = np.linalg.qr(E.T, mode="complete")
    me = E.shape[0]
    R = R[:me]
    rdiag = np.abs(np.diag(R))
    if me and (not rdiag.size or np.min(rdiag) < 1e-10 * max(np.max(rdiag), 1.0)):
        raise QpError("degenerate equality rows")
    Q1 = Q[:, :me]
    Z = Q[:, me:]
    x_p = Q1 @ np.linalg.solve(R.T, h)

    if Z.shape[1] == 0:
        x = x_p
        y_c = np.zeros(C.shape[0])
        its = 0
    else:
        HZ = H @ Z
        Hr = Z.T @ HZ
        Hr = 0.5 * (Hr + Hr.T)
        cr = Z.T @ (c + H @ x_p)
        Cr = C @ Z
        shift = C @ x_p
        w_warm = Z.T @ (warm_x - x_p) if warm_x is not None else None
        w, y_c, its, _ = _ipm_box(
            Hr, cr, Cr, lc - shift, uc - shift, warm_x=w_warm,
            tol=tol, accept=accept, max_iter=max_iter)
        x = x_p + Z @ w

    s = C @ x
    viol = float(max(np.max(np.maximum(s - uc, lc - s), initial=0.0), 0.0))
    if Z.shape[1] == 0 and viol > accept:
        raise QpError("equality rows pin an infeasible point",
                      0.0, viol, 0.0, infeasible=True)

    # stationarity: H x + c + E' nu_eq + C' y_c = 0
    resid = -(H @ x + c + C.T @ y_c)
    nu_eq = np.linalg.solve(R, Q1.T @ resid)
    nu_int = np.zeros(A_int.shape[0])
    nu_int[eq] = nu_eq
    nu_int[~eq] = y_c
    return x, nu_int, its
