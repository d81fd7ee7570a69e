"""QP solver checks against analytic cases and an enumeration oracle."""

from itertools import combinations

import numpy as np
import pytest

from toast.qp import QpError, QpResult, kkt_errors, solve_qp


def enumerate_qp(H, c, A, b, tol=1e-9):
    """Brute-force reference: try every candidate active set.

    For a convex QP any point satisfying stationarity, feasibility and
    dual nonnegativity is a global minimizer, so the first subset that
    passes all three is the answer.  Returns None when no subset of at
    most n rows works (infeasible or degenerate draw).
    """
    n = H.shape[0]
    m = A.shape[0]
    for k in range(0, min(n, m) + 1):
        for subset in combinations(range(m), k):
            S = list(subset)
            K = np.zeros((n + k, n + k))
            K[:n, :n] = H
            if k:
                K[:n, n:] = A[S].T
                K[n:, :n] = A[S]
            rhs = np.concatenate([-c, b[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            p, nu = sol[:n], sol[n:]
            if k and np.min(nu) < -tol:
                continue
            if m and np.max(A @ p - b) > tol:
                continue
            y = np.zeros(m)
            y[S] = np.maximum(nu, 0.0)
            return p, y
    return None


def random_qp(rng, n=None, m=None):
    n = n if n is not None else int(rng.integers(1, 5))
    m = m if m is not None else int(rng.integers(1, 7))
    G = rng.normal(size=(n, n))
    H = G.T @ G + 0.1 * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    b = A @ x0 + np.abs(rng.normal(size=m)) * 0.5 + 0.01
    return H, c, A, b


class TestAnalyticCases:
    def test_scalar_bound(self):
        # min (x-1)^2 s.t. x <= 0
        res = solve_qp(np.array([[2.0]]), np.array([-2.0]),
                       np.array([[1.0]]), np.array([0.0]))
        assert res.step[0] == pytest.approx(0.0, abs=1e-9)
        assert res.duals[0] == pytest.approx(2.0, abs=1e-8)

    def test_unconstrained(self):
        step, duals = solve_qp(np.eye(2), np.array([1.0, -2.0]))
        np.testing.assert_allclose(step, [-1.0, 2.0], atol=1e-10)
        assert duals.size == 0

    def test_clip_projection(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=8) * 2.0
        H = 2.0 * np.eye(8)
        c = -2.0 * t
        A = np.vstack([np.eye(8), -np.eye(8)])
        b = np.ones(16)
        res = solve_qp(H, c, A, b)
        np.testing.assert_allclose(res.step, np.clip(t, -1, 1), atol=1e-8)

    def test_equality_pair_rows(self):
        # min 1/2||p||^2 - p_0 with p_0 + p_1 = 1 as a +/- pair
        H = np.eye(2)
        c = np.array([-1.0, 0.0])
        a = np.array([1.0, 1.0])
        A = np.vstack([a, -a])
        b = np.array([1.0, -1.0])
        res = solve_qp(H, c, A, b, pair_rows=[(0, 1)])
        np.testing.assert_allclose(res.step, [1.0, 0.0], atol=1e-8)
        res2 = solve_qp(H, c, A, b)
        np.testing.assert_allclose(res2.step, res.step, atol=1e-7)

    def test_result_unpacks(self):
        out = solve_qp(np.eye(1), np.array([3.0]))
        assert isinstance(out, QpResult)
        step, duals = out
        assert step[0] == pytest.approx(-3.0)


class TestOracleEquivalence:
    def test_thirty_random_instances(self):
        rng = np.random.default_rng(2024)
        solved = 0
        while solved < 30:
            H, c, A, b = random_qp(rng)
            ref = enumerate_qp(H, c, A, b)
            if ref is None:
                continue
            p_ref, y_ref = ref
            res = solve_qp(H, c, A, b)
            assert np.max(np.abs(res.step - p_ref)) <= 1e-6
            assert np.max(np.abs(res.duals - y_ref)) <= 1e-6
            solved += 1


class TestKktInvariants:
    def test_residuals_and_sign(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            H, c, A, b = random_qp(rng)
            res = solve_qp(H, c, A, b)
            assert np.all(res.duals >= 0.0)
            r_stat, r_prim, r_comp = kkt_errors(H, c, A, b, res.step, res.duals)
            assert r_stat <= 1e-8
            assert r_prim <= 1e-8
            assert r_comp <= 1e-8

    def test_reported_residuals_match(self):
        rng = np.random.default_rng(8)
        H, c, A, b = random_qp(rng, n=3, m=5)
        res = solve_qp(H, c, A, b)
        r_stat, r_prim, r_comp = kkt_errors(H, c, A, b, res.step, res.duals)
        assert res.r_stat == pytest.approx(r_stat, abs=1e-15)
        assert res.r_prim == pytest.approx(r_prim, abs=1e-15)
        assert res.r_comp == pytest.approx(r_comp, abs=1e-15)


class TestWarmStart:
    def test_warm_start_reduces_iterations(self):
        rng = np.random.default_rng(9)
        H, c, A, b = random_qp(rng, n=4, m=6)
        cold = solve_qp(H, c, A, b)
        warm = solve_qp(H, c, A, b, warm_primal=cold.step, warm_dual=cold.duals)
        assert warm.iterations <= cold.iterations
        np.testing.assert_allclose(warm.step, cold.step, atol=1e-7)

    def test_warm_start_on_shifted_problem(self):
        rng = np.random.default_rng(10)
        H, c, A, b = random_qp(rng, n=4, m=6)
        base = solve_qp(H, c, A, b)
        res = solve_qp(H, c + 1e-3 * rng.normal(size=4), A, b,
                       warm_primal=base.step, warm_dual=base.duals)
        assert np.all(res.duals >= 0)


class TestFailureModes:
    def test_infeasible_raises(self):
        H = np.eye(1)
        c = np.zeros(1)
        A = np.array([[1.0], [-1.0]])
        b = np.array([-1.0, -1.0])   # x <= -1 and x >= 1
        with pytest.raises(QpError) as err:
            solve_qp(H, c, A, b, max_iter=500)
        assert err.value.r_prim > 1e-6

    def test_inconsistent_unconstrained_raises(self):
        H = np.diag([1.0, 0.0])
        c = np.array([1.0, 0.5])
        with pytest.raises(QpError):
            solve_qp(H, c)

    def test_singular_consistent_unconstrained(self):
        H = np.diag([1.0, 0.0])
        c = np.array([1.0, 0.0])
        res = solve_qp(H, c)
        assert res.step[0] == pytest.approx(-1.0, abs=1e-9)
