"""Tape autodiff checked against central finite differences."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helpers import fd_gradient, rel_err
from toast import autodiff as ad


def tape_grad(build, x):
    """Gradient of scalar build(node) at x via the tape."""
    t = ad.Tape()
    v = t.var(x)
    out = build(v)
    return ad.gradient(out, v)


def check_against_fd(build, build_np, x, tol=1e-5):
    g = tape_grad(build, x)
    fd = fd_gradient(build_np, x)
    assert rel_err(g, fd) <= tol, f"rel err {rel_err(g, fd):.2e}"


class TestPrimitives:
    def test_analytic_product_rule(self):
        # d/dx [sin(x) * x^2] = 2x sin x + x^2 cos x
        x = 1.2
        g = tape_grad(lambda v: ad.sin(v) * v * v, np.array(x))
        expect = 2 * x * np.sin(x) + x * x * np.cos(x)
        assert_allclose(float(g), expect, rtol=1e-12)

    @pytest.mark.parametrize("name", [
        "add", "sub", "mul", "div", "neg", "sin", "cos", "tan", "exp",
        "sqrt", "tanh", "logistic", "maximum", "sum", "dot", "matvec",
        "matmul", "norm", "square", "softmax",
    ])
    def test_each_primitive_matches_fd(self, name):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.2, 1.2, size=6)
        w = rng.uniform(-1.0, 1.0, size=6)
        M = rng.uniform(-1.0, 1.0, size=(4, 6))
        B = rng.uniform(-1.0, 1.0, size=(6, 3))

        builds = {
            "add": lambda v, lib: lib_sum(lib, v + v[::-1] if lib is np else v + _rev(v)),
            "sub": lambda v, lib: lib_sum(lib, v - 0.5 * v2(v, lib)),
            "mul": lambda v, lib: lib_sum(lib, v * v2(v, lib)),
            "div": lambda v, lib: lib_sum(lib, v / (v2(v, lib) + 2.0)),
            "neg": lambda v, lib: lib_sum(lib, -v),
            "sin": lambda v, lib: lib_sum(lib, lib.sin(v)),
            "cos": lambda v, lib: lib_sum(lib, lib.cos(v)),
            "tan": lambda v, lib: lib_sum(lib, lib.tan(v)),
            "exp": lambda v, lib: lib_sum(lib, lib.exp(v)),
            "sqrt": lambda v, lib: lib_sum(lib, lib.sqrt(v)),
            "tanh": lambda v, lib: lib_sum(lib, lib.tanh(v)),
            "logistic": lambda v, lib: lib_sum(
                lib, lib.logistic(v) if lib is ad else 1 / (1 + np.exp(-v))),
            "maximum": lambda v, lib: lib_sum(
                lib, lib.maximum(v - 0.7, 0.0) if lib is ad else np.maximum(v - 0.7, 0.0)),
            "sum": lambda v, lib: (lib.vsum(v) if lib is ad else np.sum(v)),
            "dot": lambda v, lib: lib.dot(v, w) if lib is ad else np.dot(v, w),
            "matvec": lambda v, lib: (lib.dot(lib.matvec(M, v), np.ones(4)) if lib is ad
                                      else np.dot(M @ v, np.ones(4))),
            "matmul": lambda v, lib: _matmul_case(v, lib, B),
            "norm": lambda v, lib: lib.norm(v) if lib is ad else np.linalg.norm(v),
            "square": lambda v, lib: lib_sum(lib, lib.square(v) if lib is ad else v * v),
            "softmax": lambda v, lib: (lib.dot(lib.softmax(v), w) if lib is ad
                                       else np.dot(_np_softmax(v), w)),
        }
        b = builds[name]
        check_against_fd(lambda v: b(v, ad), lambda z: float(b(z, np)), x)

    def test_minimum_matches_fd(self):
        # inputs kept away from the kink, where the subgradient-0 convention
        # intentionally differs from finite differences
        x = np.array([0.1, 0.6, 0.9])
        check_against_fd(lambda v: ad.vsum(ad.minimum(v, 0.5)),
                         lambda z: float(np.sum(np.minimum(z, 0.5))), x)


def _rev(v):
    return v[::-1]


def v2(v, lib):
    if lib is np:
        return np.roll(v, 1)
    return ad.concat([v[5:6], v[0:5]])


def lib_sum(lib, x):
    return ad.vsum(x) if lib is ad else np.sum(x)


def _matmul_case(v, lib, B):
    if lib is ad:
        row = ad.reshape(v, (1, 6))
        return ad.vsum(ad.matmul(row, B))
    return float(np.sum(v.reshape(1, 6) @ B))


def _np_softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


class TestCompositions:
    def test_100_random_compositions_match_fd(self):
        """Random op chains of depth <= 20, gradient vs central differences."""
        rng = np.random.default_rng(2024)
        unary = ["sin", "cos", "tanh", "logistic", "exp_s", "sqrt_s", "square_s", "neg"]
        for trial in range(100):
            depth = int(rng.integers(3, 21))
            n = int(rng.integers(2, 6))
            x = rng.uniform(-0.8, 0.8, size=n)
            picks = [unary[int(i)] for i in rng.integers(0, len(unary), size=depth)]
            mix = rng.uniform(-1.0, 1.0, size=n)

            def run(v, lib):
                cur = v
                for p in picks:
                    if p == "sin":
                        cur = lib.sin(cur)
                    elif p == "cos":
                        cur = lib.cos(cur)
                    elif p == "tanh":
                        cur = lib.tanh(cur)
                    elif p == "logistic":
                        cur = (ad.logistic(cur) if lib is ad
                               else 1 / (1 + np.exp(-cur)))
                    elif p == "exp_s":
                        cur = lib.exp(0.3 * cur)
                    elif p == "sqrt_s":
                        cur = lib.sqrt(cur * cur + 0.5)
                    elif p == "square_s":
                        cur = 0.5 * (ad.square(cur) if lib is ad else cur * cur)
                    elif p == "neg":
                        cur = -cur
                return ad.dot(cur, mix) if lib is ad else float(np.dot(cur, mix))

            g = tape_grad(lambda v: run(v, ad), x)
            fd = fd_gradient(lambda z: run(z, np), x)
            assert rel_err(g, fd) <= 1e-5, f"trial {trial}: rel err {rel_err(g, fd):.2e}"


class TestStructuralOps:
    def test_getitem_slice_and_fancy(self):
        x = np.arange(1.0, 9.0)
        idx = np.array([0, 2, 2, 5])
        check_against_fd(lambda v: ad.vsum(v[1:6] * 2.0) + ad.vsum(v[idx]),
                         lambda z: float(np.sum(z[1:6] * 2.0) + np.sum(z[idx])), x)

    def test_concat_stack_reshape_swapaxes(self):
        x = np.arange(1.0, 13.0)

        def build(v, lib):
            m = ad.reshape(v, (3, 4)) if lib is ad else v.reshape(3, 4)
            s = ad.swapaxes(m, 0, 1) if lib is ad else np.swapaxes(m, 0, 1)
            c = ad.concat([m[0], m[1]]) if lib is ad else np.concatenate([m[0], m[1]])
            st = ad.stack([c, c * 2.0]) if lib is ad else np.stack([c, c * 2.0])
            tot = (ad.vsum(st) + ad.vsum(ad.square(s)) if lib is ad
                   else np.sum(st) + np.sum(s * s))
            return tot

        check_against_fd(lambda v: build(v, ad), lambda z: float(build(z, np)), x)

    def test_linear_solve_gradient_in_rhs(self):
        rng = np.random.default_rng(3)
        A = rng.uniform(-1, 1, size=(4, 4)) + 4.0 * np.eye(4)
        w = rng.uniform(-1, 1, size=4)
        x = rng.uniform(-1, 1, size=4)
        check_against_fd(lambda v: ad.dot(ad.linear_solve(A, v), w),
                         lambda z: float(np.dot(np.linalg.solve(A, z), w)), x)

    def test_batched_linear_solve(self):
        rng = np.random.default_rng(4)
        A = rng.uniform(-1, 1, size=(3, 2, 2)) + 3.0 * np.eye(2)
        x = rng.uniform(-1, 1, size=(3, 2))

        def f_np(z):
            return float(np.sum(np.linalg.solve(A, z.reshape(3, 2, 1))[..., 0] ** 2))

        check_against_fd(
            lambda v: ad.vsum(ad.square(ad.linear_solve(A, ad.reshape(v, (3, 2))))),
            f_np, x.reshape(-1))


class TestContracts:
    def test_gradient_requires_scalar_output(self):
        t = ad.Tape()
        v = t.var(np.ones(3))
        out = ad.sin(v)
        with pytest.raises(ValueError):
            ad.gradient(out, v)

    def test_tan_at_pole_is_reported(self):
        t = ad.Tape()
        v = t.var(np.array(np.pi / 2))
        with pytest.raises(ad.EvaluationError):
            ad.tan(v)

    def test_sqrt_of_negative_is_reported(self):
        with pytest.raises(ad.EvaluationError):
            ad.sqrt(np.array([-1.0]))

    def test_norm_gradient_at_zero_radius_is_reported(self):
        t = ad.Tape()
        v = t.var(np.zeros(3))
        out = ad.norm(v)
        assert float(out.value) == 0.0
        with pytest.raises(ad.EvaluationError):
            ad.gradient(out, v)

    def test_division_by_zero_is_reported(self):
        t = ad.Tape()
        v = t.var(np.array([1.0, 0.0]))
        with pytest.raises(ad.EvaluationError):
            t.var(np.ones(2)) / v

    def test_max_kink_subgradient_is_zero(self):
        t = ad.Tape()
        v = t.var(np.array([0.0, 1.0, -1.0]))
        out = ad.vsum(ad.maximum(v, 0.0))
        g = ad.gradient(out, v)
        assert_allclose(g, [0.0, 1.0, 0.0])

    def test_backward_pass_linearity(self):
        """grad(a*f + b*g) == a*grad(f) + b*grad(g) to 1e-12."""
        rng = np.random.default_rng(11)
        x = rng.uniform(0.1, 1.0, size=5)
        a, b = 2.75, -0.4

        def f(v):
            return ad.dot(ad.sin(v), np.ones(5))

        def g(v):
            return ad.norm(v * v + 0.3)

        t = ad.Tape()
        v = t.var(x)
        combo = a * f(v) + b * g(v)
        gc = ad.gradient(combo, v)

        t1 = ad.Tape()
        v1 = t1.var(x)
        gf = ad.gradient(f(v1), v1)
        t2 = ad.Tape()
        v2 = t2.var(x)
        gg = ad.gradient(g(v2), v2)
        assert np.max(np.abs(gc - (a * gf + b * gg))) <= 1e-12

    def test_gradient_is_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.uniform(-1, 1, size=8)

        def run():
            t = ad.Tape()
            v = t.var(x)
            out = ad.dot(ad.tanh(v * 2.0 + 0.3), np.arange(8.0))
            return ad.gradient(out, v)

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)


class TestJacobian:
    def test_jacobian_matches_rowwise_gradients(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(0.1, 1.0, size=5)
        M = rng.uniform(-1, 1, size=(4, 5))

        def build(v):
            return ad.sin(ad.matvec(M, v)) * 2.0

        t = ad.Tape()
        v = t.var(x)
        out = build(v)
        J = ad.jacobian(out, v)
        for i in range(4):
            ti = ad.Tape()
            vi = ti.var(x)
            oi = build(vi)[i]
            gi = ad.gradient(oi, vi)
            assert_allclose(J[i], gi, rtol=1e-12, atol=1e-14)

    def test_jacobian_matches_fd(self):
        from helpers import fd_jacobian
        rng = np.random.default_rng(10)
        x = rng.uniform(0.2, 1.0, size=6)

        def f_np(z):
            m = z.reshape(2, 3)
            return np.concatenate([np.tanh(m).sum(axis=1), [np.linalg.norm(z)]])

        t = ad.Tape()
        v = t.var(x)
        m = ad.reshape(v, (2, 3))
        out = ad.concat([ad.vsum(ad.tanh(m), axis=1), ad.reshape(ad.norm(v), (1,))])
        J = ad.jacobian(out, v)
        assert rel_err(J, fd_jacobian(f_np, x)) <= 1e-6


class TestReplay:
    def test_replay_matches_fresh_tape(self):
        rng = np.random.default_rng(12)
        x0 = rng.uniform(-1, 1, size=4)
        x1 = rng.uniform(-1, 1, size=4)

        t = ad.Tape()
        v = t.var(x0)
        out = ad.dot(ad.tanh(v) * 1.5, np.ones(4))
        t.set_value(v, x1)
        t.replay()

        t2 = ad.Tape()
        v2 = t2.var(x1)
        out2 = ad.dot(ad.tanh(v2) * 1.5, np.ones(4))
        assert_allclose(out.value, out2.value, rtol=0, atol=0)
        assert_allclose(ad.gradient(out, v), ad.gradient(out2, v2), rtol=0, atol=0)


class TestCustomOp:
    def test_custom_op_forward_and_vjp(self):
        class Cube(ad.CustomOp):
            name = "cube"

            def forward(self, values, ctx):
                return values[0] ** 3

            def vjp(self, values, value, g, lead, ctx):
                return [3.0 * values[0] ** 2 * g]

        x = np.array([0.5, -0.7, 1.1])
        t = ad.Tape()
        v = t.var(x)
        out = ad.vsum(t.custom(Cube(), [v]))
        g = ad.gradient(out, v)
        assert_allclose(g, 3 * x**2, rtol=1e-12)
