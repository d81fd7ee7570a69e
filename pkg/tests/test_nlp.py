"""NLP container: Lagrangian, KKT residuals, merit function."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from helpers import fd_gradient, rel_err
from toast import autodiff as ad
from toast import nlp as nlpmod
from toast.nlp import (KktResidual, LayoutBuilder, ParametricNLP, PrimalDualPoint,
                       constraint_violations, evaluate_with_derivatives,
                       kkt_residual, l1_merit, lagrangian, lagrangian_gradient)


def one_dim_problem():
    """min x^2  s.t.  x >= 1, stored as g = 1 - x <= 0."""
    lb = LayoutBuilder(n_steps=1)
    lb.add("lower", [0])
    return ParametricNLP(
        name="toy1d",
        n_z=1, n_p=0, n_c=1,
        cost=lambda z, th: ad.dot(z, z),
        constraints=lambda z, th: 1.0 - z,
        layout=lb.build(),
    )


def curved_problem():
    """Two variables, mixed rows, used for derivative checks."""
    lb = LayoutBuilder(n_steps=1)
    lb.add("rows", [0, 0, 0])

    def cost(z, th):
        return ad.dot(z, z) + ad.dot(th, z)

    def cons(z, th):
        r = ad.sin(z[0:1]) - z[1:2] * 0.5
        return ad.concat([r, -r, ad.square(z[0:1]) - 2.0])

    return ParametricNLP(name="curved", n_z=2, n_p=2, n_c=3, cost=cost,
                         constraints=cons, layout=lb.build())


class TestLagrangianAndMerit:
    def test_lagrangian_equals_cost_with_zero_duals(self):
        p = one_dim_problem()
        pt = PrimalDualPoint(z=[2.0], lam=[0.0])
        assert lagrangian(p, pt, np.zeros(0)) == pytest.approx(4.0)

    def test_lagrangian_adds_dual_weighted_rows(self):
        p = one_dim_problem()
        pt = PrimalDualPoint(z=[0.5], lam=[3.0])
        # f = 0.25, g = 0.5, lam*g = 1.5
        assert lagrangian(p, pt, np.zeros(0)) == pytest.approx(1.75)

    def test_merit_equals_cost_when_feasible(self):
        p = one_dim_problem()
        assert l1_merit(p, np.array([2.0]), np.zeros(0), mu=10.0) == pytest.approx(4.0)

    def test_merit_adds_scaled_violation(self):
        p = one_dim_problem()
        # violation = 1 - 0.7 = 0.3, mu = 10 -> penalty 3
        val = l1_merit(p, np.array([0.7]), np.zeros(0), mu=10.0)
        assert val == pytest.approx(0.49 + 3.0)

    def test_merit_monotone_in_mu_at_infeasible_points(self):
        p = one_dim_problem()
        z = np.array([0.7])
        m1 = l1_merit(p, z, np.zeros(0), mu=10.0)
        m2 = l1_merit(p, z, np.zeros(0), mu=20.0)
        assert m2 > m1

    def test_merit_requires_positive_mu(self):
        p = one_dim_problem()
        with pytest.raises(ValueError):
            l1_merit(p, np.array([2.0]), np.zeros(0), mu=0.0)

    def test_violations_vector(self):
        p = curved_problem()
        z = np.array([0.3, 2.0])
        g = np.array([np.sin(0.3) - 1.0, 1.0 - np.sin(0.3), 0.09 - 2.0])
        assert_allclose(constraint_violations(p, z, np.zeros(2)),
                        np.maximum(0.0, g), rtol=1e-12)


class TestKktResidual:
    def test_kkt_point_of_bound_problem(self):
        # min x^2 s.t. x >= 1: optimum x*=1 with lambda*=2
        p = one_dim_problem()
        pt = PrimalDualPoint(z=[1.0], lam=[2.0])
        r = kkt_residual(p, pt, np.zeros(0))
        assert r.stationarity <= 1e-12
        assert r.primal <= 1e-12
        assert r.complementarity <= 1e-12
        assert r.max <= 1e-12

    def test_off_optimum_residuals_are_reported(self):
        p = one_dim_problem()
        pt = PrimalDualPoint(z=[0.5], lam=[1.0])
        r = kkt_residual(p, pt, np.zeros(0))
        # grad L = 2x - lam = 0, primal = 0.5, comp = 0.5
        assert r.stationarity == pytest.approx(0.0, abs=1e-12)
        assert r.primal == pytest.approx(0.5)
        assert r.complementarity == pytest.approx(0.5)
        assert isinstance(r, KktResidual)


class TestDerivatives:
    def test_lagrangian_gradient_matches_fd(self):
        p = curved_problem()
        rng = np.random.default_rng(1)
        for _ in range(50):
            z = rng.uniform(-1.0, 1.0, size=2)
            lam = rng.uniform(0.0, 2.0, size=3)
            th = rng.uniform(-1.0, 1.0, size=2)
            g = lagrangian_gradient(p, z, lam, th)
            fd = fd_gradient(
                lambda zz: lagrangian(p, PrimalDualPoint(zz, lam), th), z)
            assert rel_err(g, fd) <= 1e-6

    def test_evaluate_with_derivatives_consistency(self):
        p = curved_problem()
        z = np.array([0.4, -0.2])
        th = np.array([0.1, 0.3])
        f, g, grad_f, jac = evaluate_with_derivatives(p, z, th)
        assert f == pytest.approx(nlpmod.cost_value(p, z, th))
        assert_allclose(g, nlpmod.constraint_values(p, z, th), rtol=1e-14)
        fd_f = fd_gradient(lambda zz: nlpmod.cost_value(p, zz, th), z)
        assert rel_err(grad_f, fd_f) <= 1e-6
        from helpers import fd_jacobian
        fd_J = fd_jacobian(lambda zz: nlpmod.constraint_values(p, zz, th), z)
        assert rel_err(jac, fd_J) <= 1e-6


class TestLayout:
    def test_layout_blocks_are_contiguous_and_ordered(self):
        lb = LayoutBuilder(n_steps=3)
        lb.add("dyn_upper", [0, 0, 1, 1])
        lb.add("dyn_lower", [0, 0, 1, 1])
        lb.add("bounds", [0, 1, 2])
        lay = lb.build()
        assert lay.n_c == 11
        assert lay.blocks["dyn_upper"] == (0, 4)
        assert lay.blocks["dyn_lower"] == (4, 8)
        assert lay.blocks["bounds"] == (8, 11)
        assert lay.block_names() == ["dyn_upper", "dyn_lower", "bounds"]
        # slots count per node, in declaration order
        assert lay.n_slots == 5
        assert list(lay.step_of_row) == [0, 0, 1, 1, 0, 0, 1, 1, 0, 1, 2]
        assert list(lay.slot_of_row) == [0, 1, 0, 1, 2, 3, 2, 3, 4, 4, 0]

    def test_duplicate_block_rejected(self):
        lb = LayoutBuilder(n_steps=1)
        lb.add("a", [0])
        with pytest.raises(ValueError):
            lb.add("a", [0])
