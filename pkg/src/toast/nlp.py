"""Parametric NLP container and KKT/merit helpers.

Problems are stored in the inequality-only canonical form

    minimize    f(z; theta)
    subject to  g(z; theta) <= 0        (n_c rows)

where every equality row is decomposed into two opposing inequality rows.
Cost and constraint callbacks are written against :mod:`toast.autodiff`
functions, so the same code evaluates numerically on ndarrays and records on a
tape when derivatives are needed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ConstraintLayout:
    """Frozen row ordering of the constraint vector.

    ``blocks`` maps block name -> (start, stop) in declaration order; the
    order never changes once a problem family is built, so dual vectors are
    comparable across solver, dataset, and network.  ``step_of_row`` and
    ``slot_of_row`` assign every row to a trajectory node and a slot within
    that node's dual block, which is how sequence models emit duals.
    """

    blocks: dict
    n_c: int
    n_steps: int
    n_slots: int
    step_of_row: np.ndarray
    slot_of_row: np.ndarray

    def block_slice(self, name: str) -> slice:
        lo, hi = self.blocks[name]
        return slice(lo, hi)

    def block_names(self):
        return list(self.blocks)


class LayoutBuilder:
    """Accumulates constraint blocks with per-row node/slot bookkeeping."""

    def __init__(self, n_steps: int):
        self.n_steps = n_steps
        self.blocks = {}
        self.steps = []
        self.slots = []
        self._next_slot = [0] * n_steps
        self._n = 0

    def add(self, name: str, steps):
        """Add a block whose rows belong to ``steps`` (one entry per row)."""
        steps = np.asarray(steps, dtype=np.int64)
        if name in self.blocks:
            raise ValueError(f"duplicate block {name!r}")
        self.blocks[name] = (self._n, self._n + steps.size)
        self._n += steps.size
        for s in steps:
            self.steps.append(int(s))
            self.slots.append(self._next_slot[s])
            self._next_slot[s] += 1

    def build(self) -> ConstraintLayout:
        return ConstraintLayout(
            blocks=dict(self.blocks),
            n_c=self._n,
            n_steps=self.n_steps,
            n_slots=max(self._next_slot) if self._next_slot else 0,
            step_of_row=np.asarray(self.steps, dtype=np.int64),
            slot_of_row=np.asarray(self.slots, dtype=np.int64),
        )


@dataclass
class ParametricNLP:
    """A parametric program with differentiable cost and constraint maps."""

    name: str
    n_z: int
    n_p: int
    n_c: int
    cost: Callable
    constraints: Callable
    layout: ConstraintLayout
    # exact cost curvature when the objective is quadratic; used to seed the
    # solver's quasi-Newton matrix, never required
    cost_hessian: Callable | None = None
    # (z, lam, theta) -> exact curvature of f + lam . g; problems with local
    # coupling provide it cheaply and the solver then skips quasi-Newton
    lagrangian_hessian: Callable | None = None
    meta: dict = field(default_factory=dict)


@dataclass
class PrimalDualPoint:
    """Primal variables and one multiplier per constraint row (lambda >= 0)."""

    z: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.lam = np.asarray(self.lam, dtype=np.float64)

    def copy(self) -> "PrimalDualPoint":
        return PrimalDualPoint(self.z.copy(), self.lam.copy())


class KktResidual(NamedTuple):
    stationarity: float
    primal: float
    complementarity: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


def cost_value(nlp: ParametricNLP, z: np.ndarray, theta: np.ndarray) -> float:
    return float(nlp.cost(np.asarray(z, dtype=np.float64), np.asarray(theta, dtype=np.float64)))


def constraint_values(nlp: ParametricNLP, z: np.ndarray, theta: np.ndarray) -> np.ndarray:
    g = nlp.constraints(np.asarray(z, dtype=np.float64), np.asarray(theta, dtype=np.float64))
    return np.asarray(g, dtype=np.float64)


def lagrangian(nlp: ParametricNLP, point: PrimalDualPoint, theta: np.ndarray) -> float:
    """f(z) + lambda . g(z); equals the cost at feasible points with zero duals."""
    return cost_value(nlp, point.z, theta) + float(
        np.dot(point.lam, constraint_values(nlp, point.z, theta)))


def constraint_violations(nlp: ParametricNLP, z, theta) -> np.ndarray:
    """Per-row violation max(0, g_i)."""
    return np.maximum(0.0, constraint_values(nlp, z, theta))


def l1_merit(nlp: ParametricNLP, z, theta, mu: float) -> float:
    """f + mu * sum(max(0, g)); exact penalty for mu above the dual norm."""
    if mu <= 0.0:
        raise ValueError("merit penalty mu must be positive")
    return cost_value(nlp, z, theta) + mu * float(np.sum(constraint_violations(nlp, z, theta)))


def lagrangian_gradient(nlp: ParametricNLP, z, lam, theta) -> np.ndarray:
    """grad_z [ f + lambda . g ] via one reverse sweep; tape built per call."""
    tape = ad.Tape()
    zn = tape.var(np.asarray(z, dtype=np.float64))
    f = nlp.cost(zn, np.asarray(theta, dtype=np.float64))
    g = nlp.constraints(zn, np.asarray(theta, dtype=np.float64))
    L = f + ad.dot(np.asarray(lam, dtype=np.float64), g)
    return ad.gradient(L, zn)


def grouped_fd_hessian(grad_fn, z, groups, spans, rel_step=3e-6):
    """Central-difference Hessian of a gradient map with known sparsity.

    ``spans[j]`` lists the rows where column j of the Hessian can be
    nonzero (None for a column known to be all zero).  ``groups`` are
    sets of columns whose spans do not overlap, so one gradient pair per
    group recovers every member column exactly.  Trajectory problems
    couple second derivatives only inside a node's neighborhood, which
    keeps the group count at the block width instead of n_z.
    """
    z = np.asarray(z, dtype=np.float64)
    n = z.size
    H = np.zeros((n, n))
    for cols in groups:
        hs = rel_step * (1.0 + np.abs(z[cols]))
        dz = np.zeros(n)
        dz[cols] = hs
        diff = grad_fn(z + dz) - grad_fn(z - dz)
        for j, h in zip(cols, hs):
            rows = spans[j]
            H[rows, j] = diff[rows] / (2.0 * h)
    return 0.5 * (H + H.T)


def kkt_residual(nlp: ParametricNLP, point: PrimalDualPoint, theta) -> KktResidual:
    """Infinity norms of stationarity, primal feasibility, complementary slackness."""
    g = constraint_values(nlp, point.z, theta)
    grad = lagrangian_gradient(nlp, point.z, point.lam, theta)
    return KktResidual(
        stationarity=float(np.max(np.abs(grad))) if grad.size else 0.0,
        primal=float(np.max(np.maximum(0.0, g))) if g.size else 0.0,
        complementarity=float(np.max(np.abs(point.lam * g))) if g.size else 0.0,
    )


def evaluate_with_derivatives(nlp: ParametricNLP, z, theta):
    """One forward tape, two sweeps: returns (f, g, grad_f, jac_g).

    This is the solver's per-iteration workhorse; the constraint Jacobian
    comes from a single identity-seeded backward pass.
    """
    tape = ad.Tape()
    zn = tape.var(np.asarray(z, dtype=np.float64))
    theta = np.asarray(theta, dtype=np.float64)
    f = nlp.cost(zn, theta)
    g = nlp.constraints(zn, theta)
    grad_f = ad.gradient(f, zn)
    jac = ad.jacobian(g, zn)
    return float(f.value), g.value.copy(), grad_f, jac
