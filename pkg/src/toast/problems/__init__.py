"""The two benchmark optimal control problems and their rollout machinery."""

from __future__ import annotations

import numpy as np

from . import rollout as _engine
from .pdg import (
    PdgParams,
    build_pdg_nlp,
    min_landing_accel,
    pdg_dynamics,
    pdg_jac_u,
    pdg_jac_x,
    sample_pdg_params,
    straight_line_guess,
)
from .rollout import ImplicitStepOp, RolloutError, implicit_step, rollout_on_tape
from .rover import (
    RoverParams,
    build_rover_nlp,
    rover_dynamics,
    rover_initial_guess,
    rover_jac_u,
    rover_jac_x,
    sample_rover_params,
)

PROBLEMS = ("rover", "pdg")


def default_params(problem: str):
    if problem == "rover":
        return RoverParams()
    if problem == "pdg":
        return PdgParams()
    raise ValueError(f"unknown problem {problem!r}")


def build_nlp(problem: str, params=None):
    if problem == "rover":
        return build_rover_nlp(params)
    if problem == "pdg":
        return build_pdg_nlp(params)
    raise ValueError(f"unknown problem {problem!r}")


def dynamics_functions(problem: str, params):
    """(f, jac_x, jac_u) triple closed over ``params``, batched over rows."""
    if problem == "rover":
        return (lambda x, u: rover_dynamics(x, u, params),
                lambda x, u: rover_jac_x(x, u, params),
                lambda x, u: rover_jac_u(x, u, params))
    if problem == "pdg":
        return (lambda x, u: pdg_dynamics(x, u, params),
                lambda x, u: pdg_jac_x(x, u, params),
                lambda x, u: pdg_jac_u(x, u, params))
    raise ValueError(f"unknown problem {problem!r}")


def rollout(problem: str, x0, controls, params):
    """Propagate controls through the backward-Euler dynamics.

    ``x0`` is (n,) or (K, n); ``controls`` is (T, m) or (K, T, m).  Returns
    states with matching leading shape.  Raises RolloutError when an
    implicit step fails, or for a descent rollout that burns below dry mass.
    """
    f, jac_x, _ = dynamics_functions(problem, params)
    x0 = np.asarray(x0, dtype=np.float64)
    controls = np.asarray(controls, dtype=np.float64)
    single = x0.ndim == 1
    if single:
        x0 = x0[None, :]
        controls = controls[None, :, :]
    states = _engine.rollout(f, jac_x, x0, controls, params.dt)
    if problem == "pdg":
        masses = states[:, :, 6]
        if np.any(masses < params.m_dry):
            step = int(np.argmax(np.any(masses < params.m_dry, axis=0)))
            raise RolloutError(step, "mass depletion below dry mass")
    return states[0] if single else states


def sample_params(problem: str, rng, params=None):
    """Draw one problem instance; ``rng`` is a Generator or an integer seed."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    base = params if params is not None else default_params(problem)
    if problem == "rover":
        return sample_rover_params(base, rng)
    if problem == "pdg":
        return sample_pdg_params(base, rng)
    raise ValueError(f"unknown problem {problem!r}")


def initial_guess(problem: str, params):
    """Cold-start primal vector used by the data-generation pipeline."""
    if problem == "rover":
        return rover_initial_guess(params)
    if problem == "pdg":
        return straight_line_guess(params).z
    raise ValueError(f"unknown problem {problem!r}")
