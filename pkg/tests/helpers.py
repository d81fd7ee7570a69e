"""Shared test oracles: finite differences and small problem builders."""

import numpy as np


def fd_gradient(f, x, h=1e-6):
    """Central-difference gradient of scalar f at x (flattened coordinates)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(flat.size):
        step = h * (1.0 + abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * step)
    return g.reshape(x.shape)


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian of vector f at x, shape (m, n)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        step = h * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += step
        xm[i] -= step
        J[:, i] = (np.asarray(f(xp)).reshape(-1) - np.asarray(f(xm)).reshape(-1)) / (2.0 * step)
    return J


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    denom = 1.0 + np.max(np.abs(b)) if b.size else 1.0
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / denom)
