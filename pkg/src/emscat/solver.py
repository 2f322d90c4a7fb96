"""Matrix-free GMRES for the dense complex systems produced by the
boundary-integral discretization."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["GmresReport", "gmres"]


@dataclass
class GmresReport:
    iterations: int
    residuals: list = field(default_factory=list)
    converged: bool = False
    wall_time: float = 0.0

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "residuals": [float(r) for r in self.residuals],
            "converged": self.converged,
            "wall_time": self.wall_time,
        }


def gmres(apply_op, b, tol: float = 1e-4, max_iter: int = 1000):
    """Non-restarted GMRES with modified Gram-Schmidt and Givens rotations.

    apply_op: callable taking and returning a complex vector. Convergence is
    declared when the (recursively updated) residual satisfies
    ||b - A x|| <= tol * ||b||. Non-convergence within max_iter returns the
    best iterate with converged=False rather than raising.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    t0 = time.time()
    b = np.asarray(b, dtype=complex)
    n = b.size
    beta = np.linalg.norm(b)
    if beta == 0.0:
        return np.zeros_like(b), GmresReport(0, [0.0], True, time.time() - t0)

    max_iter = min(max_iter, n)
    basis = np.zeros((max_iter + 1, n), dtype=complex)
    basis[0] = b / beta
    h = np.zeros((max_iter + 1, max_iter), dtype=complex)
    cs = np.zeros(max_iter, dtype=complex)
    sn = np.zeros(max_iter, dtype=complex)
    g = np.zeros(max_iter + 1, dtype=complex)
    g[0] = beta
    residuals = []
    converged = False
    k = 0
    for k in range(max_iter):
        # copy: the operator may return (an alias of) its input
        w = np.array(apply_op(basis[k]), dtype=complex)
        for i in range(k + 1):
            h[i, k] = np.vdot(basis[i], w)
            w -= h[i, k] * basis[i]
        h[k + 1, k] = np.linalg.norm(w)
        if h[k + 1, k] != 0.0:
            basis[k + 1] = w / h[k + 1, k]
        # apply the accumulated rotations, then a new one
        for i in range(k):
            tmp = cs[i] * h[i, k] + sn[i] * h[i + 1, k]
            h[i + 1, k] = -np.conj(sn[i]) * h[i, k] + \
                np.conj(cs[i]) * h[i + 1, k]
            h[i, k] = tmp
        denom = np.sqrt(np.abs(h[k, k]) ** 2 + np.abs(h[k + 1, k]) ** 2)
        if denom == 0.0:
            residuals.append(residuals[-1] if residuals else 1.0)
            break
        cs[k] = np.conj(h[k, k]) / denom
        sn[k] = np.conj(h[k + 1, k]) / denom
        h[k, k] = denom
        h[k + 1, k] = 0.0
        g[k + 1] = -np.conj(sn[k]) * g[k]
        g[k] = cs[k] * g[k]
        residuals.append(abs(g[k + 1]) / beta)
        if residuals[-1] <= tol:
            converged = True
            k += 1
            break
    else:
        k = max_iter

    y = np.linalg.solve(h[:k, :k], g[:k]) if k else np.zeros(0, complex)
    x = basis[:k].T @ y if k else np.zeros_like(b)
    return x, GmresReport(k, residuals, converged, time.time() - t0)
