"""Chebyshev-grid primitives shared by the surface quadrature and the fast
summation engine.

Everything works on open (first-kind) Chebyshev grids: the n nodes
cos((k+1/2)pi/n), k = 0..n-1, listed with k ascending (so the node values
decrease). Transforms are plain O(n^2) matrix applications; per-patch and
per-cone grids are small enough that nothing faster pays off.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "ChebGrid1D",
    "FejerRule",
    "ChebInterpolant",
    "cheb_nodes",
    "fejer_weights",
    "chebyshev_basis",
    "transform_matrix",
    "diff_matrix",
    "cheb_transform_2d",
    "cheb_inverse_2d",
    "cheb_interp_1d",
    "cheb_interp_eval",
    "cheb_diff_grid",
    "cheb_eval_2d",
    "derivative_coeffs",
]


@dataclass(frozen=True)
class ChebGrid1D:
    """Open Chebyshev grid on (-1, 1), nodes strictly decreasing."""

    n: int
    nodes: np.ndarray


@dataclass(frozen=True)
class FejerRule:
    """Fejer quadrature rule on the open Chebyshev nodes; weights sum to 2."""

    n: int
    weights: np.ndarray


@dataclass(frozen=True)
class ChebInterpolant:
    """Truncated Chebyshev series sum_i coeffs[i] * T_i(x)."""

    n: int
    coeffs: np.ndarray


def cheb_nodes(n: int) -> ChebGrid1D:
    """Open Chebyshev grid with n nodes, cos((k+1/2)pi/n) for k = 0..n-1."""
    if n < 1:
        raise ValueError("node count must be positive")
    k = np.arange(n)
    return ChebGrid1D(n, np.cos((k + 0.5) * np.pi / n))


def fejer_weights(n: int) -> FejerRule:
    """Fejer rule on the open Chebyshev nodes; exact for degree < n on [-1,1]."""
    if n < 1:
        raise ValueError("node count must be positive")
    theta = (np.arange(n) + 0.5) * np.pi / n
    m = np.arange(1, n // 2 + 1)
    if m.size:
        corr = np.cos(2.0 * np.outer(theta, m)) / (4.0 * m**2 - 1.0)
        w = (2.0 / n) * (1.0 - 2.0 * corr.sum(axis=1))
    else:
        w = np.full(n, 2.0 / n)
    return FejerRule(n, w)


def chebyshev_basis(n: int, x) -> np.ndarray:
    """Values T_i(x) for i = 0..n-1, shape (len(x), n).

    Uses the three-term recurrence, which stays valid (growing like cosh)
    slightly outside [-1, 1]; callers rely on that for extrapolation.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    out = np.empty((x.size, n))
    out[:, 0] = 1.0
    if n > 1:
        out[:, 1] = x
    for i in range(2, n):
        out[:, i] = 2.0 * x * out[:, i - 1] - out[:, i - 2]
    return out


@lru_cache(maxsize=64)
def transform_matrix(n: int) -> np.ndarray:
    """Matrix taking samples on the n-point open grid to series coefficients."""
    grid = cheb_nodes(n)
    basis = chebyshev_basis(n, grid.nodes)  # (node j, order i)
    mat = (2.0 / n) * basis.T
    mat[0] *= 0.5
    return mat


@lru_cache(maxsize=64)
def _eval_matrix(n: int) -> np.ndarray:
    return chebyshev_basis(n, cheb_nodes(n).nodes)


def derivative_coeffs(coeffs: np.ndarray) -> np.ndarray:
    """Coefficients of the derivative of a Chebyshev series (same length)."""
    n = coeffs.shape[0]
    out = np.zeros_like(coeffs)
    if n < 2:
        return out
    # backward recurrence b_{k-1} = b_{k+1} + 2k a_k, then halve b_0
    for k in range(n - 1, 0, -1):
        prev = out[k + 1] if k + 1 < n else 0.0
        out[k - 1] = prev + 2.0 * k * coeffs[k]
    out[0] *= 0.5
    return out


@lru_cache(maxsize=64)
def diff_matrix(n: int) -> np.ndarray:
    """Spectral differentiation matrix: samples -> derivative samples."""
    if n < 2:
        raise ValueError("need at least two nodes to differentiate")
    fwd = transform_matrix(n)
    der = np.zeros((n, n))
    for col in range(n):
        e = np.zeros(n)
        e[col] = 1.0
        der[:, col] = derivative_coeffs(e)
    return _eval_matrix(n) @ der @ fwd


def cheb_transform_2d(samples: np.ndarray) -> np.ndarray:
    """Coefficients a[m, n] of the tensor Chebyshev expansion of a square
    sample grid (axis 0 and 1 both on the open Chebyshev nodes)."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != samples.shape[1]:
        raise ValueError("sample grid must be square")
    mat = transform_matrix(samples.shape[0])
    return mat @ samples @ mat.T


def cheb_inverse_2d(coeffs: np.ndarray) -> np.ndarray:
    """Samples on the tensor grid from a coefficient grid (inverse transform)."""
    coeffs = np.asarray(coeffs)
    p = _eval_matrix(coeffs.shape[0])
    return p @ coeffs @ p.T


def cheb_eval_2d(coeffs: np.ndarray, u, v) -> np.ndarray:
    """Evaluate a 2D coefficient grid at paired points (u[k], v[k])."""
    coeffs = np.asarray(coeffs)
    tu = chebyshev_basis(coeffs.shape[0], u)
    tv = chebyshev_basis(coeffs.shape[1], v)
    return np.einsum("ki,ij,kj->k", tu, coeffs, tv)


def cheb_interp_1d(samples: np.ndarray) -> ChebInterpolant:
    """Interpolant through samples given on the open Chebyshev grid."""
    samples = np.asarray(samples)
    n = samples.shape[0]
    return ChebInterpolant(n, transform_matrix(n) @ samples)


def cheb_interp_eval(interp: ChebInterpolant, x):
    """Evaluate the series at x via Clenshaw; |x| slightly above 1 is legal
    (treated as extrapolation)."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    c = interp.coeffs
    b1 = np.zeros(x.shape, dtype=c.dtype)
    b2 = np.zeros(x.shape, dtype=c.dtype)
    for k in range(interp.n - 1, 0, -1):
        b1, b2 = c[k] + 2.0 * x * b1 - b2, b1
    out = c[0] + x * b1 - b2
    return out[0] if scalar else out


def cheb_diff_grid(samples: np.ndarray, axis: str = "u") -> np.ndarray:
    """Spectral derivative of a square sample grid along one parametric axis
    ('u' = axis 0, 'v' = axis 1)."""
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != samples.shape[1]:
        raise ValueError("sample grid must be square")
    if samples.shape[0] < 2:
        raise ValueError("need at least two nodes to differentiate")
    d = diff_matrix(samples.shape[0])
    if axis == "u":
        return d @ samples
    if axis == "v":
        return samples @ d.T
    raise ValueError("axis must be 'u' or 'v'")
