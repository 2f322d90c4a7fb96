"""Surface patches, their Chebyshev discretization, and distance queries.

A surface is a union of non-overlapping curvilinear quadrilateral patches,
each parametrized over [-1,1]^2 and represented by tensor Chebyshev
coefficient grids, so position, tangents, normal and Jacobian are evaluable
anywhere in the parameter square. The representation order of a patch is
independent of the quadrature order n_c of a SurfaceDiscretization built on
it (an analytic generator can carry more geometry resolution than the
density grid).

Global point indexing is ell = j + n_c*i + p*n_c**2 with the v index j
fastest, i the u index, p the patch.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chebyshev import (
    cheb_nodes,
    chebyshev_basis,
    derivative_coeffs,
    fejer_weights,
    transform_matrix,
)

__all__ = [
    "Patch",
    "SurfaceDiscretization",
    "make_sphere_surface",
    "load_surface",
    "write_surface",
    "surface_metrics",
    "dist_point_patch",
    "closest_point",
    "PatchGridError",
]

_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class PatchGridError(ValueError):
    """Raised for malformed PATCHGRID input."""


def _coeff_grids(samples: np.ndarray) -> np.ndarray:
    """Tensor Chebyshev coefficients of an (nu, nv, 3) point grid -> (3, nu, nv)."""
    nu, nv = samples.shape[:2]
    mu = transform_matrix(nu)
    mv = transform_matrix(nv)
    return np.einsum("im,mnc,jn->cij", mu, samples, mv)


def _der_grid(coeffs: np.ndarray, axis: int) -> np.ndarray:
    """Differentiate a (k, nu, nv) stack of coefficient grids along one axis."""
    out = np.empty_like(coeffs)
    for k in range(coeffs.shape[0]):
        out[k] = np.apply_along_axis(derivative_coeffs, axis, coeffs[k])
    return out


@dataclass
class Patch:
    """One curvilinear quadrilateral patch held as Chebyshev coefficient grids."""

    index: int
    coeffs: np.ndarray          # (3, m, m) position coefficients
    orientation: int = 1
    coeffs_du: np.ndarray = field(init=False)
    coeffs_dv: np.ndarray = field(init=False)
    nodes_xyz: np.ndarray = field(init=False)    # (m, m, 3) own-grid samples
    center: np.ndarray = field(init=False)
    bound_radius: float = field(init=False)

    def __post_init__(self):
        m = self.coeffs.shape[1]
        self.coeffs_du = _der_grid(self.coeffs, 0)
        self.coeffs_dv = _der_grid(self.coeffs, 1)
        nodes = cheb_nodes(m).nodes
        uu, vv = np.meshgrid(nodes, nodes, indexing="ij")
        self.nodes_xyz = self.eval_position(uu.ravel(), vv.ravel()).reshape(m, m, 3)
        flat = self.nodes_xyz.reshape(-1, 3)
        self.center = 0.5 * (flat.min(axis=0) + flat.max(axis=0))
        du = np.linalg.norm(np.diff(self.nodes_xyz, axis=0), axis=-1)
        dv = np.linalg.norm(np.diff(self.nodes_xyz, axis=1), axis=-1)
        spacing = max(du.max(), dv.max()) if m > 1 else 0.0
        # covering slack: a surface point is at most ~one spacing from a node
        self.bound_radius = (
            np.linalg.norm(flat - self.center, axis=1).max() + spacing
        )

    @property
    def n(self) -> int:
        return self.coeffs.shape[1]

    @classmethod
    def from_samples(cls, index: int, samples: np.ndarray, orientation: int = 1):
        return cls(index, _coeff_grids(samples), orientation)

    def eval_position(self, u, v) -> np.ndarray:
        tu = chebyshev_basis(self.n, u)
        tv = chebyshev_basis(self.n, v)
        return np.einsum("ki,cij,kj->kc", tu, self.coeffs, tv)

    def metrics_many(self, u, v):
        """Position, tangents, unit normal and Jacobian at paired points."""
        tu = chebyshev_basis(self.n, u)
        tv = chebyshev_basis(self.n, v)
        pos = np.einsum("ki,cij,kj->kc", tu, self.coeffs, tv)
        eu = np.einsum("ki,cij,kj->kc", tu, self.coeffs_du, tv)
        ev = np.einsum("ki,cij,kj->kc", tu, self.coeffs_dv, tv)
        cross = np.cross(eu, ev)
        jac = np.linalg.norm(cross, axis=-1)
        if np.any(jac < 1e-14):
            raise ValueError(f"patch {self.index}: degenerate tangent cross product")
        nrm = self.orientation * cross / jac[:, None]
        return pos, eu, ev, nrm, jac


def surface_metrics(patch: Patch, u: float, v: float):
    """(position, unit normal, Jacobian) at a single parametric point."""
    pos, _, _, nrm, jac = patch.metrics_many([u], [v])
    return pos[0], nrm[0], float(jac[0])


@dataclass
class SurfaceDiscretization:
    """Patches plus the flattened n_c x n_c global quadrature point set."""

    patches: list
    n_c: int
    points: np.ndarray = field(init=False)       # (N, 3)
    normals: np.ndarray = field(init=False)
    jacobians: np.ndarray = field(init=False)
    fejer_w2: np.ndarray = field(init=False)     # w_i * w_j
    weights: np.ndarray = field(init=False)      # w_i * w_j * J
    patch_of: np.ndarray = field(init=False)
    tangent1: np.ndarray = field(init=False)     # unit u-tangent
    tangent2: np.ndarray = field(init=False)     # n x tangent1
    e_u: np.ndarray = field(init=False)          # raw parametric tangents
    e_v: np.ndarray = field(init=False)
    max_spacing: np.ndarray = field(init=False)  # per patch, on the n_c grid

    def __post_init__(self):
        n_c = self.n_c
        nodes = cheb_nodes(n_c).nodes
        w = fejer_weights(n_c).weights
        uu, vv = np.meshgrid(nodes, nodes, indexing="ij")
        w2 = np.outer(w, w).ravel()
        pts, nrm, jac, wij = [], [], [], []
        pid, t1, t2, eus, evs, spacing = [], [], [], [], [], []
        for p, patch in enumerate(self.patches):
            if patch.index != p:
                raise ValueError("patch indices must be consecutive from 0")
            pos, eu, ev, n_hat, j = patch.metrics_many(uu.ravel(), vv.ravel())
            if np.any(j <= 0.0):
                raise PatchGridError(f"patch {p}: degenerate Jacobian at a node")
            pts.append(pos)
            nrm.append(n_hat)
            jac.append(j)
            wij.append(w2)
            pid.append(np.full(n_c * n_c, p, dtype=np.int32))
            a = eu / np.linalg.norm(eu, axis=1)[:, None]
            t1.append(a)
            t2.append(np.cross(n_hat, a))
            eus.append(eu)
            evs.append(ev)
            grid = pos.reshape(n_c, n_c, 3)
            du = np.linalg.norm(np.diff(grid, axis=0), axis=-1)
            dv = np.linalg.norm(np.diff(grid, axis=1), axis=-1)
            spacing.append(max(du.max(), dv.max()) if n_c > 1 else 0.0)
        self.points = np.concatenate(pts)
        self.normals = np.concatenate(nrm)
        self.jacobians = np.concatenate(jac)
        self.fejer_w2 = np.concatenate(wij)
        self.weights = self.fejer_w2 * self.jacobians
        self.patch_of = np.concatenate(pid)
        self.tangent1 = np.concatenate(t1)
        self.tangent2 = np.concatenate(t2)
        self.e_u = np.concatenate(eus)
        self.e_v = np.concatenate(evs)
        self.max_spacing = np.asarray(spacing)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def n_patches(self) -> int:
        return len(self.patches)

    def point_index(self, p: int, i: int, j: int) -> int:
        return j + self.n_c * i + p * self.n_c**2

    def decode_index(self, ell: int):
        n2 = self.n_c**2
        p, rem = divmod(ell, n2)
        i, j = divmod(rem, self.n_c)
        return p, i, j

    def node_uv(self, ell: int):
        nodes = cheb_nodes(self.n_c).nodes
        _, i, j = self.decode_index(ell)
        return nodes[i], nodes[j]

    def patch_points(self, p: int) -> np.ndarray:
        n2 = self.n_c**2
        return self.points[p * n2:(p + 1) * n2]

    def patch_grid(self, values: np.ndarray, p: int) -> np.ndarray:
        """View the slice of a length-N per-point array as the patch grid."""
        n2 = self.n_c**2
        return values[..., p * n2:(p + 1) * n2].reshape(
            values.shape[:-1] + (self.n_c, self.n_c))

    def area(self) -> float:
        return float(self.weights.sum())


# ---------------------------------------------------------------------------
# builtin sphere mesh
# ---------------------------------------------------------------------------

# cube-face point builders, oriented so the cross product points outward
_FACES = (
    lambda a, b: np.stack([np.ones_like(a), a, b], axis=-1),      # +x
    lambda a, b: np.stack([-np.ones_like(a), b, a], axis=-1),     # -x
    lambda a, b: np.stack([b, np.ones_like(a), a], axis=-1),      # +y
    lambda a, b: np.stack([a, -np.ones_like(a), b], axis=-1),     # -y
    lambda a, b: np.stack([a, b, np.ones_like(a)], axis=-1),      # +z
    lambda a, b: np.stack([b, a, -np.ones_like(a)], axis=-1),     # -z
)


def make_sphere_surface(n_refine: int, n_c: int, radius: float = 1.0,
                        center=(0.0, 0.0, 0.0)) -> SurfaceDiscretization:
    """Sphere mesh from the cube-to-sphere map: each cube face is split into
    n_refine**2 parametric squares and projected radially, giving
    P = 6*n_refine**2 patches (n_refine=2 -> P=24).

    The geometry representation is sampled a few orders above n_c so metric
    quantities at the quadrature nodes are accurate to near machine level.
    """
    if n_refine < 1:
        raise ValueError("n_refine must be positive")
    n_geo = max(n_c, 16) + 4
    nodes = cheb_nodes(n_geo).nodes
    uu, vv = np.meshgrid(nodes, nodes, indexing="ij")
    center = np.asarray(center, dtype=float)
    patches = []
    idx = 0
    for face in _FACES:
        for ii in range(n_refine):
            for jj in range(n_refine):
                a = -1.0 + (ii + (uu + 1.0) / 2.0) * (2.0 / n_refine)
                b = -1.0 + (jj + (vv + 1.0) / 2.0) * (2.0 / n_refine)
                cube = face(a, b)
                samples = cube / np.linalg.norm(cube, axis=-1, keepdims=True)
                samples = radius * samples + center
                patches.append(Patch.from_samples(idx, samples))
                idx += 1
    disc = SurfaceDiscretization(patches, n_c)
    rel = disc.points - center
    if np.any(np.einsum("ij,ij->i", disc.normals, rel) <= 0.0):
        raise AssertionError("sphere normals are not outward")
    return disc


# ---------------------------------------------------------------------------
# PATCHGRID text format
# ---------------------------------------------------------------------------

def write_surface(disc: SurfaceDiscretization, path) -> None:
    """Write the n_c node grids in the PATCHGRID text format (v fastest)."""
    with open(path, "w") as fh:
        orient = disc.patches[0].orientation if disc.patches else 1
        fh.write(f"PATCHGRID {disc.n_patches} {disc.n_c} {disc.n_c} "
                 f"{'+1' if orient >= 0 else '-1'}\n")
        for p in range(disc.n_patches):
            for row in disc.patch_points(p):
                fh.write(f"{row[0]:.17g} {row[1]:.17g} {row[2]:.17g}\n")


def load_surface(path, n_c: int) -> SurfaceDiscretization:
    """Load a PATCHGRID file; the file grid becomes the patch representation
    and the discretization is built on the requested n_c nodes."""
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0] != "PATCHGRID":
            raise PatchGridError("bad PATCHGRID header")
        try:
            n_patches, nu, nv = int(header[1]), int(header[2]), int(header[3])
            orient = int(header[4])
        except ValueError as exc:
            raise PatchGridError("unparsable PATCHGRID header fields") from exc
        if n_patches < 1 or nu < 2 or nv < 2 or orient not in (1, -1):
            raise PatchGridError("invalid PATCHGRID header values")
        per_patch = nu * nv
        data = np.loadtxt(fh, ndmin=2)
    if data.shape[0] != n_patches * per_patch or data.shape[1] != 3:
        raise PatchGridError(
            f"point-count mismatch: expected {n_patches * per_patch} rows of 3, "
            f"got shape {data.shape} (first incomplete patch "
            f"{min(data.shape[0] // per_patch, n_patches - 1)})"
        )
    if not np.all(np.isfinite(data)):
        bad = np.argwhere(~np.isfinite(data))[0, 0]
        raise PatchGridError(f"non-finite coordinate in patch {bad // per_patch}")
    if nu != nv:
        # rectangular files are legal; resample to the square n_c grid first
        mu, mv = transform_matrix(nu), transform_matrix(nv)
        m = max(nu, nv)
        bu = chebyshev_basis(nu, cheb_nodes(m).nodes)
        bv = chebyshev_basis(nv, cheb_nodes(m).nodes)
    patches = []
    for p in range(n_patches):
        grid = data[p * per_patch:(p + 1) * per_patch].reshape(nu, nv, 3)
        if nu != nv:
            coeffs = np.einsum("im,mnc,jn->cij", mu, grid, mv)
            grid = np.einsum("ui,cij,vj->uvc", bu, coeffs, bv)
        patches.append(Patch.from_samples(p, grid, orient))
    try:
        return SurfaceDiscretization(patches, n_c)
    except PatchGridError:
        raise
    except ValueError as exc:
        raise PatchGridError(str(exc)) from exc


# ---------------------------------------------------------------------------
# distance queries
# ---------------------------------------------------------------------------

def _node_gaps(nodes: np.ndarray) -> np.ndarray:
    """Per-node search bracket: distance to the farther adjacent node."""
    n = nodes.shape[0]
    gaps = np.empty(n)
    for i in range(n):
        lo = abs(nodes[i] - nodes[i + 1]) if i + 1 < n else abs(nodes[i] + 1.0)
        hi = abs(nodes[i] - nodes[i - 1]) if i > 0 else abs(1.0 - nodes[i])
        gaps[i] = max(lo, hi)
    return gaps


def _closest_point_batch(patch: Patch, targets: np.ndarray,
                         seed_grid: np.ndarray | None = None,
                         tol: float = 1e-12, max_sweeps: int = 8):
    """Coordinate-alternating golden-section minimizer of |x - eta(u,v)| for a
    batch of targets, seeded at each target's best node of seed_grid (an
    (m, m, 3) tensor grid on the patch; defaults to the patch's own grid).

    Returns (u, v, dist).
    """
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    n = patch.n
    if seed_grid is None:
        seed_grid = patch.nodes_xyz
    m_seed = seed_grid.shape[0]
    nodes = cheb_nodes(m_seed).nodes
    gaps = _node_gaps(nodes)

    flat = seed_grid.reshape(-1, 3)
    d2 = ((targets[:, None, :] - flat[None, :, :]) ** 2).sum(-1)
    best = np.argmin(d2, axis=1)
    bi, bj = np.divmod(best, m_seed)
    u = nodes[bi].copy()
    v = nodes[bj].copy()

    def contract_v(vq):
        tv = chebyshev_basis(n, vq)
        return np.einsum("cij,kj->kci", patch.coeffs, tv)

    def contract_u(uq):
        tu = chebyshev_basis(n, uq)
        return np.einsum("cij,ki->kcj", patch.coeffs, tu)

    def dist2_u(uq, v_ctr):
        tu = chebyshev_basis(n, uq)
        pos = np.einsum("ki,kci->kc", tu, v_ctr)
        return ((pos - targets) ** 2).sum(-1)

    def dist2_v(vq, u_ctr):
        tv = chebyshev_basis(n, vq)
        pos = np.einsum("kj,kcj->kc", tv, u_ctr)
        return ((pos - targets) ** 2).sum(-1)

    def golden(center, half_width, eval_fn, fixed):
        a = np.clip(center - half_width, -1.0, 1.0)
        b = np.clip(center + half_width, -1.0, 1.0)
        x1 = b - _GOLDEN * (b - a)
        x2 = a + _GOLDEN * (b - a)
        f1 = eval_fn(x1, fixed)
        f2 = eval_fn(x2, fixed)
        while (b - a).max() > tol:
            take_left = f1 < f2
            b = np.where(take_left, x2, b)
            a = np.where(take_left, a, x1)
            x1 = b - _GOLDEN * (b - a)
            x2 = a + _GOLDEN * (b - a)
            f1 = eval_fn(x1, fixed)
            f2 = eval_fn(x2, fixed)
        return np.clip(0.5 * (a + b), -1.0, 1.0)

    width_u = gaps[bi].copy()
    width_v = gaps[bj].copy()
    for _ in range(max_sweeps):
        u_prev, v_prev = u.copy(), v.copy()
        u = golden(u, width_u, dist2_u, contract_v(v))
        v = golden(v, width_v, dist2_v, contract_u(u))
        moved = np.maximum(np.abs(u - u_prev), np.abs(v - v_prev))
        width_u = np.maximum(2.0 * np.abs(u - u_prev), 64.0 * tol)
        width_v = np.maximum(2.0 * np.abs(v - v_prev), 64.0 * tol)
        if moved.max() <= tol:
            break
    pos = patch.eval_position(u, v)
    dist = np.linalg.norm(pos - targets, axis=1)

    # grid points must come back exactly as their own node coordinates
    exact = d2[np.arange(targets.shape[0]), best] == 0.0
    if exact.any():
        u[exact] = nodes[bi[exact]]
        v[exact] = nodes[bj[exact]]
        dist[exact] = 0.0
    return u, v, dist


def closest_point(x, patch: Patch):
    """Parametric coordinates in [-1,1]^2 of the point of the patch nearest x."""
    u, v, _ = _closest_point_batch(patch, np.asarray(x, dtype=float)[None, :])
    return float(u[0]), float(v[0])


def dist_point_patch(x, patch: Patch) -> float:
    """Distance from x to the patch (golden-section minimum; 0 on grid nodes)."""
    _, _, d = _closest_point_batch(patch, np.asarray(x, dtype=float)[None, :])
    return float(d[0])
