"""Assembly of the tangential Maxwell boundary operators and the
transmission-problem forward map from scalar single-layer building blocks.

Everything reduces to values and normal derivatives of the scalar
single-layer potential applied to eight scalar densities: the Cartesian
components of the two surface currents and their surface divergences. The
curl-type operator needs the full surface gradient of the potentials,
assembled from patchwise spectral differentiation (tangential part) plus
the normal derivative; the gradient-of-single-layer operator needs only the
tangential part; the plain tangential trace needs only values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .chebyshev import diff_matrix, transform_matrix
from .geometry import SurfaceDiscretization
from .ifgf import (
    BoxTree,
    ConeHierarchy,
    IfgfConfig,
    build_box_tree,
    build_cone_hierarchy,
    ifgf_apply,
)
from .quadrature import (
    SingularityMap,
    SingularMomentTable,
    SingularQuadratureConfig,
    apply_singular_block,
    classify_targets,
    compute_moments,
    dense_sums_block,
    precompute_local_corrections,
)

__all__ = [
    "MaterialPair",
    "DensityBlock",
    "OperatorConfig",
    "MullerOperator",
    "build_muller_operator",
    "surface_divergence",
    "tangential_gradients",
    "apply_S_all",
    "apply_D_all",
    "muller_forward_map",
    "muller_rhs",
]

# density channel order
J_X, J_Y, J_Z, M_X, M_Y, M_Z, DIV_J, DIV_M = range(8)


@dataclass(frozen=True)
class MaterialPair:
    """Relative constitutive constants of the exterior/interior media and
    the angular frequency; wavenumbers are derived."""

    eps_e: complex
    mu_e: complex
    eps_i: complex
    mu_i: complex
    omega: float

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError("angular frequency must be positive")

    @property
    def kappa_e(self) -> complex:
        return self.omega * np.sqrt(self.eps_e * self.mu_e)

    @property
    def kappa_i(self) -> complex:
        return self.omega * np.sqrt(self.eps_i * self.mu_i)

    @property
    def kappas(self):
        return (self.kappa_e, self.kappa_i)

    @classmethod
    def from_wavenumbers(cls, kappa_e, kappa_i, eps_e=1.0, mu_e=1.0,
                         mu_i=1.0):
        """Materials from the two wavenumbers: omega fixed by the exterior,
        eps_i by the ratio."""
        omega = float(np.real(kappa_e / np.sqrt(eps_e * mu_e)))
        eps_i = (kappa_i / omega) ** 2 / mu_i
        pair = cls(eps_e, mu_e, eps_i, mu_i, omega)
        if abs(pair.kappa_i - kappa_i) > 1e-12 * abs(kappa_i):
            raise ValueError("inconsistent wavenumber inputs")
        return pair

    def check_consistency(self, kappa_e=None, kappa_i=None):
        for given, own in ((kappa_e, self.kappa_e), (kappa_i, self.kappa_i)):
            if given is not None and abs(given - own) > 1e-12 * abs(own):
                raise ValueError(
                    "wavenumbers inconsistent with eps/mu/omega")


@dataclass
class DensityBlock:
    """The eight scalar densities sampled on the surface points:
    (j_x, j_y, j_z, m_x, m_y, m_z, div j, div m). The divergence channels
    are caches derived from the current channels."""

    values: np.ndarray          # (8, N) complex

    @property
    def j(self) -> np.ndarray:
        return self.values[J_X:J_Z + 1].T

    @property
    def m(self) -> np.ndarray:
        return self.values[M_X:M_Z + 1].T

    @classmethod
    def from_currents(cls, disc: SurfaceDiscretization, j: np.ndarray,
                      m: np.ndarray) -> "DensityBlock":
        vals = np.empty((8, disc.n_points), dtype=complex)
        vals[J_X:J_Z + 1] = np.asarray(j, dtype=complex).T
        vals[M_X:M_Z + 1] = np.asarray(m, dtype=complex).T
        vals[DIV_J] = surface_divergence(disc, j)
        vals[DIV_M] = surface_divergence(disc, m)
        return cls(vals)


@dataclass(frozen=True)
class OperatorConfig:
    """Finite-difference step for the normal derivative and the traversal
    mode of the fast far-field engine."""

    fd_step: float = 1e-6
    mode: str = "vec"

    def __post_init__(self):
        if not self.fd_step > 0:
            raise ValueError("finite-difference step must be positive")


# ---------------------------------------------------------------------------
# surface differential operators
# ---------------------------------------------------------------------------

def _metric(disc: SurfaceDiscretization):
    e = np.einsum("ij,ij->i", disc.e_u, disc.e_u)
    f = np.einsum("ij,ij->i", disc.e_u, disc.e_v)
    g = np.einsum("ij,ij->i", disc.e_v, disc.e_v)
    det = e * g - f * f
    return e, f, g, det


def _grid_derivatives(disc: SurfaceDiscretization, fields: np.ndarray):
    """Spectral u- and v-derivatives of per-point scalar fields.

    fields: (..., N); returns (d_u, d_v) of the same shape.
    """
    n_c = disc.n_c
    dmat = diff_matrix(n_c)
    lead = fields.shape[:-1]
    grids = fields.reshape(-1, disc.n_patches, n_c, n_c)
    du = np.matmul(dmat[None, None], grids)
    dv = np.matmul(grids, dmat.T[None, None])
    return (du.reshape(lead + (-1,)), dv.reshape(lead + (-1,)))


def surface_divergence(disc: SurfaceDiscretization, density: np.ndarray,
                       tol: float = 1e-8) -> np.ndarray:
    """Surface divergence of a tangential vector field sampled at the
    discretization points, computed patchwise from the parametrization:
    div = (d_u(J f^u) + d_v(J f^v)) / J with (f^u, f^v) the contravariant
    components."""
    density = np.asarray(density)
    normal_part = np.abs(np.einsum("ij,ij->i", density, disc.normals))
    scale = np.linalg.norm(density, axis=1).max() + 1e-300
    if normal_part.max() > tol * max(scale, 1.0):
        raise ValueError("density is not tangential")
    e, f, g, det = _metric(disc)
    cu = np.einsum("ij,ij->i", density, disc.e_u)
    cv = np.einsum("ij,ij->i", density, disc.e_v)
    fu = (g * cu - f * cv) / det
    fv = (e * cv - f * cu) / det
    jac = disc.jacobians
    du, _ = _grid_derivatives(disc, (jac * fu)[None, :])
    _, dv = _grid_derivatives(disc, (jac * fv)[None, :])
    return (du[0] + dv[0]) / jac


def tangential_gradients(disc: SurfaceDiscretization,
                         fields: np.ndarray) -> np.ndarray:
    """Surface (tangential) gradient of per-point scalar fields via the
    inverse first fundamental form; fields (..., N) -> (..., N, 3)."""
    e, f, g, det = _metric(disc)
    du, dv = _grid_derivatives(disc, fields)
    a = (g * du - f * dv) / det
    b = (e * dv - f * du) / det
    return (a[..., None] * disc.e_u + b[..., None] * disc.e_v)


# ---------------------------------------------------------------------------
# the Muller operator
# ---------------------------------------------------------------------------

@dataclass
class MullerOperator:
    """Matrix-free action of the transmission-problem system on the
    tangential unknowns (m, j), each stored as two components in the
    per-point orthonormal tangent frame: y = [m1, m2, j1, j2] blocks."""

    disc: SurfaceDiscretization
    materials: MaterialPair
    smap: SingularityMap
    moments: SingularMomentTable
    config: OperatorConfig = OperatorConfig()
    tree: BoxTree | None = None
    hierarchy: ConeHierarchy | None = None
    accelerated: bool = True
    corrections_enabled: bool = True
    _nbr_cache: dict = field(default_factory=dict)

    @property
    def n_unknowns(self) -> int:
        return 4 * self.disc.n_points

    # --- unknown-vector encoding ------------------------------------

    def decode(self, y: np.ndarray):
        n = self.disc.n_points
        y = np.asarray(y, dtype=complex)
        if y.size != 4 * n:
            raise ValueError("unknown vector has wrong length")
        m = (y[0:n, None] * self.disc.tangent1 +
             y[n:2 * n, None] * self.disc.tangent2)
        j = (y[2 * n:3 * n, None] * self.disc.tangent1 +
             y[3 * n:, None] * self.disc.tangent2)
        return m, j

    def encode(self, m: np.ndarray, j: np.ndarray) -> np.ndarray:
        t1, t2 = self.disc.tangent1, self.disc.tangent2
        return np.concatenate([
            np.einsum("ij,ij->i", m, t1), np.einsum("ij,ij->i", m, t2),
            np.einsum("ij,ij->i", j, t1), np.einsum("ij,ij->i", j, t2)])

    # --- scalar building blocks ---------------------------------------

    def _patch_coeffs(self, phi: np.ndarray) -> np.ndarray:
        n_c = self.disc.n_c
        mat = transform_matrix(n_c)
        grids = phi.reshape(phi.shape[0], self.disc.n_patches, n_c, n_c)
        return np.matmul(np.matmul(mat[None, None], grids), mat.T[None, None])

    def _neighbor_sources(self):
        """Per finest-level box: the point set of its neighbor boxes, sorted
        by source patch so per-target patch masking is slice-based."""
        key = "nbr"
        if key not in self._nbr_cache:
            tree = self.tree
            d = tree.depth
            lvl = tree.level(d)
            src_patch_t = self.disc.patch_of[tree.perm]
            per_box = []
            for b in range(lvl.n_boxes):
                pts = np.concatenate([
                    np.arange(lvl.pt_start[nb],
                              lvl.pt_start[nb] + lvl.pt_count[nb])
                    for nb in lvl.neighbors(b)])
                order = np.argsort(src_patch_t[pts], kind="stable")
                pts = pts[order]
                sp = src_patch_t[pts]
                uniq = np.unique(sp)
                bounds = np.searchsorted(sp, np.r_[uniq, uniq[-1] + 1])
                per_box.append((pts, uniq, bounds))
            self._nbr_cache[key] = per_box
        return self._nbr_cache[key]

    def _neighbor_sums(self, phi: np.ndarray, kappas):
        """Direct kernel sums over each target's finest-level neighbor boxes,
        excluding sources on the target's near/singular patches (those are
        covered by the moments)."""
        disc, tree = self.disc, self.tree
        d = tree.depth
        lvl = tree.level(d)
        n = disc.n_points
        nch = phi.shape[0]
        s_out = np.zeros((nch, 2, n), dtype=complex)
        d_out = np.zeros((6, 2, n), dtype=complex)
        phiw = (phi * disc.weights).T
        pts_t = disc.points[tree.perm]
        nrm_t = disc.normals[tree.perm]
        per_box = self._neighbor_sources()
        smap = self.smap
        for b in range(lvl.n_boxes):
            tgt_t = np.arange(lvl.pt_start[b],
                              lvl.pt_start[b] + lvl.pt_count[b])
            src_t, uniq, bounds = per_box[b]
            tgt_o = tree.perm[tgt_t]
            src_o = tree.perm[src_t]
            dx = pts_t[tgt_t][:, None, :] - pts_t[src_t][None, :, :]
            r = np.sqrt((dx**2).sum(-1))
            r[r == 0.0] = 1.0
            inv = 1.0 / (4.0 * np.pi * r)
            # mask sources on each target's singular patches (and itself);
            # sources are patch-sorted, so each mask is a slice
            for row, ell in enumerate(tgt_o):
                for p in smap.singular_patches(int(ell)):
                    u = np.searchsorted(uniq, p)
                    if u < uniq.size and uniq[u] == p:
                        inv[row, bounds[u]:bounds[u + 1]] = 0.0
            ndx = np.einsum("tsc,tc->ts", dx, nrm_t[tgt_t])
            w = phiw[src_o]
            for k, kappa in enumerate(kappas):
                gk = np.exp(1j * kappa * r) * inv
                s_out[:, k, tgt_o] = (gk @ w).T
                qk = gk * (ndx * (1j * kappa * r - 1.0) / r**2)
                d_out[:, k, tgt_o] = (qk @ w[:, :6]).T
        return s_out, d_out

    def potentials(self, dens: DensityBlock):
        """Single-layer values for all channels and kernels plus the normal
        derivatives for the six current channels: (S[8,2,N], D[6,2,N])."""
        disc = self.disc
        mats = self.materials
        kappas = mats.kappas
        phi = dens.values
        coeffs = self._patch_coeffs(phi)
        s_near, d_near = apply_singular_block(self.moments, coeffs,
                                              disc.n_points)
        d_near = d_near[:6]
        if not self.accelerated:
            s_far, d_far = dense_sums_block(disc, phi, kappas, self.smap,
                                            want_d=True, d_channels=6)
        else:
            weights = phi * disc.weights
            s_ifgf, s_disp = ifgf_apply(
                self.tree, self.hierarchy, weights, kappas,
                mode=self.config.mode, displaced_normals=disc.normals,
                displaced_step=self.config.fd_step)
            s_nb, d_nb = self._neighbor_sums(phi, kappas)
            d_ifgf = (s_disp[:6] - s_ifgf[:6]) / self.config.fd_step
            s_far = s_ifgf + s_nb
            d_far = d_ifgf + d_nb
            cs = self.moments.corrections
            if cs is not None and self.corrections_enabled:
                for k in range(2):
                    s_far[:, k] -= cs.apply(phi, k)
                    d_far[:, k] -= cs.apply(phi[:6], 2 + k)
        return s_near + s_far, d_near + d_far

    # --- the forward map ----------------------------------------------

    def apply_block(self, dens: DensityBlock):
        """Rows of the system applied to a density block, as Cartesian
        tangential fields (row_m, row_j)."""
        disc = self.disc
        mats = self.materials
        s_val, d_val = self.potentials(dens)
        grads = tangential_gradients(disc, s_val)   # (8, 2, N, 3)
        nrm = disc.normals

        def curl_trace(k, c0):
            """n x curl of the vector single layer of channels c0..c0+2 for
            kernel k: sum_c n_c grad_t S[phi_c] - tangential part of the
            normal-derivative vector."""
            w = d_val[c0:c0 + 3, k].T                       # (N, 3)
            w_t = w - nrm * np.einsum("ij,ij->i", nrm, w)[:, None]
            g = (nrm[:, 0, None] * grads[c0 + 0, k] +
                 nrm[:, 1, None] * grads[c0 + 1, k] +
                 nrm[:, 2, None] * grads[c0 + 2, k])
            return g - w_t

        def rt_terms(c0, cdiv):
            """(R_delta + T_delta) applied to the current in channels
            c0..c0+2 with divergence channel cdiv."""
            out = np.zeros((disc.n_points, 3), dtype=complex)
            kap = mats.kappas
            for k, sign in ((0, 1.0), (1, -1.0)):
                s_vec = s_val[c0:c0 + 3, k].T
                term = kap[k] ** 2 * np.cross(nrm, s_vec)
                term = term + np.cross(nrm, grads[cdiv, k])
                out = out + sign * term
            return -1j / mats.omega * out

        k_m = (mats.mu_e * curl_trace(0, M_X) -
               mats.mu_i * curl_trace(1, M_X))
        k_j = (mats.eps_e * curl_trace(0, J_X) -
               mats.eps_i * curl_trace(1, J_X))
        rt_j = rt_terms(J_X, DIV_J)
        rt_m = rt_terms(M_X, DIV_M)

        m_cart = dens.m
        j_cart = dens.j
        row_m = 0.5 * (mats.mu_e + mats.mu_i) * m_cart + k_m - rt_j
        row_j = rt_m + 0.5 * (mats.eps_e + mats.eps_i) * j_cart + k_j
        return row_m, row_j

    def apply(self, y: np.ndarray) -> np.ndarray:
        m, j = self.decode(y)
        dens = DensityBlock.from_currents(self.disc, j, m)
        row_m, row_j = self.apply_block(dens)
        return self.encode(row_m, row_j)

    def rhs(self, incident) -> np.ndarray:
        """Right side: (n x E_inc / omega, n x H_inc / omega) in the
        tangential frame."""
        e_inc, h_inc = incident.fields(self.disc.points)
        nrm = self.disc.normals
        bm = np.cross(nrm, e_inc) / self.materials.omega
        bj = np.cross(nrm, h_inc) / self.materials.omega
        return self.encode(bm, bj)


def build_muller_operator(disc: SurfaceDiscretization,
                          materials: MaterialPair,
                          quad_config: SingularQuadratureConfig | None = None,
                          ifgf_config: IfgfConfig | None = None,
                          op_config: OperatorConfig | None = None,
                          accelerated: bool = True,
                          smap: SingularityMap | None = None,
                          moments: SingularMomentTable | None = None
                          ) -> MullerOperator:
    """Run all precomputations (classification, moments, octree, cones,
    local corrections) and return the ready-to-apply operator."""
    quad_config = quad_config or SingularQuadratureConfig()
    op_config = op_config or OperatorConfig()
    if smap is None:
        smap = classify_targets(disc, quad_config)
    if moments is None:
        moments = compute_moments(disc, smap, quad_config, materials.kappas)
    tree = hierarchy = None
    if accelerated:
        kmax = max(abs(materials.kappa_e), abs(materials.kappa_i))
        tree = build_box_tree(disc.points, kmax)
        hierarchy = build_cone_hierarchy(tree, ifgf_config or IfgfConfig())
        precompute_local_corrections(disc, tree, smap, materials.kappas,
                                     table=moments)
    return MullerOperator(disc=disc, materials=materials, smap=smap,
                          moments=moments, config=op_config, tree=tree,
                          hierarchy=hierarchy, accelerated=accelerated)


# --- module-level spec operations -------------------------------------

def apply_S_all(op: MullerOperator, dens: DensityBlock):
    """Single-layer values of all channels for both kernels, (8, 2, N)."""
    s_val, _ = op.potentials(dens)
    return s_val


def apply_D_all(op: MullerOperator, dens: DensityBlock):
    """Normal derivatives of the single layer for the six current channels
    and both kernels, (6, 2, N)."""
    _, d_val = op.potentials(dens)
    return d_val


def muller_forward_map(op: MullerOperator, y: np.ndarray) -> np.ndarray:
    return op.apply(y)


def muller_rhs(incident, disc: SurfaceDiscretization,
               materials: MaterialPair) -> np.ndarray:
    e_inc, h_inc = incident.fields(disc.points)
    nrm = disc.normals
    bm = np.cross(nrm, e_inc) / materials.omega
    bj = np.cross(nrm, h_inc) / materials.omega
    t1, t2 = disc.tangent1, disc.tangent2
    return np.concatenate([
        np.einsum("ij,ij->i", bm, t1), np.einsum("ij,ij->i", bm, t2),
        np.einsum("ij,ij->i", bj, t1), np.einsum("ij,ij->i", bj, t2)])
