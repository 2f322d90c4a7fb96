"""Fast O(N log N) summation of Helmholtz kernels by recursive interpolation
of the slowly varying analytic factor over a box octree.

The kernel is split as G(x,y) = G(x, c) * g(x, y; c) about each source-box
center c. The analytic factor g is smooth in the inverse-distance variable
s = h/r (h the box circumradius) and the spherical angles, so per box it is
interpolated on small Chebyshev grids over "cone segments" tiling
(s, theta, phi) space. Contributions climb the octree: each box's segment
values are evaluated directly at the finest level, interpolated onto its
parent's segment grids with a re-centering factor, and emitted to the
surface points of same-level non-neighbor boxes whose parents are neighbors
("cousins"). Neighbor-box interactions at the finest level are left to the
caller.

Eight density channels and the two media wavenumbers can be carried through
one traversal (vectorized mode) or one channel-kernel pair at a time
(sequential mode, 16x less interpolation storage).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .chebyshev import cheb_nodes, chebyshev_basis, transform_matrix

__all__ = [
    "IfgfConfig",
    "BoxTree",
    "ConeHierarchy",
    "SegmentSpectra",
    "build_box_tree",
    "build_cone_hierarchy",
    "cone_coords",
    "analytic_factor",
    "centered_factor",
    "level_D_spectra",
    "propagate_and_emit",
    "ifgf_apply",
    "tree_stats",
]

ETA = np.sqrt(3.0) / 3.0


@dataclass(frozen=True)
class IfgfConfig:
    """Interpolation orders, cone seeds, and the traversal mode."""

    p_s: int = 3
    p_a: int = 5
    n_s_seed: int = 1
    n_a_seed: int = 2
    mode: str = "vec"

    def __post_init__(self):
        if self.p_s < 2 or self.p_a < 2:
            raise ValueError("interpolation orders must be >= 2")
        if self.mode not in ("vec", "seq"):
            raise ValueError("mode must be 'vec' or 'seq'")


# ---------------------------------------------------------------------------
# Morton codes
# ---------------------------------------------------------------------------

def _part1by2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact1by2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x | (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def morton_encode(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.uint64)
    return (_part1by2(c[..., 0]) << np.uint64(2)) | \
           (_part1by2(c[..., 1]) << np.uint64(1)) | _part1by2(c[..., 2])


def morton_decode(codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.uint64)
    return np.stack([
        _compact1by2(codes >> np.uint64(2)),
        _compact1by2(codes >> np.uint64(1)),
        _compact1by2(codes),
    ], axis=-1).astype(np.int64)


# ---------------------------------------------------------------------------
# box tree
# ---------------------------------------------------------------------------

@dataclass
class LevelBoxes:
    """Relevant (surface-intersecting) boxes of one octree level."""

    level: int
    side: float
    codes: np.ndarray          # sorted Morton codes
    coords: np.ndarray         # (nb, 3) integer coordinates
    centers: np.ndarray        # (nb, 3)
    pt_start: np.ndarray
    pt_count: np.ndarray
    parent: np.ndarray         # index into the previous level (or -1)
    child_start: np.ndarray    # range into the next level (or 0,0)
    child_end: np.ndarray
    nbr_idx: np.ndarray        # CSR neighbor lists (indices into this level)
    nbr_off: np.ndarray
    cousin_idx: np.ndarray     # CSR cousin lists
    cousin_off: np.ndarray

    @property
    def n_boxes(self) -> int:
        return self.codes.size

    def neighbors(self, b: int) -> np.ndarray:
        return self.nbr_idx[self.nbr_off[b]:self.nbr_off[b + 1]]

    def cousins(self, b: int) -> np.ndarray:
        return self.cousin_idx[self.cousin_off[b]:self.cousin_off[b + 1]]


@dataclass
class BoxTree:
    """Linear octree over the surface points, finest side <= lambda/4."""

    origin: np.ndarray
    root_side: float
    depth: int
    kappa_max: float
    perm: np.ndarray           # original order -> tree order
    iperm: np.ndarray
    points: np.ndarray         # tree order
    point_codes: np.ndarray    # finest-level Morton codes, tree order
    levels: list = field(default_factory=list)   # levels[d-1] -> LevelBoxes

    def level(self, d: int) -> LevelBoxes:
        return self.levels[d - 1]

    def side(self, d: int) -> float:
        return self.root_side / 2 ** (d - 1)

    def point_level_codes(self, d: int) -> np.ndarray:
        return self.point_codes >> np.uint64(3 * (self.depth - d))

    def point_level_coords(self, d: int) -> np.ndarray:
        """Integer box coordinates of every point at level d, original order."""
        return morton_decode(self.point_level_codes(d))[self.iperm]

    def point_boxes(self, d: int) -> np.ndarray:
        """Index of each point's level-d box (tree point order)."""
        lvl = self.level(d)
        return np.searchsorted(lvl.codes, self.point_level_codes(d))

    def box_points(self, d: int, b: int) -> np.ndarray:
        lvl = self.level(d)
        return np.arange(lvl.pt_start[b], lvl.pt_start[b] + lvl.pt_count[b])


def build_box_tree(points: np.ndarray, kappa_max: float,
                   padding: float = 0.01) -> BoxTree:
    """Octree with root cube covering all points (relative padding so every
    point is interior to the half-open boxes) and depth chosen minimal with
    finest side <= quarter wavelength of the largest wavenumber."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise ValueError("empty point set")
    kappa_max = float(abs(kappa_max))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    extent = max((hi - lo).max(), 1e-300)
    side = extent * (1.0 + padding)
    mid = 0.5 * (lo + hi)
    origin = mid - side / 2.0

    target = 0.25 * (2 * np.pi / kappa_max) if kappa_max > 0 else np.inf
    depth = 1
    while side / 2 ** (depth - 1) > target:
        depth += 1

    h_fine = side / 2 ** (depth - 1)
    cells = np.clip(((pts - origin) / h_fine).astype(np.int64), 0,
                    2 ** (depth - 1) - 1)
    codes = morton_encode(cells)
    perm = np.argsort(codes, kind="stable")
    iperm = np.empty_like(perm)
    iperm[perm] = np.arange(perm.size)
    tree = BoxTree(origin=origin, root_side=side, depth=depth,
                   kappa_max=kappa_max, perm=perm, iperm=iperm,
                   points=pts[perm], point_codes=codes[perm])

    for d in range(1, depth + 1):
        pcodes = tree.point_level_codes(d)
        box_codes, starts, counts = np.unique(
            pcodes, return_index=True, return_counts=True)
        coords = morton_decode(box_codes)
        h = tree.side(d)
        centers = origin + (coords + 0.5) * h
        nb = box_codes.size

        # neighbors: existing relevant boxes within one cell in every axis
        offs = np.array(np.meshgrid(*[[-1, 0, 1]] * 3, indexing="ij")
                        ).reshape(3, -1).T
        cand = coords[:, None, :] + offs[None, :, :]
        valid = np.all((cand >= 0) & (cand < 2 ** (d - 1)), axis=-1)
        cand_codes = morton_encode(np.clip(cand, 0, None))
        pos = np.searchsorted(box_codes, cand_codes)
        pos_c = np.minimum(pos, nb - 1)
        found = valid & (box_codes[pos_c] == cand_codes)
        nbr_off = np.zeros(nb + 1, dtype=np.int64)
        nbr_off[1:] = np.cumsum(found.sum(axis=1))
        nbr_idx = pos_c[found]

        if d == 1:
            parent = np.full(nb, -1, dtype=np.int64)
        else:
            parent = np.searchsorted(tree.level(d - 1).codes,
                                     box_codes >> np.uint64(3))
            prev = tree.level(d - 1)
            prev.child_start = np.searchsorted(box_codes >> np.uint64(3),
                                               np.arange(prev.n_boxes),
                                               side="left")
            # child codes shifted right by 3 equal the parent code
            prev.child_start = np.searchsorted(
                box_codes >> np.uint64(3), prev.codes, side="left")
            prev.child_end = np.searchsorted(
                box_codes >> np.uint64(3), prev.codes, side="right")

        lvl = LevelBoxes(
            level=d, side=h, codes=box_codes, coords=coords, centers=centers,
            pt_start=starts, pt_count=counts, parent=parent,
            child_start=np.zeros(nb, dtype=np.int64),
            child_end=np.zeros(nb, dtype=np.int64),
            nbr_idx=nbr_idx, nbr_off=nbr_off,
            cousin_idx=np.empty(0, dtype=np.int64),
            cousin_off=np.zeros(nb + 1, dtype=np.int64))
        tree.levels.append(lvl)

    # cousins: children of the parent's neighbors that are not neighbors
    for d in range(2, depth + 1):
        lvl = tree.level(d)
        up = tree.level(d - 1)
        cousin_idx = []
        cousin_off = np.zeros(lvl.n_boxes + 1, dtype=np.int64)
        for pb in range(up.n_boxes):
            pool = np.concatenate([
                np.arange(up.child_start[nb_], up.child_end[nb_])
                for nb_ in up.neighbors(pb)
            ]) if up.nbr_off[pb + 1] > up.nbr_off[pb] else np.empty(0, int)
            pool.sort()
            for b in range(up.child_start[pb], up.child_end[pb]):
                nbrs = lvl.neighbors(b)
                mask = np.ones(pool.size, dtype=bool)
                mask[np.searchsorted(pool, nbrs)] = False
                cz = pool[mask]
                cousin_idx.append(cz)
                cousin_off[b + 1] = cz.size
        np.cumsum(cousin_off, out=cousin_off)
        lvl.cousin_idx = (np.concatenate(cousin_idx)
                          if cousin_idx else np.empty(0, dtype=np.int64))
        lvl.cousin_off = cousin_off
    return tree


# ---------------------------------------------------------------------------
# kernel factors and cone coordinates
# ---------------------------------------------------------------------------

def centered_factor(x, x_center, kappa):
    """G(x, c) = exp(i*kappa*|x-c|) / (4*pi*|x-c|)."""
    r = np.linalg.norm(np.asarray(x, float) - np.asarray(x_center, float),
                       axis=-1)
    if np.any(r == 0.0):
        raise ValueError("point coincides with the box center")
    return np.exp(1j * kappa * r) / (4.0 * np.pi * r)


def analytic_factor(x, y, x_center, kappa):
    """Ratio G(x,y)/G(x,c): slowly oscillatory for y inside the box at c."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    c = np.asarray(x_center, float)
    rxy = np.linalg.norm(x - y, axis=-1)
    rxc = np.linalg.norm(x - c, axis=-1)
    if np.any(rxy == 0.0) or np.any(rxc == 0.0):
        raise ValueError("coincident points in analytic factor")
    return rxc / rxy * np.exp(1j * kappa * (rxy - rxc))


def cone_coords(x, x_center, side):
    """(s, theta, phi) of points about a box center: s = h/r with
    h = sqrt(3)/2 * side the box circumradius, angles the usual spherical
    coordinates. s <= eta = sqrt(3)/3 for points at least one box away."""
    dx = np.atleast_2d(np.asarray(x, float) - np.asarray(x_center, float))
    r = np.linalg.norm(dx, axis=-1)
    if np.any(r == 0.0):
        raise ValueError("point coincides with the box center")
    h = np.sqrt(3.0) / 2.0 * side
    s = h / r
    theta = np.arccos(np.clip(dx[:, 2] / r, -1.0, 1.0))
    phi = np.mod(np.arctan2(dx[:, 1], dx[:, 0]), 2.0 * np.pi)
    return s, theta, phi, r


# ---------------------------------------------------------------------------
# cone hierarchy
# ---------------------------------------------------------------------------

@dataclass
class ConeLevel:
    """Relevant cone segments and interpolation grids of one level."""

    level: int
    n_s: int
    n_a: int
    delta_s: float
    delta_a: float
    h: float                     # box circumradius at this level
    s_nodes: np.ndarray          # (n_s, p_s) mapped Chebyshev nodes
    ang_nodes_t: np.ndarray      # (n_a, p_a) theta nodes
    ang_nodes_p: np.ndarray      # (2*n_a, p_a) phi nodes
    seg_ids: np.ndarray          # flat ids, grouped per box, sorted in box
    seg_off: np.ndarray          # (nb+1,)
    cpt_idx: np.ndarray          # cousin point indices (tree order), per box
    cpt_off: np.ndarray

    @property
    def n_segments(self) -> int:
        return self.seg_ids.size

    def segs_of(self, b: int) -> np.ndarray:
        return self.seg_ids[self.seg_off[b]:self.seg_off[b + 1]]

    def seg_index(self, s, theta, phi) -> np.ndarray:
        """Flat segment id of (s, theta, phi) triples (upper edges clamped)."""
        i_s = np.minimum((s / self.delta_s).astype(np.int64), self.n_s - 1)
        i_t = np.minimum((theta / self.delta_a).astype(np.int64), self.n_a - 1)
        i_p = np.minimum((phi / self.delta_a).astype(np.int64), 2 * self.n_a - 1)
        return (i_s * self.n_a + i_t) * (2 * self.n_a) + i_p

    def seg_unpack(self, flat: np.ndarray):
        i_p = flat % (2 * self.n_a)
        rest = flat // (2 * self.n_a)
        return rest // self.n_a, rest % self.n_a, i_p

    def local_coords(self, flat, s, theta, phi):
        """Map coordinates into each segment's [-1,1]^3 reference cube."""
        i_s, i_t, i_p = self.seg_unpack(flat)
        xs = 2.0 * (s / self.delta_s - i_s) - 1.0
        xt = 2.0 * (theta / self.delta_a - i_t) - 1.0
        xp = 2.0 * (phi / self.delta_a - i_p) - 1.0
        return xs, xt, xp

    def segment_nodes_xyz(self, flat: np.ndarray, center: np.ndarray):
        """Cartesian interpolation nodes of segments, (nseg, p_s*p_a*p_a, 3),
        plus the node radii (nseg, p_s*p_a*p_a)."""
        i_s, i_t, i_p = self.seg_unpack(flat)
        r = self.h / self.s_nodes[i_s]                      # (nseg, p_s)
        th = self.ang_nodes_t[i_t]                          # (nseg, p_a)
        ph = self.ang_nodes_p[i_p]                          # (nseg, p_a)
        st, ct = np.sin(th), np.cos(th)
        cp, sp = np.cos(ph), np.sin(ph)
        dirs = np.stack([
            st[:, :, None] * cp[:, None, :],
            st[:, :, None] * sp[:, None, :],
            np.broadcast_to(ct[:, :, None], (flat.size, th.shape[1],
                                             ph.shape[1])),
        ], axis=-1)                                         # (nseg,pa,pa,3)
        xyz = center + r[:, :, None, None, None] * dirs[:, None]
        rr = np.broadcast_to(r[:, :, None, None],
                             xyz.shape[:-1]).reshape(flat.size, -1)
        return xyz.reshape(flat.size, -1, 3), rr


@dataclass
class ConeHierarchy:
    """Per-level cone structure; levels below 3 carry no segments."""

    config: IfgfConfig
    kappa_max: float
    cone_levels: dict            # d -> ConeLevel for d = 3..depth
    _accum_cache: dict = field(default_factory=dict)

    def level(self, d: int) -> ConeLevel:
        return self.cone_levels[d]

    def spectra_bytes(self, n_channels: int) -> int:
        """Peak interpolation-storage estimate for one traversal."""
        sizes = sorted((cl.n_segments for cl in self.cone_levels.values()),
                       reverse=True)
        live = sum(sizes[:2])
        node_count = self.config.p_s * self.config.p_a**2
        return live * node_count * n_channels * 16


def _interval_cheb(p: int, count: int, width: float) -> np.ndarray:
    base = cheb_nodes(p).nodes
    lo = np.arange(count) * width
    return lo[:, None] + (base[None, :] + 1.0) * 0.5 * width


def build_cone_hierarchy(tree: BoxTree,
                         config: IfgfConfig = IfgfConfig()) -> ConeHierarchy:
    """Determine per-level cone counts (doubling while kappa*H_d > 1/2 going
    coarser) and the relevant segments of every box: those containing a
    cousin surface point or an interpolation node of a relevant parent
    segment."""
    depth = tree.depth
    counts = {}
    n_s, n_a = config.n_s_seed, config.n_a_seed
    for d in range(depth, 2, -1):
        if tree.kappa_max * tree.side(d) > 0.5:
            n_s, n_a = 2 * n_s, 2 * n_a
        counts[d] = (n_s, n_a)

    hier = ConeHierarchy(config=config, kappa_max=tree.kappa_max,
                         cone_levels={})
    for d in range(3, depth + 1):
        n_s, n_a = counts[d]
        lvl = tree.level(d)
        h = np.sqrt(3.0) / 2.0 * lvl.side
        cl = ConeLevel(
            level=d, n_s=n_s, n_a=n_a,
            delta_s=ETA / n_s, delta_a=np.pi / n_a, h=h,
            s_nodes=_interval_cheb(config.p_s, n_s, ETA / n_s),
            ang_nodes_t=_interval_cheb(config.p_a, n_a, np.pi / n_a),
            ang_nodes_p=_interval_cheb(config.p_a, 2 * n_a, np.pi / n_a),
            seg_ids=np.empty(0, dtype=np.int64),
            seg_off=np.zeros(lvl.n_boxes + 1, dtype=np.int64),
            cpt_idx=np.empty(0, dtype=np.int64),
            cpt_off=np.zeros(lvl.n_boxes + 1, dtype=np.int64))

        seg_lists = []
        cpt_lists = []
        parent_cl = hier.cone_levels.get(d - 1)
        up = tree.level(d - 1) if d > 1 else None
        for b in range(lvl.n_boxes):
            cz = lvl.cousins(b)
            if cz.size:
                cpts = np.concatenate([tree.box_points(d, c) for c in cz])
            else:
                cpts = np.empty(0, dtype=np.int64)
            cpt_lists.append(cpts)
            segs = set()
            if cpts.size:
                s, th, ph, _ = cone_coords(tree.points[cpts],
                                           lvl.centers[b], lvl.side)
                segs.update(cl.seg_index(s, th, ph).tolist())
            if parent_cl is not None:
                pb = lvl.parent[b]
                pseg = parent_cl.segs_of(pb)
                if pseg.size:
                    xyz, _ = parent_cl.segment_nodes_xyz(pseg,
                                                         up.centers[pb])
                    s, th, ph, _ = cone_coords(xyz.reshape(-1, 3),
                                               lvl.centers[b], lvl.side)
                    segs.update(cl.seg_index(s, th, ph).tolist())
            seg_lists.append(np.array(sorted(segs), dtype=np.int64))

        cl.seg_off[1:] = np.cumsum([len(s) for s in seg_lists])
        cl.seg_ids = (np.concatenate(seg_lists) if seg_lists
                      else np.empty(0, dtype=np.int64))
        cl.cpt_off[1:] = np.cumsum([len(c) for c in cpt_lists])
        cl.cpt_idx = (np.concatenate(cpt_lists) if cpt_lists
                      else np.empty(0, dtype=np.int64))
        hier.cone_levels[d] = cl
    return hier


# ---------------------------------------------------------------------------
# spectra and the traversal
# ---------------------------------------------------------------------------

@dataclass
class SegmentSpectra:
    """Analytic-factor values at every relevant segment node of one level,
    shape (n_segments, p_s*p_a*p_a, n_channels, n_kernels)."""

    level: int
    values: np.ndarray


def _axis_transforms(config: IfgfConfig):
    return transform_matrix(config.p_s), transform_matrix(config.p_a)


def _to_coeffs(values: np.ndarray, config: IfgfConfig) -> np.ndarray:
    """Node values (nseg, ps*pa*pa, C...) -> Chebyshev coefficients.

    Three batched GEMMs, one per tensor axis (complex data split so the
    real transform matrices run through dgemm).
    """
    ps, pa = config.p_s, config.p_a
    ms, ma = _axis_transforms(config)
    n = values.shape[0]
    tail = int(np.prod(values.shape[2:]))

    def axis_apply(mat, arr, left, m, right):
        # complex data viewed as interleaved real pairs: one dgemm pass
        a = np.ascontiguousarray(arr.reshape(left, m, right))
        ar = a.view(np.float64).reshape(left, m, 2 * right)
        return np.matmul(mat[None], ar).view(complex)

    v = axis_apply(ms, values, n, ps, pa * pa * tail)
    v = axis_apply(ma, v, n * ps, pa, pa * tail)
    v = axis_apply(ma, v, n * ps * pa, pa, tail)
    return v.reshape(values.shape)


def _basis3(config: IfgfConfig, xs, xt, xp) -> np.ndarray:
    """Tensor Chebyshev basis rows for scattered points, (npts, ps*pa*pa)."""
    bs = chebyshev_basis(config.p_s, xs)
    bt = chebyshev_basis(config.p_a, xt)
    bp = chebyshev_basis(config.p_a, xp)
    out = (bs[:, :, None, None] * bt[:, None, :, None] *
           bp[:, None, None, :])
    return out.reshape(xs.shape[0], -1)


def _direct_spectra_box(tree, cl, lvl, b, weights_t, kappas):
    """Level-D analytic-factor sums at one box's segment nodes.

    weights_t: (nch, N) in tree order. Returns (nseg_b, nodes, nch, nk).
    """
    segs = cl.segs_of(b)
    src = tree.box_points(cl.level, b)
    xyz, r_t = cl.segment_nodes_xyz(segs, lvl.centers[b])
    nseg, nn = r_t.shape
    flat_xyz = xyz.reshape(-1, 3)
    d_xy = np.linalg.norm(flat_xyz[:, None, :] - tree.points[src][None, :, :],
                          axis=-1)
    rt = r_t.reshape(-1, 1)
    w = weights_t[:, src]
    out = np.empty((flat_xyz.shape[0], weights_t.shape[0], len(kappas)),
                   dtype=complex)
    for k, kappa in enumerate(kappas):
        g = rt / d_xy * np.exp(1j * kappa * (d_xy - rt))
        out[:, :, k] = g @ w.T
    return out.reshape(nseg, nn, weights_t.shape[0], len(kappas))


def level_D_spectra(tree: BoxTree, hier: ConeHierarchy, weights: np.ndarray,
                    kappas) -> SegmentSpectra:
    """Direct evaluation of the analytic factor at every relevant finest-level
    segment node (weights given in the caller's original point order)."""
    d = tree.depth
    if d < 3:
        return SegmentSpectra(d, np.empty((0, 0, 0, 0), dtype=complex))
    cl = hier.level(d)
    lvl = tree.level(d)
    weights_t = np.atleast_2d(weights)[:, tree.perm]
    nn = hier.config.p_s * hier.config.p_a**2
    vals = np.zeros((cl.n_segments, nn, weights_t.shape[0], len(kappas)),
                    dtype=complex)
    for b in range(lvl.n_boxes):
        if cl.seg_off[b + 1] > cl.seg_off[b]:
            vals[cl.seg_off[b]:cl.seg_off[b + 1]] = _direct_spectra_box(
                tree, cl, lvl, b, weights_t, kappas)
    return SegmentSpectra(d, vals)


def _grouped_eval(basis_list, seg_rows, coeffs_flat):
    """out[t] = basis[t] . coeffs_flat[seg_rows[t]] for each basis set.

    Rows sharing a segment are padded into equal-length runs and evaluated
    with batched real GEMMs against the (complex) coefficient stacks; rows
    beyond a run's true length are computed on garbage and discarded.
    """
    t_total = seg_rows.size
    n_c = coeffs_flat.shape[-1]
    order = np.argsort(seg_rows, kind="stable")
    so = seg_rows[order]
    starts = np.nonzero(np.r_[True, so[1:] != so[:-1]])[0]
    lens = np.diff(np.r_[starts, t_total])
    rseg = so[starts]
    outs = [np.empty((t_total, n_c), dtype=complex) for _ in basis_list]
    sorted_basis = [b[order] for b in basis_list]
    nn = basis_list[0].shape[1]
    cview = np.ascontiguousarray(coeffs_flat).view(np.float64).reshape(
        coeffs_flat.shape[0], nn, 2 * n_c)

    cap = 4
    lo = 0
    while lo < lens.max() + 1:
        sel = np.nonzero((lens > lo) & (lens <= cap))[0]
        lo = cap
        cap *= 4
        if sel.size == 0:
            continue
        width = min(lo, int(lens[sel].max()))
        pos = starts[sel][:, None] + np.arange(width)[None, :]
        mask = np.arange(width)[None, :] < lens[sel][:, None]
        pos_c = np.minimum(pos, t_total - 1)
        cg = cview[rseg[sel]]
        for basis, out in zip(sorted_basis, outs):
            prod = np.matmul(basis[pos_c], cg).view(complex)
            out[order[pos[mask]]] = prod[mask]
    return outs


def _seg_row_lookup(cl, box_of_item, flat):
    """Global segment rows for (box, flat-segment-id) pairs.

    Box-major keys are globally sorted because segment ids are sorted within
    each box, so one searchsorted resolves every pair.
    """
    stride = np.int64(cl.n_s * cl.n_a * 2 * cl.n_a + 1)
    box_keys = np.repeat(np.arange(cl.seg_off.size - 1, dtype=np.int64),
                         np.diff(cl.seg_off)) * stride + cl.seg_ids
    keys = box_of_item.astype(np.int64) * stride + flat
    rows = np.searchsorted(box_keys, keys)
    return rows


def _emit_level(tree, hier, cl, lvl, b_lo, b_hi, coeffs_flat, row0, kappas,
                out, out_disp, disp_pts_t):
    """Interpolated emission at the cousin points of boxes [b_lo, b_hi)."""
    t0, t1 = cl.cpt_off[b_lo], cl.cpt_off[b_hi]
    if t1 == t0:
        return
    tgts = cl.cpt_idx[t0:t1]
    box_of = np.repeat(np.arange(b_lo, b_hi),
                       np.diff(cl.cpt_off[b_lo:b_hi + 1]))
    centers = lvl.centers[box_of]
    s, th, ph, r = cone_coords(tree.points[tgts] - centers, np.zeros(3),
                               lvl.side)
    flat = cl.seg_index(s, th, ph)
    rows = _seg_row_lookup(cl, box_of, flat) - row0
    xs, xt, xp = cl.local_coords(flat, s, th, ph)
    basis = [_basis3(hier.config, xs, xt, xp)]
    rd = None
    if out_disp is not None:
        dxp = disp_pts_t[tgts] - centers
        sd, td, pd, rd = cone_coords(dxp, np.zeros(3), lvl.side)
        xs2, xt2, xp2 = cl.local_coords(flat, sd, td, pd)
        # same segment (and polynomial) as the undisplaced point; slight
        # extrapolation is fine
        basis.append(_basis3(hier.config, xs2, xt2, xp2))
    vals = _grouped_eval(basis, rows, coeffs_flat)
    nk = len(kappas)
    val0 = vals[0].reshape(tgts.size, -1, nk)
    val1 = (vals[1].reshape(tgts.size, -1, nk) if out_disp is not None
            else None)
    for k, kappa in enumerate(kappas):
        val0[:, :, k] *= (np.exp(1j * kappa * r) / (4.0 * np.pi * r))[:, None]
        if val1 is not None:
            val1[:, :, k] *= (np.exp(1j * kappa * rd) /
                              (4.0 * np.pi * rd))[:, None]
    # per-box scatter: a box's cousin points are distinct, so fancy-index
    # addition is safe within each slice
    for b in range(b_lo, b_hi):
        a0, a1 = cl.cpt_off[b] - t0, cl.cpt_off[b + 1] - t0
        if a1 == a0:
            continue
        sl = tgts[a0:a1]
        out[:, :, sl] += val0[a0:a1].transpose(1, 2, 0)
        if out_disp is not None:
            out_disp[:, :, sl] += val1[a0:a1].transpose(1, 2, 0)


class _AccumType:
    """Geometry shared by every (parent segment, child) pair with the same
    segment id and child octant: node coordinates relative to the child
    center, the child segments they fall in, and both radii for the
    re-centering factor. Nodes are sorted by child segment."""

    __slots__ = ("sigma", "bounds", "scatter_rows", "xs", "xt", "xp",
                 "r_parent", "r_child", "inst_child", "inst_prow",
                 "inst_crow")

    def __init__(self, parent_cl, cl, gamma, octant, child_side):
        offset = 0.5 * child_side * (np.array([
            (octant >> 2) & 1, (octant >> 1) & 1, octant & 1]) * 2.0 - 1.0)
        xyz, rp = parent_cl.segment_nodes_xyz(
            np.array([gamma], dtype=np.int64), -offset)
        s, th, ph, rc = cone_coords(xyz[0], np.zeros(3), child_side)
        flat = cl.seg_index(s, th, ph)
        order = np.argsort(flat, kind="stable")
        flat = flat[order]
        starts = np.nonzero(np.r_[True, flat[1:] != flat[:-1]])[0]
        self.sigma = flat[starts]
        self.bounds = np.r_[starts, flat.size]
        self.scatter_rows = order.copy()      # original node slot per row
        xs, xt, xp = cl.local_coords(flat, s[order], th[order], ph[order])
        self.xs, self.xt, self.xp = xs, xt, xp
        self.r_parent = rp[0][order]
        self.r_child = rc[order]


def _accum_types(tree, hier, d):
    """Shared per-type geometry plus, per type, its instance arrays: child
    box, parent-segment row and the child coefficient row of each sigma."""
    cache = hier._accum_cache
    if d in cache:
        return cache[d]
    cl = hier.level(d)
    lvl = tree.level(d)
    parent_cl = hier.level(d - 1)
    octant = (lvl.codes & np.uint64(7)).astype(np.int64)
    n_pairs = int(np.diff(parent_cl.seg_off)[lvl.parent].sum())
    prow = np.empty(n_pairs, dtype=np.int64)
    child = np.empty(n_pairs, dtype=np.int64)
    key = np.empty(n_pairs, dtype=np.int64)
    a = 0
    for b in range(lvl.n_boxes):
        pb = lvl.parent[b]
        lo, hi = parent_cl.seg_off[pb], parent_cl.seg_off[pb + 1]
        if hi == lo:
            continue
        prow[a:a + hi - lo] = np.arange(lo, hi)
        child[a:a + hi - lo] = b
        key[a:a + hi - lo] = parent_cl.seg_ids[lo:hi] * 8 + octant[b]
        a += hi - lo

    order = np.argsort(key, kind="stable")   # stays child-sorted per type
    ks = key[order]
    starts = np.nonzero(np.r_[True, ks[1:] != ks[:-1]])[0]
    ends = np.r_[starts[1:], ks.size]
    stride = np.int64(cl.n_s * cl.n_a * 2 * cl.n_a + 1)
    box_keys = np.repeat(np.arange(cl.seg_off.size - 1, dtype=np.int64),
                         np.diff(cl.seg_off)) * stride + cl.seg_ids
    types = []
    for a, b_ in zip(starts, ends):
        rec = _AccumType(parent_cl, cl, int(ks[a]) >> 3, int(ks[a]) & 7,
                         lvl.side)
        rec.inst_child = child[order[a:b_]]
        rec.inst_prow = prow[order[a:b_]]
        crow = np.searchsorted(
            box_keys,
            rec.inst_child[:, None] * stride + rec.sigma[None, :])
        rec.inst_crow = crow.astype(np.int64)
        types.append(rec)
    cache[d] = types
    return types


def _accumulate_level(tree, hier, cl, lvl, b_lo, b_hi, coeffs_flat, row0,
                      kappas, parent_cl, up, parent_vals):
    """Fold boxes [b_lo, b_hi) into their parents' segment grids.

    All (parent segment, child) pairs sharing a (segment id, child octant)
    type have identical relative geometry, so one type costs a few batched
    GEMMs over its instances regardless of instance count.
    """
    nk = len(kappas)
    nn = hier.config.p_s * hier.config.p_a**2
    types = _accum_types(tree, hier, cl.level)
    n_ch_tot = coeffs_flat.shape[-1]
    dest = parent_vals.reshape(-1, n_ch_tot)
    kap = np.asarray(kappas)
    for rec in types:
        i0, i1 = np.searchsorted(rec.inst_child, (b_lo, b_hi))
        if i1 == i0:
            continue
        inst = i1 - i0
        basis = _basis3(hier.config, rec.xs, rec.xt, rec.xp)
        ratio = (rec.r_parent / rec.r_child)[:, None] * np.exp(
            1j * np.multiply.outer(rec.r_child - rec.r_parent, kap))
        for j in range(rec.sigma.size):
            j0, j1 = rec.bounds[j], rec.bounds[j + 1]
            blk = coeffs_flat[rec.inst_crow[i0:i1, j] - row0]
            # (1, nj, nn) @ (inst, nn, 2C-real-view) -> (inst, nj, C)
            prod = np.matmul(
                basis[None, j0:j1],
                blk.view(np.float64).reshape(inst, nn, -1)).view(complex)
            prod = prod.reshape(inst, j1 - j0, -1, nk)
            prod *= ratio[None, j0:j1, None, :]
            rows2 = rec.inst_prow[i0:i1, None] * nn + \
                rec.scatter_rows[None, j0:j1]
            dest[rows2] += prod.reshape(inst, j1 - j0, -1)


def propagate_and_emit(tree: BoxTree, hier: ConeHierarchy,
                       spectra: "SegmentSpectra | None", kappas,
                       displaced_normals: np.ndarray | None = None,
                       displaced_step: float = 1e-6,
                       weights: np.ndarray | None = None,
                       n_channels: int | None = None):
    """Run the upward recursion from finest-level spectra: per level, emit to
    every box's cousin points and fold child interpolants into the parent
    grids with the smooth re-centering factor.

    With spectra=None the finest-level values are produced box by box from
    `weights` and consumed immediately (never materialized as a whole level,
    the dominant storage term).

    Returns (sums, displaced_sums) of shape (nch, n_kernels, N) in the
    original point order (displaced_sums None unless normals given).
    """
    depth = tree.depth
    kappas = tuple(kappas)
    weights_t = None
    if spectra is not None and spectra.values.size:
        nch = spectra.values.shape[2]
    elif weights is not None:
        weights_t = np.atleast_2d(weights)[:, tree.perm]
        nch = weights_t.shape[0]
    else:
        nch = n_channels or 1
    n = tree.points.shape[0]
    n_nodes = hier.config.p_s * hier.config.p_a**2
    out = np.zeros((nch, len(kappas), n), dtype=complex)
    out_disp = None
    disp_pts_t = None
    if displaced_normals is not None:
        out_disp = np.zeros_like(out)
        disp_pts_t = tree.points + displaced_step * \
            np.asarray(displaced_normals)[tree.perm]

    vals = spectra.values if spectra is not None else None
    # chunk boxes so the chunk's transients stay bounded: its segment
    # coefficients (dominant at the finest level) and its emission basis rows
    seg_budget = max(256, int(2.0e8 // (n_nodes * nch * len(kappas) * 16)))
    emit_budget = max(10_000, int(1.5e8 // (n_nodes * 8 * 3 +
                                            nch * len(kappas) * 32)))
    for d in range(depth, 2, -1):
        cl = hier.level(d)
        lvl = tree.level(d)
        parent_cl = hier.cone_levels.get(d - 1)
        up = tree.level(d - 1) if d > 1 else None
        parent_vals = None
        if parent_cl is not None:
            parent_vals = np.zeros(
                (parent_cl.n_segments, n_nodes, nch, len(kappas)),
                dtype=complex)
        streaming = d == depth and vals is None

        segs_per_box = np.diff(cl.seg_off)
        emit_per_box = np.diff(cl.cpt_off)
        b_lo = 0
        while b_lo < lvl.n_boxes:
            b_hi = b_lo + 1
            acc_seg = segs_per_box[b_lo]
            acc_emit = emit_per_box[b_lo]
            while (b_hi < lvl.n_boxes
                   and acc_seg + segs_per_box[b_hi] <= seg_budget
                   and acc_emit + emit_per_box[b_hi] <= emit_budget):
                acc_seg += segs_per_box[b_hi]
                acc_emit += emit_per_box[b_hi]
                b_hi += 1
            row0 = cl.seg_off[b_lo]
            rows = slice(row0, cl.seg_off[b_hi])
            if rows.stop > rows.start:
                if streaming:
                    box_vals = np.empty(
                        (rows.stop - rows.start, n_nodes, nch, len(kappas)),
                        dtype=complex)
                    for b in range(b_lo, b_hi):
                        sl = slice(cl.seg_off[b] - row0,
                                   cl.seg_off[b + 1] - row0)
                        if sl.stop > sl.start:
                            box_vals[sl] = _direct_spectra_box(
                                tree, cl, lvl, b, weights_t, kappas)
                else:
                    box_vals = vals[rows]
                coeffs = _to_coeffs(box_vals, hier.config)
                coeffs_flat = coeffs.reshape(coeffs.shape[0], n_nodes, -1)
                _emit_level(tree, hier, cl, lvl, b_lo, b_hi, coeffs_flat,
                            row0, kappas, out, out_disp, disp_pts_t)
                if parent_vals is not None:
                    _accumulate_level(tree, hier, cl, lvl, b_lo, b_hi,
                                      coeffs_flat, row0, kappas, parent_cl,
                                      up, parent_vals)
            b_lo = b_hi
        vals = parent_vals
    return out[:, :, tree.iperm], (None if out_disp is None
                                   else out_disp[:, :, tree.iperm])


def ifgf_apply(tree: BoxTree, hier: ConeHierarchy, weights: np.ndarray,
               kappas, mode: str | None = None,
               displaced_normals: np.ndarray | None = None,
               displaced_step: float = 1e-6):
    """Fast far-field sums: for every surface point, the kernel sum over all
    sources outside its finest-level neighbor boxes, per density channel and
    per kernel.

    mode 'vec' carries all channel-kernel combinations through one traversal;
    'seq' reruns the traversal per combination (identical values, a fraction
    of the interpolation storage). Displaced outputs evaluate each
    contribution at x + step*n with the same interpolant as x.
    """
    mode = mode or hier.config.mode
    weights = np.atleast_2d(weights)
    kappas = tuple(kappas)
    nch = weights.shape[0]
    n = tree.points.shape[0]
    if tree.depth < 3:
        z = np.zeros((nch, len(kappas), n), dtype=complex)
        return z, (np.zeros_like(z) if displaced_normals is not None else None)

    if mode == "vec":
        return propagate_and_emit(tree, hier, None, kappas,
                                  displaced_normals, displaced_step,
                                  weights=weights)
    if mode != "seq":
        raise ValueError("mode must be 'vec' or 'seq'")
    out = np.zeros((nch, len(kappas), n), dtype=complex)
    out_disp = (np.zeros_like(out) if displaced_normals is not None else None)
    for c in range(nch):
        for k, kappa in enumerate(kappas):
            s, sd = propagate_and_emit(tree, hier, None, (kappa,),
                                       displaced_normals, displaced_step,
                                       weights=weights[c:c + 1])
            out[c, k] = s[0, 0]
            if out_disp is not None:
                out_disp[c, k] = sd[0, 0]
    return out, out_disp


def tree_stats(tree: BoxTree, hier: ConeHierarchy | None = None) -> str:
    """JSON summary of box and cone-segment counts per level."""
    level_rows = []
    for d in range(1, tree.depth + 1):
        lvl = tree.level(d)
        row = {
            "level": d,
            "side": lvl.side,
            "relevant_boxes": int(lvl.n_boxes),
            "max_points_per_box": int(lvl.pt_count.max()),
        }
        if hier is not None and d >= 3 and d in hier.cone_levels:
            cl = hier.level(d)
            row["cone_counts"] = [cl.n_s, cl.n_a]
            row["relevant_segments"] = int(cl.n_segments)
        level_rows.append(row)
    payload = {
        "depth": tree.depth,
        "root_side": tree.root_side,
        "points": int(tree.points.shape[0]),
        "levels": level_rows,
    }
    if hier is not None:
        payload["spectra_bytes_vec16"] = hier.spectra_bytes(16)
    return json.dumps(payload, indent=2)
