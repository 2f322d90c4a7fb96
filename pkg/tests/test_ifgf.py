import numpy as np
import pytest

from emscat.geometry import make_sphere_surface
from emscat.ifgf import (
    ETA,
    IfgfConfig,
    analytic_factor,
    build_box_tree,
    build_cone_hierarchy,
    centered_factor,
    cone_coords,
    ifgf_apply,
    level_D_spectra,
    morton_decode,
    morton_encode,
    propagate_and_emit,
    tree_stats,
)


def naive_far_sums(tree, weights_orig, kappas, targets=None):
    """Direct far-field sums (sources outside neighbor boxes), original
    point order."""
    d = tree.depth
    coords = tree.level(d).coords[tree.point_boxes(d)]
    w_t = np.atleast_2d(weights_orig)[:, tree.perm]
    n = tree.points.shape[0]
    targets = range(n) if targets is None else targets
    out = np.zeros((w_t.shape[0], len(kappas), n), dtype=complex)
    for ell in targets:
        t = tree.iperm[ell]
        far = np.abs(coords - coords[t]).max(axis=1) >= 2
        r = np.linalg.norm(tree.points[t] - tree.points[far], axis=1)
        for k, kap in enumerate(kappas):
            out[:, k, ell] = (np.exp(1j * kap * r) / (4 * np.pi * r) *
                              w_t[:, far]).sum(axis=1)
    return out


# ---------------------------------------------------------------------------
# morton codes and tree structure
# ---------------------------------------------------------------------------

def test_morton_round_trip():
    rng = np.random.default_rng(0)
    coords = rng.integers(0, 2**15, size=(100, 3))
    assert np.array_equal(morton_decode(morton_encode(coords)), coords)


def test_tree_depth_rule(sphere_nc12):
    kappa = 2 * np.pi
    tree = build_box_tree(sphere_nc12.points, kappa)
    quarter = 0.25 * 2 * np.pi / kappa
    assert tree.side(tree.depth) <= quarter
    assert tree.side(tree.depth - 1) > quarter


def test_tree_single_cluster():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(30, 3)) * 0.01   # well inside lambda/8 at kappa=1
    tree = build_box_tree(pts, 1.0)
    assert tree.depth == 1
    lvl = tree.level(1)
    assert lvl.n_boxes == 1
    assert np.array_equal(lvl.neighbors(0), [0])


def test_tree_partition(sphere_nc12):
    tree = build_box_tree(sphere_nc12.points, 3 * np.pi)
    for d in range(1, tree.depth + 1):
        assert tree.level(d).pt_count.sum() == sphere_nc12.n_points


def test_neighbor_cousin_handoff(sphere_nc12):
    """Points are handed down, never lost: U_{d-1}(parent) splits into the
    box's neighbor and cousin point sets at level d."""
    tree = build_box_tree(sphere_nc12.points, 3 * np.pi)
    for d in range(2, tree.depth + 1):
        lvl, up = tree.level(d), tree.level(d - 1)
        for b in range(0, lvl.n_boxes, max(1, lvl.n_boxes // 13)):
            u_d = np.concatenate([tree.box_points(d, nb)
                                  for nb in lvl.neighbors(b)])
            cz = lvl.cousins(b)
            v_d = (np.concatenate([tree.box_points(d, cb) for cb in cz])
                   if cz.size else np.empty(0, int))
            parent_u = np.concatenate([tree.box_points(d - 1, nb)
                                       for nb in up.neighbors(lvl.parent[b])])
            assert np.array_equal(np.sort(np.concatenate([u_d, v_d])),
                                  np.sort(parent_u))
            assert np.intersect1d(u_d, v_d).size == 0


def test_empty_points_rejected():
    with pytest.raises(ValueError):
        build_box_tree(np.zeros((0, 3)), 1.0)


# ---------------------------------------------------------------------------
# kernel factorization and cone coordinates
# ---------------------------------------------------------------------------

def test_factorization_identity():
    rng = np.random.default_rng(2)
    kappa = 5.3
    for _ in range(20):
        x = rng.normal(size=3) * 4.0
        y = rng.normal(size=3) * 0.3
        c = rng.normal(size=3) * 0.1
        r = np.linalg.norm(x - y)
        g_exact = np.exp(1j * kappa * r) / (4 * np.pi * r)
        prod = centered_factor(x, c, kappa) * analytic_factor(x, y, c, kappa)
        assert abs(prod - g_exact) < 1e-14 * abs(g_exact)


def test_analytic_factor_at_center():
    x = np.array([2.0, 1.0, -0.5])
    c = np.array([0.1, -0.2, 0.3])
    assert analytic_factor(x, c, c, 7.0) == pytest.approx(1.0, abs=1e-14)


def test_cone_coords_definitions():
    s, th, ph, r = cone_coords(np.array([[0.0, 0.0, np.sqrt(3) / 2]]),
                               np.zeros(3), 1.0)
    assert s[0] == pytest.approx(1.0)
    assert th[0] == pytest.approx(0.0)
    with pytest.raises(ValueError):
        cone_coords(np.zeros((1, 3)), np.zeros(3), 1.0)


def test_cousins_within_eta(sphere_medium):
    tree = build_box_tree(sphere_medium.points, 2 * np.pi)
    for d in range(3, tree.depth + 1):
        lvl = tree.level(d)
        for b in range(0, lvl.n_boxes, max(1, lvl.n_boxes // 11)):
            cz = lvl.cousins(b)
            if cz.size == 0:
                continue
            pts = np.concatenate([tree.box_points(d, cb) for cb in cz])
            s, _, _, _ = cone_coords(tree.points[pts], lvl.centers[b],
                                     lvl.side)
            assert s.max() <= ETA + 1e-12


def test_slow_oscillation_of_analytic_factor():
    """Sweep a target along a line: the kernel oscillates ~kappa*length
    times while the analytic factor barely winds (box size 20 lambda)."""
    H = 1.0
    kappa = 40 * np.pi / H     # kappa H = 40 pi
    y = np.array([0.0, 0.0, H / 2])
    c = np.zeros(3)
    t = np.linspace(1.5 * H, 12 * H, 4000)
    x = np.stack([t, np.zeros_like(t), np.zeros_like(t)], axis=1)
    r = np.linalg.norm(x - y, axis=1)
    g_full = np.exp(1j * kappa * r) / (4 * np.pi * r)
    g_ana = analytic_factor(x, y, c, kappa)
    wraps = lambda z: np.abs(np.diff(np.unwrap(np.angle(z)))).sum() / (2 * np.pi)
    assert wraps(g_ana) < 4.0
    assert wraps(g_full) > 10.0 * wraps(g_ana)


# ---------------------------------------------------------------------------
# cone hierarchy
# ---------------------------------------------------------------------------

def test_cone_counts_growth(sphere_nc12):
    tree = build_box_tree(sphere_nc12.points, 3 * np.pi)
    hier = build_cone_hierarchy(tree)
    prev = None
    for d in range(tree.depth, 2, -1):
        cl = hier.level(d)
        if prev is not None:
            assert prev.n_s in (cl.n_s, 2 * cl.n_s)
        assert cl.delta_s == pytest.approx(ETA / cl.n_s)
        prev = cl


def test_no_cones_without_cousins():
    rng = np.random.default_rng(3)
    pts = rng.normal(size=(40, 3)) * 0.02
    tree = build_box_tree(pts, 1.0)
    hier = build_cone_hierarchy(tree)
    assert not hier.cone_levels  # depth < 3: no segments anywhere


def test_cousin_points_covered(sphere_medium):
    """Every cousin point of every box lies in exactly one relevant
    segment of that box."""
    tree = build_box_tree(sphere_medium.points, 2 * np.pi)
    hier = build_cone_hierarchy(tree)
    for d in range(3, tree.depth + 1):
        cl = hier.level(d)
        lvl = tree.level(d)
        for b in range(lvl.n_boxes):
            tgts = cl.cpt_idx[cl.cpt_off[b]:cl.cpt_off[b + 1]]
            if tgts.size == 0:
                continue
            s, th, ph, _ = cone_coords(tree.points[tgts], lvl.centers[b],
                                       lvl.side)
            flat = cl.seg_index(s, th, ph)
            own = cl.segs_of(b)
            pos = np.searchsorted(own, flat)
            assert np.all(own[np.minimum(pos, own.size - 1)] == flat)


def test_parent_nodes_covered(sphere_medium):
    tree = build_box_tree(sphere_medium.points, 2 * np.pi)
    hier = build_cone_hierarchy(tree)
    for d in range(tree.depth, 3, -1):
        cl, lvl = hier.level(d), tree.level(d)
        pcl, up = hier.level(d - 1), tree.level(d - 1)
        for b in range(lvl.n_boxes):
            own = cl.segs_of(b)
            pseg = pcl.segs_of(lvl.parent[b])
            if own.size == 0 or pseg.size == 0:
                continue
            xyz, _ = pcl.segment_nodes_xyz(pseg, up.centers[lvl.parent[b]])
            s, th, ph, _ = cone_coords(xyz.reshape(-1, 3), lvl.centers[b],
                                       lvl.side)
            flat = cl.seg_index(s, th, ph)
            pos = np.searchsorted(own, flat)
            assert np.all(own[np.minimum(pos, own.size - 1)] == flat)


def test_two_points_in_cousin_boxes():
    # two points placed to land in mutually cousin finest boxes
    pts = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95]])
    tree = build_box_tree(pts, 40.0)
    hier = build_cone_hierarchy(tree)
    d = tree.depth
    cl = hier.level(d)
    lvl = tree.level(d)
    assert any(cl.seg_off[b + 1] > cl.seg_off[b]
               for b in range(lvl.n_boxes))


def test_tree_stats_json(sphere_small):
    import json

    tree = build_box_tree(sphere_small.points, np.pi)
    hier = build_cone_hierarchy(tree)
    payload = json.loads(tree_stats(tree, hier))
    assert payload["points"] == sphere_small.n_points
    assert len(payload["levels"]) == tree.depth


# ---------------------------------------------------------------------------
# spectra and the full engine
# ---------------------------------------------------------------------------

def test_level_spectra_single_source():
    pts = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95]])
    kappa = 40.0
    tree = build_box_tree(pts, kappa)
    hier = build_cone_hierarchy(tree)
    w = np.array([[1.0 + 0j, 0.0]])
    spectra = level_D_spectra(tree, hier, w, (kappa,))
    d = tree.depth
    cl = hier.level(d)
    lvl = tree.level(d)
    b = int(tree.point_boxes(d)[tree.iperm[0]])
    rows = slice(cl.seg_off[b], cl.seg_off[b + 1])
    segs = cl.segs_of(b)
    xyz, _ = cl.segment_nodes_xyz(segs, lvl.centers[b])
    expect = analytic_factor(xyz.reshape(-1, 3), pts[0], lvl.centers[b],
                             kappa)
    got = spectra.values[rows, :, 0, 0].ravel()
    assert np.abs(got - expect).max() < 1e-13 * np.abs(expect).max()


def test_level_spectra_zero_weights(sphere_small):
    tree = build_box_tree(sphere_small.points, np.pi)
    hier = build_cone_hierarchy(tree)
    spectra = level_D_spectra(tree, hier,
                              np.zeros((2, sphere_small.n_points)), (np.pi,))
    assert np.abs(spectra.values).max() == 0.0


def test_two_level_toy_matches_dense():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(20, 3)) * 0.05 + [0.1, 0.1, 0.1]
    tgt = rng.normal(size=(20, 3)) * 0.05 + [0.9, 0.85, 0.9]
    pts = np.vstack([src, tgt])
    kappa = 6.0
    tree = build_box_tree(pts, kappa)
    hier = build_cone_hierarchy(tree)
    w = np.zeros((1, 40), dtype=complex)
    w[0, :20] = rng.normal(size=20) + 1j * rng.normal(size=20)
    spectra = level_D_spectra(tree, hier, w, (kappa,))
    out, _ = propagate_and_emit(tree, hier, spectra, (kappa,))
    ref = naive_far_sums(tree, w, (kappa,))
    nz = np.abs(ref) > 1e-13
    assert np.abs(out[nz] - ref[nz]).max() < 1e-4 * np.abs(ref[nz]).max()


def test_sphere_far_sums_accuracy(sphere_nc12):
    rng = np.random.default_rng(5)
    kappas = (2 * np.pi, 3 * np.pi)
    tree = build_box_tree(sphere_nc12.points, max(kappas))
    hier = build_cone_hierarchy(tree)
    n = sphere_nc12.n_points
    w = rng.normal(size=(2, n)) + 1j * rng.normal(size=(2, n))
    out, _ = ifgf_apply(tree, hier, w, kappas)
    idx = rng.choice(n, 150, replace=False)
    ref = naive_far_sums(tree, w, kappas, targets=idx)
    err = (np.linalg.norm(out[:, :, idx] - ref[:, :, idx]) /
           np.linalg.norm(ref[:, :, idx]))
    assert err < 1.5e-4


def test_channel_independence_and_linearity(sphere_small):
    rng = np.random.default_rng(6)
    kappas = (np.pi, 1.3 * np.pi)
    tree = build_box_tree(sphere_small.points, max(kappas))
    hier = build_cone_hierarchy(tree)
    n = sphere_small.n_points
    w = np.zeros((4, n), dtype=complex)
    w[2] = rng.normal(size=n) + 1j * rng.normal(size=n)
    out, _ = ifgf_apply(tree, hier, w, kappas)
    assert np.abs(out[0]).max() == 0.0
    assert np.abs(out[1]).max() == 0.0
    assert np.abs(out[3]).max() == 0.0
    assert np.abs(out[2]).max() > 0.0
    # linearity
    w2 = np.zeros_like(w)
    w2[2] = rng.normal(size=n)
    a, _ = ifgf_apply(tree, hier, w + 0.5j * w2, kappas)
    b, _ = ifgf_apply(tree, hier, w, kappas)
    c, _ = ifgf_apply(tree, hier, w2, kappas)
    assert np.abs(a - b - 0.5j * c).max() < 1e-12 * np.abs(a).max()


def test_self_interaction_excluded():
    pts = np.array([[0.05, 0.05, 0.05], [0.95, 0.95, 0.95]])
    kappa = 40.0
    tree = build_box_tree(pts, kappa)
    hier = build_cone_hierarchy(tree)
    w = np.array([[1.0 + 0j, 0.0]])
    out, _ = ifgf_apply(tree, hier, w, (kappa,))
    # the source point receives nothing from itself
    r = np.linalg.norm(pts[1] - pts[0])
    expect = np.exp(1j * kappa * r) / (4 * np.pi * r)
    assert abs(out[0, 0, 0]) < 1e-12
    assert out[0, 0, 1] == pytest.approx(expect, rel=2e-4)


def test_vec_seq_identical(sphere_medium):
    rng = np.random.default_rng(7)
    kappas = (np.pi, 2 * np.pi)
    tree = build_box_tree(sphere_medium.points, max(kappas))
    hier = build_cone_hierarchy(tree)
    n = sphere_medium.n_points
    w = rng.normal(size=(3, n)) + 1j * rng.normal(size=(3, n))
    out_v, _ = ifgf_apply(tree, hier, w, kappas, mode="vec")
    out_s, _ = ifgf_apply(tree, hier, w, kappas, mode="seq")
    assert np.abs(out_v - out_s).max() < 1e-12 * np.abs(out_v).max()


def test_displaced_outputs(sphere_small):
    """Displaced sums evaluate the same interpolants a small step along
    the normal: finite difference of a smooth far field."""
    rng = np.random.default_rng(8)
    kappa = np.pi
    tree = build_box_tree(sphere_small.points, kappa)
    hier = build_cone_hierarchy(tree)
    n = sphere_small.n_points
    w = rng.normal(size=(1, n)) + 1j * rng.normal(size=(1, n))
    h = 1e-6
    out, out_d = ifgf_apply(tree, hier, w, (kappa,),
                            displaced_normals=sphere_small.normals,
                            displaced_step=h)
    assert out_d is not None
    fd = (out_d - out) / h
    # compare against the analytic normal derivative of the far field
    d = tree.depth
    coords = tree.level(d).coords[tree.point_boxes(d)]
    w_t = w[:, tree.perm]
    idx = rng.choice(n, 30, replace=False)
    for ell in idx:
        t = tree.iperm[ell]
        far = np.abs(coords - coords[t]).max(axis=1) >= 2
        dx = tree.points[t] - tree.points[far]
        r = np.linalg.norm(dx, axis=1)
        nd = dx @ sphere_small.normals[ell]
        q = (nd * (1j * kappa * r - 1) *
             np.exp(1j * kappa * r) / (4 * np.pi * r**3))
        ref = (q * w_t[0, far]).sum()
        if abs(ref) > 1e-3:
            assert fd[0, 0, ell] == pytest.approx(ref, rel=2e-3)
