import numpy as np
import pytest

from emscat.operators import DensityBlock, MaterialPair
from emscat.reference import (
    electric_dipole,
    evaluate_fields,
    fibonacci_sphere,
    mie_solution,
    plane_wave,
)

OMEGA = 2 * np.pi


def fd_curl(field, x, h=1e-5):
    """Central finite-difference curl of a vector field callable."""
    c = np.zeros(3, dtype=complex)
    for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
        xp = x.copy(); xp[j] += h
        xm = x.copy(); xm[j] -= h
        c[i] += (field(xp)[k] - field(xm)[k]) / (2 * h)
        xp = x.copy(); xp[k] += h
        xm = x.copy(); xm[k] -= h
        c[i] -= (field(xp)[j] - field(xm)[j]) / (2 * h)
    return c


# ---------------------------------------------------------------------------
# incident fields
# ---------------------------------------------------------------------------

def test_plane_wave_values_at_origin():
    pw = plane_wave(2 * np.pi, omega=OMEGA)
    e, h = pw.fields([[0.0, 0.0, 0.0]])
    assert np.allclose(e[0], [1, 0, 0], atol=1e-14)
    assert np.allclose(h[0], [0, -2 * np.pi / (OMEGA * 1.0), 0], atol=1e-14)


def test_plane_wave_tangential_cross():
    pw = plane_wave(2 * np.pi, omega=OMEGA)
    n = np.array([0.0, 0.0, 1.0])
    e, _ = pw.fields([[0.3, -0.1, 0.0]])
    assert abs(np.cross(n, e[0]) @ n) < 1e-14


def test_plane_wave_maxwell():
    rng = np.random.default_rng(0)
    pw = plane_wave(2 * np.pi, omega=OMEGA)
    fe = lambda x: pw.fields(x[None])[0][0]
    fh = lambda x: pw.fields(x[None])[1][0]
    for _ in range(3):
        x = rng.normal(size=3)
        assert np.abs(fd_curl(fe, x) - 1j * OMEGA * fh(x)).max() < 1e-6
        assert np.abs(fd_curl(fh, x) + 1j * OMEGA * fe(x)).max() < 1e-6


def test_plane_wave_input_validation():
    with pytest.raises(ValueError):
        plane_wave(1.0, direction=(0, 0, -2))
    with pytest.raises(ValueError):
        plane_wave(1.0, polarization=(0, 0, 1.0))


def test_dipole_maxwell_and_decay():
    rng = np.random.default_rng(1)
    dip = electric_dipole([0.1, 0.2, -0.3], [1.0, 0.5j, -0.2],
                          eps=2.0, mu=1.0, omega=3.0)
    fe = lambda x: dip.fields(x[None])[0][0]
    fh = lambda x: dip.fields(x[None])[1][0]
    for _ in range(3):
        x = rng.normal(size=3) + np.array([2.0, 0, 0])
        scale = np.abs(fh(x)).max()
        assert np.abs(fd_curl(fe, x) - 1j * 3.0 * fh(x)).max() < 1e-6 * scale
        scale = np.abs(fe(x)).max()
        assert np.abs(fd_curl(fh, x) + 1j * 3.0 * 2.0 * fe(x)).max() \
            < 1e-6 * scale
    # radiation decay 1/r
    kap = abs(dip.kappa)
    r1 = np.array([[60 / kap, 0, 0]])
    r2 = 2 * r1
    ratio = (np.linalg.norm(dip.fields(r2)[0]) /
             np.linalg.norm(dip.fields(r1)[0]))
    assert ratio == pytest.approx(0.5, rel=0.02)


# ---------------------------------------------------------------------------
# sphere series solution
# ---------------------------------------------------------------------------

def test_mie_matched_media_no_scattering():
    mats = MaterialPair(1.0, 1.0, 1.0, 1.0, OMEGA)
    mie = mie_solution(1.0, mats)
    assert np.abs(mie.a).max() == 0.0
    assert np.abs(mie.b).max() == 0.0
    pts = fibonacci_sphere(40, 0.6)
    e, h = mie.interior_fields(pts)
    ei, hi = plane_wave(mats.kappa_e, omega=OMEGA).fields(pts)
    assert np.abs(e - ei).max() < 1e-10
    assert np.abs(h - hi).max() < 1e-10


def test_mie_transmission_conditions():
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    mie = mie_solution(1.0, mats)
    pts = fibonacci_sphere(100, 1.0)
    ei, hi = mie.interior_fields(pts)
    ee, he = mie.exterior_total(pts)
    scale_e = np.abs(np.cross(pts, ee)).max()
    scale_h = np.abs(np.cross(pts, he)).max()
    assert np.abs(np.cross(pts, ei) - np.cross(pts, ee)).max() < 1e-8 * scale_e
    assert np.abs(np.cross(pts, hi) - np.cross(pts, he)).max() < 1e-8 * scale_h


def test_mie_truncation_self_convergence():
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    mie_a = mie_solution(1.0, mats)
    mie_b = mie_solution(1.0, mats, order=mie_a.order + 8)
    pts = fibonacci_sphere(50, 0.7)
    ea, _ = mie_a.interior_fields(pts)
    eb, _ = mie_b.interior_fields(pts)
    assert np.abs(ea - eb).max() < 1e-10


def test_mie_maxwell_interior():
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    mie = mie_solution(1.0, mats)
    fe = lambda x: mie.interior_fields(x[None])[0][0]
    fh = lambda x: mie.interior_fields(x[None])[1][0]
    rng = np.random.default_rng(2)
    for _ in range(3):
        x = rng.normal(size=3) * 0.3
        scale = np.abs(fh(x)).max() + 1.0
        curl_e = fd_curl(fe, x)
        assert np.abs(curl_e - 1j * OMEGA * mats.mu_i * fh(x)).max() \
            < 1e-5 * scale


def test_mie_region_guards():
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    mie = mie_solution(1.0, mats)
    with pytest.raises(ValueError):
        mie.interior_fields([[0.0, 0.0, 2.0]])
    with pytest.raises(ValueError):
        mie.exterior_scattered([[0.0, 0.0, 0.5]])


# ---------------------------------------------------------------------------
# representation / field evaluation
# ---------------------------------------------------------------------------

def test_extinction_identity(sphere_nc12):
    """With matched wavenumbers, layer densities built from an interior
    Maxwell field reproduce it inside and cancel outside."""
    mats = MaterialPair(1.0, 1.0, 1.0, 1.0, OMEGA)
    disc = sphere_nc12
    pw = plane_wave(mats.kappa_e, omega=OMEGA)
    e, h = pw.fields(disc.points)
    n = disc.normals
    m = np.cross(n, e) / (OMEGA * mats.mu_e)
    j = np.cross(n, h) / (OMEGA * mats.eps_e)
    dens = DensityBlock.from_currents(disc, j, m)
    pts_in = np.array([[0.2, -0.1, 0.3], [0.0, 0.0, 0.0]])
    e_in, h_in = evaluate_fields(disc, dens, mats, pts_in, "interior")
    e_ref, h_ref = pw.fields(pts_in)
    assert np.abs(e_in - e_ref).max() < 1e-5
    assert np.abs(h_in - h_ref).max() < 1e-5
    pts_out = np.array([[2.0, 0.5, -0.3], [0.0, -2.5, 1.0]])
    e_out, h_out = evaluate_fields(disc, dens, mats, pts_out, "exterior")
    assert np.abs(e_out).max() < 1e-5
    assert np.abs(h_out).max() < 1e-5


def test_evaluate_fields_zero_density(sphere_small):
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    dens = DensityBlock(np.zeros((8, sphere_small.n_points), dtype=complex))
    pw = plane_wave(mats.kappa_e, omega=OMEGA)
    pts = np.array([[0.0, 0.0, 3.0]])
    e, h = evaluate_fields(sphere_small, dens, mats, pts, "exterior",
                           incident=pw)
    e_ref, h_ref = pw.fields(pts)
    assert np.abs(e - e_ref).max() < 1e-14
    e0, _ = evaluate_fields(sphere_small, dens, mats, pts, "exterior")
    assert np.abs(e0).max() == 0.0


def test_evaluate_fields_rejects_near_surface(sphere_small):
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    dens = DensityBlock(np.zeros((8, sphere_small.n_points), dtype=complex))
    with pytest.raises(ValueError):
        evaluate_fields(sphere_small, dens, mats,
                        sphere_small.points[:1] * 1.0001, "exterior")


def test_evaluated_fields_satisfy_maxwell(sphere_nc12):
    rng = np.random.default_rng(3)
    mats = MaterialPair(1.0, 1.0, 2.25, 1.0, OMEGA)
    disc = sphere_nc12
    # smooth nonphysical densities: the represented field still solves
    # Maxwell away from the surface
    n = disc.normals
    m = np.cross(n, np.broadcast_to([0.3, -0.7, 0.5], n.shape))
    j = np.cross(n, np.broadcast_to([-0.2, 0.4, 0.9], n.shape))
    dens = DensityBlock.from_currents(disc, j, m)

    def fe(x):
        return evaluate_fields(disc, dens, mats, x[None], "interior")[0][0]

    def fh(x):
        return evaluate_fields(disc, dens, mats, x[None], "interior")[1][0]

    x = rng.normal(size=3) * 0.2
    scale = np.abs(fh(x)).max() + np.abs(fe(x)).max()
    curl_e = fd_curl(fe, x, h=1e-4)
    assert np.abs(curl_e - 1j * OMEGA * mats.mu_i * fh(x)).max() < 1e-4 * scale


def test_fibonacci_sphere_radius():
    pts = fibonacci_sphere(1000, 0.7)
    assert pts.shape == (1000, 3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 0.7).max() < 1e-12
