import numpy as np
import pytest

from emscat.chebyshev import (
    cheb_diff_grid,
    cheb_interp_1d,
    cheb_interp_eval,
    cheb_inverse_2d,
    cheb_nodes,
    cheb_transform_2d,
    chebyshev_basis,
    fejer_weights,
)


def test_nodes_single():
    assert cheb_nodes(1).nodes == pytest.approx([0.0])


def test_nodes_two():
    g = cheb_nodes(2)
    assert g.nodes == pytest.approx([np.sqrt(2) / 2, -np.sqrt(2) / 2])


def test_nodes_symmetry_and_range():
    g = cheb_nodes(4)
    assert np.allclose(g.nodes, -g.nodes[::-1])
    assert np.all(np.diff(g.nodes) < 0)
    assert np.all(np.abs(g.nodes) < 1.0)


def test_nodes_rejects_zero():
    with pytest.raises(ValueError):
        cheb_nodes(0)


def test_fejer_single_node():
    assert fejer_weights(1).weights == pytest.approx([2.0])


@pytest.mark.parametrize("n", [1, 2, 3, 5, 8, 16, 33])
def test_fejer_sum_and_positivity(n):
    w = fejer_weights(n).weights
    assert w.sum() == pytest.approx(2.0, abs=1e-13)
    assert np.all(w > 0)


def test_fejer_x6():
    # analytic integral of x^6 over [-1,1] is 2/7; exact since degree 6 < 8
    rule = fejer_weights(8)
    x = cheb_nodes(8).nodes
    assert (rule.weights * x**6).sum() == pytest.approx(2.0 / 7.0, abs=1e-12)


@pytest.mark.parametrize("n", [4, 9, 16])
def test_fejer_degree_exactness(n):
    # exact for every monomial of degree < n
    x = cheb_nodes(n).nodes
    w = fejer_weights(n).weights
    for deg in range(n):
        exact = 0.0 if deg % 2 else 2.0 / (deg + 1)
        assert (w * x**deg).sum() == pytest.approx(exact, abs=1e-12)


def test_transform_constant():
    a = cheb_transform_2d(np.full((5, 5), 3.7 + 0.5j))
    assert a[0, 0] == pytest.approx(3.7 + 0.5j, abs=1e-13)
    a[0, 0] = 0.0
    assert np.abs(a).max() < 1e-13


def test_transform_picks_out_mode():
    n = 8
    x = cheb_nodes(n).nodes
    t2 = np.cos(2 * np.arccos(x))
    t3 = np.cos(3 * np.arccos(x))
    a = cheb_transform_2d(np.outer(t2, t3))
    assert a[2, 3] == pytest.approx(1.0, abs=1e-12)
    a[2, 3] = 0.0
    assert np.abs(a).max() < 1e-12


def test_transform_round_trip():
    rng = np.random.default_rng(7)
    f = rng.normal(size=(12, 12)) + 1j * rng.normal(size=(12, 12))
    back = cheb_inverse_2d(cheb_transform_2d(f))
    assert np.abs(back - f).max() < 1e-12 * np.abs(f).max()


def test_transform_rejects_non_square():
    with pytest.raises(ValueError):
        cheb_transform_2d(np.zeros((3, 4)))


def test_interp_linear_exact():
    x = cheb_nodes(3).nodes
    it = cheb_interp_1d(x.copy())
    assert cheb_interp_eval(it, 0.3) == pytest.approx(0.3, abs=1e-14)


def test_interp_constant():
    it = cheb_interp_1d(np.ones(5))
    for x in [-1.0, -0.2, 0.77, 1.0]:
        assert cheb_interp_eval(it, x) == pytest.approx(1.0, abs=1e-13)


def test_interp_matches_barycentric():
    # independent oracle: barycentric formula for first-kind Chebyshev nodes
    n = 3
    x = cheb_nodes(n).nodes
    f = np.exp(x)
    it = cheb_interp_1d(f)

    def bary(xq):
        lam = (-1.0) ** np.arange(n) * np.sin((np.arange(n) + 0.5) * np.pi / n)
        d = xq - x
        if np.any(d == 0.0):
            return f[d == 0.0][0]
        return (lam / d * f).sum() / (lam / d).sum()

    for xq in [0.0, 0.41, -0.9]:
        assert cheb_interp_eval(it, xq) == pytest.approx(bary(xq), abs=1e-13)


def test_interp_extrapolation_is_legal():
    it = cheb_interp_1d(cheb_nodes(4).nodes.copy())
    assert cheb_interp_eval(it, 1.05) == pytest.approx(1.05, abs=1e-12)


def test_interp_reproduces_samples():
    rng = np.random.default_rng(3)
    f = rng.normal(size=9) + 1j * rng.normal(size=9)
    it = cheb_interp_1d(f)
    vals = cheb_interp_eval(it, cheb_nodes(9).nodes)
    assert np.abs(vals - f).max() < 100 * np.finfo(float).eps * np.abs(f).max()


def test_diff_linear():
    n = 10
    x = cheb_nodes(n).nodes
    uu = np.outer(x, np.ones(n))
    du = cheb_diff_grid(uu, "u")
    assert np.abs(du - 1.0).max() < 1e-12
    assert np.abs(cheb_diff_grid(uu, "v")).max() < 1e-12


def test_diff_constant():
    assert np.abs(cheb_diff_grid(np.full((6, 6), 2.5), "u")).max() < 1e-12


def test_diff_t3_identity():
    # T_3' = 3 U_2 with U_2(x) = 4x^2 - 1
    n = 8
    x = cheb_nodes(n).nodes
    t3 = np.cos(3 * np.arccos(x))
    grid = np.outer(t3, np.ones(n))
    du = cheb_diff_grid(grid, "u")
    expect = np.outer(3 * (4 * x**2 - 1), np.ones(n))
    assert np.abs(du - expect).max() < 1e-10


def test_diff_exact_for_polynomials():
    rng = np.random.default_rng(11)
    n = 9
    coef = rng.normal(size=n)
    x = cheb_nodes(n).nodes
    grid = np.polyval(coef, x)[:, None] * np.ones(n)[None, :]
    dgrid = np.polyval(np.polyder(coef), x)[:, None] * np.ones(n)[None, :]
    got = cheb_diff_grid(grid, "u")
    assert np.abs(got - dgrid).max() < 1e-10 * max(1.0, np.abs(dgrid).max())


def test_diff_rejects_tiny_grid():
    with pytest.raises(ValueError):
        cheb_diff_grid(np.zeros((1, 1)), "u")


def test_basis_recurrence_matches_cos_form():
    x = np.linspace(-1, 1, 17)
    b = chebyshev_basis(9, x)
    for m in range(9):
        assert np.abs(b[:, m] - np.cos(m * np.arccos(x))).max() < 1e-12
