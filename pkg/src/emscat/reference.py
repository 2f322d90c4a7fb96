"""Ground-truth machinery: incident fields, the series solution for the
dielectric sphere, the unaccelerated forward map, and off-surface field
evaluation from solved surface currents.

Conventions: time dependence exp(-i*omega*t), so Maxwell's curl equations
read curl E = i*omega*mu*H and curl H = -i*omega*eps*E; the kernel is
exp(i*kappa*r)/(4*pi*r).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import spherical_jn, spherical_yn

from .geometry import SurfaceDiscretization
from .operators import DensityBlock, MaterialPair, MullerOperator

__all__ = [
    "IncidentField",
    "MieSolution",
    "plane_wave",
    "electric_dipole",
    "mie_solution",
    "dense_forward_map",
    "evaluate_fields",
    "fibonacci_sphere",
]


@dataclass
class IncidentField:
    """Evaluator producing (E, H) arrays at arbitrary exterior points."""

    kind: str
    fields: callable
    kappa: complex


def plane_wave(kappa_e, direction=(0.0, 0.0, -1.0),
               polarization=(1.0, 0.0, 0.0), omega=None, mu_e=1.0
               ) -> IncidentField:
    """Linearly polarized plane wave E = pol * exp(i*kappa_e*dir.x).

    The default direction/polarization give E = exp(-i*kappa_e*z) x_hat.
    """
    d = np.asarray(direction, dtype=float)
    p = np.asarray(polarization, dtype=complex)
    if abs(np.linalg.norm(d) - 1.0) > 1e-12:
        raise ValueError("direction must be a unit vector")
    if abs(np.vdot(d, p)) > 1e-12:
        raise ValueError("polarization must be orthogonal to direction")
    omega = float(omega if omega is not None else np.real(kappa_e))
    # curl E = i omega mu H with E = p exp(i k d.x):
    # H = (k / (omega mu)) (d x p) exp(i k d.x)
    h_pol = kappa_e / (omega * mu_e) * np.cross(d, p)

    def fields(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        phase = np.exp(1j * kappa_e * (pts @ d))
        return np.outer(phase, p), np.outer(phase, h_pol)

    return IncidentField("plane-wave", fields, kappa_e)


def electric_dipole(position, moment, eps=1.0, mu=1.0, omega=1.0
                    ) -> IncidentField:
    """Point electric dipole in a homogeneous medium:
    E = i*omega*mu*(G p + grad div(G p)/kappa^2), H = grad G x p."""
    y0 = np.asarray(position, dtype=float)
    p = np.asarray(moment, dtype=complex)
    kappa = omega * np.sqrt(eps * mu)

    def fields(points):
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        dx = pts - y0
        r = np.linalg.norm(dx, axis=1)
        if np.any(r == 0.0):
            raise ValueError("evaluation at the dipole position")
        rhat = dx / r[:, None]
        g = np.exp(1j * kappa * r) / (4.0 * np.pi * r)
        ikr = 1j * kappa * r
        # grad grad G = G [ a(r) I + b(r) rhat rhat ]
        a = (ikr - 1.0) / r**2
        b = (-kappa**2 * r**2 - 3.0 * ikr + 3.0) / r**2
        rp = rhat @ p
        e = 1j * omega * mu * (
            g[:, None] * p[None, :] +
            (g * a / kappa**2)[:, None] * p[None, :] +
            (g * b / kappa**2 * rp)[:, None] * rhat)
        grad_g = (g * a * r)[:, None] * rhat
        h = np.cross(grad_g, np.broadcast_to(p, rhat.shape))
        return e, h

    return IncidentField("dipole", fields, kappa)


# ---------------------------------------------------------------------------
# series solution for the dielectric sphere
# ---------------------------------------------------------------------------

def _spherical_h1(n, z, derivative=False):
    return (spherical_jn(n, z, derivative) +
            1j * spherical_yn(n, z, derivative))


def _angular_functions(n_max, mu):
    """pi_n and tau_n for n = 1..n_max at cos(theta) = mu."""
    pi = np.zeros((n_max + 1,) + mu.shape)
    tau = np.zeros_like(pi)
    pi[1] = 1.0
    for n in range(1, n_max):
        pi[n + 1] = ((2 * n + 1) * mu * pi[n] - (n + 1) * pi[n - 1]) / n
    for n in range(1, n_max + 1):
        tau[n] = n * mu * pi[n] - (n + 1) * pi[n - 1]
    return pi[1:], tau[1:]


@dataclass
class MieSolution:
    """Series solution for plane-wave scattering by a homogeneous sphere;
    evaluators for the interior total field and the exterior scattered
    field (in the rotated frame of the incoming wave)."""

    radius: float
    materials: MaterialPair
    order: int
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    d: np.ndarray

    def _eval(self, points, region):
        """Fields for incidence exp(+i k z) x_hat; region 'interior' gives
        the total interior field, 'exterior' the scattered field."""
        mats = self.materials
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.linalg.norm(pts, axis=1)
        if region == "interior" and np.any(r > self.radius * (1 + 1e-12)):
            raise ValueError("interior evaluator used outside the sphere")
        if region == "exterior" and np.any(r < self.radius * (1 - 1e-12)):
            raise ValueError("exterior evaluator used inside the sphere")
        safe_r = np.where(r == 0.0, 1e-300, r)
        ct = np.clip(pts[:, 2] / safe_r, -1.0, 1.0)
        st = np.sqrt(np.maximum(0.0, 1.0 - ct**2))
        phi = np.arctan2(pts[:, 1], pts[:, 0])
        cp, sp = np.cos(phi), np.sin(phi)

        n_max = self.order
        n_arr = np.arange(1, n_max + 1)
        if region == "interior":
            kappa, coef_m, coef_n = mats.kappa_i, self.c, self.d
            omega_fac = mats.kappa_i / (mats.omega * mats.mu_i)
            zf, zfd = spherical_jn, lambda n, z: spherical_jn(n, z, True)
        else:
            kappa, coef_m, coef_n = mats.kappa_e, self.b, self.a
            omega_fac = mats.kappa_e / (mats.omega * mats.mu_e)
            zf, zfd = _spherical_h1, lambda n, z: _spherical_h1(n, z, True)

        rho = kappa * safe_r
        z = np.stack([zf(n, rho) for n in n_arr])
        dz = np.stack([zfd(n, rho) for n in n_arr])
        zeta = z / rho + dz                      # [rho z]' / rho
        pi_n, tau_n = _angular_functions(n_max, ct)
        e_n = (1j ** n_arr * (2 * n_arr + 1) /
               (n_arr * (n_arr + 1.0)))[:, None]

        # vector harmonics of azimuthal order one
        def assemble(cm, cn, parity):
            """parity +1: (M_o, N_e) pair as in the electric field; -1:
            (M_e, N_o) as in the magnetic field."""
            if parity > 0:
                m_th = cp * pi_n * z
                m_ph = -sp * tau_n * z
                n_r = cp * st * (n_arr * (n_arr + 1.0))[:, None] * \
                    pi_n * z / rho
                n_th = cp * tau_n * zeta
                n_ph = -sp * pi_n * zeta
            else:
                m_th = -sp * pi_n * z
                m_ph = -cp * tau_n * z
                n_r = sp * st * (n_arr * (n_arr + 1.0))[:, None] * \
                    pi_n * z / rho
                n_th = sp * tau_n * zeta
                n_ph = cp * pi_n * zeta
            f_r = (e_n * cn * n_r).sum(axis=0)
            f_th = (e_n * (cm * m_th + cn * n_th)).sum(axis=0)
            f_ph = (e_n * (cm * m_ph + cn * n_ph)).sum(axis=0)
            return f_r, f_th, f_ph

        if region == "interior":
            em = coef_m[:, None]
            en = -1j * coef_n[:, None]
            hm = -omega_fac * coef_n[:, None]
            hn = -1j * omega_fac * coef_m[:, None]
        else:
            em = -coef_m[:, None]
            en = 1j * coef_n[:, None]
            hm = omega_fac * coef_n[:, None]
            hn = 1j * omega_fac * coef_m[:, None]
        er, eth, eph = assemble(em, en, +1)
        hr, hth, hph = assemble(hm, hn, -1)

        r_hat = np.stack([st * cp, st * sp, ct], axis=1)
        t_hat = np.stack([ct * cp, ct * sp, -st], axis=1)
        p_hat = np.stack([-sp, cp, np.zeros_like(sp)], axis=1)
        e = er[:, None] * r_hat + eth[:, None] * t_hat + eph[:, None] * p_hat
        h = hr[:, None] * r_hat + hth[:, None] * t_hat + hph[:, None] * p_hat
        return e, h

    def interior_fields(self, points):
        """Total interior fields for incidence E = exp(-i k_e z) x_hat."""
        return self._rotated(points, "interior")

    def exterior_scattered(self, points):
        return self._rotated(points, "exterior")

    def exterior_total(self, points):
        e, h = self._rotated(points, "exterior")
        inc = plane_wave(self.materials.kappa_e, omega=self.materials.omega,
                         mu_e=self.materials.mu_e)
        ei, hi = inc.fields(points)
        return e + ei, h + hi

    def _rotated(self, points, region):
        # the classical series assumes propagation along +z; our incident
        # wave travels along -z, so evaluate in the frame rotated by pi
        # about the x axis and rotate the fields back
        pts = np.atleast_2d(np.asarray(points, dtype=float)).copy()
        pts[:, 1] *= -1.0
        pts[:, 2] *= -1.0
        e, h = self._eval(pts, region)
        for f in (e, h):
            f[:, 1] *= -1.0
            f[:, 2] *= -1.0
        return e, h


def mie_solution(radius: float, materials: MaterialPair,
                 order: int | None = None) -> MieSolution:
    """Series coefficients for plane-wave scattering by a homogeneous
    sphere, truncation ceil(x + 8 x^(1/3) + 10) unless given."""
    x = materials.kappa_e * radius
    y = materials.kappa_i * radius
    if order is None:
        xa = abs(x)
        order = int(np.ceil(xa + 8.0 * xa ** (1.0 / 3.0) + 10.0))
    n = np.arange(1, order + 1)
    jx = spherical_jn(n, np.real_if_close(x))
    jy = spherical_jn(n, np.real_if_close(y))
    hx = _spherical_h1(n, np.real_if_close(x))
    # psi'(rho) = [rho j]'(rho) = j + rho j'
    psi_x = jx + x * spherical_jn(n, np.real_if_close(x), True)
    psi_y = jy + y * spherical_jn(n, np.real_if_close(y), True)
    xi_x = hx + x * _spherical_h1(n, np.real_if_close(x), True)
    mu_e, mu_i = materials.mu_e, materials.mu_i
    m2 = (materials.kappa_i / materials.kappa_e) ** 2
    mr = materials.kappa_i / materials.kappa_e

    b_num = mu_i * psi_x * jy - mu_e * jx * psi_y
    b_den = mu_i * xi_x * jy - mu_e * hx * psi_y
    b = b_num / b_den
    a_num = mu_i * psi_y * jx - m2 * mu_e * jy * psi_x
    a_den = mu_i * psi_y * hx - m2 * mu_e * jy * xi_x
    a = a_num / a_den
    c = (jx - b * hx) / jy
    d = (mu_i / (mr * mu_e)) * (jx - a * hx) / jy
    return MieSolution(radius, materials, order, a, b, c, d)


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    """Quasi-uniform points on a sphere (golden-angle spiral)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = np.pi * (1.0 + np.sqrt(5.0)) * i
    st = np.sqrt(1.0 - z**2)
    return radius * np.stack([st * np.cos(phi), st * np.sin(phi), z], axis=1)


# ---------------------------------------------------------------------------
# field evaluation from solved densities
# ---------------------------------------------------------------------------

def _layer_fields(disc: SurfaceDiscretization, dens: DensityBlock,
                  kappa, points, block=2048):
    """curl S[m], curl S[j], curlcurl S[m], curlcurl S[j] at off-surface
    points by direct quadrature."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    m_w = dens.m * disc.weights[:, None]
    j_w = dens.j * disc.weights[:, None]
    out = np.zeros((4, pts.shape[0], 3), dtype=complex)
    for t0 in range(0, pts.shape[0], block):
        t1 = min(t0 + block, pts.shape[0])
        dx = pts[t0:t1, None, :] - disc.points[None, :, :]
        r = np.sqrt((dx**2).sum(-1))
        g = np.exp(1j * kappa * r) / (4.0 * np.pi * r)
        a = (1j * kappa * r - 1.0) / r**2
        bb = (-kappa**2 * r**2 - 3.0 * (1j * kappa * r) + 3.0) / r**2
        grad_g = (g * a)[:, :, None] * dx
        for row, w in ((0, m_w), (1, j_w)):
            out[row, t0:t1] = np.cross(
                grad_g, np.broadcast_to(w, dx.shape)).sum(axis=1)
        # curlcurl S[w] = grad grad G . w + kappa^2 G w
        for row, w in ((2, m_w), (3, j_w)):
            rp = np.einsum("tsc,sc->ts", dx, w) / r**2
            out[row, t0:t1] = (
                (g * (a + kappa**2))[:, :, None] * w[None, :, :] +
                (g * bb * rp)[:, :, None] * dx).sum(axis=1)
    return out


def evaluate_fields(disc: SurfaceDiscretization, dens: DensityBlock,
                    materials: MaterialPair, points, region: str,
                    incident: IncidentField | None = None,
                    min_distance: float | None = None):
    """(E, H) at off-surface points from the solved surface currents.

    The fields are generated by E = -omega*mu*curl S[m] - i*curlcurl S[j]
    and H = -omega*eps*curl S[j] + i*curlcurl S[m] with the region's
    wavenumber; the interior evaluation is the total field, the exterior
    one the scattered field (plus the incident field when supplied).
    Points closer to the surface than min_distance (default: the largest
    classification radius) are rejected.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if min_distance is None:
        min_distance = float(disc.max_spacing.max())
    dmin = np.min(np.linalg.norm(
        pts[:, None, :] - disc.points[None, :, :], axis=-1), axis=1)
    if np.any(dmin < min_distance):
        raise ValueError("evaluation points too close to the surface")
    if region == "interior":
        kappa, eps, mu = materials.kappa_i, materials.eps_i, materials.mu_i
    elif region == "exterior":
        kappa, eps, mu = materials.kappa_e, materials.eps_e, materials.mu_e
    else:
        raise ValueError("region must be 'interior' or 'exterior'")
    curl_m, curl_j, cc_m, cc_j = _layer_fields(disc, dens, kappa, pts)
    omega = materials.omega
    e = -omega * mu * curl_m - 1j * cc_j
    h = -omega * eps * curl_j + 1j * cc_m
    if region == "exterior" and incident is not None:
        ei, hi = incident.fields(pts)
        e = e + ei
        h = h + hi
    return e, h


def dense_forward_map(op: MullerOperator, y: np.ndarray) -> np.ndarray:
    """The same operator action with the far field summed directly
    (quadratic cost); op may be any operator sharing the precomputed
    moments."""
    saved = op.accelerated
    op.accelerated = False
    try:
        return op.apply(y)
    finally:
        op.accelerated = saved
