"""Command-line driver: solve scattering problems, benchmark the forward
map, validate against the sphere series solution, and export field grids.

Runs are described by a flat key-value config file with dotted section
names, e.g.

    mesh.kind = sphere
    mesh.n_refine = 2
    mesh.n_c = 12
    materials.eps_e = 1.0
    materials.eps_i = 2.25
    materials.kappa_i = 9.42477796076938
    solver.tol = 1e-4

Every command copies its resolved configuration into the output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import struct
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

DENSITY_MAGIC = b"HBIE1"
DENSITY_VERSION = 1


def _set_thread_env(threads: int) -> None:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(threads))


@dataclass
class RunConfig:
    """Parsed, validated run configuration."""

    raw: dict
    mesh_kind: str = "sphere"
    mesh_path: str | None = None
    n_refine: int = 2
    n_c: int = 12
    eps_e: complex = 1.0
    eps_i: complex = 2.25
    mu_e: complex = 1.0
    mu_i: complex = 1.0
    omega: float | None = None
    kappa_e: complex | None = None
    kappa_i: complex | None = None
    incident_kind: str = "planewave"
    direction: tuple = (0.0, 0.0, -1.0)
    polarization: tuple = (1.0, 0.0, 0.0)
    dipole_position: tuple = (0.0, 0.0, 2.0)
    dipole_moment: tuple = (1.0, 0.0, 0.0)
    tol: float = 1e-4
    max_iter: int = 1000
    mode: str = "vec"
    delta_factor: float = 1.0
    grading_order: int = 4
    n_beta: int | None = None
    output_dir: str = "out"
    threads: int = 0

    def materials(self):
        from .operators import MaterialPair

        if self.omega is not None:
            mats = MaterialPair(self.eps_e, self.mu_e, self.eps_i, self.mu_i,
                                float(self.omega))
            mats.check_consistency(self.kappa_e, self.kappa_i)
            return mats
        if self.kappa_i is not None and self.kappa_e is None:
            # exterior wavenumber implied by the interior one
            import numpy as np
            ke = self.kappa_i * np.sqrt(
                (self.eps_e * self.mu_e) / (self.eps_i * self.mu_i))
        elif self.kappa_e is not None:
            ke = self.kappa_e
        else:
            raise ValueError("config must set materials.omega or a kappa")
        import numpy as np
        omega = float(np.real(ke / np.sqrt(self.eps_e * self.mu_e)))
        mats = MaterialPair(self.eps_e, self.mu_e, self.eps_i, self.mu_i,
                            omega)
        mats.check_consistency(self.kappa_e, self.kappa_i)
        return mats

    def surface(self):
        from .geometry import load_surface, make_sphere_surface

        if self.mesh_kind == "sphere":
            return make_sphere_surface(self.n_refine, self.n_c)
        if self.mesh_kind == "patchgrid":
            if not self.mesh_path:
                raise ValueError("mesh.path required for patchgrid meshes")
            return load_surface(self.mesh_path, self.n_c)
        raise ValueError(f"unknown mesh kind '{self.mesh_kind}'")

    def incident(self, materials):
        from .reference import electric_dipole, plane_wave

        if self.incident_kind == "planewave":
            return plane_wave(materials.kappa_e, self.direction,
                              self.polarization, omega=materials.omega,
                              mu_e=materials.mu_e)
        if self.incident_kind == "dipole":
            return electric_dipole(self.dipole_position, self.dipole_moment,
                                   eps=materials.eps_e, mu=materials.mu_e,
                                   omega=materials.omega)
        raise ValueError(f"unknown incident kind '{self.incident_kind}'")

    def quad_config(self):
        from .quadrature import SingularQuadratureConfig

        return SingularQuadratureConfig(d=self.grading_order,
                                        n_beta=self.n_beta,
                                        delta_factor=self.delta_factor)

    def op_config(self):
        from .operators import OperatorConfig

        return OperatorConfig(mode=self.mode)


def _parse_value(text: str):
    text = text.strip()
    for cast in (int, float, complex):
        try:
            return cast(text)
        except ValueError:
            continue
    if "," in text:
        return tuple(_parse_value(t) for t in text.split(","))
    return text


def load_config(path) -> RunConfig:
    raw = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = line.split("=", 1)
            raw[key.strip()] = _parse_value(val)
    cfg = RunConfig(raw=raw)
    mapping = {
        "mesh.kind": "mesh_kind", "mesh.path": "mesh_path",
        "mesh.n_refine": "n_refine", "mesh.n_c": "n_c",
        "materials.eps_e": "eps_e", "materials.eps_i": "eps_i",
        "materials.mu_e": "mu_e", "materials.mu_i": "mu_i",
        "materials.omega": "omega", "materials.kappa_e": "kappa_e",
        "materials.kappa_i": "kappa_i",
        "incident.kind": "incident_kind",
        "incident.direction": "direction",
        "incident.polarization": "polarization",
        "incident.dipole_position": "dipole_position",
        "incident.dipole_moment": "dipole_moment",
        "solver.tol": "tol", "solver.max_iter": "max_iter",
        "ifgf.mode": "mode",
        "quadrature.delta_factor": "delta_factor",
        "quadrature.d": "grading_order", "quadrature.n_beta": "n_beta",
        "run.output_dir": "output_dir", "run.threads": "threads",
    }
    for key, val in raw.items():
        if key not in mapping:
            raise ValueError(f"unknown config key '{key}'")
        setattr(cfg, mapping[key], val)
    if cfg.mode not in ("vec", "seq"):
        raise ValueError("ifgf.mode must be vec or seq")
    return cfg


def _prepare_output(cfg: RunConfig, config_path) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = out / "resolved-config.txt"
    resolved.write_text(Path(config_path).read_text())
    return out


# ---------------------------------------------------------------------------
# density file format: magic, version, N, channel count, complex128 payload
# ---------------------------------------------------------------------------

def write_densities(path, values) -> None:
    import numpy as np

    values = np.asarray(values, dtype=complex)
    with open(path, "wb") as fh:
        fh.write(DENSITY_MAGIC)
        fh.write(struct.pack("<IQQ", DENSITY_VERSION, values.shape[1],
                             values.shape[0]))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_densities(path):
    import numpy as np

    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != DENSITY_MAGIC:
            raise ValueError("not a density file (bad magic)")
        version, n, nch = struct.unpack("<IQQ", fh.read(20))
        if version != DENSITY_VERSION:
            raise ValueError(f"unsupported density file version {version}")
        data = np.frombuffer(fh.read(), dtype=complex)
    if data.size != n * nch:
        raise ValueError("density file payload truncated")
    return data.reshape(nch, n)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _build_operator(cfg: RunConfig, accelerated=True):
    from .operators import build_muller_operator

    disc = cfg.surface()
    mats = cfg.materials()
    op = build_muller_operator(disc, mats, quad_config=cfg.quad_config(),
                               op_config=cfg.op_config(),
                               accelerated=accelerated)
    return disc, mats, op


def cmd_solve(cfg: RunConfig, out: Path) -> int:
    from .operators import DensityBlock
    from .solver import gmres

    disc, mats, op = _build_operator(cfg)
    if op.hierarchy is not None:
        mem = op.hierarchy.spectra_bytes(16)
        print(f"ifgf interpolation storage (vec, 16 channels): "
              f"{mem / 1e6:.0f} MB")
    incident = cfg.incident(mats)
    b = op.rhs(incident)
    x, report = gmres(op.apply, b, tol=cfg.tol, max_iter=cfg.max_iter)
    m, j = op.decode(x)
    dens = DensityBlock.from_currents(disc, j, m)
    write_densities(out / "densities.bin", dens.values)
    (out / "gmres-report.json").write_text(
        json.dumps(report.to_dict(), indent=2))
    print(f"solve: {report.iterations} iterations, "
          f"converged={report.converged}, {report.wall_time:.1f}s")
    return 0 if report.converged else 3


def cmd_validate_sphere(cfg: RunConfig, out: Path) -> int:
    import numpy as np

    from .operators import DensityBlock
    from .reference import evaluate_fields, fibonacci_sphere, mie_solution
    from .solver import gmres

    if cfg.mesh_kind != "sphere":
        raise ValueError("validate-sphere needs the builtin sphere mesh")
    disc, mats, op = _build_operator(cfg)
    incident = cfg.incident(mats)
    b = op.rhs(incident)
    x, report = gmres(op.apply, b, tol=cfg.tol, max_iter=cfg.max_iter)
    m, j = op.decode(x)
    dens = DensityBlock.from_currents(disc, j, m)
    pts = fibonacci_sphere(1000, 0.7)
    e_num, h_num = evaluate_fields(disc, dens, mats, pts, "interior")
    mie = mie_solution(1.0, mats)
    e_ref, h_ref = mie.interior_fields(pts)
    err_e = np.linalg.norm(e_num - e_ref) / np.linalg.norm(e_ref)
    err_h = np.linalg.norm(h_num - h_ref) / np.linalg.norm(h_ref)
    payload = {
        "n_points": disc.n_points,
        "iterations": report.iterations,
        "converged": report.converged,
        "error_e": err_e,
        "error_h": err_h,
    }
    (out / "validation.json").write_text(json.dumps(payload, indent=2))
    print(f"validate-sphere: N={disc.n_points} iters={report.iterations} "
          f"errE={err_e:.3e} errH={err_h:.3e}")
    return 0


def cmd_bench_fm(cfg: RunConfig, out: Path, sizes, dense_limit=100_000,
                 force_dense=False) -> int:
    import numpy as np

    rows = []
    for n_refine in sizes:
        sub = RunConfig(**{**cfg.__dict__, "raw": cfg.raw})
        sub.n_refine = n_refine
        # fixed points per wavelength: wavenumber scales with refinement
        scale = n_refine / cfg.n_refine
        if sub.kappa_i is not None:
            sub.kappa_i = cfg.kappa_i * scale
        if sub.kappa_e is not None:
            sub.kappa_e = cfg.kappa_e * scale
        if sub.omega is not None:
            sub.omega = cfg.omega * scale
        disc, mats, op = _build_operator(sub)
        incident = sub.incident(mats)
        b = op.rhs(incident)
        weights = None
        # warm geometry caches, then time
        op.apply(b)
        t0 = time.time()
        acc = op.apply(b)
        t_ci = time.time() - t0
        from .ifgf import ifgf_apply
        from .operators import DensityBlock

        m, j = op.decode(b)
        dens = DensityBlock.from_currents(disc, j, m)
        phi_w = dens.values * disc.weights
        t0 = time.time()
        ifgf_apply(op.tree, op.hierarchy, phi_w, mats.kappas, mode="vec")
        t_ifgf = time.time() - t0
        t0 = time.time()
        ifgf_apply(op.tree, op.hierarchy, phi_w, mats.kappas, mode="seq")
        t_seq = time.time() - t0
        err = None
        t_dense = None
        if force_dense or disc.n_points <= dense_limit:
            op.accelerated = False
            t0 = time.time()
            den = op.apply(b)
            t_dense = time.time() - t0
            op.accelerated = True
            err = float(np.linalg.norm(acc - den) / np.linalg.norm(den))
        rows.append({
            "n": disc.n_points,
            "kappa_i": float(np.real(mats.kappa_i)),
            "t_dense": t_dense,
            "t_accelerated": t_ci,
            "t_ifgf": t_ifgf,
            "t_seq": t_seq,
            "fm_error": err,
        })
        print(rows[-1])
    ns = np.array([r["n"] for r in rows], dtype=float)
    ts = np.array([r["t_ifgf"] for r in rows])
    coef = (ts / (ns * np.log(ns))).mean()
    resid = ts / (coef * ns * np.log(ns)) - 1.0
    payload = {"rows": rows, "nlogn_coefficient": coef,
               "nlogn_residuals": resid.tolist()}
    (out / "bench.json").write_text(json.dumps(payload, indent=2))
    with open(out / "bench.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print("n log n fit residuals:", resid)
    return 0


def cmd_eval_field(cfg: RunConfig, out: Path, densities_path, plane,
                   extent, resolution) -> int:
    import numpy as np

    from .operators import DensityBlock
    from .reference import evaluate_fields

    disc = cfg.surface()
    mats = cfg.materials()
    values = read_densities(densities_path)
    if values.shape[1] != disc.n_points:
        raise ValueError("density file does not match the mesh size")
    dens = DensityBlock(values)
    incident = cfg.incident(mats)

    axes = {"yz": (1, 2), "xz": (0, 2), "xy": (0, 1)}[plane]
    grid = np.linspace(-extent, extent, resolution)
    uu, vv = np.meshgrid(grid, grid, indexing="ij")
    pts = np.zeros((uu.size, 3))
    pts[:, axes[0]] = uu.ravel()
    pts[:, axes[1]] = vv.ravel()

    delta = float(disc.max_spacing.max())
    dmin = np.min(np.linalg.norm(
        pts[:, None, :] - disc.points[None, :, :], axis=-1), axis=1)
    radius = np.linalg.norm(pts, axis=1)
    inside = radius < np.linalg.norm(disc.points, axis=1).mean()
    masked = dmin < delta
    e = np.full((pts.shape[0], 3), np.nan, dtype=complex)
    h = np.full((pts.shape[0], 3), np.nan, dtype=complex)
    for region, sel in (("interior", inside & ~masked),
                        ("exterior", ~inside & ~masked)):
        if sel.any():
            e[sel], h[sel] = evaluate_fields(
                disc, dens, mats, pts[sel], region,
                incident=incident if region == "exterior" else None,
                min_distance=delta)
    path = out / "field.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "masked"] +
                        [f"{f}_{c}_{p}" for f in "EH" for c in "xyz"
                         for p in ("re", "im")])
        for i in range(pts.shape[0]):
            row = list(pts[i]) + [int(masked[i])]
            for f in (e, h):
                for c in range(3):
                    row += [np.real(f[i, c]), np.imag(f[i, c])]
            writer.writerow(row)
    print(f"eval-field: wrote {path} ({int(masked.sum())} masked points)")
    return 0


def cmd_mesh_info(cfg: RunConfig, out: Path) -> int:
    from .ifgf import build_box_tree, build_cone_hierarchy, tree_stats

    disc = cfg.surface()
    mats = cfg.materials()
    kmax = max(abs(mats.kappa_e), abs(mats.kappa_i))
    tree = build_box_tree(disc.points, kmax)
    hier = build_cone_hierarchy(tree)
    stats = tree_stats(tree, hier)
    (out / "mesh-info.json").write_text(stats)
    print(f"mesh: P={disc.n_patches} n_c={disc.n_c} N={disc.n_points} "
          f"area={disc.area():.6f}")
    print(stats)
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="emscat",
        description="Boundary-integral solver for dielectric scattering")
    parser.add_argument("command",
                        choices=["solve", "bench-fm", "validate-sphere",
                                 "eval-field", "mesh-info"])
    parser.add_argument("config", help="path to the run configuration file")
    parser.add_argument("--densities", help="density file for eval-field")
    parser.add_argument("--plane", default="yz", choices=["yz", "xz", "xy"])
    parser.add_argument("--extent", type=float, default=5.0)
    parser.add_argument("--resolution", type=int, default=41)
    parser.add_argument("--sizes", default=None,
                        help="comma-separated n_refine list for bench-fm")
    parser.add_argument("--force-dense", action="store_true")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if cfg.threads:
        _set_thread_env(int(cfg.threads))
    try:
        out = _prepare_output(cfg, args.config)
        if args.command == "solve":
            return cmd_solve(cfg, out)
        if args.command == "validate-sphere":
            return cmd_validate_sphere(cfg, out)
        if args.command == "bench-fm":
            sizes = ([int(s) for s in args.sizes.split(",")]
                     if args.sizes else [cfg.n_refine])
            return cmd_bench_fm(cfg, out, sizes,
                                force_dense=args.force_dense)
        if args.command == "eval-field":
            if not args.densities:
                print("error: --densities required", file=sys.stderr)
                return 2
            return cmd_eval_field(cfg, out, args.densities, args.plane,
                                  args.extent, args.resolution)
        if args.command == "mesh-info":
            return cmd_mesh_info(cfg, out)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
