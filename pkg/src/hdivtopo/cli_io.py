"""Config parsing, field/table serialization, and the command-line surface.

Configs are JSON (decimal literals survive a parse/format round trip
bit-exactly), tables are CSV with 17 significant digits so regression diffs
are byte-exact, and fields go out as legacy ASCII VTK with cell data: BDM
velocities are discontinuous between cells, so the honest visualization is
one vector per cell at the centroid rather than fabricated point data.
"""
import argparse
import hashlib
import json
import sys
from dataclasses import dataclass, asdict, fields as dc_fields
from pathlib import Path

import numpy as np

from .mesh import Mesh, generate_rect_mesh, check_mesh_regularity
from .forward import check_mms
from .topopt import OptOptions
from . import harness


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a benchmark run needs; defaults are the double-pipe preset."""

    preset: str = "double-pipe"
    lx: float = 1.5
    ly: float = 1.0
    gamma: float = 1.0 / 3.0
    alpha_bar: float = 2.5e4
    q: float = 0.1
    nu: float = 1.0
    sigma: float = 10.0
    nx: int = 48
    ny: int = 32
    levels: int = 4
    foc_tol: float = 1e-8
    rho_tol: float = 1e-8
    max_iterations: int = 2000
    seeds: tuple = ("channels", "wrench")
    deflate: bool = False
    out_dir: str = "out"

    def validate(self):
        if self.preset not in ("double-pipe",):
            raise ConfigError(f"unknown preset {self.preset!r}")
        for key in ("lx", "ly", "alpha_bar", "q", "nu", "sigma",
                    "foc_tol", "rho_tol"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)!r}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma!r}")
        for key in ("nx", "ny", "levels", "max_iterations"):
            v = getattr(self, key)
            if not (isinstance(v, int) and v >= 1):
                raise ConfigError(f"{key} must be a positive integer, got {v!r}")
        bad = set(self.seeds) - {"channels", "wrench"}
        if bad:
            raise ConfigError(f"unknown seed name {sorted(bad)[0]!r}")
        return self

    def case(self) -> harness.DoublePipeCase:
        return harness.DoublePipeCase(lx=self.lx, ly=self.ly, gamma=self.gamma,
                                      alpha_bar=self.alpha_bar, q=self.q,
                                      nu=self.nu, sigma=self.sigma)

    def options(self) -> OptOptions:
        return harness.default_options(
            self.case(), foc_tol=self.foc_tol, rho_tol=self.rho_tol,
            max_iterations=self.max_iterations)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


_SECTIONS = {"problem", "mesh", "solver", "run", "output"}


def parse_config(path) -> RunConfig:
    """Read a JSON config; keys may sit flat or under the section names
    problem/mesh/solver/run/output.  Unknown keys are an error."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path!r}: {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path!r}: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    flat = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be an object")
            flat.update(value)
        else:
            flat[key] = value
    known = {f.name for f in dc_fields(RunConfig)}
    for key in flat:
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in config {path!r}")
    if "seeds" in flat:
        flat["seeds"] = tuple(flat["seeds"])
    cfg = RunConfig(**flat)
    cfg.validate()
    return cfg


def format_config(cfg: RunConfig) -> str:
    """Inverse of parse_config up to key order; floats print exactly."""
    return json.dumps(asdict(cfg), indent=2, default=list) + "\n"


# -- serialization -------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.17g}"
    return str(value)


def write_csv(rows, path, header=None, meta=None):
    """Comment block, header row, data rows; floats at 17 significant digits."""
    if header is None:
        header = list(rows[0].keys()) if rows else []
    lines = []
    for key, value in (meta or {}).items():
        lines.append(f"# {key} = {_fmt(value)}")
    if header:
        lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in header))
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path):
    """Inverse of write_csv: (rows, meta) with floats parsed back."""
    meta, header, rows = {}, None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            meta[key.strip()] = value.strip()
        elif header is None:
            header = line.split(",")
        else:
            parts = line.split(",")
            row = {}
            for key, part in zip(header, parts):
                try:
                    row[key] = int(part)
                except ValueError:
                    try:
                        row[key] = float(part)
                    except ValueError:
                        row[key] = part
            rows.append(row)
    return rows, meta


def write_vtk(mesh: Mesh, fields: dict, path, title: str = "hdivtopo fields"):
    """Legacy ASCII unstructured-grid file with cell data.

    fields maps names to per-cell arrays: scalars of shape (nc,) or vectors
    of shape (nc, 2|3); 2-vectors are padded with z = 0.  The title line
    carries the parameter set and is clipped to the format's 255-byte cap.
    """
    nc = mesh.n_cells
    for name, data in fields.items():
        if len(data) != nc:
            raise ValueError(f"field {name!r} has {len(data)} entries, mesh has {nc} cells")
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII",
             "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    for x, y in mesh.vertices:
        lines.append(f"{x:.17g} {y:.17g} 0")
    lines.append(f"CELLS {nc} {4 * nc}")
    for a, b, c in mesh.cells:
        lines.append(f"3 {a} {b} {c}")
    lines.append(f"CELL_TYPES {nc}")
    lines.extend(["5"] * nc)
    lines.append(f"CELL_DATA {nc}")
    for name, data in fields.items():
        data = np.asarray(data, dtype=float)
        if data.ndim == 1:
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines.extend(_fmt(v) for v in data)
        else:
            if data.shape[1] == 2:
                data = np.column_stack([data, np.zeros(nc)])
            lines.append(f"VECTORS {name} double")
            lines.extend(" ".join(_fmt(v) for v in row) for row in data)
    Path(path).write_text("\n".join(lines) + "\n")


def centroid_velocity(V, coeffs: np.ndarray) -> np.ndarray:
    """One velocity vector per cell, evaluated at the centroid."""
    return np.einsum("cb,cbi->ci", coeffs[V.dofmap], V.lin_a)


# -- commands ------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    for key in ("nu", "sigma", "levels", "nx", "ny", "out"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(cfg, {"out": "out_dir"}.get(key, key), v)
    if getattr(args, "seeds", None):
        cfg.seeds = tuple(args.seeds.split(","))
    if getattr(args, "deflate", False):
        cfg.deflate = True
    cfg.validate()
    return cfg


def _vtk_fields(problem, state, u_coeffs, p_cells) -> dict:
    return {"rho": state.rho, "p": p_cells,
            "u": centroid_velocity(problem.V, u_coeffs)}


def _title(cfg: RunConfig, extra="") -> str:
    bits = (f"double-pipe lx={cfg.lx:g} ly={cfg.ly:g} gamma={cfg.gamma:.17g} "
            f"alpha_bar={cfg.alpha_bar:g} q={cfg.q:g} nu={cfg.nu:g} "
            f"sigma={cfg.sigma:g} config={cfg.digest()}")
    return (bits + " " + extra).strip()


def _meta(cfg: RunConfig) -> dict:
    return {"config": cfg.digest(), "nu": cfg.nu, "sigma": cfg.sigma,
            "alpha_bar": cfg.alpha_bar, "gamma": cfg.gamma, "q": cfg.q}


def cmd_solve(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case = cfg.case()
    problem = harness.build_problem(case, cfg.nx, cfg.ny)
    seeds = benchmark_subset(problem, case, cfg.seeds)
    registry = harness.multi_start(problem.forms, problem.bdata, seeds,
                                   cfg.options(), deflate=cfg.deflate)
    rows = []
    for entry in registry.entries:
        topo = harness.classify_topology(problem.mesh, entry.state.rho, case)
        vtk = out / f"solve_{entry.seed}.vtk"
        write_vtk(problem.mesh, _vtk_fields(problem, entry.state,
                                            entry.solution.u.coeffs,
                                            entry.solution.p.coeffs),
                  vtk, title=_title(cfg, f"seed={entry.seed}"))
        rows.append({"seed": entry.seed, "J": entry.J,
                     "foc": entry.report.foc.max, "lam": entry.state.lam,
                     "topology": topo, "iterations": entry.report.iterations})
        print(f"{entry.seed}: J={entry.J:.10f} foc={entry.report.foc.max:.2e} "
              f"topology={topo} -> {vtk}")
    write_csv(rows, out / "solve_report.csv", meta=_meta(cfg))
    for name, report in registry.failures:
        print(f"seed {name} failed: foc={report.foc.max:.2e} after "
              f"{report.iterations} iterations", file=sys.stderr)
    return 0 if registry.entries and not registry.failures else 1


def benchmark_subset(problem, case, names):
    seeds = harness.benchmark_seeds(problem.mesh, case)
    unknown = set(names) - seeds.keys()
    if unknown:
        raise ConfigError(f"unknown seed name {sorted(unknown)[0]!r}")
    return {k: seeds[k] for k in names}


def cmd_converge(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    case = cfg.case()
    base = (cfg.nx, cfg.ny)
    studies = harness.run_convergence(case, n_levels=cfg.levels, base=base,
                                      opts=cfg.options(), branches=cfg.seeds,
                                      progress=print)
    status = 0
    for branch, study in studies.items():
        rows = []
        for k in range(len(study.levels) - 1):
            row = {"h": study.h[k],
                   "err_u_H1g": study.errors["u_h1g"][k],
                   "err_rho_L2": study.errors["rho_l2"][k],
                   "err_p_L2": study.errors["p_l2"][k]}
            for key, col in (("u_h1g", "order_u"), ("rho_l2", "order_rho"),
                             ("p_l2", "order_p")):
                row[col] = (study.orders[key][k - 1] if k > 0 else float("nan"))
            rows.append(row)
        write_csv(rows, out / f"convergence_{branch}.csv", meta=_meta(cfg))
        for lvl, ls in enumerate(study.levels):
            write_vtk(ls.problem.mesh,
                      _vtk_fields(ls.problem, ls.state, ls.u_coeffs, ls.p_cells),
                      out / f"converge_{branch}_L{lvl}.vtk",
                      title=_title(cfg, f"branch={branch} level={lvl}"))
        drop = all(np.all(np.diff(v) < 0) for v in study.errors.values())
        print(f"{branch}: errors decreasing={drop} "
              f"u order per level={np.round(study.orders['u_h1g'], 3)}")
        if not drop:
            status = 1
    return status


def cmd_divtable(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    studies = harness.run_convergence(cfg.case(), n_levels=cfg.levels,
                                      base=(cfg.nx, cfg.ny), opts=cfg.options(),
                                      branches=cfg.seeds, progress=print)
    table = harness.divergence_table(studies)
    rows = [{"h": r["h_max"], "branch": r["branch"], "div_norm": r["div_l2"]}
            for r in table]
    write_csv(rows, out / "divergence.csv", meta=_meta(cfg))
    worst = max(row["div_norm"] for row in rows)
    print(f"{len(rows)} rows, max divergence {worst:.3e} -> {out / 'divergence.csv'}")
    return 0 if worst <= 1e-6 else 1


def cmd_forward_mms(args) -> int:
    cfg = _load_config(args)
    rows = check_mms(levels=cfg.levels, nu=cfg.nu, sigma=cfg.sigma)
    for row in rows:
        extra = ""
        if "order_u_l2" in row:
            extra = (f"  orders: u_l2={row['order_u_l2']:.2f} "
                     f"u_h1={row['order_u_h1']:.2f} p_l2={row['order_p_l2']:.2f}")
        print(f"h={row['h']:.4e} err_u_l2={row['err_u_l2']:.3e} "
              f"err_u_h1={row['err_u_h1']:.3e} err_p_l2={row['err_p_l2']:.3e}{extra}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        header = list(rows[-1].keys())
        filled = [{k: row.get(k, float("nan")) for k in header} for row in rows]
        write_csv(filled, out / "forward_mms.csv", header=header, meta=_meta(cfg))
    last = rows[-1]
    ok = (1.6 <= last["order_u_l2"] <= 2.2 and 0.8 <= last["order_u_h1"] <= 1.2
          and 0.8 <= last["order_p_l2"] <= 1.2)
    return 0 if ok else 1


def cmd_meshcheck(args) -> int:
    cfg = _load_config(args)
    mesh = generate_rect_mesh(cfg.nx, cfg.ny, cfg.lx, cfg.ly)
    report = check_mesh_regularity(mesh)
    print(f"{mesh.n_cells} cells, h_max={mesh.h_max:.4e}, "
          f"c_shape={report.c_shape:.3f}, c_contact={report.c_contact:.3f}, "
          f"c_boundary={report.c_boundary:.3f}, ok={report.ok}")
    for flag in report.flags:
        print(f"  degenerate: {flag} constant below {report.floor:g}", file=sys.stderr)
    return 0 if report.ok else 1


def cli(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hdivtopo",
        description="Divergence-free topology optimization benchmark runner.")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "solve": (cmd_solve, "multi-start benchmark solve, VTK + CSV report"),
        "converge": (cmd_converge, "nested-mesh convergence study"),
        "divtable": (cmd_divtable, "divergence norms of converged branches"),
        "forward-mms": (cmd_forward_mms, "manufactured-solution flow rates"),
        "meshcheck": (cmd_meshcheck, "mesh regularity report"),
    }
    for name, (fn, help_text) in specs.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config path")
        p.add_argument("--out", help="output directory")
        p.add_argument("--levels", type=int, help="number of nested levels")
        p.add_argument("--nx", type=int, help="base cells along x")
        p.add_argument("--ny", type=int, help="base cells along y")
        p.add_argument("--nu", type=float, help="viscosity")
        p.add_argument("--sigma", type=float, help="jump penalty")
        p.add_argument("--seeds", help="comma-separated seed names")
        p.add_argument("--deflate", action="store_true",
                       help="penalize already-found minimizers")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
