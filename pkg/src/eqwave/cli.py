"""Command-line experiment runner.

Configuration is an INI file::

    [experiment]
    scenario = standing_wave     ; standing_wave | reflection | obstacle | zero
    p = 1
    alpha = 0.6                  ; optional, default 1.5 (p=1) or 0.6 (p=2)
    n = 20                       ; mesh cells per side for `run` and `sweep-rho`
    levels = 5 10 20 40          ; strictly increasing, for `converge`
    mesh = meshes/square         ; optional Triangle files square.node/square.ele
    pattern = diagonal           ; diagonal | crisscross
    T = 10
    rhos = 1 0.5 0.25            ; default depends on the scenario
    sigma = 0.5                  ; pulse width for reflection and obstacle
    solver = cholesky            ; cholesky | cg

    [output]
    instantaneous = yes
    cumulative = yes
    vtk_times = 2.5 5

    [reference]                  ; obstacle only
    p = 2
    dt_divisor = 3
"""

from __future__ import annotations

import argparse
import configparser
import io
import math
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .experiment import RunOutput, convergence_table, run_experiment
from .mesh import Mesh, read_mesh
from .scenarios import SCENARIOS, ReferenceSpec, Scenario


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scenario: str = "standing_wave"
    p: int = 1
    alpha: float | None = None
    n: int | None = None
    levels: tuple[int, ...] = ()
    mesh: Path | None = None
    pattern: str = "diagonal"
    T: float | None = None
    rhos: tuple[float, ...] | None = None
    sigma: float | None = None
    solver: str = "cholesky"
    instantaneous: bool = True
    cumulative: bool = True
    vtk_times: tuple[float, ...] = ()
    reference: ReferenceSpec | None = None

    def build_scenario(self) -> Scenario:
        kwargs = {}
        if self.T is not None:
            kwargs["T"] = self.T
        if self.sigma is not None:
            if self.scenario not in ("reflection", "obstacle"):
                raise ConfigError(f"sigma is not a parameter of scenario {self.scenario!r}")
            kwargs["sigma"] = self.sigma
        sc = SCENARIOS[self.scenario](**kwargs)
        if self.rhos is not None:
            sc.rhos = self.rhos
        elif self.T is not None and self.scenario in ("reflection", "obstacle"):
            sc.rhos = (1.0 / self.T,)
        if self.reference is not None and sc.reference is not None:
            sc.reference = self.reference
        return sc

    def build_mesh(self, scenario: Scenario, n: int | None) -> Mesh:
        if self.mesh is not None:
            node = self.mesh.with_suffix(".node")
            ele = self.mesh.with_suffix(".ele")
            mesh = read_mesh(node.read_text(), ele.read_text(), scenario.bc_rule)
            return scenario.assign_regions(mesh)
        if n is None:
            raise ConfigError("no mesh: set 'n' or 'mesh' in [experiment]")
        return scenario.mesh(n, self.pattern)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " ")) from exc
    if not cp.has_section("experiment"):
        raise ConfigError(f"{path}: missing [experiment] section")
    ex = cp["experiment"]
    cfg = ExperimentConfig()
    try:
        cfg.scenario = ex.get("scenario", cfg.scenario)
        if cfg.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {cfg.scenario!r} (choose from {', '.join(SCENARIOS)})")
        cfg.p = ex.getint("p", cfg.p)
        if cfg.p not in (1, 2):
            raise ConfigError("p must be 1 or 2")
        if "alpha" in ex:
            cfg.alpha = ex.getfloat("alpha")
            if not cfg.alpha > 0:
                raise ConfigError("alpha must be positive")
        if "n" in ex:
            cfg.n = ex.getint("n")
        if "levels" in ex:
            cfg.levels = tuple(int(v) for v in _floats(ex["levels"]))
            if any(b <= a for a, b in zip(cfg.levels, cfg.levels[1:])):
                raise ConfigError("levels must be strictly increasing")
        if "mesh" in ex:
            cfg.mesh = (path.parent / ex["mesh"]).resolve()
            for suffix in (".node", ".ele"):
                if not cfg.mesh.with_suffix(suffix).is_file():
                    raise ConfigError(f"mesh file not found: {cfg.mesh.with_suffix(suffix)}")
        cfg.pattern = ex.get("pattern", cfg.pattern)
        if "T" in ex:
            cfg.T = ex.getfloat("T")
            if not cfg.T > 0:
                raise ConfigError("T must be positive")
        if "rhos" in ex:
            cfg.rhos = _floats(ex["rhos"])
            if not cfg.rhos or any(not r > 0 for r in cfg.rhos):
                raise ConfigError("every rho must be positive")
        if "sigma" in ex:
            cfg.sigma = ex.getfloat("sigma")
        cfg.solver = ex.get("solver", cfg.solver)
        if cp.has_section("output"):
            out = cp["output"]
            cfg.instantaneous = out.getboolean("instantaneous", cfg.instantaneous)
            cfg.cumulative = out.getboolean("cumulative", cfg.cumulative)
            cfg.vtk_times = _floats(out.get("vtk_times", ""))
        if cp.has_section("reference"):
            ref = cp["reference"]
            cfg.reference = ReferenceSpec(ref.getint("p", 2), ref.getint("dt_divisor", 3))
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


# --- output -------------------------------------------------------------------


def fmt(x: float) -> str:
    return "%.17g" % x


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def tsv(header: Sequence[str], rows) -> str:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(fmt(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


def rho_tag(rho: float) -> str:
    return f"{rho:.4f}"


def emit_vtk(mesh: Mesh, eta: np.ndarray, u: np.ndarray, path: str | Path) -> None:
    """Legacy ASCII VTK unstructured grid with cell scalar "eta" and point scalar "u"."""
    eta = np.asarray(eta, dtype=float)
    u = np.asarray(u, dtype=float)
    if eta.shape != (mesh.n_elements,):
        raise ValueError(f"eta has shape {eta.shape}, expected ({mesh.n_elements},)")
    if u.shape[0] < mesh.n_vertices:
        raise ValueError("u has fewer entries than the mesh has vertices")
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 3.0\neqwave snapshot\nASCII\nDATASET UNSTRUCTURED_GRID\n")
    buf.write(f"POINTS {mesh.n_vertices} double\n")
    for x, y in mesh.vertices:
        buf.write(f"{fmt(x)} {fmt(y)} 0\n")
    buf.write(f"CELLS {mesh.n_elements} {4 * mesh.n_elements}\n")
    for a, b, c in mesh.elements:
        buf.write(f"3 {a} {b} {c}\n")
    buf.write(f"CELL_TYPES {mesh.n_elements}\n")
    buf.write("5\n" * mesh.n_elements)
    buf.write(f"CELL_DATA {mesh.n_elements}\nSCALARS eta double 1\nLOOKUP_TABLE default\n")
    buf.writelines(fmt(v) + "\n" for v in eta)
    buf.write(f"POINT_DATA {mesh.n_vertices}\nSCALARS u double 1\nLOOKUP_TABLE default\n")
    buf.writelines(fmt(v) + "\n" for v in u[: mesh.n_vertices])
    write_atomic(Path(path), buf.getvalue())


def read_vtk(path: str | Path) -> dict:
    """Parse the subset of legacy VTK written by :func:`emit_vtk`."""
    tokens = Path(path).read_text().split("\n")
    out: dict = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].split()
        if not line:
            i += 1
            continue
        key = line[0]
        if key == "POINTS":
            n = int(line[1])
            out["points"] = np.array([[float(v) for v in tokens[i + 1 + k].split()] for k in range(n)])
            i += n + 1
        elif key == "CELLS":
            n = int(line[1])
            out["cells"] = np.array([[int(v) for v in tokens[i + 1 + k].split()[1:]] for k in range(n)])
            i += n + 1
        elif key == "CELL_TYPES":
            n = int(line[1])
            out["cell_types"] = np.array([int(tokens[i + 1 + k]) for k in range(n)])
            i += n + 1
        elif key == "SCALARS":
            name = line[1]
            count = len(out["cells"]) if "point_section" not in out else len(out["points"])
            out[name] = np.array([float(tokens[i + 2 + k]) for k in range(count)])
            i += count + 2
        elif key == "POINT_DATA":
            out["point_section"] = True
            i += 1
        else:
            i += 1
    out.pop("point_section", None)
    return out


def write_run(out: RunOutput, outdir: Path, cfg: ExperimentConfig) -> list[Path]:
    written = []
    tr = out.trace
    rhos = tr.rhos
    has_err = tr.has_error
    if cfg.instantaneous:
        rho0 = rhos[0]
        rows = [(t, e, tr.err[rho0][k] if has_err else float("nan")) for k, (t, e) in enumerate(zip(tr.times, tr.eta))]
        written.append(outdir / "inst.tsv")
        write_atomic(written[-1], tsv(("t", "est", "err"), rows))
    if cfg.cumulative:
        for rho in rhos:
            rows = [
                (t, math.sqrt(tr.lam2[rho][k]), math.sqrt(tr.cum2[rho][k]) if has_err else float("nan"))
                for k, t in enumerate(tr.times)
            ]
            written.append(outdir / f"cumu_{rho_tag(rho)}.tsv")
            write_atomic(written[-1], tsv(("t", "est", "err"), rows))
    written.append(outdir / "summary.tsv")
    write_atomic(written[-1], _summary(out))
    for snap in out.snapshots:
        written.append(outdir / f"snapshot_t{snap.t:.4f}.vtk")
        emit_vtk(out.mesh, snap.eta, snap.u, written[-1])
    return written


def _summary(out: RunOutput) -> str:
    rows = [(r.rho, r.estimate, r.error, r.effectivity, r.nr_dofs, r.h_max, r.dt) for r in out.reports]
    return tsv(("rho", "lambda", "err", "eff", "nr_dofs", "h_max", "dt"), rows)


# --- commands -----------------------------------------------------------------


def _run_one(cfg: ExperimentConfig, n: int | None, threads: int, vtk: bool = True) -> RunOutput:
    sc = cfg.build_scenario()
    mesh = cfg.build_mesh(sc, n)
    return run_experiment(
        sc,
        mesh,
        p=cfg.p,
        alpha=cfg.alpha,
        threads=threads,
        solver=cfg.solver,
        vtk_times=cfg.vtk_times if vtk else (),
    )


def run_single(cfg: ExperimentConfig, outdir: Path, threads: int = 1) -> list[Path]:
    n = cfg.n if cfg.n is not None else (cfg.levels[-1] if cfg.levels else None)
    return write_run(_run_one(cfg, n, threads), outdir, cfg)


def run_convergence(cfg: ExperimentConfig, outdir: Path, threads: int = 1) -> list[Path]:
    if cfg.mesh is not None:
        raise ConfigError("converge needs generated meshes; remove 'mesh' and set 'levels'")
    if len(cfg.levels) < 3:
        raise ConfigError("converge needs at least 3 levels")
    outputs = [_run_one(cfg, n, threads, vtk=False) for n in cfg.levels]
    header = ("nr_dofs", "est", "err", "eff", "eoc_est", "eoc_err")
    written = []
    for i, rho in enumerate(outputs[0].trace.rhos):
        rows = [(r.nr_dofs, r.est, r.err, r.eff, r.eoc_est, r.eoc_err) for r in convergence_table(outputs, rho)]
        text = tsv(header, rows)
        if i == 0:
            written.append(outdir / "conv.tsv")
            write_atomic(written[-1], text)
        written.append(outdir / f"conv_{rho_tag(rho)}.tsv")
        write_atomic(written[-1], text)
    return written


def run_sweep(cfg: ExperimentConfig, outdir: Path, threads: int = 1) -> list[Path]:
    n = cfg.n if cfg.n is not None else (cfg.levels[-1] if cfg.levels else None)
    out = _run_one(cfg, n, threads, vtk=False)
    path = outdir / "sweep.tsv"
    write_atomic(path, _summary(out))
    return [path]


COMMANDS = {"run": run_single, "converge": run_convergence, "sweep-rho": run_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqwave", description="Wave-equation runs with an equilibrated error estimator.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp_ = sub.add_parser(name)
        sp_.add_argument("config", help="INI configuration file")
        sp_.add_argument("--out", default=".", help="output directory (default: current directory)")
        sp_.add_argument("--threads", type=int, default=1, help="threads for the patch problems")
        sp_.add_argument("--seed", type=int, default=None, help="seed for randomized runs (unused by the built-in scenarios)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config)
        written = COMMANDS[args.command](cfg, Path(args.out), args.threads)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        msg = " ".join(str(exc).split())
        print(f"error\t{type(exc).__name__}\t{msg}", file=sys.stderr)
        return 1
    for path in written:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
