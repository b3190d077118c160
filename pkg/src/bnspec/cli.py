"""Command-line front end: configuration, subcommands and deterministic file output.

Configuration is a flat text file of ``section.key = value`` lines. Values are
Python-style literals; numeric expressions may use ``pi`` and ``+ - * / **``.
Text after ``#`` is a comment.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 solver error.
"""

from __future__ import annotations

import argparse
import ast
import csv
import io
import json
import logging
import math
import operator
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import BnspecError, ConfigError, SolverError
from .mesh import DomainKind, DomainSpec, build_mesh

log = logging.getLogger("bnspec")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


# ------------------------------------------------------------------ config


_BINARY = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_NAMES = {"pi": math.pi, "true": True, "false": False, "True": True, "False": False}


def _evaluate(node):
    if isinstance(node, ast.Expression):
        return _evaluate(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, str, bool)):
        return node.value
    if isinstance(node, ast.Name):
        # Unknown bare names are words, e.g. formats = [csv, json].
        return _NAMES.get(node.id, node.id)
    if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
        return _BINARY[type(node.op)](_evaluate(node.left), _evaluate(node.right))
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
        return _UNARY[type(node.op)](_evaluate(node.operand))
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_evaluate(e) for e in node.elts]
    raise ValueError(f"unsupported expression element {type(node).__name__}")


def parse_value(text: str):
    text = text.strip()
    try:
        return _evaluate(ast.parse(text, mode="eval"))
    except (SyntaxError, ValueError, ZeroDivisionError, TypeError):
        # Bare words are accepted as strings (e.g. domain.kind = Box3D).
        if text and all(c.isalnum() or c in "_-./" for c in text):
            return text
        raise ConfigError(f"cannot parse value {text!r}") from None


@dataclass
class DomainSection:
    kind: str = "RadialBall3D"
    resolution: int = 400
    box_lengths: tuple = (1.0, 1.0, 1.0)


@dataclass
class ProblemSection:
    lambda_: float | None = None
    lambda_grid: tuple = ()
    i: int = 0
    count: int = 10


@dataclass
class RelaxSection:
    eps_schedule: tuple = (1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4)
    tol_F: float = 1e-9
    tol_el: float = 1e-6
    final_tol_el: float = 1e-10
    max_iters: int = 500
    damping: float = 1.0
    certificate_tol: float = 1e-3
    attainment_margin: float = 0.02
    polish: bool = True


@dataclass
class MassSection:
    probes: tuple = ()
    bisect_tol: float | None = None
    probe_margin: float = 2.0


@dataclass
class OutputSection:
    directory: str = "."
    formats: tuple = ("csv", "json")


@dataclass
class RunConfig:
    domain: DomainSection = field(default_factory=DomainSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    relax: RelaxSection = field(default_factory=RelaxSection)
    mass: MassSection = field(default_factory=MassSection)
    output: OutputSection = field(default_factory=OutputSection)
    seed: int = 0

    def domain_spec(self) -> DomainSpec:
        return DomainSpec(self.domain.kind, self.domain.resolution, tuple(self.domain.box_lengths))

    def relax_options(self):
        from .relaxopt import RelaxOptions

        r = self.relax
        return RelaxOptions(
            max_iters=r.max_iters, tol_F=r.tol_F, tol_el=r.tol_el, final_tol_el=r.final_tol_el,
            damping=r.damping, certificate_tol=r.certificate_tol,
            attainment_margin=r.attainment_margin, polish=r.polish,
        )

    def probes(self, mesh) -> list:
        if self.mass.probes:
            return [np.atleast_1d(np.asarray(p, dtype=float)) for p in self.mass.probes]
        if mesh.is_radial:
            return [np.zeros(1)]
        return [0.5 * np.asarray(mesh.spec.box_lengths)]


_SECTIONS = {"domain": DomainSection, "problem": ProblemSection, "relax": RelaxSection,
             "mass": MassSection, "output": OutputSection}
_ALIASES = {("problem", "lambda"): "lambda_"}


def _coerce(section: str, key: str, value):
    def number(v, kind=float):
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{key} must be numeric, got {v!r}")
        if kind is int:
            if int(v) != v:
                raise ConfigError(f"{section}.{key} must be an integer, got {v!r}")
            return int(v)
        if not math.isfinite(v):
            raise ConfigError(f"{section}.{key} must be finite")
        return float(v)

    def numbers(v):
        if not isinstance(v, list):
            v = [v]
        return tuple(number(x) for x in v)

    name = f"{section}.{key}"
    if name == "domain.kind":
        try:
            return DomainKind(value).value
        except ValueError:
            raise ConfigError(f"domain.kind must be RadialBall3D or Box3D, got {value!r}") from None
    if name in ("domain.resolution", "problem.i", "problem.count", "relax.max_iters", "seed."):
        return number(value, int)
    if name in ("domain.box_lengths", "problem.lambda_grid", "relax.eps_schedule"):
        return numbers(value)
    if name == "mass.probes":
        if not isinstance(value, list) or not all(isinstance(p, list) for p in value):
            raise ConfigError("mass.probes must be a list of coordinate lists, e.g. [[0.5, 0.5, 0.5]]")
        return tuple(tuple(number(x) for x in p) for p in value)
    if name == "relax.polish":
        if not isinstance(value, bool):
            raise ConfigError("relax.polish must be true or false")
        return value
    if name == "output.directory":
        return str(value)
    if name == "output.formats":
        formats = tuple(value if isinstance(value, list) else [value])
        if not set(formats) <= {"csv", "json"}:
            raise ConfigError(f"output.formats must be a subset of csv, json, got {formats}")
        return formats
    return number(value)


def load_config(text: str) -> RunConfig:
    config = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        name, value = (part.strip() for part in line.split("=", 1))
        if name in seen:
            raise ConfigError(f"line {lineno}: duplicate key {name}")
        seen.add(name)
        parsed = parse_value(value)
        if name == "seed":
            config.seed = _coerce("seed", "", parsed)
            continue
        if "." not in name:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        section, key = name.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r}")
        attr = _ALIASES.get((section, key), key)
        if attr not in {f.name for f in fields(_SECTIONS[section])}:
            raise ConfigError(f"line {lineno}: unknown key {name!r}")
        setattr(getattr(config, section), attr, _coerce(section, key, parsed))
    _validate(config)
    return config


def _validate(config: RunConfig) -> None:
    d, p, r, m = config.domain, config.problem, config.relax, config.mass
    if d.resolution < 8:
        raise ConfigError("domain.resolution must be >= 8")
    if len(d.box_lengths) != 3 or min(d.box_lengths) <= 0:
        raise ConfigError("domain.box_lengths must be three positive numbers")
    if p.i < 0:
        raise ConfigError("problem.i must be >= 0")
    if p.count < 1:
        raise ConfigError("problem.count must be >= 1")
    if list(p.lambda_grid) != sorted(p.lambda_grid):
        raise ConfigError("problem.lambda_grid must be sorted")
    eps = r.eps_schedule
    if not eps or any(b >= a for a, b in zip(eps, eps[1:])) or eps[0] > 0.1 or not 0 < eps[-1] <= 1e-4:
        raise ConfigError("relax.eps_schedule must decrease strictly from <= 1e-1 to a value in (0, 1e-4]")
    for name in ("tol_F", "tol_el", "final_tol_el", "certificate_tol"):
        if not getattr(r, name) > 0:
            raise ConfigError(f"relax.{name} must be positive")
    if r.max_iters < 1:
        raise ConfigError("relax.max_iters must be >= 1")
    if not 0 < r.damping <= 1:
        raise ConfigError("relax.damping must lie in (0, 1]")
    if not 0 <= r.attainment_margin < 1:
        raise ConfigError("relax.attainment_margin must lie in [0, 1)")
    if m.probe_margin < 2:
        raise ConfigError("mass.probe_margin must be at least 2 cells")
    if m.bisect_tol is not None and not m.bisect_tol > 0:
        raise ConfigError("mass.bisect_tol must be positive")


# ------------------------------------------------------------------ output


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def csv_text(header: list[str], rows: list[list]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buffer.getvalue()


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_jsonable(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def json_text(payload: dict) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2, allow_nan=False) + "\n"


def _write_all(directory: Path, files: dict[str, str]) -> None:
    """Write every output only after all computation succeeded."""
    directory.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        with open(directory / name, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)


# ------------------------------------------------------------------ commands


def _mesh_and_table(config: RunConfig, count: int | None = None):
    from .spectral import dirichlet_spectrum

    mesh = build_mesh(config.domain_spec())
    count = max(config.problem.count, config.problem.i + 3) if count is None else count
    count = min(count, mesh.size - 1)
    table = dirichlet_spectrum(mesh, count)
    return mesh, table


def _lambda(config: RunConfig) -> float:
    if config.problem.lambda_ is None:
        raise ConfigError("problem.lambda is required for this command")
    return float(config.problem.lambda_)


def cmd_spectrum(config: RunConfig) -> dict[str, str]:
    mesh, table = _mesh_and_table(config, config.problem.count)
    rows = []
    for p, lam in enumerate(table.lambdas_with_mult):
        cluster = int(table.cluster_index[p])
        rows.append([p + 1, lam, table.distinct_Lambdas[cluster - 1], int(table.multiplicities[cluster - 1])])
    return {"spectrum.csv": csv_text(["index", "lambda", "Lambda_cluster", "multiplicity"], rows)}


def cmd_minimize(config: RunConfig) -> dict[str, str]:
    from .relaxopt import continuation_minimize, extract_solution
    from .spectral import multiplicity_index

    lam = _lambda(config)
    mesh, table = _mesh_and_table(config)
    i = table.interval_of(lam)
    if i != config.problem.i:
        raise ConfigError(f"problem.lambda = {lam} lies in interval {i}, not problem.i = {config.problem.i}")
    k = multiplicity_index(table, i)
    result = continuation_minimize(mesh, lam, k, config.relax.eps_schedule, options=config.relax_options())
    sol = extract_solution(mesh, lam, result.pair, i)
    stages = [
        {"epsilon": s.epsilon, "gamma1": s.gamma1, "gamma2": s.gamma2, "F_value": s.F_value,
         "mu_k": s.mu_k, "iterations": len(s.iteration_log) - 1, "el_residual": s.el_residual,
         "sandwich_constant": s.sandwich_constant, "converged": s.converged}
        for s in result.stages
    ]
    payload = {
        "lambda": lam, "i": i, "k": k, "mu_star": result.mu_star, "energy": sol.energy,
        "attained": result.attained, "certified": result.certified,
        "certificate": result.certificate, "attainment_gate": result.gate,
        "K_inv_sq": result.k_inv_sq, "pde_residual": sol.residual,
        "pde_relative_residual": sol.relative_residual, "nodal_count": sol.nodal_count,
        "stages": stages, "domain": config.domain.kind, "resolution": config.domain.resolution,
    }
    coords = mesh.nodes
    header = ["node"] + (["r"] if mesh.is_radial else ["x", "y", "z"]) + ["u", "phi", "psi"]
    rows = [
        [j, *coords[j], result.u.values[j], result.pair.phi[j], sol.psi[j]] for j in range(mesh.size)
    ]
    return {"minimizer.json": json_text(payload), "solution.csv": csv_text(header, rows)}


def cmd_sweep(config: RunConfig) -> dict[str, str]:
    from .analysis import sweep_energy

    grid = config.problem.lambda_grid
    if not grid:
        raise ConfigError("problem.lambda_grid is required for sweep")
    mesh, table = _mesh_and_table(config, max(config.problem.count, 8))
    records = sweep_energy(mesh, table, grid, options=config.relax_options(),
                           schedule=config.relax.eps_schedule)
    for r in records:
        if r.error:
            log.warning("lambda=%.10g: %s", r.lambda_, r.error)
    rows = [[r.lambda_, r.i, r.k, r.mu_star, r.energy, r.attained, r.wall_time] for r in records]
    return {"sweep.csv": csv_text(["lambda", "i", "k", "mu_star", "energy", "attained", "wall_time"], rows)}


def cmd_mass(config: RunConfig) -> dict[str, str]:
    from .greenmass import mass_field

    grid = config.problem.lambda_grid or ((_lambda(config),) if config.problem.lambda_ is not None else ())
    if not grid:
        raise ConfigError("mass needs problem.lambda or problem.lambda_grid")
    mesh, table = _mesh_and_table(config)
    probes = config.probes(mesh)
    coords = ["r"] if mesh.is_radial else ["x", "y", "z"]
    rows = []
    for lam in grid:
        result = mass_field(mesh, lam, probes, table, config.mass.probe_margin)
        for point, value in zip(result.probes, result.values):
            rows.append([lam, *point, value])
    return {"mass.csv": csv_text(["lambda", *coords, "m_lambda"], rows)}


def cmd_lambda_star(config: RunConfig) -> dict[str, str]:
    from .greenmass import lambda_star

    mesh, table = _mesh_and_table(config)
    estimate = lambda_star(mesh, table, config.problem.i, config.probes(mesh),
                           config.mass.bisect_tol, config.mass.probe_margin)
    payload = {"i": estimate.i, "lambda_star": estimate.lambda_star,
               "bracket": list(estimate.bracket), "probes": [p.tolist() for p in config.probes(mesh)],
               "Lambda_i": table.Lambda(estimate.i), "Lambda_i_plus_1": table.Lambda(estimate.i + 1),
               "note": estimate.note}
    return {"lambda_star.json": json_text(payload)}


def cmd_verify(config: RunConfig, inject_fault: bool = False) -> tuple[dict[str, str], bool]:
    from .verify import run_suite

    results = run_suite(config, inject_fault=inject_fault)
    failed = [r for r in results if r["status"] == "fail"]
    payload = {"checks": results, "failed": len(failed),
               "passed": sum(r["status"] == "pass" for r in results),
               "skipped": sum(r["status"] == "skip" for r in results)}
    return {"verify.json": json_text(payload)}, not failed


# ------------------------------------------------------------------ entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnspec", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["spectrum", "minimize", "sweep", "mass", "lambda-star", "verify"])
    parser.add_argument("--config", type=Path, help="flat section.key = value file")
    parser.add_argument("--out", type=Path, help="output directory (overrides output.directory)")
    parser.add_argument("--threads", type=int, default=1, help="BLAS/LAPACK thread limit")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config seed)")
    parser.add_argument("--inject-fault", action="store_true",
                        help="verify only: flip one invariant to exercise the failure path")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = args.config.read_text(encoding="utf-8") if args.config else ""
        config = load_config(text)
        if args.seed is not None:
            config.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out = args.out if args.out is not None else Path(config.output.directory)
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from threadpoolctl import threadpool_limits

    commands = {"spectrum": cmd_spectrum, "minimize": cmd_minimize, "sweep": cmd_sweep,
                "mass": cmd_mass, "lambda-star": cmd_lambda_star}
    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "verify":
                files, ok = cmd_verify(config, args.inject_fault)
            else:
                files, ok = commands[args.command](config), True
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, BnspecError) as exc:
        detail = getattr(exc, "diagnostics", None)
        print(f"solver error: {exc}" + (f" {detail}" if detail else ""), file=sys.stderr)
        return EXIT_SOLVER
    formats = set(config.output.formats)
    _write_all(out, {name: text for name, text in files.items() if name.rsplit(".", 1)[1] in formats})
    return EXIT_OK if ok else EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
