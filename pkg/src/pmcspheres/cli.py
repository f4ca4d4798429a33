"""Batch front end: ``pmcspheres solve|verify|index --config C --out D``.

Exit codes: 0 success, 1 input or validation error (including a base point
that is not a usable critical point), 2 numerical failure or partial family.
Outputs are byte-reproducible: floats in CSV use 17 significant digits and
JSON is written with sorted keys and no timings.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import exprfield, geometry, meancurv, reduction, sphereharm
from .meancurv import PrescribedProblem
from .reduction import SolverSettings
from .sphereharm import SphereGrid

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

_EXPR = {"type": "string", "minLength": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["dim", "metric", "f"],
    "additionalProperties": False,
    "properties": {
        "dim": {"enum": [2, 3]},
        "metric": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "name": {"enum": ["euclidean", "conformal", "diagonal"]},
                "epsilon": {"type": "number"},
                "exprs": {"type": "array", "items": _EXPR},
                "g": {"type": "array", "items": {"type": "array", "items": _EXPR}},
            },
        },
        "f": _EXPR,
        "chart_radius": _POS,
        "L": {"type": "integer", "minimum": 1, "maximum": 64},
        "rho": _POS,
        "mode": {"enum": ["auto", "nondegenerate", "degenerate", "constant"]},
        "r_grid": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "min": _POS,
                "max": _POS,
                "count": {"type": "integer", "minimum": 1},
                "spacing": {"enum": ["log", "linear"]},
            },
        },
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "inner": _POS,
                "outer": _POS,
                "leaf": _POS,
                "degenerate": _POS,
                "hessian_cond_max": _POS,
                "inner_max_iter": {"type": "integer", "minimum": 1},
                "outer_max_iter": {"type": "integer", "minimum": 1},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "expansion_r": {"type": "array", "items": _POS, "minItems": 4},
                "uniqueness_r": _POS,
                "seeds": {"type": "integer", "minimum": 3},
                "monomial_degree": {"type": "integer", "minimum": 0},
            },
        },
    },
}

_TOLERANCE_FIELDS = {
    "inner": "inner_tol",
    "outer": "outer_tol",
    "leaf": "leaf_tol",
    "degenerate": "degenerate_tol",
    "hessian_cond_max": "hessian_cond_max",
    "inner_max_iter": "inner_max_iter",
    "outer_max_iter": "outer_max_iter",
}


class ConfigError(ValueError):
    """Validation failure; ``problems`` holds (field path, message) pairs."""

    def __init__(self, problems):
        self.problems = sorted(problems)
        super().__init__("; ".join(f"{p}: {m}" if p else m for p, m in self.problems))


def _path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out


def _schema_problems(data) -> list[tuple[str, str]]:
    problems = []
    for err in jsonschema.Draft202012Validator(CONFIG_SCHEMA).iter_errors(data):
        base = list(err.absolute_path)
        if err.validator == "required":
            for key in err.validator_value:
                if key not in err.instance:
                    problems.append((_path(base + [key]), "required field is missing"))
        elif err.validator == "additionalProperties":
            known = err.schema.get("properties", {})
            for key in sorted(set(err.instance) - set(known)):
                problems.append((_path(base + [key]), "unknown field"))
        else:
            problems.append((_path(base), err.message))
    return problems


@dataclass(frozen=True)
class RGrid:
    min: float = 1e-3
    max: float = 5e-2
    count: int = 10
    spacing: str = "log"

    def values(self) -> np.ndarray:
        if self.count == 1:
            return np.array([self.min])
        if self.spacing == "log":
            return np.geomspace(self.min, self.max, self.count)
        return np.linspace(self.min, self.max, self.count)


@dataclass(frozen=True)
class VerifySettings:
    expansion_r: tuple = (0.1, 0.05, 0.025, 0.0125)
    uniqueness_r: float = 0.02
    seeds: int = 5
    monomial_degree: int = 8


@dataclass(frozen=True)
class ProblemConfig:
    """Validated problem description. Build with :meth:`from_dict` or :meth:`load`."""

    dim: int
    metric: dict
    f: str
    chart_radius: float = 1.0
    L: int = 16
    rho: float | None = None
    mode: str = "auto"
    r_grid: RGrid = field(default_factory=RGrid)
    settings: SolverSettings = field(default_factory=SolverSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)

    @classmethod
    def load(cls, path) -> "ProblemConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([("", f"cannot read config: {exc}")]) from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([("", f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}")]) from exc
        return cls.from_dict(data)

    @classmethod
    def from_dict(cls, data) -> "ProblemConfig":
        problems = _schema_problems(data)
        if problems:
            raise ConfigError(problems)
        dim = data["dim"]
        metric = dict(data["metric"])
        problems += _metric_problems(metric, dim)
        problems += _expr_problems("f", data["f"], dim)
        grid = RGrid(**data.get("r_grid", {}))
        radius = float(data.get("chart_radius", 1.0))
        if grid.count > 1 and not grid.max > grid.min:
            problems.append(("r_grid.max", "must exceed r_grid.min"))
        if not grid.max < radius / 4:
            problems.append(("r_grid.max", f"must be below chart_radius/4 = {radius / 4:g}"))
        if not problems:
            f0 = float(exprfield.evaluate(exprfield.parse(data["f"], dim), np.zeros(dim)))
            if not f0 > 0:
                problems.append(("f", f"must be positive at the origin, got {f0:g}"))
        if problems:
            raise ConfigError(problems)
        tol = data.get("tolerances", {})
        settings = SolverSettings(**{_TOLERANCE_FIELDS[k]: v for k, v in tol.items()})
        ver = dict(data.get("verify", {}))
        if "expansion_r" in ver:
            ver["expansion_r"] = tuple(ver["expansion_r"])
        return cls(dim, metric, data["f"], radius, data.get("L", 16), data.get("rho"), data.get("mode", "auto"),
                   grid, settings, VerifySettings(**ver))

    def chart(self) -> geometry.MetricChart:
        m, R = self.metric, self.chart_radius
        try:
            if "g" in m:
                return geometry.chart_from_strings(m["g"], R)
            if m["name"] == "euclidean":
                return geometry.euclidean(self.dim, R)
            if m["name"] == "conformal":
                return geometry.conformal(self.dim, m["epsilon"], R)
            return geometry.diagonal(m["exprs"], R)
        except geometry.GeometryError as exc:
            raise ConfigError([("metric", str(exc))]) from exc

    def problem(self) -> PrescribedProblem:
        return PrescribedProblem(self.chart(), exprfield.parse(self.f, self.dim))

    def grid(self) -> SphereGrid:
        return SphereGrid(self.dim - 1, self.L)

    def as_dict(self) -> dict:
        """Canonical form with defaults filled in; loads back to an equal config."""
        out = {
            "dim": self.dim,
            "metric": self.metric,
            "f": self.f,
            "chart_radius": self.chart_radius,
            "L": self.L,
            "rho": self.rho,
            "mode": self.mode,
            "r_grid": asdict(self.r_grid),
            "tolerances": {k: getattr(self.settings, v) for k, v in _TOLERANCE_FIELDS.items()},
            "verify": {**asdict(self.verify), "expansion_r": list(self.verify.expansion_r)},
        }
        if self.rho is None:
            del out["rho"]
        return out


def _expr_problems(path: str, text: str, dim: int) -> list[tuple[str, str]]:
    try:
        exprfield.parse(text, dim)
    except exprfield.ExprError as exc:
        return [(path, str(exc))]
    return []


def _metric_problems(metric: dict, dim: int) -> list[tuple[str, str]]:
    if ("name" in metric) == ("g" in metric):
        return [("metric", "give exactly one of 'name' (builtin) or 'g' (explicit components)")]
    if "g" in metric:
        rows = metric["g"]
        if len(rows) != dim or any(len(row) != dim for row in rows):
            return [("metric.g", f"must be a {dim} x {dim} array of expressions")]
        out = []
        for i, row in enumerate(rows):
            for j, text in enumerate(row):
                out += _expr_problems(f"metric.g[{i}][{j}]", text, dim)
        return out
    name, out = metric["name"], []
    extra = {"euclidean": set(), "conformal": {"epsilon"}, "diagonal": {"exprs"}}[name]
    for key in sorted(set(metric) - {"name"} - extra):
        out.append((f"metric.{key}", f"not a parameter of the {name} metric"))
    for key in sorted(extra - set(metric)):
        out.append((f"metric.{key}", f"required for the {name} metric"))
    if name == "diagonal" and "exprs" in metric:
        if len(metric["exprs"]) != dim:
            out.append(("metric.exprs", f"needs {dim} expressions"))
        else:
            for i, text in enumerate(metric["exprs"]):
                out += _expr_problems(f"metric.exprs[{i}]", text, dim)
    return out


# --------------------------------------------------------------------------
# serialization


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else str(x)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


LEAF_COLUMNS = ("r", "tau", "residual_sup", "pi_residual", "G_norm", "kernel_part",
                "inner_iters", "inner_total", "outer_iters")


def leaves_csv(leaves, dim: int) -> str:
    """Leaf table. Column order: r, tau_1..tau_dim, residual_sup, pi_residual,
    G_norm, kernel_part, inner_iters, inner_total, outer_iters."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["r"] + [f"tau_{k + 1}" for k in range(dim)] + list(LEAF_COLUMNS[2:]))
    for lf in leaves:
        w.writerow([_fmt(lf.r)] + [_fmt(t) for t in lf.tau_bar]
                   + [_fmt(lf.residual_sup), _fmt(lf.pi_residual), _fmt(lf.G_norm), _fmt(lf.kernel_part),
                      lf.inner_iters, lf.inner_total, lf.outer_iters])
    return buf.getvalue()


def _write(out: Path, name: str, text: str):
    path = out / name
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# commands


@dataclass
class CommandResult:
    code: int
    report: dict
    message: str = ""


_REFUSALS = (reduction.NoCriticalPointError, reduction.ZeroDegreeError, reduction.BoundaryZeroError,
             reduction.HomotopyError)


def cmd_solve(config: ProblemConfig, out: Path | None = None) -> CommandResult:
    """Build the family of leaves and write leaves.csv, coeffs/ and report.json."""
    problem = config.problem()
    report = {"command": "solve", "config": config.as_dict()}
    try:
        decision = reduction.select_mode(problem, config.mode, config.settings, config.rho)
    except _REFUSALS as exc:
        report.update(status="refused", error=f"{type(exc).__name__}: {exc}")
        if out is not None:
            _write(out, "report.json", dump_json(report))
        return CommandResult(EXIT_INPUT, report, f"cannot solve: {exc}")
    family = reduction.build_family(problem, config.r_grid.values(), decision.mode, config.grid(),
                                    config.settings, config.rho)
    report.update(
        mode=decision.as_dict(),
        leaves=len(family.leaves),
        requested=config.r_grid.count,
        complete=family.complete,
        failure=family.failure,
        failed_r=family.failed_r,
        max_residual=max((lf.residual_sup for lf in family.leaves), default=None),
        status="ok" if family.complete else "partial",
    )
    if out is not None:
        _write(out, "leaves.csv", leaves_csv(family.leaves, config.dim))
        for k, lf in enumerate(family.leaves):
            _write(out, f"coeffs/leaf_{k}.csv", lf.u.to_csv())
        _write(out, "report.json", dump_json(report))
    if family.complete:
        return CommandResult(EXIT_OK, report, f"{len(family.leaves)} leaves, mode {decision.mode}")
    return CommandResult(EXIT_NUMERIC, report,
                         f"partial family: {len(family.leaves)} of {config.r_grid.count} leaves ({family.failure})")


def cmd_index(config: ProblemConfig, out: Path | None = None) -> CommandResult:
    """Index of the gradient field of f at the base point."""
    problem = config.problem()
    report = {"command": "index", "config": config.as_dict()}
    try:
        deg = reduction.index_gradient(problem, config.rho)
    except reduction.DegreeError as exc:
        report.update(status="error", error=f"{type(exc).__name__}: {exc}")
        if out is not None:
            _write(out, "report.json", dump_json(report))
        return CommandResult(EXIT_INPUT, report, f"index undefined: {exc}")
    report.update(status="ok", **deg.as_dict())
    if out is not None:
        _write(out, "report.json", dump_json(report))
    text = f"degree {deg.degree}\nhomotopy_ok {str(deg.homotopy_ok).lower()}\nrho {_fmt(deg.rho)}"
    return CommandResult(EXIT_OK, report, text)


def _check_monomials(config: ProblemConfig) -> dict:
    err, where = sphereharm.monomial_identity_error(config.dim - 1, config.verify.monomial_degree, config.L)
    return {"status": "pass" if err <= 1e-10 else "fail", "max_error": err, "worst_exponents": list(where),
            "tolerance": 1e-10}


def _check_expansion(config: ProblemConfig) -> dict:
    rep = meancurv.expansion_residuals(config.problem(), config.verify.expansion_r, config.grid())
    ok = all(rep.passed(k) for k in rep.remainders)
    return {"status": "pass" if ok else "fail", "min_slope": 2.9, **rep.as_dict(),
            "failing": [k for k in rep.remainders if not rep.passed(k)]}


def _check_u0(config: ProblemConfig) -> dict:
    problem, grid = config.problem(), config.grid()
    rhs = reduction.u0_rhs(problem, grid)
    u0 = reduction.solve_u0(problem, grid)
    res = (sphereharm.laplace_beltrami(u0) + u0 * problem.n - sphereharm.project_Kperp(rhs)).sup()
    kern = sphereharm.project_K(u0).sup()
    ok = res <= 1e-10 and kern <= 1e-10
    return {"status": "pass" if ok else "fail", "residual": res, "kernel_part": kern, "u0_sup": u0.sup(),
            "tolerance": 1e-10}


def _check_foliation(config: ProblemConfig) -> dict:
    problem = config.problem()
    decision = reduction.select_mode(problem, config.mode, config.settings, config.rho)
    family = reduction.build_family(problem, config.r_grid.values(), decision.mode, config.grid(),
                                    config.settings, config.rho)
    if not family.complete:
        return {"status": "fail", "reason": family.failure, "leaves": len(family.leaves)}
    if len(family.leaves) < 4:
        return {"status": "skipped", "reason": "fewer than 4 leaves"}
    rep = reduction.foliation_check(problem, family.leaves, check_slope=decision.mode == "nondegenerate")
    return {"status": "pass" if rep.passed else "fail", **rep.as_dict(), "leaves": len(family.leaves),
            "max_residual": max(lf.residual_sup for lf in family.leaves)}


def _check_uniqueness(config: ProblemConfig) -> dict:
    problem = config.problem()
    decision = reduction.select_mode(problem, config.mode, config.settings, config.rho)
    if decision.mode == "degenerate":
        return {"status": "skipped", "reason": "no uniqueness is expected at a degenerate critical point"}
    rep = reduction.uniqueness_probe(problem, config.verify.uniqueness_r, config.verify.seeds, config.grid(),
                                     config.rho, settings=config.settings)
    return {"status": "pass" if rep.passed else "fail", **rep.as_dict()}


VERIFY_CHECKS = {
    "monomial_integrals": _check_monomials,
    "expansions": _check_expansion,
    "u0_residual": _check_u0,
    "foliation": _check_foliation,
    "uniqueness": _check_uniqueness,
}


def _run_check(func, config) -> dict:
    try:
        return func(config)
    except Exception as exc:  # reported by name, never fatal to the other checks
        return {"status": "fail", "error": f"{type(exc).__name__}: {exc}"}


def cmd_verify(config: ProblemConfig, out: Path | None = None, jobs: int = 1) -> CommandResult:
    """Run every verification check; the report order does not depend on ``jobs``."""
    names = list(VERIFY_CHECKS)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda k: _run_check(VERIFY_CHECKS[k], config), names))
    else:
        results = [_run_check(VERIFY_CHECKS[k], config) for k in names]
    checks = dict(zip(names, results))
    failing = [k for k, v in checks.items() if v["status"] == "fail"]
    report = {"command": "verify", "config": config.as_dict(), "checks": checks, "failing": failing,
              "passed": not failing}
    if out is not None:
        _write(out, "report.json", dump_json(report))
    lines = [f"{k}: {v['status']}" for k, v in checks.items()]
    return CommandResult(EXIT_OK if not failing else EXIT_NUMERIC, report, "\n".join(lines))


# --------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmcspheres",
                                     description="Small spheres with prescribed mean curvature.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("solve", "build a family of leaves"), ("verify", "run the verification checks"),
                       ("index", "index of grad f at the base point")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="problem configuration (JSON)")
        p.add_argument("--out", default=None, help="output directory")
        if name == "verify":
            p.add_argument("--jobs", type=int, default=1, help="run independent checks in parallel")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = ProblemConfig.load(args.config)
        out = Path(args.out) if args.out else None
        if args.command == "solve":
            result = cmd_solve(config, out)
        elif args.command == "index":
            result = cmd_index(config, out)
        else:
            result = cmd_verify(config, out, max(1, args.jobs))
    except ConfigError as exc:
        for path, msg in exc.problems:
            print(f"config error at {path or '<root>'}: {msg}", file=sys.stderr)
        return EXIT_INPUT
    stream = sys.stdout if result.code == EXIT_OK else sys.stderr
    if result.message:
        print(result.message, file=stream)
    return result.code


if __name__ == "__main__":
    sys.exit(main())
