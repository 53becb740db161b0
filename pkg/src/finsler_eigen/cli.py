"""Command-line front end: studies, CSV/JSON/SVG output and the inequality report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .anisotropy import norm_from_json, wulff_measure
from .convexgeom import ConvexPolygon, MetricReport, builtin_domain, diameter, metric_report, wulff_polygon
from .errors import ConfigError, SolverError
from .spectra import (EigenResult, SolverOptions, dirichlet_eigenvalue, eigen_sweep, limit_eigenvalues,
                      neumann_eigenvalue, pi_p, spindle_limit_study)

EXIT_OK, EXIT_VIOLATION, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3, 4
DEFAULT_CONFIG = {
    "norm": {"kind": "lq", "q": 2.0},
    "domain": "square",
    "p_list": [2, 4, 8],
    "mesh_h": 0.05,
    "seeds": [0],
    "output_dir": "out",
}


def fmt(x):
    """Pin floats to 9 significant digits."""
    return float(f"{x:.9g}")


def _round(obj):
    if isinstance(obj, float):
        return fmt(obj) if math.isfinite(obj) else str(obj)
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item())
    return obj


def dumps(obj):
    return json.dumps(_round(obj), indent=2, sort_keys=True) + "\n"


@dataclass
class StudyConfig:
    norm: dict
    domain: object
    p_list: list
    mesh_h: float
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "out"
    mode: str = "neumann"
    spindle: dict = field(default_factory=lambda: {"d": 2.0, "p": 4.0, "ks": [4, 8, 16]})
    candidate: dict = field(default_factory=lambda: {"kind": "cone_pair"})

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        merged = {**DEFAULT_CONFIG, **raw}
        known = set(cls.__dataclass_fields__)
        extra = set(merged) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def validate(self):
        ps = [float(p) for p in self.p_list]
        if not ps or ps != sorted(ps):
            raise ConfigError("p_list must be non-empty and sorted ascending")
        if not float(self.mesh_h) > 0:
            raise ConfigError("mesh_h must be positive")
        if self.mode not in ("neumann", "dirichlet"):
            raise ConfigError("mode must be 'neumann' or 'dirichlet'")
        self.p_list = ps
        self.mesh_h = float(self.mesh_h)
        # parse eagerly so that bad norms/domains fail before any work
        self.norm_spec()
        self.polygon()

    def norm_spec(self):
        return norm_from_json(self.norm)

    def polygon(self) -> ConvexPolygon:
        if isinstance(self.domain, str):
            return builtin_domain(self.domain, self.norm_spec())
        return ConvexPolygon.from_json(self.domain)

    @property
    def domain_id(self):
        return self.domain if isinstance(self.domain, str) else "custom"

    @property
    def norm_id(self):
        return json.dumps(self.norm, sort_keys=True, separators=(",", ":"))

    def digest(self):
        """SHA-256 of the canonical config (the output directory is not part of it)."""
        body = {k: v for k, v in asdict(self).items() if k != "output_dir"}
        text = json.dumps(_round(body), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def load_config(path=None, seed=None, out=None) -> StudyConfig:
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if seed is not None:
        raw = {**raw, "seeds": [int(seed)]}
    if out is not None:
        raw = {**raw, "output_dir": out}
    return StudyConfig.from_dict(raw)


def _write(cfg, name, text):
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, name), "w", newline="") as fh:
        fh.write(text)


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def identity_residuals(F, n=2000, seed=0):
    """Max residuals of the norm identities at random points."""
    rng = np.random.default_rng(seed)
    xi = rng.standard_normal((n, 2))
    eta = rng.standard_normal((n, 2))
    Fo = F.polar()
    f, fo = F.evaluate(xi), Fo.evaluate(xi)
    g = F.gradient(xi)
    return {
        "euler": float(np.max(np.abs((g * xi).sum(axis=1) - f) / f)),
        "unit_dual_gradient": float(np.max(np.abs(Fo.evaluate(g) - 1.0))),
        "inverse_gradient": float(np.max(np.linalg.norm(fo[:, None] * F.gradient(Fo.gradient(xi)) - xi, axis=1)
                                         / np.linalg.norm(xi, axis=1))),
        "hessian_kernel": float(np.max(np.linalg.norm(np.einsum("nij,nj->ni", F.hessian(xi), xi), axis=1)
                                       / np.linalg.norm(xi, axis=1))),
        "scalar_product_excess": float(max(0.0, np.max(np.abs((xi * eta).sum(axis=1))
                                                       - F.evaluate(xi) * Fo.evaluate(eta)))),
    }


def cmd_norm_info(cfg: StudyConfig):
    """Wulff measure, norm bounds and identity residuals."""
    F = cfg.norm_spec()
    info = {"norm": cfg.norm, "kappa": wulff_measure(F), "alpha": F.alpha, "beta": F.beta,
            "residuals": identity_residuals(F, seed=cfg.seeds[0])}
    text = dumps(info)
    _write(cfg, "norm_info.json", text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_geometry(cfg: StudyConfig):
    """Diameter, inradius and isodiametric ratio as one CSV row."""
    F = cfg.norm_spec()
    rep = metric_report(F, cfg.polygon())
    text = _csv([rep.csv_row().strip().split(",")], MetricReport.CSV_FIELDS)
    _write(cfg, "geometry.csv", text)
    sys.stdout.write(text)
    return EXIT_OK


def _solve_one(args):
    norm, domain, p, h, mode, seed = args
    cfg = StudyConfig.from_dict({"norm": norm, "domain": domain, "p_list": [p], "mesh_h": h, "mode": mode})
    solve = neumann_eigenvalue if mode == "neumann" else dirichlet_eigenvalue
    return solve(cfg.norm_spec(), cfg.polygon(), p, h, SolverOptions(seed=seed))


def _pool_map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def _emit_eigen(cfg, results, stem):
    rows = [r.row(cfg.domain_id, cfg.norm_id) for r in results]
    text = _csv(rows, EigenResult.CSV_FIELDS)
    _write(cfg, f"{stem}.csv", text)
    _write(cfg, f"{stem}.json", dumps([r.to_json(cfg.domain_id, cfg.norm_id) for r in results]))
    for r in results:
        _write(cfg, f"{stem}_{r.mode}_p{r.p:g}.svg",
               r.field.to_svg(title=f"{r.mode} p={r.p:g} lambda={r.lam:.9g}"))
    sys.stdout.write(text)


def cmd_eigen(cfg: StudyConfig, jobs=1):
    """Independent eigen-solves, one per exponent."""
    tasks = [(cfg.norm, cfg.domain, p, cfg.mesh_h, cfg.mode, cfg.seeds[0]) for p in cfg.p_list]
    _emit_eigen(cfg, _pool_map(_solve_one, tasks, jobs), "eigen")
    return EXIT_OK


def cmd_sweep_p(cfg: StudyConfig):
    """One continuation chain through the exponent list."""
    res = eigen_sweep(cfg.norm_spec(), cfg.polygon(), cfg.p_list, cfg.mesh_h, cfg.mode,
                      SolverOptions(seed=cfg.seeds[0]))
    _emit_eigen(cfg, res, "sweep")
    return EXIT_OK


def cmd_spindle_study(cfg: StudyConfig):
    """Neumann values on spindles against the Wulff Dirichlet bound."""
    F = cfg.norm_spec()
    s = cfg.spindle
    rows, flags = spindle_limit_study(F, float(s["d"]), float(s["p"]), [int(k) for k in s["ks"]],
                                      cfg.mesh_h, SolverOptions(seed=cfg.seeds[0]))
    out = [[r.k, f"{r.diameter:.9g}", f"{r.neumann:.9g}", f"{r.upper:.9g}", f"{r.gap:.9g}",
            str(r.strict).lower()] for r in rows]
    text = _csv(out, ["k", "diameter", "neumann", "upper", "gap", "strict"])
    _write(cfg, "spindle.csv", text)
    sys.stdout.write(text)
    if flags:
        sys.stderr.write(f"non-monotone gap steps: {flags}\n")
    return EXIT_OK if all(r.strict for r in rows) else EXIT_VIOLATION


def cmd_viscosity_scan(cfg: StudyConfig):
    """Residual screen of an ∞-eigenvalue candidate."""
    from .viscosity import Tabulated, cone_pair, residual_scan

    F = cfg.norm_spec()
    omega = cfg.polygon()
    kind = cfg.candidate.get("kind", "cone_pair")
    if kind == "cone_pair":
        diam, a, b = diameter(F, omega)
        cand, lam = cone_pair(F, a, b), 2.0 / diam
    elif kind == "eigen":
        p = float(cfg.candidate.get("p", cfg.p_list[-1]))
        r = neumann_eigenvalue(F, omega, p, cfg.mesh_h, SolverOptions(seed=cfg.seeds[0]))
        cand, lam = Tabulated(r.field), r.lam
    else:
        raise ConfigError(f"unknown candidate kind {kind!r}")
    rep = residual_scan(F, omega, cand, lam)
    text = dumps(rep.to_json())
    _write(cfg, "viscosity_scan.json", text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- report

@dataclass
class ReportRow:
    name: str
    lhs: float
    rhs: float
    relation: str  # "<=" or "<"
    tol: float = 1e-9

    @property
    def margin(self):
        return self.rhs - self.lhs

    @property
    def passed(self):
        if self.relation == "<":
            return self.margin > 0
        return self.margin >= -self.tol * max(1.0, abs(self.rhs))

    def to_json(self):
        return {"name": self.name, "lhs": self.lhs, "rhs": self.rhs, "relation": self.relation,
                "margin": self.margin, "pass": self.passed}


@dataclass
class InequalityReport:
    rows: list
    config_hash: str
    code_version: str = __version__

    @property
    def passed(self):
        return all(r.passed for r in self.rows)

    def to_json(self):
        return {"rows": [r.to_json() for r in self.rows],
                "provenance": {"config_hash": self.config_hash, "code_version": self.code_version},
                "pass": self.passed}

    def to_markdown(self):
        lines = [f"config `{self.config_hash[:16]}` | version {self.code_version}", "",
                 "| inequality | lhs | rel | rhs | margin | pass |",
                 "|---|---|---|---|---|---|"]
        for r in self.rows:
            lines.append(f"| {r.name} | {r.lhs:.9g} | {r.relation} | {r.rhs:.9g} | {r.margin:.9g} | "
                         f"{'yes' if r.passed else 'NO'} |")
        return "\n".join(lines) + "\n"


def build_report(cfg: StudyConfig, jobs=1) -> InequalityReport:
    F = cfg.norm_spec()
    omega = cfg.polygon()
    kappa = wulff_measure(F)
    geo = metric_report(F, omega, kappa)
    diam = geo.diameter
    r_sharp = math.sqrt(omega.area / kappa)
    lam_inf, dlam_inf = limit_eigenvalues(F, omega)
    rows = [
        ReportRow("isodiametric |Ω| <= (κ/4) diam²", omega.area, 0.25 * kappa * diam**2, "<="),
        ReportRow("Szegő–Weinberger Λ_∞(Ω) <= Λ_∞(Ω^#)", lam_inf, 1.0 / r_sharp, "<="),
        ReportRow("Λ_∞ <= λ_∞", lam_inf, dlam_inf, "<="),
    ]
    seed = cfg.seeds[0]
    wulff = {"vertices": wulff_polygon(F, 1.0, 256).vertices.tolist()}
    tasks = []
    for p in cfg.p_list:
        tasks += [(cfg.norm, cfg.domain, p, cfg.mesh_h, "neumann", seed),
                  (cfg.norm, cfg.domain, p, cfg.mesh_h, "dirichlet", seed),
                  (cfg.norm, wulff, p, cfg.mesh_h, "dirichlet", seed)]
    res = _pool_map(_solve_one, tasks, jobs)
    for i, p in enumerate(cfg.p_list):
        neu, dir_, dir_w = res[3 * i: 3 * i + 3]
        rows += [
            ReportRow(f"Payne–Weinberger (π_p/diam)^p <= Λ_p^p, p={p:g}", (pi_p(p) / diam) ** p,
                      neu.eigenvalue, "<="),
            ReportRow(f"Λ_p^p < λ_p^p(W)(diam W/diam Ω)^p, p={p:g}", neu.eigenvalue,
                      dir_w.eigenvalue * (2.0 / diam) ** p, "<"),
            ReportRow(f"Λ_p^p < λ_p^p(Ω), p={p:g}", neu.eigenvalue, dir_.eigenvalue, "<"),
        ]
    return InequalityReport(rows=rows, config_hash=cfg.digest())


def cmd_report(cfg: StudyConfig, jobs=1):
    """Consolidated inequality report (JSON and Markdown)."""
    rep = build_report(cfg, jobs)
    _write(cfg, "report.json", dumps(rep.to_json()))
    md = rep.to_markdown()
    _write(cfg, "report.md", md)
    sys.stdout.write(md)
    return EXIT_OK if rep.passed else EXIT_VIOLATION


COMMANDS = {
    "norm-info": cmd_norm_info,
    "geometry": cmd_geometry,
    "eigen": cmd_eigen,
    "sweep-p": cmd_sweep_p,
    "spindle-study": cmd_spindle_study,
    "viscosity-scan": cmd_viscosity_scan,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="finsler-eigen",
                                     description="Anisotropic p-Laplacian eigenvalues and geometric inequalities.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip() or None)
        p.add_argument("--config", help="study config (JSON)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes")
        p.add_argument("--seed", type=int, help="random seed (u64)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        fn = COMMANDS[args.command]
        if args.command in ("eigen", "report"):
            return fn(cfg, jobs=max(1, args.jobs))
        return fn(cfg)
    except ConfigError as exc:
        sys.stderr.write(f"config error: {exc}\n")
        return EXIT_CONFIG
    except SolverError as exc:
        sys.stderr.write(f"solver failure: {exc}\n")
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
