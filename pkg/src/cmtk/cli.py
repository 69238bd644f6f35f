"""Command-line interface: ``cmtk orbit``, ``cmtk build`` and ``cmtk verify``.

Exit codes: 0 ok, 2 configuration error, 3 no orbit, 4 equilibrium,
5 integration failure, 6 certification failed.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CertificationFailed, CmtkError, ConfigError
from .metric import BField, QuadratureConfig, build_metric
from .orbit import PeriodicOrbitRecord, find_periodic_orbit
from .projection import MetricField, constant_metric
from .systems import (DEFAULT_TOL, SystemDef, get_system, load_polynomial_system,
                      parse_polynomial_text)
from . import verify as V

log = logging.getLogger("cmtk")

CHECKS = ("contraction", "residual", "normalization", "floquet", "decay", "psi",
          "conservation", "uniqueness", "sync", "gronwall")
DEFAULT_GUESS = {"circle": "0.5,0", "vdp": "2,0"}


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    system: str = "circle"
    poly_file: str | None = None
    B: str = "identity"
    c0: float = 1.0
    x0: str = "anchor"
    guess: str | None = None
    region: str = "tube:0.02"
    points_file: str | None = None
    n_samples: int = 100
    tol: float = DEFAULT_TOL
    tmax: float = 10.0
    tail_tol: float = 1e-8
    residual_tol: float = 1e-3
    seed: int = 0
    jobs: int = 1
    metric: str = "constructed"
    checks: list = field(default_factory=list)
    input: str | None = None
    out: str | None = None
    csv: str | None = None
    emit_plot_data: str | None = None

    def __post_init__(self):
        for name in ("tol", "tmax", "tail_tol", "residual_tol", "c0"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive number, got {v!r}")
        if not 0 < self.tail_tol < 1:
            raise ConfigError("tail_tol must lie in (0, 1)")
        if self.n_samples < 1 or self.jobs < 1:
            raise ConfigError("n_samples and jobs must be at least 1")
        if self.metric not in ("identity", "constructed"):
            raise ConfigError("metric must be 'identity' or 'constructed'")
        bad = [c for c in self.checks if c not in CHECKS]
        if bad:
            raise ConfigError(f"unknown checks {bad}; choose from {list(CHECKS)} or 'all'")

    def canonical(self) -> dict:
        d = asdict(self)
        d["c0"], d["tol"], d["tmax"] = float(self.c0), float(self.tol), float(self.tmax)
        d["tail_tol"], d["residual_tol"] = float(self.tail_tol), float(self.residual_tol)
        d["checks"] = sorted(set(self.checks), key=CHECKS.index)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        return cls(**d)


def _vec(text: str, n: int | None = None) -> np.ndarray:
    try:
        v = np.array([float(t) for t in text.replace(" ", "").split(",")])
    except ValueError as exc:
        raise ConfigError(f"cannot parse point {text!r}") from exc
    if n is not None and v.size != n:
        raise ConfigError(f"point {text!r} has {v.size} coordinates, expected {n}")
    return v


def resolve_system(cfg: RunConfig) -> SystemDef:
    if cfg.poly_file:
        return load_polynomial_system(cfg.poly_file)
    return get_system(cfg.system)


def resolve_B(cfg: RunConfig, n: int) -> BField:
    text = cfg.B.strip()
    if text == "identity":
        return BField.identity(n)
    if text.startswith("poly:"):
        path = Path(text[5:])
        try:
            m, blocks = parse_polynomial_text(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc}") from exc
        if m != n:
            raise ConfigError(f"B file dimension {m} does not match system dimension {n}")
        return BField.polynomial(n, blocks)
    try:
        rows = [[float(t) for t in r.split(",")] for r in text.split(";")]
        B = np.array(rows)
    except ValueError as exc:
        raise ConfigError(f"cannot parse B matrix {text!r}") from exc
    if B.shape != (n, n):
        raise ConfigError(f"B must be {n}x{n}, got shape {B.shape}")
    return BField.constant(B)


def resolve_region(cfg: RunConfig, sysd: SystemDef, orbit: PeriodicOrbitRecord | None):
    if cfg.points_file:
        pts = V.load_points(cfg.points_file)
        sysd.check_point(pts)
        return pts
    kind, _, arg = cfg.region.partition(":")
    try:
        nums = [float(t) for t in arg.split(",") if t]
    except ValueError as exc:
        raise ConfigError(f"cannot parse region {cfg.region!r}") from exc
    if kind == "annulus":
        if sysd.dimension != 2 or len(nums) != 2:
            raise ConfigError("annulus:<r_in>,<r_out> needs a planar system")
        return V.annulus_sampler(*nums)
    if kind == "tube":
        if len(nums) != 1 or orbit is None:
            raise ConfigError("tube:<width> needs a width and a computed orbit")
        return V.tube_sampler(sysd, orbit, nums[0])
    raise ConfigError(f"unknown region {cfg.region!r}")


def _orbit(cfg: RunConfig, sysd: SystemDef) -> PeriodicOrbitRecord:
    guess = cfg.guess or DEFAULT_GUESS.get(sysd.name)
    if guess is None:
        raise ConfigError("--guess is required for this system")
    return find_periodic_orbit(sysd, _vec(guess, sysd.dimension))


# --------------------------------------------------------------- serialising

def _clean(obj):
    """Convert to JSON-safe builtins; non-finite floats become null."""
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
    if isinstance(obj, (complex, np.complexfloating)):
        return [_clean(float(obj.real)), _clean(float(obj.imag))]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj


def dumps(report: dict) -> str:
    # repr-based float output is the shortest string that round-trips (<= 17 digits)
    return json.dumps(_clean(report), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_report(report: dict, out: str | None):
    text = dumps(report)
    if out:
        p = Path(out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(text)
    else:
        sys.stdout.write(text)


def _header(cmd: str, cfg: RunConfig) -> dict:
    return {"tool": "cmtk", "version": __version__, "command": cmd, "config": cfg.canonical()}


def orbit_dict(rec: PeriodicOrbitRecord) -> dict:
    T = rec.period
    return {
        "anchor": rec.anchor, "period": T, "residual": rec.residual,
        "newton_iterations": rec.newton_iterations, "monodromy": rec.monodromy,
        "multipliers": rec.multipliers, "exponents": rec.exponents,
        "trivial_multiplier": rec.trivial_multiplier, "trivial_exponent": rec.trivial_exponent,
        "nontrivial_exponents": rec.nontrivial_exponents, "nu": rec.nu, "defective": rec.defective,
        "multiplier_exponent_mismatch": float(np.max(np.abs(rec.multipliers - np.exp(rec.exponents * T)))),
        "n_samples": len(rec.samples),
    }


# ----------------------------------------------------------------- commands

def cmd_orbit(cfg: RunConfig) -> int:
    sysd = resolve_system(cfg)
    rec = _orbit(cfg, sysd)
    rep = _header("orbit", cfg)
    rep["system"] = sysd.name
    rep["orbit"] = orbit_dict(rec)
    write_report(rep, cfg.out)
    if cfg.emit_plot_data:
        _write_csv(Path(cfg.emit_plot_data) / "orbit_samples.csv",
                   [f"x{i + 1}" for i in range(sysd.dimension)], rec.samples)
    return 0


def _make_metric(cfg, sysd, B, orbit, kind=None) -> MetricField:
    if (kind or cfg.metric) == "identity":
        return constant_metric(np.eye(sysd.dimension))
    qc = QuadratureConfig(t_max=cfg.tmax, rel_tail_tol=cfg.tail_tol, step_ctrl=cfg.tol)
    if cfg.x0 == "anchor":
        x0 = None if orbit is None else orbit.anchor
    else:
        x0 = _vec(cfg.x0, sysd.dimension)
    return build_metric(sysd, B, cfg.c0, x0, qc, jobs=cfg.jobs)


def _sample_points(cfg, sysd, orbit):
    region = resolve_region(cfg, sysd, orbit)
    if callable(region):
        return np.asarray(region(cfg.n_samples, np.random.default_rng(cfg.seed))), region.descriptor
    return region, {"type": "points", "file": cfg.points_file}


def cmd_build(cfg: RunConfig) -> int:
    sysd = resolve_system(cfg)
    B = resolve_B(cfg, sysd.dimension)
    needs_orbit = cfg.x0 == "anchor" or (not cfg.points_file and cfg.region.startswith("tube"))
    orbit = _orbit(cfg, sysd) if needs_orbit else None
    metric = _make_metric(cfg, sysd, B, orbit, kind="constructed")
    X, desc = _sample_points(cfg, sysd, orbit)
    n = sysd.dimension
    rows = []
    for s in metric.evaluate_many(X, raise_errors=False):
        row = {"x": s.x, "status": s.status, "message": s.message}
        if s.ok:
            f = sysd.rhs(s.x)
            iu = np.triu_indices(n)
            upper = s.M[iu]
            full = np.zeros((n, n))
            full[iu] = upper
            full = full + np.triu(full, 1).T
            row.update(M=full, tail_bound=s.tail_bound, quad_error=s.quad_error,
                       error_bound=s.error_bound, horizon=s.horizon, rate=s.rate,
                       min_eig=float(np.linalg.eigvalsh(full)[0]),
                       normalization=float(f @ full @ f / (f @ f) ** 2),
                       kernel=float(np.linalg.norm(s.M1 @ f) / np.linalg.norm(f)))
        rows.append(row)
    rep = _header("build", cfg)
    rep.update(system=sysd.name, region=desc, B=B.description, samples=rows,
               n_failed=sum(r["status"] != "ok" for r in rows))
    write_report(rep, cfg.out)
    if cfg.csv:
        head = ([f"x{i + 1}" for i in range(n)] + [f"M{i + 1}{j + 1}" for i in range(n) for j in range(n)]
                + ["tail_bound", "error_bound", "min_eig", "normalization", "status"])
        data = []
        for r in rows:
            if r["status"] == "ok":
                data.append(list(r["x"]) + list(r["M"].ravel())
                            + [r["tail_bound"], r["error_bound"], r["min_eig"], r["normalization"], "ok"])
            else:
                data.append(list(r["x"]) + [math.nan] * (n * n + 4) + [r["status"]])
        _write_csv(Path(cfg.csv), head, data)
    return 0


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _read_gronwall_csv(path):
    try:
        with open(path, newline="") as fh:
            rd = csv.DictReader(fh)
            cols = {k.strip(): [] for k in rd.fieldnames or []}
            for row in rd:
                for k, v in row.items():
                    cols[k.strip()].append(float(v))
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read gronwall samples from {path}: {exc}") from exc
    need = ("theta", "r", "a", "K", "b")
    if any(k not in cols for k in need):
        raise ConfigError(f"gronwall input needs columns {need}")
    return [np.array(cols[k]) for k in need]


def cmd_verify(cfg: RunConfig) -> int:
    checks = list(cfg.checks) or ["contraction"]
    sysd = resolve_system(cfg)
    B = resolve_B(cfg, sysd.dimension)
    rep = _header("verify", cfg)
    rep["system"] = sysd.name
    results: dict[str, dict] = {}
    plot_dir = Path(cfg.emit_plot_data) if cfg.emit_plot_data else None

    if checks == ["gronwall"]:
        orbit = metric = None
    else:
        orbit = _orbit(cfg, sysd)
        rep["orbit"] = orbit_dict(orbit)
        metric = _make_metric(cfg, sysd, B, orbit)

    if "floquet" in checks:
        d = orbit_dict(orbit)
        ok = (abs(orbit.trivial_multiplier - 1) <= 1e-6
              and d["multiplier_exponent_mismatch"] <= 1e-10 and orbit.nu > 0)
        results["floquet"] = {"pass": ok, "nu": orbit.nu,
                              "trivial_multiplier_error": abs(orbit.trivial_multiplier - 1),
                              "multiplier_exponent_mismatch": d["multiplier_exponent_mismatch"]}

    cert = None
    if any(c in checks for c in ("contraction", "residual", "normalization")):
        region = resolve_region(cfg, sysd, orbit)
        cert = V.certify_region(sysd, metric, region, cfg.n_samples, seed=cfg.seed,
                                B_field=B if "residual" in checks else None, orbit=orbit,
                                residual_tol=cfg.residual_tol, tol=cfg.tol)
        rep["region"] = cert.set_descriptor
        rep["excluded"] = [{k: v for k, v in e.items()} for e in cert.excluded]
        rep["samples"] = [{"x": s.x, "L": s.L_value, "argmax_v": s.argmax_v, "min_eig_M": s.min_eig_M,
                           "residual": s.residual_norm} for s in cert.samples]
    if "contraction" in checks:
        v = {k: cert.verdict[k] for k in ("positive_definite", "contraction", "floquet_consistent")
             if k in cert.verdict}
        st = cert.stats
        results["contraction"] = {
            "pass": all(v.values()), "verdict": v, "nu_certified": cert.nu_certified,
            "floquet_nu": cert.floquet_nu, "eigen_ratio_bound": cert.eigen_ratio_bound,
            "lipschitz_margin": cert.lipschitz_margin,
            "stats": {k: getattr(st, k) for k in ("f_min", "f_max", "df_max", "lambda_min_M",
                                                  "lambda_max_M", "lambda_min_B", "lambda_max_B")}}
    if "residual" in checks:
        results["residual"] = {"pass": cert.verdict["residual"], "max_residual": cert.max_residual,
                               "tolerance": cfg.residual_tol}
    if "normalization" in checks:
        if cfg.metric != "constructed":
            raise ConfigError("normalization check needs the constructed metric")
        pts = np.array([s.x for s in cert.samples])
        dev, kern_ok = [], True
        for s in metric.evaluate_many(pts):
            f = sysd.rhs(s.x)
            dev.append(abs(f @ s.M @ f / (f @ f) ** 2 - cfg.c0))
            kern_ok &= bool(np.linalg.norm(s.M1 @ f) / np.linalg.norm(f) <= s.error_bound)
        results["normalization"] = {"pass": max(dev) <= 1e-4 and kern_ok,
                                    "max_deviation": max(dev), "kernel_within_bound": kern_ok}
    for name, fn in (("decay", V.decay_fit), ("psi", V.psi_decay_check)):
        if name in checks:
            fit = fn(sysd, orbit.anchor, horizon=20.0 * sysd.char_time, tol=cfg.tol)
            results[name] = {"pass": bool(abs(fit.rate - orbit.nu) <= 0.1 * orbit.nu),
                             "rate": fit.rate, "prefactor": fit.prefactor, "r2": fit.residual_r2,
                             "samples_used": fit.n_used, "sup_unprojected": fit.sup_unprojected,
                             "derived": fit.derived(orbit.nu)}
            if plot_dir:
                _write_csv(plot_dir / f"{name}_series.csv", ["t", "norm"],
                           np.column_stack([fit.times, fit.values]).tolist())
    if "conservation" in checks:
        c = V.conservation_checks(sysd, metric, orbit.anchor, np.linspace(0, 10, 21) * sysd.char_time,
                                  c0=cfg.c0 if cfg.metric == "constructed" else None,
                                  seed=cfg.seed, tol=cfg.tol)
        results["conservation"] = {"pass": c.max_identity_error <= 1e-5 and c.max_phi0_deviation <= 1e-4,
                                   "max_identity_error": c.max_identity_error,
                                   "max_phi0_deviation": c.max_phi0_deviation}
    if "uniqueness" in checks:
        qa = QuadratureConfig(t_max=cfg.tmax, rel_tail_tol=cfg.tail_tol * 100, step_ctrl=cfg.tol)
        qb = QuadratureConfig(t_max=2 * cfg.tmax, rel_tail_tol=cfg.tail_tol, step_ctrl=cfg.tol)
        pts = V.tube_sampler(sysd, orbit, 0.02)(5, np.random.default_rng(cfg.seed))
        diffs = [V.uniqueness_convergence(sysd, B, cfg.c0, orbit.anchor, p, qa, qb, return_bounds=True)
                 for p in pts]
        results["uniqueness"] = {"pass": all(d <= ea + eb for d, ea, eb in diffs),
                                 "differences": [d[0] for d in diffs],
                                 "bounds": [d[1] + d[2] for d in diffs]}
    if "sync" in checks:
        e = V.sync_contraction_experiment(sysd, metric, orbit)
        target = e.target_rate
        results["sync"] = {"pass": bool(e.fitted_rate >= target * 0.99 and e.q_residuals.max() <= 1e-10
                                        and not e.contraction_violated),
                           "fitted_rate": e.fitted_rate, "target_rate": target,
                           "max_q_residual": e.q_residuals.max(), "k": e.k_margin}
        if plot_dir:
            _write_csv(plot_dir / "sync_series.csv", ["theta", "A", "T"],
                       np.column_stack([e.theta_grid, e.A_series, e.T_series]).tolist())
    if "gronwall" in checks:
        if not cfg.input:
            raise ConfigError("the gronwall check needs --input <csv with theta,r,a,K,b>")
        g = V.gronwall_check(*_read_gronwall_csv(cfg.input))
        results["gronwall"] = {"pass": g.holds, "max_violation": g.max_violation}

    rep["checks"] = results
    rep["pass"] = all(r["pass"] for r in results.values())
    write_report(rep, cfg.out)
    if not rep["pass"]:
        failed = sorted(k for k, r in results.items() if not r["pass"])
        raise CertificationFailed(f"checks failed: {', '.join(failed)}")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cmtk", description="Contraction metrics for periodic orbits.")
    p.add_argument("--version", action="version", version=f"cmtk {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; explicit flags override it")
        sp.add_argument("--system", help="built-in system: circle | vdp")
        sp.add_argument("--poly-file", dest="poly_file", help="polynomial system file")
        sp.add_argument("--guess", help="initial point for the orbit search, e.g. 0.5,0")
        sp.add_argument("--tol", type=float, help="integration tolerance")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="report path (default stdout)")
        sp.add_argument("--emit-plot-data", dest="emit_plot_data", metavar="DIR",
                        help="directory for CSV series")

    def metric_opts(sp):
        sp.add_argument("--B", dest="B", help="identity | 'b11,b12;b21,b22' | poly:<file>")
        sp.add_argument("--c0", type=float)
        sp.add_argument("--x0", help="anchor point or 'anchor'")
        sp.add_argument("--region", help="tube:<width> | annulus:<r_in>,<r_out>")
        sp.add_argument("--points-file", dest="points_file")
        sp.add_argument("--n-samples", dest="n_samples", type=int)
        sp.add_argument("--tmax", type=float, help="initial quadrature horizon")
        sp.add_argument("--tail-tol", dest="tail_tol", type=float, help="relative tail tolerance")
        sp.add_argument("--jobs", type=int)

    sp = sub.add_parser("orbit", help="locate the periodic orbit and its Floquet data")
    common(sp)
    sp = sub.add_parser("build", help="evaluate the constructed metric on a sample set")
    common(sp)
    metric_opts(sp)
    sp.add_argument("--csv", help="also write a flat CSV table")
    sp = sub.add_parser("verify", help="run verification checks")
    common(sp)
    metric_opts(sp)
    sp.add_argument("--metric", choices=["identity", "constructed"])
    sp.add_argument("--check", action="append", dest="checks", metavar="NAME",
                    help=f"one of {', '.join(CHECKS)} or 'all' (repeatable)")
    sp.add_argument("--all", action="store_true", help="run every check except gronwall")
    sp.add_argument("--input", help="CSV input for the gronwall check")
    sp.add_argument("--residual-tol", dest="residual_tol", type=float)
    return p


def config_from_args(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    over = {k: v for k, v in vars(args).items() if k in known and v is not None}
    checks = over.pop("checks", None)
    if getattr(args, "all", False):
        checks = [c for c in CHECKS if c != "gronwall"]
    if checks is not None:
        if "all" in checks:
            checks = [c for c in CHECKS if c != "gronwall"] + [c for c in checks if c == "gronwall"]
        over["checks"] = checks
    return RunConfig.from_dict({**base, **over})


def _setup_logging():
    level = os.environ.get("CMTK_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_from_args(args)
        return {"orbit": cmd_orbit, "build": cmd_build, "verify": cmd_verify}[args.command](cfg)
    except CmtkError as exc:
        log.error("%s", exc)
        print(f"cmtk: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
