"""Command line front end: one JSON config drives the whole pipeline.

Stages (generate -> validate -> solve -> effective -> sublinearity -> audit
-> simulate) are individually invokable subcommands; ``run`` executes the
configured subset in dependency order, writes binary artifacts and CSV curves
next to a single JSON report, and (with --check) compares the effective
matrix against the oracle recorded in the config.

Exit codes: 0 success, 2 configuration/validation failure, 3 solver
non-convergence, 4 oracle check failure. Reports are canonical JSON (sorted
keys, two-space indent) so identical configs produce byte-identical reports
modulo the wall-clock block.
"""

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .corrector import solve_correctors, sublinearity_scan
from .energy import assemble, moser_exponents
from .environment import (EnvironmentSpec, generate_field,
                          moment_refinement_sweep, validate_moments)
from .errors import (CheckFailure, ConfigurationError, EffdiffError,
                     NonConvergenceError, ValidationError)
from .homogenize import (check_bounds, effective_matrix, moser_audit,
                         random_directions)
from .montecarlo import (TimeChangeSpec, WalkConfig, clt_statistics,
                         environment_average, martingale_decomposition,
                         simulate_walk, time_change)

SCHEMA = "effdiff-report/1"
STAGE_ORDER = ("gen", "validate", "solve", "effective", "sublinearity",
               "audit", "simulate")

_DEFAULTS = {
    "cells_per_side": 64,
    "spacing": None,             # None -> 1 / cells_per_side
    "moments": {"p": 3.0, "q": 2.0},
    "solver": {"tol": 1e-10, "max_iter": 20000, "preconditioner": "auto"},
    "refinement_sizes": None,    # validate stage: moment sweep when set
    "sublinearity": {"radius": 0.25, "sizes": [32, 64, 128]},
    "audit": {"sigma_prime": 0.5, "sigma": 0.75, "radius": 0.25,
              "alpha": None, "sizes": [16, 32, 64]},
    "montecarlo": {"n_paths": 10000, "t_max": 1.0,
                   "record_times": [0.5, 1.0], "theta": None, "start": None,
                   "min_paths_for_ks": 1000},
    "stages": ["validate", "solve", "effective", "sublinearity", "audit",
               "simulate"],
    "check": None,               # {"D": [[...]], "rel_tol": ...}
    "output_dir": ".",
    "seed": 0,
}


class RunConfig:
    """Validated pipeline configuration; every parameter is checked here,
    before any compute."""

    def __init__(self, raw):
        if "environment" not in raw:
            raise ConfigurationError("config: missing 'environment' block")
        unknown = set(raw) - set(_DEFAULTS) - {"environment"}
        if unknown:
            raise ConfigurationError(f"config: unknown keys {sorted(unknown)}")
        env = dict(raw["environment"])
        try:
            self.spec = EnvironmentSpec(
                model=env.pop("model"), d=int(env.pop("d", 2)),
                seed=int(env.pop("seed", 0)), params=env.pop("params", {}))
        except KeyError as exc:
            raise ConfigurationError(f"environment: missing {exc}") from None
        if env:
            raise ConfigurationError(f"environment: unknown keys {sorted(env)}")

        merged = {}
        for key, default in _DEFAULTS.items():
            val = raw.get(key, default)
            if isinstance(default, dict) and val is not default:
                bad = set(val) - set(default)
                if bad:
                    raise ConfigurationError(
                        f"{key}: unknown keys {sorted(bad)}")
                val = {**default, **val}
            merged[key] = val

        self.cells_per_side = int(merged["cells_per_side"])
        if self.cells_per_side < 2:
            raise ConfigurationError("cells_per_side must be >= 2")
        self.spacing = (1.0 / self.cells_per_side
                        if merged["spacing"] is None
                        else float(merged["spacing"]))
        if self.spacing <= 0:
            raise ConfigurationError("spacing must be > 0")

        mom = merged["moments"]
        self.p, self.q = float(mom["p"]), float(mom["q"])
        if self.p < 1 or self.q < 1:
            raise ConfigurationError("moments: p and q must be >= 1")
        if 1.0 / self.p + 1.0 / self.q >= 2.0 / self.spec.d:
            raise ConfigurationError(
                f"moments: (p, q, d) = ({self.p}, {self.q}, {self.spec.d}) "
                f"inadmissible: 1/p + 1/q = "
                f"{1.0 / self.p + 1.0 / self.q:.6g} must be < 2/d = "
                f"{2.0 / self.spec.d:.6g}")

        sol = merged["solver"]
        self.tol = float(sol["tol"])
        self.max_iter = int(sol["max_iter"])
        self.precond = str(sol["preconditioner"])
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigurationError("solver: tol > 0 and max_iter >= 1")
        if self.precond not in ("auto", "jacobi", "spectral", "none"):
            raise ConfigurationError(
                f"solver: unknown preconditioner {self.precond!r}")

        self.refinement_sizes = merged["refinement_sizes"]
        if self.refinement_sizes is not None:
            self.refinement_sizes = [int(n) for n in self.refinement_sizes]
            if len(self.refinement_sizes) < 3:
                raise ConfigurationError("refinement_sizes: need >= 3 sizes")

        sub = merged["sublinearity"]
        self.sub_radius = float(sub["radius"])
        self.sub_sizes = [int(n) for n in sub["sizes"]]
        if not 0 < self.sub_radius <= 0.25:
            raise ConfigurationError("sublinearity: radius in (0, 0.25]")
        if len(self.sub_sizes) < 2:
            raise ConfigurationError("sublinearity: need >= 2 sizes")

        aud = merged["audit"]
        self.audit_sigma_prime = float(aud["sigma_prime"])
        self.audit_sigma = float(aud["sigma"])
        self.audit_radius = float(aud["radius"])
        self.audit_alpha = None if aud["alpha"] is None else float(aud["alpha"])
        self.audit_sizes = [int(n) for n in aud["sizes"]]
        if not 0 < self.audit_sigma_prime < self.audit_sigma <= 1.0:
            raise ConfigurationError("audit: need 0 < sigma' < sigma <= 1")
        # validates (p, q, d) admissibility and the alpha/rho ratio up front
        self.schedule = moser_exponents(self.p, self.q, self.spec.d,
                                        alpha=self.audit_alpha)

        mc = merged["montecarlo"]
        self.mc_theta = mc["theta"]
        if self.mc_theta is not None and not (
                isinstance(self.mc_theta, (int, float))
                or self.mc_theta == "Lambda"):
            raise ConfigurationError(
                'montecarlo: theta must be a number or "Lambda"')
        self.mc_min_paths = int(mc["min_paths_for_ks"])
        self.seed = int(merged["seed"])
        self.walk_config = WalkConfig(
            t_max=float(mc["t_max"]), n_paths=int(mc["n_paths"]),
            seed=self.seed,
            start=None if mc["start"] is None else tuple(mc["start"]),
            record_times=tuple(float(t) for t in mc["record_times"]))
        self.walk_config.resolved_record_times()

        self.stages = list(merged["stages"])
        bad = set(self.stages) - set(STAGE_ORDER)
        if bad:
            raise ConfigurationError(f"stages: unknown {sorted(bad)}")
        self.check = merged["check"]
        if self.check is not None:
            np.asarray(self.check["D"], dtype=float)
            float(self.check.get("rel_tol", 0.02))
        self.output_dir = str(merged["output_dir"])
        self.echo = {**{k: merged[k] for k in _DEFAULTS},
                     "environment": {"model": self.spec.model,
                                     "d": self.spec.d,
                                     "seed": self.spec.seed,
                                     "params": self.spec.params}}

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigurationError(f"config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config: invalid JSON: {exc}") from None
        return cls(raw)


def _canonical_json(obj):
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _write_json(path, obj):
    Path(path).write_text(_canonical_json(obj))


def _field(cfg):
    return generate_field(cfg.spec, cfg.cells_per_side, cfg.spacing)


def _solve(cfg, form):
    return solve_correctors(form, tol=cfg.tol, max_iter=cfg.max_iter,
                            precond=cfg.precond)


# --------------------------------------------------------------------------
# stages: each returns a JSON-ready fragment and mutates the shared state


def stage_gen(cfg, state, outdir):
    from .formats import write_ehf1
    field = state.setdefault("field", _field(cfg))
    path = outdir / "field.ehf1"
    write_ehf1(path, field)
    return {"path": str(path), "field_hash": field.descriptor_hash(),
            "cells_per_side": field.cells_per_side, "spacing": field.spacing}


def stage_validate(cfg, state, outdir):
    field = state.setdefault("field", _field(cfg))
    report = validate_moments(field, cfg.p, cfg.q)
    frag = {"moment_report": report.to_dict()}
    diverging = False
    if cfg.refinement_sizes:
        reports, diverging = moment_refinement_sweep(
            cfg.spec, cfg.p, cfg.q, cfg.refinement_sizes)
        frag["refinement"] = {"sizes": cfg.refinement_sizes,
                              "reports": [r.to_dict() for r in reports],
                              "diverging": bool(diverging)}
    if not report.admissible or diverging:
        raise ValidationError(
            f"moment validation failed: admissible={report.admissible}, "
            f"diverging_under_refinement={bool(diverging)}")
    return frag


def stage_solve(cfg, state, outdir):
    field = state.setdefault("field", _field(cfg))
    form = state.setdefault("form", assemble(field))
    correctors = state.setdefault("correctors", _solve(cfg, form))
    path = outdir / "correctors.chi1"
    correctors.save(path)
    return {"path": str(path),
            "residuals": [float(r) for r in correctors.residuals],
            "iterations": [int(i) for i in correctors.iterations],
            "tol": cfg.tol}


def stage_effective(cfg, state, outdir):
    field = state.setdefault("field", _field(cfg))
    form = state.setdefault("form", assemble(field))
    correctors = state.setdefault("correctors", _solve(cfg, form))
    dmat = effective_matrix(form, correctors)
    state["D"] = dmat
    bounds = check_bounds(dmat, field,
                          random_directions(field.d, 20, seed=cfg.seed))
    state["bounds"] = bounds
    return {"effective_matrix": dmat.to_dict(), "bounds": bounds.to_dict()}


def stage_sublinearity(cfg, state, outdir):
    curve = sublinearity_scan(cfg.spec, cfg.sub_radius, cfg.sub_sizes,
                              tol=cfg.tol, max_iter=cfg.max_iter,
                              precond=cfg.precond)
    (outdir / "sublinearity.csv").write_text(curve.to_csv())
    # a vanishing corrector has sup-norm 0 at every scale and slope -inf;
    # JSON has no Infinity literal, so report that degenerate case as null
    slope = float(curve.slope) if math.isfinite(curve.slope) else None
    return {"slope": slope, "radius": curve.radius,
            "rows": [{"size": int(round(1.0 / e)), "epsilon": float(e),
                      "sup_norm": float(s)}
                     for e, s in zip(curve.epsilons(), curve.sup_norms())]}


def stage_audit(cfg, state, outdir):
    report = moser_audit(cfg.spec, cfg.schedule, cfg.audit_radius,
                         cfg.audit_sigma_prime, cfg.audit_sigma,
                         cfg.audit_sizes, tol=cfg.tol,
                         max_iter=cfg.max_iter, precond=cfg.precond)
    (outdir / "audit.csv").write_text(report.to_csv())
    return report.to_dict()


def stage_simulate(cfg, state, outdir):
    field = state.setdefault("field", _field(cfg))
    form = state.setdefault("form", assemble(field))
    correctors = state.setdefault("correctors", _solve(cfg, form))
    if "D" not in state:
        state["D"] = effective_matrix(form, correctors)
    dmat = state["D"]
    cells = {"lambda_inv": 1.0 / field.lam, "Lambda": field.Lam}
    walk = simulate_walk(field, cfg.walk_config, correctors=correctors,
                         cell_functions=cells)
    walk.save_wlk1(outdir / "walk.wlk1")
    qv_report = martingale_decomposition(walk, correctors, target=dmat)
    frag = {"backend": walk.backend, "n_paths": walk.n_paths,
            "record_times": walk.record_times.tolist(),
            "mean_jumps": float(walk.njumps.mean()),
            "quadratic_variation": qv_report.to_dict(),
            "path": str(outdir / "walk.wlk1")}
    for name in ("lambda_inv", "Lambda"):
        mean, err = environment_average(walk, name)
        spatial = float(np.mean(cells[name]))
        frag[f"time_average_{name}"] = {
            "value": mean, "stderr": err, "spatial": spatial}
    if walk.n_paths >= cfg.mc_min_paths:
        clt = clt_statistics(walk, dmat, min_paths=cfg.mc_min_paths)
        frag["clt"] = clt.to_dict()
        state["clt"] = clt
    if cfg.mc_theta is not None:
        theta = field.Lam if cfg.mc_theta == "Lambda" else float(cfg.mc_theta)
        changed = time_change(walk, TimeChangeSpec(theta=theta))
        disp = changed.displacements()
        cov = np.cov(disp.T) if field.d > 1 else \
            np.atleast_2d(np.var(disp[:, 0], ddof=1))
        frag["time_change"] = {
            "theta": cfg.mc_theta if cfg.mc_theta == "Lambda"
            else float(cfg.mc_theta),
            "covariance": cov.tolist(),
            "conservativeness": changed.conservativeness,
        }
    return frag


_STAGE_FNS = {"gen": stage_gen, "validate": stage_validate,
              "solve": stage_solve, "effective": stage_effective,
              "sublinearity": stage_sublinearity, "audit": stage_audit,
              "simulate": stage_simulate}


def _run_stages(cfg, names, outdir, check):
    outdir.mkdir(parents=True, exist_ok=True)
    ordered = [s for s in STAGE_ORDER if s in names]
    state = {}
    stages = {}
    clocks = {}
    for name in ordered:
        t0 = time.perf_counter()
        try:
            stages[name] = _STAGE_FNS[name](cfg, state, outdir)
        except EffdiffError as exc:
            raise type(exc)(f"stage {name}: {exc}") from exc
        clocks[name] = time.perf_counter() - t0
    if check:
        if cfg.check is None:
            raise ConfigurationError(
                "--check requested but config has no 'check' block")
        if "D" not in state:
            raise ConfigurationError(
                "--check needs the 'effective' stage in the pipeline")
        expected = np.asarray(cfg.check["D"], dtype=float)
        rel_tol = float(cfg.check.get("rel_tol", 0.02))
        got = state["D"].D
        scale = float(np.max(np.abs(expected)))
        if scale <= 0:
            raise ConfigurationError("check.D must have a nonzero entry")
        err = float(np.max(np.abs(got - expected))) / scale
        stages["check"] = {"expected_D": expected.tolist(),
                           "measured_D": got.tolist(),
                           "max_rel_error": err, "rel_tol": rel_tol,
                           "passed": bool(err <= rel_tol)}
        if err > rel_tol:
            raise CheckFailure(
                f"effective matrix off oracle by {err:.3e} > {rel_tol:.3e}")
    report = {"schema": SCHEMA, "tool_version": __version__,
              "config": cfg.echo, "stages": stages,
              "wall_clock_s": {k: round(v, 6) for k, v in clocks.items()}}
    return report


# --------------------------------------------------------------------------
# report rendering


_SUBSCRIPTS = str.maketrans("0123456789", "₀₁₂₃₄"
                                          "₅₆₇₈₉")


def _sub(i):
    return str(i).translate(_SUBSCRIPTS)


def render_md(report):
    lines = [f"# effdiff run report (schema {report['schema']}, "
             f"tool {report['tool_version']})", ""]
    stages = report.get("stages", {})
    eff = stages.get("effective")
    if eff:
        lines += ["## Effective matrix", ""]
        dmat = eff["effective_matrix"]["D"]
        d = len(dmat)
        for i in range(d):
            for j in range(i, d):
                lines.append(f"D{_sub(i + 1)}{_sub(j + 1)} = {dmat[i][j]:.6f}")
        lines.append("")
        bounds = eff.get("bounds")
        if bounds:
            lines += ["## Variational bounds", "",
                      "| direction | lower | value | upper | ok |",
                      "| --- | --- | --- | --- | --- |"]
            for row in bounds["rows"]:
                xi = ", ".join(f"{x:+.3f}" for x in row["xi"])
                lines.append(
                    f"| ({xi}) | {row['lower']:.6f} | {row['value']:.6f} "
                    f"| {row['upper']:.6f} | {row['ok']} |")
            lines.append("")
    aud = stages.get("audit")
    if aud:
        lines += ["## Sup-norm audit envelope", "",
                  f"max ratio = {aud['max_ratio']:.6g}, "
                  f"min ratio = {aud['min_ratio']:.6g}, "
                  f"envelope (max/min) = {aud['envelope']:.6g}", ""]
    sub = stages.get("sublinearity")
    if sub:
        slope = sub["slope"]
        shown = f"{slope:.4f}" if slope is not None else \
            "undefined (sup-norms identically zero)"
        lines += ["## Sublinearity", "",
                  f"fitted log-log slope = {shown}", ""]
    sim = stages.get("simulate")
    if sim and "clt" in sim:
        lines += ["## Invariance-principle statistics", ""]
        for row in sim["clt"]["ks"]:
            xi = ", ".join(f"{x:+.3f}" for x in row["xi"])
            lines.append(f"KS at t={row['t']:g} along ({xi}): "
                         f"statistic {row['statistic']:.4f}, "
                         f"p = {row['p_value']:.4f}")
        lines.append("")
    chk = stages.get("check")
    if chk:
        lines += ["## Oracle check", "",
                  f"max relative error {chk['max_rel_error']:.3e} "
                  f"(tolerance {chk['rel_tol']:.3e}): "
                  + ("PASS" if chk["passed"] else "FAIL"), ""]
    return "\n".join(lines)


def render_csv(report, outdir):
    written = []
    stages = report.get("stages", {})
    sub = stages.get("sublinearity")
    if sub:
        rows = ["epsilon,sup_norm"]
        rows += [f"{r['epsilon']:.17g},{r['sup_norm']:.17g}"
                 for r in sub["rows"]]
        p = outdir / "sublinearity.csv"
        p.write_text("\n".join(rows) + "\n")
        written.append(p)
    aud = stages.get("audit")
    if aud:
        rows = ["epsilon,lhs,rhs_core,ratio"]
        rows += [f"{r['epsilon']:.17g},{r['lhs']:.17g},"
                 f"{r['rhs_core']:.17g},{r['ratio']:.17g}"
                 for r in aud["rows"]]
        p = outdir / "audit.csv"
        p.write_text("\n".join(rows) + "\n")
        written.append(p)
    sim = stages.get("simulate")
    if sim and "clt" in sim:
        rows = ["t,xi,statistic,p_value"]
        for r in sim["clt"]["ks"]:
            xi = " ".join(f"{x:.17g}" for x in r["xi"])
            rows.append(f"{r['t']:.17g},{xi},{r['statistic']:.17g},"
                        f"{r['p_value']:.17g}")
        p = outdir / "clt.csv"
        p.write_text("\n".join(rows) + "\n")
        written.append(p)
    return written


def load_report(path):
    try:
        with open(path) as fh:
            report = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"report: {exc}") from None
    if report.get("schema") != SCHEMA:
        raise ValidationError(
            f"report schema {report.get('schema')!r} != {SCHEMA!r}")
    return report


# --------------------------------------------------------------------------
# argument parsing and dispatch


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="effdiff",
        description="numerical homogenization of random conductance media")
    parser.add_argument("--threads", type=int, default=None,
                        help="kernel threads (fallback: EH_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_ORDER + ("run",):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None,
                       help="output directory (default: config output_dir)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        if name == "run":
            p.add_argument("--check", action="store_true",
                           help="compare the effective matrix to the "
                                "config's oracle block")
    rep = sub.add_parser("report")
    rep.add_argument("--report", required=True, help="stored JSON report")
    rep.add_argument("--format", choices=("json", "csv", "md"),
                     default="json")
    rep.add_argument("--out", default=".",
                     help="output directory for csv, '-' for stdout json/md")
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("EH_THREADS"):
        try:
            threads = int(os.environ["EH_THREADS"])
        except ValueError:
            print("effdiff: EH_THREADS must be an integer", file=sys.stderr)
            return 2
    if threads is not None:
        kernels.set_threads(threads)

    try:
        if args.command == "report":
            report = load_report(args.report)
            if args.format == "json":
                sys.stdout.write(_canonical_json(report))
            elif args.format == "md":
                sys.stdout.write(render_md(report) + "\n")
            else:
                outdir = Path(args.out)
                outdir.mkdir(parents=True, exist_ok=True)
                for p in render_csv(report, outdir):
                    print(p)
            return 0

        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.walk_config.seed = args.seed
            cfg.echo["seed"] = args.seed
        outdir = Path(args.out if args.out is not None else cfg.output_dir)
        if args.command == "run":
            names = set(cfg.stages)
            check = args.check
        else:
            names = {args.command}
            check = False
        report = _run_stages(cfg, names, outdir, check)
        path = outdir / "report.json"
        _write_json(path, report)
        print(path)
        return 0
    except CheckFailure as exc:
        print(f"effdiff: check failed: {exc}", file=sys.stderr)
        return 4
    except NonConvergenceError as exc:
        print(f"effdiff: solver did not converge: {exc}", file=sys.stderr)
        return 3
    except EffdiffError as exc:
        print(f"effdiff: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
