"""Command-line experiment runner.

Configuration is an INI file whose sections become dotted keys
(``[model] q0 = -1`` is ``model.q0``). Every subcommand writes CSV files
and snapshots into the output directory plus ``manifest.json`` with the
config echo, library versions, timings and a sha256 of every output.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .blowup import ResolutionError as BlowupResolutionError
from .blowup import analyze, detect_peaks, rescale_case_a, synthetic_blowup, write_peaks_csv, write_profile_csv
from .comparison import (CutoffParams, QuadratureError, ResolutionError, appendix_integrals, choose_L,
                         ray_energy)
from .energy import OverflowGuardError, PrescribedCurvature, f_lambda_field
from .grid import VOLUME, GridError, GridSpec, ScalarField, read_snapshot, write_snapshot
from .minimizer import SolveOptions, SolverError, continue_branch, solve_unique_min, write_branch
from .mountainpass import CCurveRow, FieldEnergy, PathError, SaddleRejected, bump_direction, c_curve, second_solution
from .paneitz import PaneitzCoefficients, PaneitzHypothesisError

log = logging.getLogger("qcurv")

DEFAULTS = {
    "grid.n": "16",
    "model.q0": "-1.0",
    "model.alphas": "1, 1, 1, 1",
    "model.f": "builtin",
    "model.lambda": "0.0",
    "cutoff.a0": "1.1",
    "cutoff.smoothing": "quintic",
    "solver.tol_grad": "1e-10",
    "solver.max_newton": "60",
    "solver.nu_tol": "1e-5",
    "lambda.branch": "0.05, 0.1, 0.15, 0.2",
    "lambda.comparison": "1e-3, 1e-4, 1e-6, 1e-8",
    "lambda.appendix": "1e-2, 1e-4, 4.5399929762484854e-05",
    "lambda.allow_beyond_quarter": "false",
    "comparison.k": "394.78417604357435",
    "mountainpass.lambda": "0.2",
    "mountainpass.nodes": "33",
    "mountainpass.iters": "400",
    "mountainpass.sigma": "0.5",
    "mountainpass.c_curve": "",
    "blowup.inputs": "",
    "blowup.lambda": "4.0",
    "blowup.radius": "2.0",
    "blowup.c": "1.0",
    "output.dir": "qcurv-out",
    "run.seed": "0",
}

NUMERICAL_ERRORS = (SolverError, SaddleRejected, PathError, ResolutionError, BlowupResolutionError,
                    QuadratureError, OverflowGuardError, FloatingPointError, PaneitzHypothesisError)


class ConfigError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def _floats(text: str) -> list:
    return [float(x) for x in text.replace(";", ",").split(",") if x.strip()]


def load_config(path=None) -> dict:
    flat = dict(DEFAULTS)
    if path is not None:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError([f"cannot read config file {path}"])
        for sec in cp.sections():
            for key, val in cp.items(sec):
                flat[f"{sec}.{key}"] = val
    return flat


@dataclass
class Experiment:
    spec: GridSpec
    pc: PrescribedCurvature
    Q0: float
    f_mode: str
    f_lambda: float
    cutoff: CutoffParams
    opts: SolveOptions
    nu_tol: float
    branch_lams: list
    comparison_lams: list
    appendix_lams: list
    K: float
    mp_lambda: float
    mp_nodes: int
    mp_iters: int
    mp_sigma: float
    mp_curve: list
    blowup_inputs: list
    blowup_lambda: float
    blowup_radius: float
    blowup_c: float
    out: Path
    seed: int
    raw: dict


def validate(flat: dict) -> Experiment:
    """Parse and check every invariant; all violations are reported together."""
    problems = []

    def get(key, conv, default=None):
        try:
            return conv(flat[key])
        except (KeyError, ValueError) as exc:
            problems.append(f"{key}: cannot parse {flat.get(key)!r} ({exc})")
            return default

    n = get("grid.n", int, 16)
    q0 = get("model.q0", float, -1.0)
    alphas = get("model.alphas", _floats, [1.0] * 4)
    a0 = get("cutoff.a0", float, 1.1)
    smoothing = flat.get("cutoff.smoothing", "quintic").strip()
    beyond = flat.get("lambda.allow_beyond_quarter", "false").strip().lower() in ("1", "true", "yes")
    lam_sets = {k: get(f"lambda.{k}", _floats, []) for k in ("branch", "comparison", "appendix")}
    mp_lam = get("mountainpass.lambda", float, 0.2)
    f_mode = flat.get("model.f", "builtin").strip()

    spec = None
    try:
        spec = GridSpec(n)
    except GridError as exc:
        problems.append(f"grid.n: {exc}")
    if q0 is not None and not q0 < 0:
        problems.append(f"model.q0 must be negative (got {q0})")
    pc = None
    if alphas is not None:
        if len(alphas) != 4:
            problems.append(f"model.alphas needs 4 values (got {len(alphas)})")
        elif min(alphas) <= 0:
            problems.append("model.alphas must be positive")
        else:
            pc = PrescribedCurvature(tuple(sorted(alphas)))
    if a0 is not None and not 1.0 < a0 < 2.0:
        problems.append(f"cutoff.a0 must lie in (1, 2) (got {a0})")
    if smoothing != "quintic":
        problems.append(f"cutoff.smoothing: only 'quintic' is implemented (got {smoothing!r})")
    mp_sets = [("mountainpass", [mp_lam] if mp_lam is not None else [])]
    for key, vals in list(lam_sets.items()) + mp_sets:
        for v in vals:
            hi = np.inf if (beyond and key in ("branch", "mountainpass")) else 0.25
            if not 0 < v < hi:
                problems.append(f"lambda.{key}: value {v} outside (0, {hi:g})")
    if lam_sets["branch"] and np.any(np.diff(lam_sets["branch"]) <= 0):
        problems.append("lambda.branch must be strictly increasing")
    if mp_lam is not None and lam_sets["branch"] and mp_lam not in lam_sets["branch"]:
        problems.append("mountainpass.lambda must be one of lambda.branch")
    if f_mode != "builtin" and not f_mode.startswith("constant:"):
        problems.append(f"model.f must be 'builtin' or 'constant:<value>' (got {f_mode!r})")
    f_lam = get("model.lambda", float, 0.0)
    if f_mode.startswith("constant:"):
        try:
            float(f_mode.split(":", 1)[1])
        except ValueError:
            problems.append(f"model.f constant is not a number: {f_mode!r}")
    tol = get("solver.tol_grad", float, 1e-10)
    maxn = get("solver.max_newton", int, 60)
    nu_tol = get("solver.nu_tol", float, 1e-5)
    K = get("comparison.k", float, 40 * np.pi**2)
    nodes = get("mountainpass.nodes", int, 33)
    iters = get("mountainpass.iters", int, 400)
    sigma = get("mountainpass.sigma", float, 0.5)
    curve = get("mountainpass.c_curve", _floats, [])
    b_lam = get("blowup.lambda", float, 4.0)
    b_rad = get("blowup.radius", float, 2.0)
    b_c = get("blowup.c", float, 1.0)
    seed = get("run.seed", int, 0)
    hi = np.inf if beyond else 0.25
    for v in curve or []:
        if not 0 < v < hi:
            problems.append(f"mountainpass.c_curve: value {v} outside (0, {hi:g})")
    if nodes is not None and nodes < 2:
        problems.append("mountainpass.nodes must be >= 2")
    if b_rad is not None and not 0 < b_rad < np.pi:
        problems.append("blowup.radius must lie in (0, pi)")
    if problems:
        raise ConfigError(problems)
    inputs = [s.strip() for s in flat.get("blowup.inputs", "").split(",") if s.strip()]
    return Experiment(spec, pc, q0, f_mode, f_lam, CutoffParams(a0), SolveOptions(tol_grad=tol, max_newton=maxn),
                      nu_tol, lam_sets["branch"], lam_sets["comparison"], lam_sets["appendix"], K, mp_lam,
                      nodes, iters, sigma, curve, inputs, b_lam, b_rad, b_c, Path(flat["output.dir"]), seed, flat)


# outputs -------------------------------------------------------------------------------

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x) + 0.0:.15g}"
    return str(x)


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for r in rows:
            wr.writerow([_fmt(x) for x in r])
    return path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, exp: Experiment, files, timings: dict, status: str) -> Path:
    entries = []
    for f in sorted({Path(p) for p in files}):
        entries.append({"file": str(f.relative_to(out)), "sha256": _sha256(f), "bytes": f.stat().st_size})
    doc = {
        "command": command,
        "status": status,
        "config": dict(sorted(exp.raw.items())),
        "constants": {"Q0": exp.Q0, "alphas": list(exp.pc.alphas), "A0": exp.cutoff.A0, "K": exp.K,
                      "N": exp.spec.n},
        "versions": {"qcurv": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "timings_s": timings,
        "files": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# subcommands ------------------------------------------------------------------------

def _f_field(exp: Experiment) -> ScalarField:
    if exp.f_mode.startswith("constant:"):
        return ScalarField.constant(exp.spec, float(exp.f_mode.split(":", 1)[1]))
    return f_lambda_field(exp.pc.with_lambda(exp.f_lambda), exp.spec)


def cmd_solve_min(exp: Experiment, out: Path, args) -> list:
    f = _f_field(exp)
    c = PaneitzCoefficients.flat(exp.spec)
    res = solve_unique_min(f, exp.Q0, c, exp.opts)
    snap = write_snapshot(out / "solution.qc4f", res.u, exp.f_lambda)
    e4 = np.exp(4.0 * res.u.values)
    kp = float(np.mean(f.values * e4)) - exp.Q0
    b = res.breakdown
    summary = write_csv(out / "solve_min.csv",
                        ["quadratic", "linear", "exponential", "energy", "grad_norm", "kp_residual", "iterations",
                         "u_max_abs"],
                        [[b.quadratic, b.linear, b.exponential, b.total, res.grad_norm, kp, res.iterations,
                          float(np.abs(res.u.values).max())]])
    print(f"energy {b.total:.12g}  grad {res.grad_norm:.3e}  kp_residual {kp:.3e}  max|u| "
          f"{np.abs(res.u.values).max():.3e}")
    return [snap, summary]


def cmd_continue_branch(exp: Experiment, out: Path, args) -> list:
    br = continue_branch(exp.pc, exp.Q0, exp.branch_lams, exp.spec, opts=exp.opts, nu_tol=exp.nu_tol)
    files = write_branch(br, out / "branch")
    for e in br.entries:
        print(f"lambda {e.lam:.6g}  E {e.breakdown.total:.12g}  nu {e.nu.value:.6g}")
    if br.truncated:
        print(f"branch truncated at lambda {br.lambda_fail:.6g}: {br.reason}")
    return files


def _appendix_row(lam, a0):
    a = appendix_integrals(lam, CutoffParams(a0))
    return [lam, a.I, a.II, a.III, a.M1, a.II_closed, a.II_relerr, a.I_bound]


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, *zip(*items)))
    return [fn(*it) for it in items]


def cmd_appendix_oracle(exp: Experiment, out: Path, args) -> list:
    lams = sorted(exp.appendix_lams, reverse=True)
    rows = _map(_appendix_row, [(lam, exp.cutoff.A0) for lam in lams], args.jobs)
    for r in rows:
        print(f"lambda {r[0]:.6g}  II {r[2]:.15g}  closed form {r[5]:.15g}  rel.err {r[6]:.2e}  III {r[3]:.6g}")
    return [write_csv(out / "appendix.csv", ["lambda", "I", "II", "III", "M1", "II_closed", "II_relerr", "I_bound"],
                      rows)]


def cmd_comparison_scan(exp: Experiment, out: Path, args) -> list:
    c = PaneitzCoefficients.flat(exp.spec)
    f0 = f_lambda_field(exp.pc.with_lambda(0.0), exp.spec)
    u0 = solve_unique_min(f0, exp.Q0, c, exp.opts).u
    lams = sorted(exp.comparison_lams, reverse=True)
    L = choose_L(exp.pc, max(lams))
    rows, curves = [], []
    for lam in lams:
        rep = ray_energy(u0, exp.pc, exp.Q0, lam, L, exp.cutoff, K=exp.K)
        rows.append([lam, L, rep.M1, rep.paneitz_form, rep.base_energy, rep.ray_max, rep.s_star, rep.s_bound,
                     rep.c_upper, rep.increment, exp.K * rep.log_inv, int(rep.bound_ok), int(rep.increment_ok)])
        curves.extend([lam, s, e] for s, e in zip(rep.s_values, rep.energies))
        print(f"lambda {lam:.3g}  c_upper {rep.c_upper:.10g}  s_star {rep.s_star:.6g}  s_bound {rep.s_bound:.6g}  "
              f"increment/log {rep.increment / rep.log_inv:.6g}")
    files = [write_csv(out / "comparison.csv",
                       ["lambda", "L", "M1", "paneitz_form", "base_energy", "ray_max", "s_star", "s_bound",
                        "c_upper", "increment_dx", "K_log", "bound_ok", "increment_ok"], rows),
             write_csv(out / "ray_curves.csv", ["lambda", "s", "energy"], curves)]
    return files


def cmd_mountain_pass(exp: Experiment, out: Path, args) -> list:
    br = continue_branch(exp.pc, exp.Q0, exp.branch_lams, exp.spec, opts=exp.opts, nu_tol=exp.nu_tol)
    if exp.mp_lambda not in br.lambdas:
        raise SolverError(f"branch stopped before lambda {exp.mp_lambda} ({br.reason})")
    ss = second_solution(br, exp.pc, exp.Q0, exp.mp_lambda, exp.spec, M=exp.mp_nodes, iters=exp.mp_iters,
                         sigma=exp.mp_sigma, seed=exp.seed)
    cp = ss.critical
    st = ss.structure
    files = [write_snapshot(out / "saddle.qc4f", ScalarField(exp.spec, cp.field), exp.mp_lambda)]
    files.append(write_csv(out / "saddle.csv",
                           ["lambda", "c_est", "path_converged", "saddle_energy", "grad_norm", "nu_est",
                            "distance_to_branch", "rho", "beta0", "sup_branch", "entropy", "c_prime",
                            "entropy_bound", "tail_fraction", "endpoint_s"],
                           [[ss.lam, ss.report.c_est, int(ss.report.converged), cp.energy, cp.grad_norm,
                             cp.nu.value, cp.distance_to_branch, _opt(st.rho), _opt(st.beta0), st.sup_branch,
                             cp.entropy, _opt(ss.c_prime), _opt(ss.entropy_bound), ss.tail, ss.endpoint_s]]))
    model = _model(exp, exp.mp_lambda)
    files.append(write_csv(out / "path.csv", ["node", "energy"],
                           [[i, e] for i, e in enumerate(ss.report.path.energies(model))]))
    files.append(write_csv(out / "annulus_scan.csv", ["radius", "min_energy"],
                           list(zip(st.radii, st.annulus_profile))))
    if exp.mp_curve:
        u0 = br.entries[0].u.values
        v = u0 + ss.endpoint_s * bump_direction(exp.spec, exp.mp_sigma)
        rows = c_curve(exp.mp_curve, lambda mu: _model(exp, mu), u0, lambda mu: v, M=exp.mp_nodes,
                       optimize_kw=dict(iters=exp.mp_iters, step=0.5), K=exp.K, volume=VOLUME)
    else:
        rep = ss.report
        rows = [CCurveRow(ss.lam, rep.c_est, rep.t_star, rep.grad_norm_at_max, rep.entropy_at_max,
                          flags=[] if rep.converged else ["not-converged"])]
    files.append(write_csv(out / "c_curve.csv",
                           ["lambda", "c_est", "t_star", "grad_norm", "entropy", "c_fd_derivative", "flags"],
                           [[r.lam, _opt(r.c_est), _opt(r.t_star), _opt(r.grad_norm), _opt(r.entropy_at_max),
                             _opt(r.c_fd_derivative), ";".join(r.flags)] for r in rows]))
    half = "n/a" if st.rho is None else f"{st.rho / 2:.4g}"
    print(f"lambda {ss.lam:.4g}: c_est {ss.report.c_est:.10g}, saddle E {cp.energy:.10g}, grad {cp.grad_norm:.2e}, "
          f"nu {cp.nu.value:.4g}, distance {cp.distance_to_branch:.4g} vs rho/2 {half}, "
          f"entropy {cp.entropy:.6g} vs |c'|+3 "
          f"{'n/a' if ss.entropy_bound is None else format(ss.entropy_bound, '.6g')}")
    if st.rho is None:
        print("no admissible mountain radius found; distance check not applied")
    return files


def _opt(x):
    return "" if x is None else x


def _model(exp, lam):
    return FieldEnergy(f_lambda_field(exp.pc.with_lambda(lam), exp.spec), exp.Q0)


def cmd_blowup_analyze(exp: Experiment, out: Path, args) -> list:
    inputs = list(args.input or []) + exp.blowup_inputs
    fields = []
    if inputs:
        for p in inputs:
            u, lam = read_snapshot(p)
            fields.append((Path(p).stem, u, lam))
    else:
        spec = exp.spec if exp.spec.n >= 32 else GridSpec(32)
        u = synthetic_blowup(exp.blowup_lambda, "a", exp.pc, spec, r=0.3)
        fields.append(("synthetic", u, exp.blowup_lambda))
    files = []
    for name, u, lam in fields:
        rep = analyze(u, exp.pc, lam, radius=exp.blowup_radius, c=exp.blowup_c)
        files.append(write_peaks_csv(rep, out / f"peaks_{name}.csv"))
        peaks = [p for p in detect_peaks(u, exp.pc, lam) if p.blowup]
        for k, p in enumerate(peaks[:8]):
            try:
                res = rescale_case_a(u, lam, p.index)
            except BlowupResolutionError:
                continue
            files.append(write_profile_csv(res, out / f"profile_{name}_{k}.csv"))
        for r in rep.rows:
            print(f"{name}: peak at {r.location} u={r.value:.6g} case {r.case} r={r.r:.6g} "
                  f"err={r.profile_error:.2e} weight={r.mass.weight:.4g} {';'.join(r.flags)}")
        if not rep.rows:
            print(f"{name}: no blow-up peaks")
    return files


def cmd_selftest(exp: Experiment, out: Path, args) -> list:
    from .selftest import run_selftest
    rows = run_selftest(GridSpec(16), seed=exp.seed)
    width = max(len(r[0]) for r in rows)
    for name, value, tol, ok in rows:
        print(f"{name:<{width}}  {value:11.3e}  <= {tol:8.1e}  {'PASS' if ok else 'FAIL'}")
    path = write_csv(out / "selftest.csv", ["check", "value", "tolerance", "pass"],
                     [[n, v, t, int(o)] for n, v, t, o in rows])
    if not all(r[3] for r in rows):
        raise SolverError("selftest invariant failed")
    return [path]


COMMANDS = {
    "solve-min": cmd_solve_min,
    "continue-branch": cmd_continue_branch,
    "comparison-scan": cmd_comparison_scan,
    "mountain-pass": cmd_mountain_pass,
    "blowup-analyze": cmd_blowup_analyze,
    "appendix-oracle": cmd_appendix_oracle,
    "selftest": cmd_selftest,
}


def _apply_overrides(flat: dict, args):
    if args.out:
        flat["output.dir"] = args.out
    if args.seed is not None:
        flat["run.seed"] = str(args.seed)
    if args.lam is not None:
        flat["model.lambda"] = str(args.lam)
    lo, hi, cnt = args.lambda_min, args.lambda_max, args.lambda_count
    if any(v is not None for v in (lo, hi, cnt)):
        if None in (lo, hi, cnt):
            raise ConfigError(["--lambda-min, --lambda-max and --lambda-count must be given together"])
        if args.command in ("comparison-scan", "appendix-oracle"):
            if lo <= 0:
                raise ConfigError(["--lambda-min must be positive"])
            grid = np.geomspace(lo, hi, cnt)
            key = "lambda.comparison" if args.command == "comparison-scan" else "lambda.appendix"
        else:
            grid = np.linspace(lo, hi, cnt)
            key = "lambda.branch"
        flat[key] = ", ".join(repr(float(x)) for x in grid)
        if args.command == "mountain-pass":
            flat["mountainpass.lambda"] = repr(float(grid[-1]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qcurv", description="Prescribed Q-curvature experiments on the flat 4-torus")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="INI config file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers for independent lambda jobs")
    p.add_argument("--seed", type=int)
    p.add_argument("--lambda", dest="lam", type=float, help="lambda of f for solve-min")
    p.add_argument("--lambda-min", type=float)
    p.add_argument("--lambda-max", type=float)
    p.add_argument("--lambda-count", type=int)
    p.add_argument("--input", action="append", help="snapshot for blowup-analyze (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        flat = load_config(args.config)
        _apply_overrides(flat, args)
        exp = validate(flat)
        if args.jobs < 1:
            raise ConfigError(["--jobs must be >= 1"])
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for prob in exc.problems:
            print(f"  - {prob}", file=sys.stderr)
        return 2
    out = exp.out
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    status, code, files = "ok", 0, []
    try:
        files = COMMANDS[args.command](exp, out, args)
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        status, code = f"numerical failure: {exc}", 3
    timings = {args.command: round(time.perf_counter() - t0, 3)}
    write_manifest(out, args.command, exp, files, timings, status)
    return code


if __name__ == "__main__":
    sys.exit(main())
