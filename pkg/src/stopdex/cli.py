"""Command-line front end: ``stopdex <command> --config FILE [--out DIR]``.

Exit codes: 0 success, 2 configuration error, 3 infeasible or failed
consistency check, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import errors as E
from .config import ConfigError, ProblemConfig, load_config
from .diffusion_core import DiffusionSpec, Domain, solve_resolvent
from .expression import ExpressionError
from .forward_solver import ForwardProblem, RewardFamily, Strategy, value_curve
from .index_engine import IndexProblem, index_curve
from .inverse_solver import (EarlyInverseProblem, Extension, InverseProblem, round_trip,
                             solve_inverse, verify_candidate)
from .modularity import lattice_verdict
from .montecarlo import Rule, SimConfig, simulate_value

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4
ROUND_TRIP_TOL = 1e-3

CONFIG_ERRORS = (ConfigError, ExpressionError, E.InvalidBoundary, E.InvalidRule, E.AtomUnsupported)
INFEASIBLE_ERRORS = (E.NegativeVariance, E.NonMonotoneIndex, E.TriangleViolation)


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, str):
        return v
    return format(float(v), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# -- building problems from a config -------------------------------------------------

def _x_only(expr):
    return lambda x: expr(x, 0.0)


def build_spec(cfg: ProblemConfig, start=None) -> DiffusionSpec:
    s2 = cfg.expression("diffusion", "sigma2", required=True, allow=("x",))
    mu = cfg.expression("diffusion", "mu", required=True, allow=("x",))
    left, right = cfg.numbers("diffusion", "domain", (-math.inf, math.inf), count=2)
    lb, rb = cfg.words("diffusion", "boundaries", ("inaccessible", "inaccessible"), count=2)
    atoms = []
    raw = cfg.raw("diffusion", "atoms")
    if raw:
        for part in raw.split(","):
            try:
                xa, m = (float(v) for v in part.split(":"))
            except ValueError:
                raise ConfigError(f"[diffusion] atoms: expected 'x:mass' pairs, got {part.strip()!r}") from None
            atoms.append((xa, m))
    x0 = start if start is not None else cfg.number("diffusion", "start", required=True)
    try:
        return DiffusionSpec(Domain(left, right, lb, rb), _x_only(s2), _x_only(mu), x0, tuple(atoms))
    except ValueError as exc:
        raise ConfigError(f"[diffusion]: {exc}") from exc


def build_reward(cfg: ProblemConfig, section="reward") -> RewardFamily:
    G = cfg.expression(section, "G", required=True)
    Gt = cfg.expression(section, "G_theta", required=True)
    c = cfg.expression(section, "c")
    ct = cfg.expression(section, "c_theta") if section == "reward" else None
    if c is not None and c.uses("theta") and ct is None:
        raise ConfigError(f"[{section}] c depends on theta, so c_theta is required")
    tr = cfg.numbers(section, "theta_range", None, count=2) or cfg.numbers("reward", "theta_range",
                                                                         required=True, count=2)
    return RewardFamily(G, Gt, c, tr, ct)


def _rho(cfg):
    rho = cfg.number("discount", "rho", required=True)
    if not rho > 0:
        raise ConfigError("[discount] rho must be positive")
    return rho


def build_forward(cfg: ProblemConfig) -> ForwardProblem:
    kw = {}
    n = cfg.integer("numerics", "n_points")
    if n:
        kw["n_points"] = n
    tr = cfg.numbers("numerics", "truncation", None, count=2)
    if tr:
        kw["truncation"] = tr
    tol = cfg.number("numerics", "tol")
    if tol is not None:
        kw["tol"] = tol
    return ForwardProblem(build_spec(cfg), build_reward(cfg), _rho(cfg), **kw)


def _grid(cfg, section, n_override, default_n, range_key="x_range", points_key="x_points"):
    lo, hi = cfg.numbers(section, range_key, required=True, count=2)
    n = n_override or cfg.integer(section, points_key, default_n)
    if n < 2 or not lo < hi:
        raise ConfigError(f"[{section}] {range_key} must be increasing with at least 2 points")
    return np.linspace(lo, hi, n)


# -- commands -----------------------------------------------------------------------

def cmd_forward(cfg, args):
    fp = build_forward(cfg)
    n = args.theta_grid or cfg.integer("numerics", "theta_points", 51)
    thetas = fp.theta_grid(n)
    curve = value_curve(fp, thetas)
    rows = zip(curve.theta, curve.V, curve.E, [c.value for c in curve.classification],
               curve.threshold_lo, curve.threshold_hi, curve.dV_left, curve.dV_right)
    write_csv(os.path.join(args.out, "value_curve.csv"),
              ["theta", "V", "E", "classification", "threshold_lo", "threshold_hi", "dV_left", "dV_right"],
              rows)
    return EXIT_OK


def _side(cfg, fp):
    side = cfg.raw("numerics", "side", "auto")
    if side in ("upper", "lower"):
        return side
    if side != "auto":
        raise ConfigError("[numerics] side must be upper, lower or auto")
    lo, hi = fp.reward.theta_range
    rep = fp.report(0.5 * (lo + hi))
    return "lower" if rep.classification is Strategy.LOWER else "upper"


def cmd_index(cfg, args):
    fp = build_forward(cfg)
    problem = IndexProblem.from_forward(fp, _side(cfg, fp))
    xs = _grid(cfg, "numerics", args.x_grid, 41)
    curve = index_curve(problem, xs)
    write_csv(os.path.join(args.out, "index_curve.csv"), ["x", "theta_star_lo", "theta_star_hi"],
              zip(curve.x, curve.theta_lo, curve.theta_hi))
    return EXIT_OK


def cmd_check_modularity(cfg, args):
    fp = build_forward(cfg)
    xs = _grid(cfg, "numerics", args.x_grid, 41)
    lo, hi = fp.reward.theta_range
    ts = np.linspace(lo, hi, args.theta_grid or cfg.integer("numerics", "theta_points", 41))
    U = np.column_stack([fp.early.U(xs, t) for t in ts])
    v = lattice_verdict(U, xs, ts)
    lines = [f"verdict: {v.verdict.value}", f"strict: {v.strict}", f"tested: {v.tested_domain}",
             f"witness: {v.witness if v.witness else 'none'}"]
    _write_text(os.path.join(args.out, "modularity.txt"), lines)
    return EXIT_OK


def build_inverse(cfg: ProblemConfig):
    sec = "inverse"
    rho = _rho(cfg)
    start = cfg.number(sec, "start", None)
    if start is None:
        start = cfg.number("diffusion", "start", required=True)
    tr = cfg.numbers(sec, "theta_range", None, count=2) or cfg.numbers("reward", "theta_range",
                                                                     required=True, count=2)
    side = cfg.raw(sec, "side", "upper")
    if side not in ("upper", "lower"):
        raise ConfigError("[inverse] side must be upper or lower")
    if cfg.has(sec, "E"):
        Ee = cfg.expression(sec, "E", True, ("theta",))
        Ep = cfg.expression(sec, "E_prime", True, ("theta",))
        return EarlyInverseProblem(lambda t: Ee(0.0, t), lambda t: Ep(0.0, t),
                                   cfg.expression(sec, "U", True), cfg.expression(sec, "U_theta", True),
                                   start, tr, rho, cfg.expression(sec, "U_x"), side)
    pick = lambda key, req: (cfg.expression(sec, key) if cfg.has(sec, key)
                             else cfg.expression("reward", key, required=req))
    V = cfg.expression(sec, "V", True, ("theta",))
    Vp = cfg.expression(sec, "V_prime", False, ("theta",))
    c = pick("c", False)
    return InverseProblem(lambda t: V(0.0, t), pick("G", True), pick("G_theta", True),
                          None if c is None else _x_only(c), start, tr, rho,
                          None if Vp is None else (lambda t: Vp(0.0, t)), side)


def _recover(cfg, args):
    problem = build_inverse(cfg)
    ts = cfg.expression("inverse", "theta_star", True, ("x",))
    xs = _grid(cfg, "inverse", args.x_grid, 201)
    ext = None
    if cfg.has("inverse", "extension_theta_star"):
        ets = cfg.expression("inverse", "extension_theta_star", True, ("x",))
        a, b = cfg.numbers("inverse", "extension_range", required=True, count=2)
        h = xs[1] - xs[0]
        n = max(5, int(round((b - a) / h)) + 1)
        mode = cfg.raw("inverse", "extension_mode", "value")
        ext = Extension(_x_only(ets), np.linspace(a, b, n), mode)
    cand = solve_inverse(problem, _x_only(ts), xs, extension=ext)
    return problem, cand


def _write_recovered(out, cand):
    feas_pt = ~cand.negative if cand.negative is not None else np.ones(len(cand.phi.grid), bool)
    R = cand.R_hat.values if cand.R_hat is not None else np.full(len(cand.phi.grid), math.nan)
    write_csv(os.path.join(out, "recovered.csv"), ["x", "phi", "R_hat", "sigma2", "mu", "feasible"],
              zip(cand.phi.grid, cand.phi.values, R, cand.sigma2.values, cand.mu.values, feas_pt))
    write_csv(os.path.join(out, "atoms.csv"), ["x", "mass"], cand.atoms)


def _r_at_start(cfg, problem, cand):
    """R(X0) under the recovered diffusion, or the configured value."""
    r0 = cfg.number("inverse", "r_at_start")
    if r0 is not None or not isinstance(problem, InverseProblem) or problem.c is None:
        return r0 or 0.0, None
    spec = cand.to_spec(problem.X0)
    from .diffusion_core import solve_eigenfunctions
    pair = solve_eigenfunctions(spec, problem.rho)
    R = solve_resolvent(spec, pair, problem.c)
    return float(R(problem.X0)), pair


def _write_text(path, lines):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_inverse(cfg, args, with_round_trip=False):
    problem, cand = _recover(cfg, args)
    _write_recovered(args.out, cand)
    lines = [f"feasible: {cand.feasible}", f"recovered range: [{cand.x_range[0]:.17g}, {cand.x_range[1]:.17g}]"]
    lines += [f"diagnostic: {d}" for d in cand.diagnostics]
    ok = cand.feasible
    if cand.feasible:
        r0, _ = _r_at_start(cfg, problem, cand)
        lines.append(f"R(X0) used for checks: {r0:.17g}")
        rep = verify_candidate(problem, cand, r_at_start=r0)
        lines += rep.lines()
        if with_round_trip:
            ok = ok and rep.passed
            if isinstance(problem, InverseProblem):
                lo, hi = cfg.numbers("inverse", "round_trip_theta", None, count=2) or problem.theta_range
                n = args.theta_grid or 11
                err = round_trip(problem, cand, np.linspace(lo, hi, n))
                passed = err <= ROUND_TRIP_TOL
                ok = ok and passed
                lines.append(f"[{'PASS' if passed else 'FAIL'}] round trip: max rel. error {err:.3g}")
    else:
        lines.append("[FAIL] sigma2 >= 0: NegativeVariance" if cand.negative is not None
                     and cand.negative.any() else "[FAIL] feasibility")
    _write_text(os.path.join(args.out, "report.txt"), lines)
    for line in lines:
        if line.startswith("[FAIL]") or line.startswith("diagnostic: Negative"):
            print(line, file=sys.stderr)
    return EXIT_OK if ok else EXIT_INFEASIBLE


def cmd_verify(cfg, args):
    return cmd_inverse(cfg, args, with_round_trip=True)


def cmd_simulate(cfg, args):
    spec = build_spec(cfg)
    if spec.atoms:
        raise E.AtomUnsupported("sticky points cannot be simulated")
    reward = build_reward(cfg)
    rho = _rho(cfg)
    theta = cfg.number("simulate", "theta", required=True)
    seed = args.seed if args.seed is not None else cfg.integer("simulate", "seed", 0)
    sim = SimConfig(cfg.integer("simulate", "n_paths", 100_000), cfg.number("simulate", "dt", 1e-3),
                    cfg.number("simulate", "t_max", 20.0), seed, cfg.flag("simulate", "antithetic", True),
                    cfg.integer("simulate", "block", 20_000))
    rule_txt = cfg.raw("simulate", "rule", "optimal").strip()
    if rule_txt == "optimal":
        rep = build_forward(cfg).report(theta)
        if rep.classification in (Strategy.UPPER, Strategy.LOWER):
            rule = Rule.hit(rep.thresholds[0])
        elif rep.classification is Strategy.STOP_NOW:
            rule = Rule.stop_now()
        elif rep.classification is Strategy.WAIT_FOREVER:
            rule = Rule.never()
        else:
            raise E.InvalidRule("no single threshold is optimal at the start point")
    elif rule_txt in ("stop", "never"):
        rule = Rule.parse(rule_txt)
    else:
        rule = Rule.hit(cfg.number("simulate", "rule"))
    est = simulate_value(spec, reward, theta, rule, sim, rho=rho)
    lines = [f"mean: {est.mean:.17g}", f"stderr: {est.stderr:.17g}",
             f"bias_bound: {est.truncation_bias_bound:.17g}", f"n_effective: {est.n_effective}",
             f"rule: {rule.kind}" + ("" if rule.level is None else f" {rule.level:.17g}")]
    lines += [f"warning: {w}" for w in est.warnings]
    _write_text(os.path.join(args.out, "estimate.txt"), lines)
    return EXIT_OK


COMMANDS = {
    "forward": cmd_forward,
    "inverse": cmd_inverse,
    "index": cmd_index,
    "check-modularity": cmd_check_modularity,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
}


def _positive_int(text):
    v = int(text)
    if v < 2:
        raise argparse.ArgumentTypeError("need at least 2 points")
    return v


def make_parser():
    p = argparse.ArgumentParser(prog="stopdex", description="Optimal stopping indices for diffusions.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=".")
    p.add_argument("--theta-grid", type=_positive_int, default=None)
    p.add_argument("--x-grid", type=_positive_int, default=None)
    p.add_argument("--seed", type=int, default=None)
    return p


def run_command(argv) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        cfg = load_config(args.config)
        os.makedirs(args.out, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except CONFIG_ERRORS as exc:
        _report(exc)
        return EXIT_CONFIG
    except INFEASIBLE_ERRORS as exc:
        _report(exc)
        return EXIT_INFEASIBLE
    except E.StopdexError as exc:
        _report(exc)
        return EXIT_NUMERIC
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        _report(exc)
        return EXIT_NUMERIC


def _report(exc):
    print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)


def main(argv=None) -> int:
    return run_command(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
