"""Command line front end.

Every subcommand reads ``--config`` (JSON), writes its artifacts under
``--out`` and a ``checks.json`` listing each assertion, and exits with 0
only when every enabled assertion passes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import corrector as C
from . import ergodic as E
from . import harness as H
from . import hjb
from .merton import apply_generator_A, dump_merton_csv, merton_crra, merton_general_fd
from .model import ParameterError, load_config, validate_params

logger = logging.getLogger("merton_tc")

EXIT_OK, EXIT_ASSERT, EXIT_ERROR = 0, 1, 2


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None = None
    detail: str = ""


def _section(cfg: dict, name: str, defaults: dict) -> dict:
    sec = dict(cfg.get(name) or {})
    unknown = set(sec) - set(defaults)
    if unknown:
        raise ParameterError(f"unknown keys in '{name}': {sorted(unknown)}")
    return {**defaults, **sec}


def _setup(cfg):
    p, u = cfg["model"], cfg["utility"]
    bad = validate_params(p, u)
    if bad:
        raise ParameterError("; ".join(f"{v.code}: {v.message}" for v in bad))
    return p, u, merton_crra(p, u.gamma)


def cmd_merton(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "merton", {"z_min": 0.1, "z_max": 10.0, "n": 2000, "general_fd": True,
                                 "rel_tol": 1e-3, "identity_tol": 1e-6})
    p, u, m = _setup(cfg)
    z = np.geomspace(s["z_min"], s["z_max"], int(s["n"]))
    dump_merton_csv(m, z, out / "merton_closed_form.csv")
    checks = []
    core = z[int(0.1 * z.size): int(0.9 * z.size)]
    lhs = apply_generator_A(m, m.v, core, m.v_z, m.v_zz)
    rel = float(np.max(np.abs(lhs - u.U(m.c(core))) / np.abs(u.U(m.c(core)))))
    checks.append(Check("closed_form_identity", rel <= s["identity_tol"], rel))
    if s["general_fd"]:
        g = merton_general_fd(p, u, z)
        dump_merton_csv(g, z, out / "merton_fd.csv")
        err = float(np.max(np.abs(g.v(core) / m.v(core) - 1)))
        checks.append(Check("fd_vs_closed_form", err <= s["rel_tol"], err))
        lhs = apply_generator_A(g, g.v, core, g.v_z, g.v_zz)
        rel = float(np.max(np.abs(lhs - u.U(g.c(core))) / np.abs(u.U(g.c(core)))))
        checks.append(Check("fd_identity", rel <= s["identity_tol"], rel))
    return checks


def cmd_corrector(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "corrector", {"z": 1.0, "n_rho": 10_000, "mc": False, "n_paths": 200_000, "T": 150.0,
                                    "dt": 0.05, "z_points": [1.0], "tol": 1e-12, "mc_rel_tol": 0.02})
    p, u, m = _setup(cfg)
    fc = C.first_corrector_at(m, s["z"], p.lambda_sell, p.lambda_buy)
    sc = C.second_corrector_crra(m, fc)
    span = 3 * max(fc.rho0, 1e-3)
    rho = np.linspace(-span, span, int(s["n_rho"]))
    C.dump_wbar_csv(fc, rho, out / "wbar.csv")
    zs = np.geomspace(0.25, 4.0, 49)
    C.dump_second_corrector_csv(sc, zs, out / "second_corrector.csv")
    tol = s["tol"]
    checks = [Check("smooth_pasting", float(np.max(np.abs(fc.pasting_residuals()))) <= tol,
                    float(np.max(np.abs(fc.pasting_residuals()))))]
    _, wr, _ = C.eval_wbar(fc, rho)
    slack = float(np.max(np.maximum(wr - fc.lambda_sell, -fc.lambda_buy - wr)))
    checks.append(Check("gradient_constraint", slack <= tol, slack))
    res = fc.pde_residual(rho)
    inside = (rho >= fc.rho1) & (rho <= fc.rho0)
    checks.append(Check("pde_inside_band", float(np.max(np.abs(res[inside]), initial=0.0)) <= tol,
                        float(np.max(np.abs(res[inside]), initial=0.0))))
    checks.append(Check("pde_outside_band", float(np.max(res[~inside], initial=-np.inf)) <= tol,
                        float(np.max(res[~inside], initial=-np.inf))))
    sw = C.solve_first_corrector(fc.sigma, fc.alphabar, fc.lambda_buy, fc.lambda_sell)
    w = C.eval_wbar(fc, rho)[0]
    sym = float(np.max(np.abs(C.eval_wbar(sw, -rho)[0] - w)))
    same = (sw.rho0, sw.abar) == (-fc.rho1, fc.abar) and sym <= 1e-15 * max(float(np.max(np.abs(w))), 1e-300)
    checks.append(Check("lambda_swap_symmetry", same, sym))
    summary = {"rho0": fc.rho0, "rho1": fc.rho1, "abar": fc.abar, "k1": fc.k1, "k2": fc.k2, "k4": fc.k4,
               "alphabar": fc.alphabar, "u0": sc.u0, "u_exponent": sc.exponent}
    if s["mc"]:
        mc = C.second_corrector_mc(m, fc, s["z_points"], n_paths=int(s["n_paths"]), T=s["T"], dt=s["dt"], seed=seed)
        C.dump_second_corrector_csv(mc, mc.z_points, out / "second_corrector_mc.csv")
        exact = sc.u(mc.z_points)
        dev = np.abs(mc.u_values - exact)
        checks.append(Check("mc_within_3_stderr", bool(np.all(dev <= 3 * mc.stderr)),
                            float(np.max(dev / np.where(mc.stderr > 0, mc.stderr, 1.0)))))
        rel = float(np.max(dev / np.maximum(np.abs(exact), 1e-300)))
        checks.append(Check("mc_relative", rel <= s["mc_rel_tol"] or not np.any(exact), rel))
        summary["mc"] = {"z": mc.z_points.tolist(), "u": mc.u_values.tolist(), "stderr": mc.stderr.tolist()}
    (out / "corrector.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return checks


def cmd_ergodic(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "ergodic", {"z": 1.0, "T": 1000.0, "dt": 1e-4, "n_paths": 64, "curve": True, "curve_T": 200.0,
                                  "n_grid": 15, "rel_tol": 0.02})
    p, u, m = _setup(cfg)
    fc = C.first_corrector_at(m, s["z"], p.lambda_sell, p.lambda_buy)
    fp = E.ErgodicParams(p.sigma, fc.alphabar, p.lambda_sell, p.lambda_buy)
    checks = []
    if fc.rho0 > 0:
        est = E.simulate_band(fp, E.BandPolicy.symmetric(fc.rho0), T=s["T"], dt=s["dt"],
                              n_paths=int(s["n_paths"]), seed=seed)
        dev = abs(est.mean_cost - fc.abar)
        checks.append(Check("abar_within_3_stderr", dev <= 3 * est.stderr, dev / est.stderr))
        checks.append(Check("abar_relative", dev / fc.abar <= s["rel_tol"], dev / fc.abar))
        summary = {"rho0": fc.rho0, "abar": fc.abar, "J_rho0": est.mean_cost, "stderr": est.stderr}
    else:
        summary = {"rho0": 0.0, "abar": 0.0}
    if s["curve"]:
        scale = fc.rho0 if fc.rho0 > 0 else 0.1
        b_grid = np.geomspace(scale / 3, 3 * scale, int(s["n_grid"]))
        try:
            b_star, est_b, curve = E.optimize_band(fp, b_grid, T=s["curve_T"], dt=s["dt"],
                                                   n_paths=int(s["n_paths"]), seed=seed)
            bracketed = True
        except E.BracketFailure as exc:
            b_star, curve, bracketed = float("nan"), exc.curve, False
        E.dump_band_curve_csv(curve, out / "band_curve.csv")
        if fc.rho0 > 0:
            k = int(np.searchsorted(b_grid, fc.rho0))
            cell = (float(b_grid[max(k - 1, 0)]), float(b_grid[min(k, b_grid.size - 1)]))
            near = bracketed and b_grid[max(k - 2, 0)] <= b_star <= b_grid[min(k + 1, b_grid.size - 1)]
            checks.append(Check("argmin_near_rho0", bool(near), b_star, f"rho0 cell [{cell[0]:.4g}, {cell[1]:.4g}]"))
            J = E.analytic_band_cost(fp, np.array([b for b, _ in curve]))
            z = np.array([abs(e.mean_cost - j) / e.stderr for (_, e), j in zip(curve, J)])
            checks.append(Check("curve_matches_formula", bool(np.all(z <= 3)), float(z.max())))
        else:
            checks.append(Check("bracket_failure_without_costs", not bracketed))
        summary["b_star"] = b_star
    (out / "ergodic.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return checks


_HJB = {"epsilon": None, "steps": [0.006, 0.008], "z_range": [1 / 3, 4.0], "z_points": [1.0, 2.0],
        "tol": 1e-10, "invariant_tol": 1e-8, "homogeneity_tol": 1e-2, "dump_solution": True}


def _solve(cfg, s):
    p, u, m = _setup(cfg)
    if s["epsilon"] is not None:
        p = p.replace(epsilon=float(s["epsilon"]))
    grid = hjb.merton_grid(m.pi_M, z_range=tuple(s["z_range"]), steps=tuple(s["steps"]))
    logger.info("grid %d x %d at epsilon=%g", *grid.shape, p.epsilon)
    return p, m, hjb.solve_hjb_2d(p, u, grid, m, tol=s["tol"])


def _invariant_checks(sol, tol, htol) -> list[Check]:
    inv = hjb.check_invariants(sol, tol)
    out = [
        Check("dominance", inv["dominance_max"] <= tol, inv["dominance_max"]),
        Check("buy_constraint", inv["buy_constraint_min"] >= -tol, inv["buy_constraint_min"]),
        Check("sell_constraint", inv["sell_constraint_min"] >= -tol, inv["sell_constraint_min"]),
        Check("complementarity", inv["complementarity_max"] <= tol, inv["complementarity_max"]),
        Check("concavity", max(inv["concavity_x_max"], inv["concavity_y_max"]) <= tol,
              max(inv["concavity_x_max"], inv["concavity_y_max"])),
        Check("monotone", min(inv["monotone_x_min"], inv["monotone_y_min"]) >= 0,
              min(inv["monotone_x_min"], inv["monotone_y_min"])),
    ]
    if "homogeneity_rel_max" in inv:
        out.append(Check("homogeneity", inv["homogeneity_rel_max"] <= htol, inv["homogeneity_rel_max"]))
    return out


def cmd_hjb(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "hjb", _HJB)
    p, m, sol = _solve(cfg, s)
    zs = s["z_points"]
    ivs = hjb.extract_no_trade(sol, zs)
    ue = hjb.compute_u_eps(sol, zs)
    if s["dump_solution"]:
        hjb.dump_solution_csv(sol, out / "solution.csv")
    hjb.dump_boundaries_csv(ivs, out / "boundaries.csv")
    meta = hjb.solution_metadata(sol)
    meta["u_eps"] = dict(zip(map(str, zs), ue.tolist()))
    meta["widths"] = {str(iv.z): iv.width for iv in ivs}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    checks = _invariant_checks(sol, s["invariant_tol"], s["homogeneity_tol"])
    checks.append(Check("u_eps_nonnegative", bool(np.all(ue >= -s["invariant_tol"])), float(ue.min())))
    if p.lambda_sum > 0:
        checks.append(Check("merton_line_inside", all(iv.merton_inside for iv in ivs)))
    return checks


def cmd_expand(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "expand", {"eps": list(H.DEFAULT_EPS), "z_points": [1.0, 2.0], "steps": [0.006, 0.008],
                                 "z_range": [1 / 3, 4.0], "richardson": True, "richardson_epsilon": 0.1,
                                 "slope_tol": 0.15, "u_rel_tol": 0.10, "width_tol": 0.15, "richardson_tol": 0.03})
    p, u, m = _setup(cfg)
    g = hjb.merton_grid(m.pi_M, z_range=tuple(s["z_range"]), steps=tuple(s["steps"]))
    print(f"grid {g.shape[0]} x {g.shape[1]} for epsilon in {sorted(s['eps'], reverse=True)}")
    echo = {"model": asdict(p), "gamma": u.gamma, "expand": s, "seed": seed}
    rep = H.run_expansion_study(p, u, s["eps"], s["z_points"], tuple(s["steps"]), tuple(s["z_range"]), m,
                                config=echo)
    rep.seeds = {"seed": seed}
    checks = [Check("no_failures", not rep.failures, len(rep.failures))]
    fc = C.first_corrector_at(m, 1.0, p.lambda_sell, p.lambda_buy)
    u1 = float(C.second_corrector_crra(m, fc).u(1.0))
    smallest = min(r.epsilon for r in rep.rows) if rep.rows else float("nan")
    at1 = [r for r in rep.rows if r.z == 1.0 and r.epsilon == smallest]
    if p.lambda_sum > 0:
        checks.append(Check("slope", not rep.degenerate and abs(rep.slope - 2) <= s["slope_tol"], rep.slope,
                            f"stderr {rep.slope_stderr:.3g}"))
        if at1:
            rel = abs(at1[0].u_eps / u1 - 1)
            checks.append(Check("u_eps_limit", rel <= s["u_rel_tol"], rel, f"u_eps={at1[0].u_eps:.6g} u={u1:.6g}"))
            checks.append(Check("width_ratio", abs(at1[0].width_ratio - 1) <= s["width_tol"], at1[0].width_ratio))
        if s["richardson"]:
            rc = H.richardson_check(p.replace(epsilon=s["richardson_epsilon"]), u, tuple(s["steps"]), 1.0,
                                    tuple(s["z_range"]), m)
            (out / "richardson.json").write_text(json.dumps(rc, indent=2, sort_keys=True))
            checks.append(Check("richardson", rc["relative_change"] <= s["richardson_tol"], rc["relative_change"]))
    else:
        checks.append(Check("degenerate_flag", rep.degenerate))
        worst = max((abs(r.u_eps) for r in rep.rows), default=0.0)
        checks.append(Check("corrections_at_floor", worst <= 1e-6, worst))
    checks.append(Check("u_eps_nonnegative", all(r.u_eps >= -1e-8 for r in rep.rows)))
    H.emit_report(rep, out)
    return checks


def cmd_residual(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "residual", {"z_window": [0.5, 2.0], "eps": [0.2, 0.1], "ratio_range": [1.6, 2.4],
                                   "n_z": 21, "n_xi": 41})
    p, u, m = _setup(cfg)
    fc = C.first_corrector_at(m, 1.0, p.lambda_sell, p.lambda_buy)
    sc = C.second_corrector_crra(m, fc)
    rr = H.residual_check(m, fc, sc, tuple(s["z_window"]), s["eps"], int(s["n_z"]), int(s["n_xi"]))
    (out / "residual.json").write_text(json.dumps(asdict(rr), indent=2, sort_keys=True))
    if p.lambda_sum == 0:
        return [Check("zero_without_costs", max(rr.sup_stat) == 0.0, max(rr.sup_stat))]
    lo, hi = s["ratio_range"]
    return [Check(f"decay_{a:g}_to_{b:g}", lo <= q <= hi, q)
            for a, b, q in zip(rr.eps_list, rr.eps_list[1:], rr.ratios)]


def cmd_subsolution(cfg, out: Path, seed: int) -> list[Check]:
    s = _section(cfg, "subsolution", {**_HJB, "epsilon": 0.1, "K": None, "constants": {}, "dump_solution": False,
                                      "expect_pass": True})
    p, m, sol = _solve(cfg, s)
    rec = H.check_subsolution(sol, K=s["K"], constants=s["constants"], tol=s["invariant_tol"])
    (out / "subsolution.json").write_text(json.dumps(asdict(rec), indent=2, sort_keys=True))
    want = bool(s["expect_pass"])
    return [Check("subsolution_inequalities", rec.passed == want, rec.worst_min_expression,
                  f"{rec.n_failing} of {rec.n_nodes} nodes fail"),
            Check("dominates_candidate", rec.dominated or not want, rec.min_gap)]


COMMANDS = {
    "merton": (cmd_merton, "frictionless value function, closed form against finite differences"),
    "corrector": (cmd_corrector, "first and second correctors"),
    "ergodic": (cmd_ergodic, "band policies of the ergodic control problem by simulation"),
    "hjb": (cmd_hjb, "solve the cost problem for one epsilon"),
    "expand": (cmd_expand, "epsilon sweep against the expansion"),
    "residual": (cmd_residual, "residual of the truncated expansion"),
    "subsolution": (cmd_subsolution, "sub-solution inequalities on a solved grid"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="merton-tc", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, type=Path, help="JSON run configuration")
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="overrides the seed in the config")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
        if not 0 <= seed < 2**64:
            raise ParameterError("seed must be an unsigned 64-bit integer")
        args.out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        checks = COMMANDS[args.command][0](cfg, args.out, seed)
        elapsed = time.perf_counter() - t0
    except (ParameterError, OSError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for c in checks:
        val = "" if c.value is None else f" {c.value:.6g}"
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}{val}{' ' + c.detail if c.detail else ''}")
    payload = {"command": args.command, "seed": seed, "elapsed": elapsed, "checks": [asdict(c) for c in checks]}
    (args.out / "checks.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n")
    return EXIT_OK if all(c.passed for c in checks) else EXIT_ASSERT


if __name__ == "__main__":
    sys.exit(main())
