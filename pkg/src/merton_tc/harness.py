"""Cross-checks between the closed forms, the simulations and the PDE solver.

Every routine here returns plain records; writing them to disk is handled by
:func:`emit_report` and the command line front end.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .corrector import FirstCorrector, SecondCorrector, eval_wbar, first_corrector_at, solve_first_corrector
from .hjb import EpsSolution, GridSpec, compute_u_eps, extract_no_trade, merton_grid, solve_hjb_2d
from .merton import ClosedFormMerton, MertonSolution
from .model import CRRA, ModelParams, ParameterError, Utility, dual_utility

logger = logging.getLogger(__name__)

__all__ = [
    "ExpansionReport",
    "ExpansionRow",
    "ResidualReport",
    "SubsolutionRecord",
    "assumption_audit",
    "check_subsolution",
    "config_hash",
    "emit_report",
    "fit_slope",
    "read_report",
    "residual_check",
    "richardson_check",
    "run_expansion_study",
]

DEFAULT_EPS = (0.3, 0.2, 0.15, 0.1)


def config_hash(config) -> str:
    """SHA-256 of the canonical JSON form of ``config``."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(blob.encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# ---------------------------------------------------------------- expansion


@dataclass(frozen=True)
class ExpansionRow:
    epsilon: float
    z: float
    u_eps: float
    width_ratio: float
    residual_stat: float
    runtime: float


@dataclass
class ExpansionReport:
    rows: list[ExpansionRow] = field(default_factory=list)
    slope: float = float("nan")
    slope_stderr: float = float("nan")
    degenerate: bool = False
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)

    def sort(self) -> "ExpansionReport":
        self.rows.sort(key=lambda r: (-r.epsilon, r.z))
        return self


def fit_slope(eps, gaps, floor: float = 1e-14):
    """Least-squares slope of ``log gap`` against ``log eps``.

    Returns ``(slope, stderr, degenerate)``; the fit is degenerate when any gap
    is at the numerical floor, as happens without costs.
    """
    eps = np.asarray(eps, float)
    gaps = np.asarray(gaps, float)
    if eps.size < 3:
        raise ParameterError("need at least three epsilon values")
    if np.any(~np.isfinite(gaps)) or np.any(np.abs(gaps) <= floor):
        return float("nan"), float("nan"), True
    fit = stats.linregress(np.log(eps), np.log(np.abs(gaps)))
    return float(fit.slope), float(fit.stderr), False


def run_expansion_study(
    p: ModelParams,
    u: Utility,
    eps_list=DEFAULT_EPS,
    z_points=(1.0,),
    steps=(0.006, 0.008),
    z_range=(1 / 3, 4.0),
    merton: MertonSolution | None = None,
    residual_window=(0.5, 2.0),
    config: dict | None = None,
    on_solution=None,
) -> ExpansionReport:
    """Solve the cost problem for each ``eps`` and compare with the expansion.

    The slope is fitted to ``v(1) - V`` at the Merton point of wealth 1. A
    failing ``eps`` is recorded in ``failures`` and the study continues.
    ``on_solution(eps, sol)`` is called after each successful solve.
    """
    from .merton import merton_crra
    from .corrector import second_corrector_crra

    eps_list = sorted({float(e) for e in eps_list}, reverse=True)
    if len(eps_list) < 3 or eps_list[0] < 2 * eps_list[-1]:
        raise ParameterError("need at least three epsilon values spanning a factor of 2")
    if merton is None:
        if not isinstance(u, CRRA):
            raise ParameterError("general utility needs a precomputed Merton solution")
        merton = merton_crra(p, u.gamma)
    pi_m = float(merton.y(1.0))
    grid = merton_grid(pi_m, z_range=z_range, steps=steps)
    z_points = [float(z) for z in z_points]

    residuals = {}
    if isinstance(merton, ClosedFormMerton):
        fc = first_corrector_at(merton, 1.0, p.lambda_sell, p.lambda_buy)
        sc = second_corrector_crra(merton, fc)
        res = residual_check(merton, fc, sc, residual_window, eps_list)
        residuals = dict(zip(res.eps_list, res.sup_stat))

    report = ExpansionReport(config=dict(config or {}), seeds={})
    eps_ok, gaps = [], []
    for eps in eps_list:
        pe = p.replace(epsilon=eps)
        t0 = time.perf_counter()
        try:
            sol = solve_hjb_2d(pe, u, grid, merton)
            ue = compute_u_eps(sol, z_points + [1.0])
            intervals = extract_no_trade(sol, z_points)
        except Exception as exc:  # keep going; the failure is part of the report
            logger.warning("epsilon=%g failed: %s", eps, exc)
            report.failures.append({"epsilon": eps, "error": type(exc).__name__, "message": str(exc)})
            continue
        runtime = time.perf_counter() - t0
        if on_solution is not None:
            on_solution(eps, sol)
        for z, val, iv in zip(z_points, ue, intervals):
            fcz = first_corrector_at(merton, z, p.lambda_sell, p.lambda_buy) if p.lambda_sum > 0 else None
            pred = eps * float(merton.eta(z)) * (fcz.rho0 - fcz.rho1) if fcz else 0.0
            ratio = iv.width / pred if pred > 0 else float("nan")
            report.rows.append(ExpansionRow(eps, z, float(val), float(ratio),
                                            float(residuals.get(eps, float("nan"))), float(runtime)))
        eps_ok.append(eps)
        gaps.append(float(ue[-1]) * eps**2)
    if len(eps_ok) >= 3:
        report.slope, report.slope_stderr, report.degenerate = fit_slope(eps_ok, gaps)
    else:
        report.degenerate = True
    return report.sort()


def richardson_check(p: ModelParams, u: Utility, steps=(0.006, 0.008), z: float = 1.0,
                     z_range=(1 / 3, 4.0), merton: MertonSolution | None = None) -> dict:
    """``u^eps(z)`` on a grid and on the grid with both spacings halved."""
    from .merton import merton_crra

    if merton is None:
        merton = merton_crra(p, u.gamma)
    pi_m = float(merton.y(1.0))
    out = {}
    for name, st in (("coarse", steps), ("fine", (steps[0] / 2, steps[1] / 2))):
        g = merton_grid(pi_m, z_range=z_range, steps=st)
        t0 = time.perf_counter()
        sol = solve_hjb_2d(p, u, g, merton)
        out[name] = {"u_eps": float(compute_u_eps(sol, [z])[0]), "shape": list(g.shape),
                     "runtime": time.perf_counter() - t0}
    c, f = out["coarse"]["u_eps"], out["fine"]["u_eps"]
    out["relative_change"] = abs(f - c) / abs(f) if f != 0 else float("nan")
    return out


# ---------------------------------------------------------------- residual of the expansion


@dataclass
class ResidualReport:
    eps_list: list[float]
    sup_stat: list[float]
    at_center: list[float]
    ratios: list[float]


def _require_closed_form(m: MertonSolution):
    if not isinstance(m, ClosedFormMerton):
        raise ParameterError("analytic derivatives are only available for CRRA utility")


def _expansion_J(m: ClosedFormMerton, fc: FirstCorrector, sc: SecondCorrector, z, xi, eps):
    """``J(Psi)`` for ``Psi = v - eps^2 u - eps^4 w`` at wealth ``z`` and fast variable ``xi``."""
    p, g = m.params, m.gamma
    pi = m.pi_M
    y = pi * z + eps * xi
    x = z - y
    if np.any(x <= 0) or np.any(y < 0):
        raise ParameterError("lattice point outside the positive quadrant")
    v1, v2, v3 = m.v_z(z), m.v_zz(z), m.v_zzz(z)
    if sc.kind != "closed_form":
        raise ParameterError("analytic derivatives of u need the closed-form second corrector")
    e = sc.exponent
    uu = sc.u(z)
    u1, u2 = e * uu / z, e * (e - 1) * uu / z**2
    eta, eta1 = z / g, 1.0 / g
    S, S1, S2 = eta * v1, eta1 * v1 + eta * v2, 2 * eta1 * v2 + eta * v3
    rho = xi / eta
    rz = -xi * eta1 / eta**2
    rzz = 2 * xi * eta1**2 / eta**3
    w, w1, w2 = eval_wbar(fc, rho)
    f = S * w
    f_x = S * w1 / eta
    f_xx = S * w2 / eta**2
    f_z = S1 * w + S * w1 * rz
    f_zx = (S1 * eta - S * eta1) / eta**2 * w1 + S / eta * w2 * rz
    f_zz = S2 * w + 2 * S1 * w1 * rz + S * (w2 * rz**2 + w1 * rzz)
    e4 = eps**4
    d = -eps**2 * uu - e4 * f
    d_x = -eps**2 * u1 - e4 * (f_z - pi / eps * f_x)
    d_y = -eps**2 * u1 - e4 * (f_z + (1 - pi) / eps * f_x)
    d_yy = -eps**2 * u2 - e4 * (f_zz + 2 * (1 - pi) / eps * f_zx + ((1 - pi) / eps) ** 2 * f_xx)
    # J(v) = -sigma^2 (y - y(z))^2 v_zz / 2 exactly; only the perturbation is differenced
    q = -0.5 * p.sigma**2 * (eps * xi) ** 2 * v2
    dU = dual_utility(m.utility, v1 + d_x)[0] - dual_utility(m.utility, v1)[0]
    return q + p.beta * d - p.r * x * d_x - p.mu * y * d_y - 0.5 * p.sigma**2 * y**2 * d_yy - dU


def residual_check(m: MertonSolution, fc: FirstCorrector, sc: SecondCorrector, z_window=(0.5, 2.0),
                   eps_list=(0.2, 0.1), n_z: int = 21, n_xi: int = 41) -> ResidualReport:
    """Sup of ``|J(Psi)| / eps^2`` over a lattice inside the asymptotic band.

    Inside the band the ``eps^2`` terms cancel, so the statistic is ``O(eps)``.
    """
    _require_closed_form(m)
    lo, hi = map(float, z_window)
    if not 0 < lo < hi:
        raise ParameterError("z_window must satisfy 0 < lo < hi")
    zs = np.geomspace(lo, hi, n_z)
    s = np.linspace(-1.0, 1.0, n_xi)
    Z, S = np.meshgrid(zs, s, indexing="ij")
    XI = S * m.eta(Z) * fc.rho0
    eps_list = [float(e) for e in eps_list]
    sup, center = [], []
    for eps in eps_list:
        J = _expansion_J(m, fc, sc, Z, XI, eps)
        sup.append(float(np.max(np.abs(J))) / eps**2)
        center.append(float(np.max(np.abs(J[:, n_xi // 2]))) / eps**2)
    ratios = [sup[k] / sup[k + 1] if sup[k + 1] > 0 else float("nan") for k in range(len(sup) - 1)]
    return ResidualReport(eps_list, sup, center, ratios)


# ---------------------------------------------------------------- sub-solution


@dataclass
class SubsolutionRecord:
    passed: bool
    dominated: bool
    K: float
    constants: dict
    n_nodes: int
    n_failing: int
    worst_min_expression: float
    min_gap: float
    offending: list = field(default_factory=list)


def default_subsolution_constants(m: ClosedFormMerton) -> dict:
    """Bounds for CRRA: ``eta/z = 1/gamma`` and ``alpha/z = sigma pi (1 - pi)``."""
    g, pi = m.gamma, m.pi_M
    return {"k_lower": 1.0 / g, "k_upper": 1.0 / g, "alpha_upper": m.params.sigma * pi * (1 - pi)}


def default_K(m: ClosedFormMerton, lambda_sell: float, lambda_buy: float) -> float:
    """Ten times ``a*/k`` where ``a <= a* z v'`` and ``A(z v') = k z v'``."""
    if lambda_sell + lambda_buy == 0:
        return 1.0
    fc = first_corrector_at(m, 1.0, lambda_sell, lambda_buy)
    return 10.0 * fc.abar / (m.gamma * m.v_M)


def subsolution_candidate(m: ClosedFormMerton, eps: float, K: float, constants: dict, lambda_sell: float,
                          lambda_buy: float):
    """Return a callable giving ``V, V_x, V_y, V_yy`` of ``v - K eps^2 phi - eps^4 phi wt(xi/z)``.

    ``phi = z v'`` is positive with ``A phi = v_M phi`` for every CRRA exponent.
    """
    wt = solve_first_corrector(math.sqrt(constants["k_lower"]) * m.params.sigma,
                               constants["alpha_upper"] * constants["k_upper"], 2 * lambda_sell, 2 * lambda_buy) \
        if lambda_sell + lambda_buy > 0 else None
    pi = m.pi_M

    def evaluate(x, y):
        z = x + y
        v0, v1, v2, v3 = m.v(z), m.v_z(z), m.v_zz(z), m.v_zzz(z)
        phi, phi1, phi2 = z * v1, v1 + z * v2, 2 * v2 + z * v3
        if wt is None:
            w = w1 = w2 = np.zeros_like(z)
        else:
            w, w1, w2 = eval_wbar(wt, (y / z - pi) / eps)
        s_x, s_y, s_yy = -y / z**2, x / z**2, -2 * x / z**3
        G = phi * w
        G_x = phi1 * w + phi * w1 * s_x / eps
        G_y = phi1 * w + phi * w1 * s_y / eps
        G_yy = phi2 * w + 2 * phi1 * w1 * s_y / eps + phi * (w2 * s_y**2 / eps**2 + w1 * s_yy / eps)
        k2, e4 = K * eps**2, eps**4
        return (v0 - k2 * phi - e4 * G, v1 - k2 * phi1 - e4 * G_x, v1 - k2 * phi1 - e4 * G_y,
                v2 - k2 * phi2 - e4 * G_yy)

    return evaluate, wt


def check_subsolution(sol: EpsSolution, K: float | None = None, constants: dict | None = None,
                      tol: float = 1e-8, max_report: int = 20) -> SubsolutionRecord:
    """Check the sub-solution inequalities for the candidate at every grid node and ``V >= candidate``."""
    m = sol.merton
    _require_closed_form(m)
    p = sol.params
    eps = p.epsilon
    constants = {**default_subsolution_constants(m), **(constants or {})}
    if K is None:
        K = default_K(m, p.lambda_sell, p.lambda_buy)
    evaluate, _ = subsolution_candidate(m, eps, K, constants, p.lambda_sell, p.lambda_buy)
    X, Y = sol.grid.mesh()
    V, Vx, Vy, Vyy = evaluate(X, Y)
    with np.errstate(invalid="ignore"):
        Ut = np.where(Vx > 0, dual_utility(m.utility, np.where(Vx > 0, Vx, 1.0))[0], np.inf)
    J = p.beta * V - p.r * X * Vx - p.mu * Y * Vy - 0.5 * p.sigma**2 * Y**2 * Vyy - Ut
    buy = (1 + p.cost("buy")) * Vx - Vy
    sell = (1 + p.cost("sell")) * Vy - Vx
    low = np.minimum(np.minimum(J, buy), sell)
    bad = low > tol
    gap = sol.V - V
    offending = [{"x": float(X[i, j]), "y": float(Y[i, j]), "J": float(J[i, j]), "buy": float(buy[i, j]),
                  "sell": float(sell[i, j])} for i, j in np.argwhere(bad)[:max_report]]
    return SubsolutionRecord(
        passed=not bad.any(),
        dominated=bool(np.all(gap >= -tol)),
        K=float(K),
        constants=constants,
        n_nodes=int(bad.size),
        n_failing=int(bad.sum()),
        worst_min_expression=float(low.max()),
        min_gap=float(gap.min()),
        offending=offending,
    )


# ---------------------------------------------------------------- assumptions


def assumption_audit(m: MertonSolution, z=None) -> dict:
    """Spread of the ratios that the structural assumptions require to be bounded or constant."""
    z = np.geomspace(0.25, 4.0, 33) if z is None else np.asarray(z, float)
    eta_z = np.asarray(m.eta(z) / z, float)
    band = np.asarray(m.y(z) * (1 - m.y_z(z)) / z, float)
    uc = np.asarray(m.utility.U(m.c(z)) / (z * m.v_z(z)), float)
    return {
        "eta_over_z": [float(eta_z.min()), float(eta_z.max())],
        "y_one_minus_yz_over_z": [float(band.min()), float(band.max())],
        "U_c_over_z_vz": [float(uc.min()), float(uc.max())],
    }


# ---------------------------------------------------------------- report files

_ROW_FIELDS = ["epsilon", "z", "u_eps", "width_ratio", "residual_stat"]


def emit_report(report: ExpansionReport, out_dir) -> dict:
    """Write ``expansion.csv`` and ``expansion.json`` under ``out_dir``; returns the paths.

    Runtimes go to the JSON file so that the CSV body depends only on the
    configuration and seeds.
    """
    import scipy

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "expansion.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_ROW_FIELDS)
        for r in report.rows:
            w.writerow([repr(float(getattr(r, k))) for k in _ROW_FIELDS])
    summary = {
        "slope": report.slope,
        "slope_stderr": report.slope_stderr,
        "degenerate": report.degenerate,
        "config": report.config,
        "config_hash": config_hash(report.config),
        "seeds": report.seeds,
        "failures": report.failures,
        "runtimes": [r.runtime for r in report.rows],
        "versions": {"package": __version__, "numpy": np.__version__, "scipy": scipy.__version__},
    }
    json_path = out / "expansion.json"
    json_path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return {"csv": csv_path, "json": json_path}


def read_report(out_dir) -> ExpansionReport:
    out = Path(out_dir)
    summary = json.loads((out / "expansion.json").read_text())
    with open(out / "expansion.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    runtimes = summary.get("runtimes", [])
    parsed = [ExpansionRow(**{k: float(r[k]) for k in _ROW_FIELDS}, runtime=float(t))
              for r, t in zip(rows, runtimes)]
    return ExpansionReport(rows=parsed, slope=summary["slope"], slope_stderr=summary["slope_stderr"],
                           degenerate=summary["degenerate"], config=summary["config"], seeds=summary["seeds"],
                           failures=summary["failures"])
