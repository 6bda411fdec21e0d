"""Monte Carlo for the scalar ergodic singular control problem with band policies.

The fast variable ``rho`` diffuses with volatility ``alphabar`` and is kept in
``[lower, upper]`` by reflection. Reflection is a projection after each Euler
step; the projected distance is the local-time increment. By default the
projection edges are pulled in by ``0.5826 * alphabar * sqrt(dt)`` so that the
discretely reflected walk matches the continuously reflected process on the
requested band. Pushes down at the
upper edge sell stock and cost ``lambda_sell`` per unit, pushes up at the
lower edge buy stock and cost ``lambda_buy``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numba
import numpy as np

from .model import ParameterError

__all__ = [
    "BandPolicy",
    "BracketFailure",
    "ErgodicEstimate",
    "ErgodicParams",
    "analytic_band_cost",
    "dump_band_curve_csv",
    "optimize_band",
    "simulate_band",
]


class BracketFailure(RuntimeError):
    """The minimizing band sits on an end of the search grid."""

    code = "bracket_failure"


@dataclass(frozen=True)
class ErgodicParams:
    sigma: float
    alphabar: float
    lambda_sell: float
    lambda_buy: float


@dataclass(frozen=True)
class BandPolicy:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.upper > self.lower:
            raise ParameterError("band width must be positive")

    @property
    def width(self) -> float:
        return self.upper - self.lower

    @classmethod
    def symmetric(cls, b: float) -> "BandPolicy":
        return cls(-b, b)


@dataclass(frozen=True)
class ErgodicEstimate:
    mean_cost: float
    stderr: float
    holding_part: float
    pushing_part: float
    T: float
    dt: float
    n_paths: int
    seed: int


def analytic_band_cost(fp: ErgodicParams, b):
    """Long-run cost of the symmetric band ``[-b, b]``: uniform stationary law plus local time."""
    b = np.asarray(b, dtype=float)
    lam = fp.lambda_sell + fp.lambda_buy
    return fp.sigma**2 * b**2 / 6 + lam * fp.alphabar**2 / (4 * b)


@numba.njit(cache=True)
def _advance(rho, normals, sq, lower, upper, record):
    """Reflected Euler steps over one block; returns (rho, sum rho^2, pushed down, pushed up)."""
    h = 0.0
    down = 0.0
    up = 0.0
    for k in range(normals.size):
        rho += sq * normals[k]
        if rho > upper:
            down += rho - upper
            rho = upper
        elif rho < lower:
            up += lower - rho
            rho = lower
        h += rho * rho
    if not record:
        return rho, 0.0, 0.0, 0.0
    return rho, h, down, up


_BLOCK = 1 << 20
# -zeta(1/2)/sqrt(2 pi): boundary shift between discrete and continuous monitoring
_BGK = 0.5825971579390106


def _one_path(seed: int, k: int, band: BandPolicy, sq: float, nsteps: int, nburn: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, k]))
    buf = np.empty(_BLOCK)
    rho, h, down, up = 0.0, 0.0, 0.0, 0.0
    done = 0
    for stop in (nburn, nsteps):
        record = stop == nsteps
        while done < stop:
            n = min(_BLOCK, stop - done)
            rng.standard_normal(out=buf[:n])
            rho, dh, dd, du = _advance(rho, buf[:n], sq, band.lower, band.upper, record)
            h, down, up = h + dh, down + dd, up + du
            done += n
    return h, down, up


def simulate_band(
    fp: ErgodicParams,
    band: BandPolicy,
    T: float = 200.0,
    dt: float = 1e-4,
    n_paths: int = 64,
    seed: int = 0,
    continuity_correction: bool = True,
) -> ErgodicEstimate:
    """Long-run average holding plus pushing cost of a reflecting band policy."""
    if not band.width > 0:
        raise ParameterError("band width must be positive")
    if fp.alphabar > 0 and dt > band.width**2 / (25 * fp.alphabar**2):
        raise ParameterError("dt too coarse to resolve the band")
    if T < 1e3 * dt:
        raise ParameterError("T must be at least 1e3 * dt")
    nsteps = int(round(T / dt))
    nburn = int(round(0.1 * nsteps))
    tspan = (nsteps - nburn) * dt
    sq = fp.alphabar * math.sqrt(dt)
    shift = _BGK * sq if continuity_correction else 0.0
    if shift >= 0.5 * band.width:
        raise ParameterError("dt too coarse to resolve the band")
    inner = BandPolicy(band.lower + shift, band.upper - shift)
    hold = np.empty(n_paths)
    push = np.empty(n_paths)
    for k in range(n_paths):
        h, down, up = _one_path(seed, k, inner, sq, nsteps, nburn)
        hold[k] = 0.5 * fp.sigma**2 * h * dt / tspan
        push[k] = (fp.lambda_sell * down + fp.lambda_buy * up) / tspan
    total = hold + push
    stderr = float(np.std(total, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    h, pu = math.fsum(hold) / n_paths, math.fsum(push) / n_paths
    return ErgodicEstimate(mean_cost=h + pu, stderr=stderr, holding_part=h, pushing_part=pu,
                           T=T, dt=dt, n_paths=n_paths, seed=seed)


def optimize_band(
    fp: ErgodicParams,
    b_grid,
    T: float = 200.0,
    dt: float = 1e-4,
    n_paths: int = 64,
    seed: int = 0,
    continuity_correction: bool = True,
):
    """Grid search over symmetric bands with common random numbers.

    Returns ``(b_star, estimate_at_b_star, curve)`` where ``curve`` lists one
    :class:`ErgodicEstimate` per grid point. Raises :class:`BracketFailure`
    when the minimizer is an endpoint of ``b_grid``.
    """
    b_grid = np.asarray(b_grid, dtype=float)
    if b_grid.ndim != 1 or b_grid.size < 3 or np.any(b_grid <= 0) or np.any(np.diff(b_grid) <= 0):
        raise ParameterError("b_grid must be positive, increasing, with at least 3 points")
    curve = [simulate_band(fp, BandPolicy.symmetric(b), T=T, dt=dt, n_paths=n_paths, seed=seed,
                           continuity_correction=continuity_correction) for b in b_grid]
    costs = np.array([e.mean_cost for e in curve])
    k = int(np.argmin(costs))
    if k in (0, b_grid.size - 1):
        err = BracketFailure(f"minimizer b={b_grid[k]:.6g} is at the end of the grid")
        err.curve = list(zip(b_grid.tolist(), curve))
        raise err
    return float(b_grid[k]), curve[k], list(zip(b_grid.tolist(), curve))


def dump_band_curve_csv(curve, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["b", "J_hat", "stderr", "holding", "pushing"])
        for b, e in curve:
            w.writerow([repr(float(b)), repr(e.mean_cost), repr(e.stderr), repr(e.holding_part), repr(e.pushing_part)])
    return path


def band_summary_json(b_star, est, fp: ErgodicParams, rho0: float, abar: float, path) -> Path:
    path = Path(path)
    payload = {"b_star": b_star, "rho0": rho0, "abar": abar, "J_b_star": est.mean_cost,
               "stderr": est.stderr, "params": asdict(fp), "relative_gap_rho0": b_star / rho0 - 1}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path
