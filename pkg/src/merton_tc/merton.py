"""Frictionless Merton consumption-investment solution.

Closed form for CRRA utility, Howard policy iteration on a wealth grid for
general utility, and the generator of the optimally controlled wealth process.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import spsolve

from .model import CRRA, ModelParams, ParameterError, Utility, dual_utility, merton_constant, merton_fraction

logger = logging.getLogger(__name__)

__all__ = [
    "ClosedFormMerton",
    "ConcavityLossError",
    "GridMerton",
    "MertonSolution",
    "NonConvergenceError",
    "apply_generator_A",
    "dump_merton_csv",
    "merton_crra",
    "merton_general_fd",
]


class NonConvergenceError(RuntimeError):
    def __init__(self, msg, residual=None, history=None):
        super().__init__(msg)
        self.residual = residual
        self.history = history or []


class ConcavityLossError(RuntimeError):
    pass


class MertonSolution:
    """Common evaluator surface for the Merton value function bundle."""

    params: ModelParams
    utility: Utility
    z_min: float = 0.0
    z_max: float = math.inf

    def v(self, z): ...

    def v_z(self, z): ...

    def v_zz(self, z): ...

    def eta(self, z):
        return -self.v_z(z) / self.v_zz(z)

    def y(self, z):
        # first-order condition  sigma^2 y (-v_zz) = (mu - r) v_z
        p = self.params
        return (p.mu - p.r) / p.sigma**2 * self.eta(z)

    def c(self, z):
        return -dual_utility(self.utility, self.v_z(z))[1]

    def y_z(self, z):
        z = np.asarray(z, dtype=float)
        h = 1e-5 * z
        return (self.y(z + h) - self.y(z - h)) / (2 * h)

    def drift(self, z):
        p = self.params
        return p.r * z + self.y(z) * (p.mu - p.r) - self.c(z)

    def alpha(self, z):
        """Diffusion coefficient ``sigma * y * (1 - y_z)`` of the fast variable."""
        return self.params.sigma * self.y(z) * (1.0 - self.y_z(z))

    def check_range(self, z):
        z = np.asarray(z, dtype=float)
        if np.any(z <= 0) or np.any(z < self.z_min) or np.any(z > self.z_max):
            raise ParameterError(f"z outside the valid range [{self.z_min}, {self.z_max}]")


@dataclass(frozen=True, eq=False)
class ClosedFormMerton(MertonSolution):
    params: ModelParams
    utility: CRRA
    v_M: float
    pi_M: float

    @property
    def gamma(self) -> float:
        return self.utility.gamma

    def v(self, z):
        z = np.asarray(z, dtype=float)
        p, g = self.params, self.gamma
        if self.utility.is_log:
            theta2 = (p.mu - p.r) ** 2 / p.sigma**2
            return (np.log(p.beta * z) + (p.r - p.beta + 0.5 * theta2) / p.beta) / p.beta
        return z ** (1 - g) / ((1 - g) * self.v_M**g)

    def v_z(self, z):
        z = np.asarray(z, dtype=float)
        return (self.v_M * z) ** (-self.gamma)

    def v_zz(self, z):
        z = np.asarray(z, dtype=float)
        return -self.gamma * self.v_M ** (-self.gamma) * z ** (-self.gamma - 1)

    def v_zzz(self, z):
        z = np.asarray(z, dtype=float)
        g = self.gamma
        return g * (g + 1) * self.v_M ** (-g) * z ** (-g - 2)

    def eta(self, z):
        return np.asarray(z, dtype=float) / self.gamma

    def y(self, z):
        return self.pi_M * np.asarray(z, dtype=float)

    def y_z(self, z):
        return np.full_like(np.asarray(z, dtype=float), self.pi_M)

    def c(self, z):
        return self.v_M * np.asarray(z, dtype=float)


@dataclass(frozen=True, eq=False)
class GridMerton(MertonSolution):
    params: ModelParams
    utility: Utility
    z_grid: np.ndarray
    v_grid: np.ndarray
    vz_grid: np.ndarray
    vzz_grid: np.ndarray
    iterations: int = 0
    residual: float = float("nan")
    _splines: dict = field(default_factory=dict, repr=False)

    @property
    def z_min(self):
        return float(self.z_grid[0])

    @property
    def z_max(self):
        return float(self.z_grid[-1])

    def _spline(self, name):
        if name not in self._splines:
            self._splines[name] = CubicSpline(np.log(self.z_grid), getattr(self, name))
        return self._splines[name]

    def v(self, z):
        return self._spline("v_grid")(np.log(z))

    def v_z(self, z):
        return self._spline("vz_grid")(np.log(z))

    def v_zz(self, z):
        return self._spline("vzz_grid")(np.log(z))


def merton_crra(p: ModelParams, gamma: float) -> ClosedFormMerton:
    """Closed-form CRRA Merton bundle."""
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    if not p.sigma > 0:
        raise ParameterError("sigma must be positive")
    vm = merton_constant(p, gamma)
    if not vm > 0:
        raise ParameterError(f"ill-posed Merton problem: v_M = {vm:.6g} <= 0")
    return ClosedFormMerton(params=p, utility=CRRA(gamma), v_M=vm, pi_M=merton_fraction(p, gamma))


def _stencils(z):
    """Centred first/second derivative weights on a nonuniform grid (interior rows)."""
    hm = z[1:-1] - z[:-2]
    hp = z[2:] - z[1:-1]
    s = hm + hp
    d1 = np.stack([-hp / (hm * s), (hp - hm) / (hm * hp), hm / (hp * s)])
    d2 = np.stack([2 / (hm * s), -2 / (hm * hp), 2 / (hp * s)])
    return d1, d2, hm, hp


def _power_ratio(z0, z1, z2, R):
    """(v0 - v1)/(v1 - v2) for v = A + B * z**(1-R)."""
    if abs(R - 1.0) < 1e-12:
        return math.log(z0 / z1) / math.log(z1 / z2)
    e = 1.0 - R
    return (z0**e - z1**e) / (z1**e - z2**e)


def _power_slope(z0, z1, R):
    """v_z(z0) * z0 * g = v1 - v0 for v_z ~ z**-R; returns the factor ``z0*g``."""
    if abs(R - 1.0) < 1e-12:
        return z0 * math.log(z1 / z0)
    e = 1.0 - R
    return z0 * ((z1 / z0) ** e - 1.0) / e


def merton_general_fd(
    p: ModelParams,
    u: Utility,
    z_grid,
    max_iter: int = 200,
    tol: float = 1e-10,
) -> GridMerton:
    """Solve the Merton equation on ``z_grid`` by Howard policy iteration.

    The drift is differenced centrally where the diffusion keeps the row
    monotone and upwind otherwise. At both ends the value is closed with a
    local power-law shape whose exponent is the relative risk aversion of
    ``U`` at the current consumption level.
    """
    z = np.asarray(z_grid, dtype=float)
    if z.ndim != 1 or z.size < 5:
        raise ParameterError("z_grid must be a 1-d array with at least 5 nodes")
    if not np.all(np.diff(z) > 0) or z[0] <= 0:
        raise ParameterError("z_grid must be strictly increasing and positive")
    n = z.size
    a = p.mu - p.r
    d1, d2, hm, hp = _stencils(z)
    zi = z[1:-1]

    R0 = float(np.asarray(u.risk_aversion(p.beta * z[n // 2])))
    c = p.beta * z
    y = a / (R0 * p.sigma**2) * z
    v_old = None
    history = []
    for it in range(1, max_iter + 1):
        b = p.r * zi + y[1:-1] * a - c[1:-1]
        d = 0.5 * p.sigma**2 * y[1:-1] ** 2
        lo_c = d * d2[0] + b * d1[0]
        mid_c = d * d2[1] + b * d1[1]
        hi_c = d * d2[2] + b * d1[2]
        bad = (lo_c < 0) | (hi_c < 0)
        if np.any(bad):
            bp, bn = np.maximum(b, 0), np.minimum(b, 0)
            lo_u = d * d2[0] - bn / hm
            mid_u = d * d2[1] - bp / hp + bn / hm
            hi_u = d * d2[2] + bp / hp
            lo_c = np.where(bad, lo_u, lo_c)
            mid_c = np.where(bad, mid_u, mid_c)
            hi_c = np.where(bad, hi_u, hi_c)

        R_lo = float(np.asarray(u.risk_aversion(c[0])))
        R_hi = float(np.asarray(u.risk_aversion(c[-1])))
        q0 = _power_ratio(z[0], z[1], z[2], R_lo)
        qn = _power_ratio(z[-1], z[-2], z[-3], R_hi)

        rows = np.concatenate([[0, 0, 0], np.repeat(np.arange(1, n - 1), 3), [n - 1, n - 1, n - 1]])
        cols = np.concatenate([[0, 1, 2], np.stack([np.arange(0, n - 2), np.arange(1, n - 1), np.arange(2, n)], 1).ravel(),
                               [n - 1, n - 2, n - 3]])
        vals = np.concatenate([[1.0, -(1 + q0), q0],
                               np.stack([-lo_c, p.beta - mid_c, -hi_c], 1).ravel(),
                               [1.0, -(1 + qn), qn]])
        A = sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))
        rhs = np.zeros(n)
        rhs[1:-1] = u.U(c[1:-1])
        v = spsolve(A.tocsc(), rhs)

        vz, vzz = _derivatives(z, v, d1, d2, lo_c, hi_c, bad, R_lo, R_hi, b, hm, hp)
        if np.any(vzz[1:-1] >= 0) or np.any(vz <= 0):
            if v_old is None or it == max_iter:
                raise ConcavityLossError("v_zz >= 0 or v_z <= 0 at an interior node")
            # tolerate transient loss on the first sweeps by keeping the old policy there
            ok = (vzz < 0) & (vz > 0)
        else:
            ok = np.ones(n, bool)
        c_new = np.where(ok, u.U_prime_inv(np.where(ok, vz, 1.0)), c)
        y_new = np.where(ok, -a * vz / (p.sigma**2 * np.where(ok, vzz, -1.0)), y)
        if v_old is not None:
            change = float(np.max(np.abs(v - v_old) / np.maximum(np.abs(v), 1e-300)))
            history.append(change)
            if change <= tol and np.all(ok):
                if np.any(vzz[1:-1] >= 0):
                    raise ConcavityLossError("converged solution is not concave")
                return GridMerton(p, u, z, v, vz, vzz, iterations=it, residual=change)
        v_old, c, y = v, c_new, y_new
    raise NonConvergenceError(f"policy iteration did not converge in {max_iter} iterations",
                              residual=history[-1] if history else None, history=history)


def _derivatives(z, v, d1, d2, lo_c, hi_c, bad, R_lo, R_hi, b, hm, hp):
    vz = np.empty_like(v)
    vzz = np.empty_like(v)
    vi = np.stack([v[:-2], v[1:-1], v[2:]])
    cen = (d1 * vi).sum(0)
    up = np.where(b > 0, (v[2:] - v[1:-1]) / hp, (v[1:-1] - v[:-2]) / hm)
    vz[1:-1] = np.where(bad, up, cen)
    vzz[1:-1] = (d2 * vi).sum(0)
    vz[0] = (v[1] - v[0]) / _power_slope(z[0], z[1], R_lo)
    vz[-1] = (v[-2] - v[-1]) / _power_slope(z[-1], z[-2], R_hi)
    vzz[0] = -R_lo * vz[0] / z[0]
    vzz[-1] = -R_hi * vz[-1] / z[-1]
    return vz, vzz


def apply_generator_A(m: MertonSolution, phi, z, dphi=None, d2phi=None):
    """Generator of the optimally controlled Merton wealth process applied to ``phi``.

    ``A phi = beta phi - (r z + y (mu - r) - c) phi_z - sigma^2 y^2 phi_zz / 2``.
    Missing derivatives are taken by central differences with step ``1e-5 z``.
    """
    z = np.asarray(z, dtype=float)
    m.check_range(z)
    p = m.params
    f = phi(z)
    if dphi is None or d2phi is None:
        h = 1e-5 * z
        fp, fm = phi(z + h), phi(z - h)
        fz = (fp - fm) / (2 * h) if dphi is None else dphi(z)
        fzz = (fp - 2 * f + fm) / h**2 if d2phi is None else d2phi(z)
    else:
        fz, fzz = dphi(z), d2phi(z)
    y = m.y(z)
    out = p.beta * f - (p.r * z + y * (p.mu - p.r) - m.c(z)) * fz - 0.5 * p.sigma**2 * y**2 * fzz
    return float(out) if out.ndim == 0 else out


def dump_merton_csv(m: MertonSolution, z, path) -> Path:
    z = np.asarray(z, dtype=float)
    path = Path(path)
    cols = [z, m.v(z), m.v_z(z), m.v_zz(z), m.eta(z), m.y(z), m.c(z)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "v", "v_z", "v_zz", "eta", "y", "c"])
        for row in zip(*cols):
            w.writerow([repr(float(x)) for x in row])
    return path
