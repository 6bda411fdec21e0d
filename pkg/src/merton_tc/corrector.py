"""First and second corrector of the small-cost expansion.

The first corrector is the explicit quartic/linear potential of the scalar
ergodic singular control problem; the second corrector solves ``A u = a``
either in closed form (CRRA) or through its Feynman-Kac representation.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .merton import ClosedFormMerton, MertonSolution
from .model import ParameterError

logger = logging.getLogger(__name__)

__all__ = [
    "AccuracyWarning",
    "FirstCorrector",
    "SecondCorrector",
    "dump_second_corrector_csv",
    "dump_wbar_csv",
    "eval_wbar",
    "first_corrector_at",
    "scale_to_unbarred",
    "second_corrector_crra",
    "second_corrector_mc",
    "solve_first_corrector",
    "source_a",
]


class AccuracyWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FirstCorrector:
    rho0: float
    rho1: float
    abar: float
    k1: float
    k2: float
    k4: float
    alphabar: float
    sigma: float
    lambda_sell: float
    lambda_buy: float

    def pasting_residuals(self) -> np.ndarray:
        """Jumps of the first and second derivative at both band edges."""
        r0, r1 = self.rho0, self.rho1
        d1 = lambda r: 4 * self.k4 * r**3 + 2 * self.k2 * r + self.k1  # noqa: E731
        d2 = lambda r: 12 * self.k4 * r**2 + 2 * self.k2  # noqa: E731
        return np.array([d1(r0) - self.lambda_sell, d1(r1) + self.lambda_buy, d2(r0), d2(r1)])

    def pde_residual(self, rho):
        """``-sigma^2 rho^2/2 - alphabar^2 wbar''/2 + abar``: zero in the band, <= 0 outside."""
        _, _, wrr = eval_wbar(self, rho)
        return -0.5 * self.sigma**2 * np.asarray(rho) ** 2 - 0.5 * self.alphabar**2 * wrr + self.abar


def solve_first_corrector(sigma: float, alphabar: float, lambda_sell: float, lambda_buy: float) -> FirstCorrector:
    """Closed-form solution ``(abar, wbar)`` of the one-dimensional first corrector."""
    if not sigma > 0:
        raise ParameterError("sigma must be positive")
    if not alphabar > 0:
        raise ParameterError("alphabar must be positive")
    if lambda_sell < 0 or lambda_buy < 0:
        raise ParameterError("costs must be nonnegative")
    lam = lambda_sell + lambda_buy
    rho0 = (3 * alphabar**2 * lam / (4 * sigma**2)) ** (1.0 / 3.0)
    abar = 0.5 * sigma**2 * rho0**2
    fc = FirstCorrector(
        rho0=rho0,
        rho1=-rho0,
        abar=abar,
        k1=0.5 * (lambda_sell - lambda_buy),
        k2=abar / alphabar**2,
        k4=-(sigma**2) / (12 * alphabar**2),
        alphabar=alphabar,
        sigma=sigma,
        lambda_sell=lambda_sell,
        lambda_buy=lambda_buy,
    )
    res = np.abs(fc.pasting_residuals())
    if np.any(res > 1e-12 * max(1.0, lam)):
        raise ArithmeticError(f"smooth pasting residuals too large: {res}")
    return fc


def eval_wbar(fc: FirstCorrector, rho):
    """Value and first two derivatives of the corrector potential at ``rho``."""
    r = np.asarray(rho, dtype=float)
    k4, k2, k1, r0, r1 = fc.k4, fc.k2, fc.k1, fc.rho0, fc.rho1
    poly = lambda t: k4 * t**4 + k2 * t**2 + k1 * t  # noqa: E731
    inside = (r >= r1) & (r <= r0)
    rc = np.clip(r, r1, r0)
    w = np.where(inside, poly(rc), np.where(r > r0, poly(r0) + fc.lambda_sell * (r - r0),
                                            poly(r1) - fc.lambda_buy * (r - r1)))
    wr = np.where(inside, 4 * k4 * rc**3 + 2 * k2 * rc + k1, np.where(r > r0, fc.lambda_sell, -fc.lambda_buy))
    wrr = np.where(inside, 12 * k4 * rc**2 + 2 * k2, 0.0)
    if r.ndim == 0:
        return float(w), float(wr), float(wrr)
    return w, wr, wrr


def first_corrector_at(m: MertonSolution, z: float, lambda_sell: float, lambda_buy: float) -> FirstCorrector:
    """First corrector with the local coefficient ``alphabar = alpha(z)/eta(z)``."""
    ab = float(m.alpha(z) / m.eta(z))
    return solve_first_corrector(m.params.sigma, ab, lambda_sell, lambda_buy)


def scale_to_unbarred(fc: FirstCorrector, m: MertonSolution, z: float):
    """Return ``(xi0, a(z), w)`` where ``w(xi) = eta v_z wbar(xi/eta)`` at wealth ``z``."""
    if not z > 0:
        raise ParameterError("z must be positive")
    eta = float(m.eta(z))
    scale = eta * float(m.v_z(z))

    def w(xi):
        return scale * eval_wbar(fc, np.asarray(xi, dtype=float) / eta)[0]

    return eta * fc.rho0, scale * fc.abar, w


def source_a(m: MertonSolution, lambda_sell: float, lambda_buy: float, fc: FirstCorrector | None = None):
    """Source ``a(z) = eta(z) v_z(z) abar(z)`` of the second corrector equation."""
    if isinstance(m, ClosedFormMerton):
        if fc is None:
            fc = first_corrector_at(m, 1.0, lambda_sell, lambda_buy)
        abar = fc.abar
        return lambda z: abar * m.eta(z) * m.v_z(z)

    def a(z):
        z = np.asarray(z, dtype=float)
        ab = m.alpha(z) / m.eta(z)
        rho0 = (3 * ab**2 * (lambda_sell + lambda_buy) / (4 * m.params.sigma**2)) ** (1 / 3)
        return 0.5 * m.params.sigma**2 * rho0**2 * m.eta(z) * m.v_z(z)

    return a


@dataclass(frozen=True, eq=False)
class SecondCorrector:
    kind: str
    u0: float = float("nan")
    exponent: float = float("nan")
    z_points: np.ndarray = field(default_factory=lambda: np.empty(0))
    u_values: np.ndarray = field(default_factory=lambda: np.empty(0))
    stderr: np.ndarray = field(default_factory=lambda: np.empty(0))
    info: dict = field(default_factory=dict)

    def u(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "closed_form":
            return self.u0 * z**self.exponent
        if self.z_points.size == 1:
            return np.full_like(z, self.u_values[0])
        return np.interp(np.log(z), np.log(self.z_points), self.u_values)


def second_corrector_crra(m: ClosedFormMerton, fc: FirstCorrector) -> SecondCorrector:
    """``u(z) = a(z)/v_M = u0 z^(1-gamma)``."""
    if not isinstance(m, ClosedFormMerton):
        raise ParameterError("closed-form second corrector needs a CRRA Merton solution")
    g = m.gamma
    u0 = fc.abar * m.v_M ** (-(1 + g)) / g
    return SecondCorrector(kind="closed_form", u0=u0, exponent=1.0 - g)


def second_corrector_mc(
    m: MertonSolution,
    fc: FirstCorrector,
    z_points,
    n_paths: int = 200_000,
    T: float = 200.0,
    dt: float = 0.01,
    seed: int = 0,
    scheme: str = "log_euler",
    chunk: int = 8192,
) -> SecondCorrector:
    """Feynman-Kac estimate of ``u(z) = E int_0^inf e^{-beta t} a(Z_t) dt``.

    Paths use the Merton feedback controls; pairs are antithetic. Each chunk of
    paths draws from its own stream keyed by ``(seed, z index, chunk index)``.
    For CRRA the integral beyond ``T`` is closed with ``a(Z_T)/v_M``; otherwise
    it is truncated and the bound ``e^{-beta T} max|a(Z_T)|/beta`` is reported.
    """
    p = m.params
    z_points = np.atleast_1d(np.asarray(z_points, dtype=float))
    if np.any(z_points <= 0):
        raise ParameterError("z_points must be positive")
    if T * p.beta < 12:
        raise ParameterError("T * beta must be at least 12")
    if dt > 1e-3 * T:
        raise ParameterError("dt must not exceed 1e-3 * T")
    if scheme not in ("log_euler", "euler"):
        raise ParameterError(f"unknown scheme {scheme!r}")
    if n_paths % 2:
        n_paths += 1
    a_fn = source_a(m, fc.lambda_sell, fc.lambda_buy, fc)
    closed = isinstance(m, ClosedFormMerton)

    if fc.lambda_sell + fc.lambda_buy == 0:
        zeros = np.zeros_like(z_points)
        return SecondCorrector(kind="monte_carlo", z_points=z_points, u_values=zeros, stderr=zeros.copy(),
                               info={"n_paths": n_paths, "T": T, "dt": dt, "seed": seed, "regenerated": 0})

    u_est, u_se = [], []
    regenerated = 0
    tail_bound = 0.0
    for iz, z0 in enumerate(z_points):
        sums = []
        for ic, start in enumerate(range(0, n_paths, chunk)):
            npair = min(chunk, n_paths - start) // 2
            rng = np.random.default_rng(np.random.SeedSequence([seed, iz, ic]))
            vals, zT, nreg = _fk_chunk(m, a_fn, z0, npair, T, dt, rng, scheme)
            regenerated += nreg
            if closed:
                vals = vals + math.exp(-p.beta * T) * a_fn(zT) / m.v_M
            else:
                tail_bound = max(tail_bound, math.exp(-p.beta * T) * float(np.max(np.abs(a_fn(zT)))) / p.beta)
            # average antithetic partners before taking the variance
            sums.append(0.5 * (vals[:npair] + vals[npair:]))
        pair_means = np.concatenate(sums)
        u_est.append(float(np.mean(pair_means)))
        u_se.append(float(np.std(pair_means, ddof=1) / math.sqrt(pair_means.size)))
    if regenerated > 0.01 * n_paths * len(z_points):
        warnings.warn(f"{regenerated} paths regenerated after hitting z <= 0", AccuracyWarning, stacklevel=2)
    info = {"n_paths": n_paths, "T": T, "dt": dt, "seed": seed, "scheme": scheme,
            "regenerated": regenerated, "tail_bound": tail_bound}
    return SecondCorrector(kind="monte_carlo", z_points=z_points, u_values=np.array(u_est),
                           stderr=np.array(u_se), info=info)


def _fk_chunk(m, a_fn, z0, npair, T, dt, rng, scheme):
    """Discounted integral of ``a`` along ``2*npair`` antithetic paths (trapezoid rule)."""
    p = m.params
    nsteps = int(round(T / dt))
    n = 2 * npair
    z = np.full(n, z0)
    acc = 0.5 * np.full(n, a_fn(np.array(z0)))
    regenerated = 0
    sq = math.sqrt(dt)
    disc = math.exp(-p.beta * dt)
    weight = 1.0
    for k in range(1, nsteps + 1):
        g = rng.standard_normal(npair)
        dw = np.concatenate([g, -g]) * sq
        y = m.y(z)
        drift = p.r * z + y * (p.mu - p.r) - m.c(z)
        if scheme == "log_euler":
            s = p.sigma * y / z
            z = z * np.exp((drift / z - 0.5 * s * s) * dt + s * dw)
        else:
            zn = z + drift * dt + p.sigma * y * dw
            bad = zn <= 0
            if np.any(bad):
                regenerated += int(bad.sum())
                zn[bad] = _euler_substeps(m, z[bad], dw[bad], dt, rng)
            z = zn
        weight *= disc
        a = a_fn(z)
        acc += (0.5 if k == nsteps else 1.0) * weight * a
    return acc * dt, z, regenerated


def _euler_substeps(m, z, dw, dt, rng, depth=0):
    """Redo one Euler step with halved steps, conditioning on the total increment."""
    p = m.params
    if depth > 30:
        raise RuntimeError("Euler path regeneration failed")
    h = dt / 2
    # Brownian bridge midpoint given the full increment
    w1 = 0.5 * dw + rng.standard_normal(z.size) * math.sqrt(h / 2)
    w2 = dw - w1
    out = z.copy()
    for inc in (w1, w2):
        y = m.y(out)
        nxt = out + (p.r * out + y * (p.mu - p.r) - m.c(out)) * h + p.sigma * y * inc
        bad = nxt <= 0
        if np.any(bad):
            nxt[bad] = _euler_substeps(m, out[bad], inc[bad], h, rng, depth + 1)
        out = nxt
    return out


def dump_wbar_csv(fc: FirstCorrector, rho, path) -> Path:
    w, wr, wrr = eval_wbar(fc, np.asarray(rho, dtype=float))
    path = Path(path)
    with open(path, "w", newline="") as fh:
        wr_ = csv.writer(fh)
        wr_.writerow(["rho", "wbar", "wbar_rho", "wbar_rhorho"])
        for row in zip(np.asarray(rho, dtype=float), w, wr, wrr):
            wr_.writerow([repr(float(x)) for x in row])
    return path


def dump_second_corrector_csv(sc: SecondCorrector, z, path) -> Path:
    z = np.asarray(z, dtype=float)
    if sc.kind == "monte_carlo":
        z, u, se = sc.z_points, sc.u_values, sc.stderr
    else:
        u, se = sc.u(z), np.zeros_like(z)
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "u", "stderr"])
        for row in zip(z, u, se):
            w.writerow([repr(float(x)) for x in row])
    return path
