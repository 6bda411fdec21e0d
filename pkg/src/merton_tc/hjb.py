"""Finite-difference solver for the dynamic programming equation with small costs.

The unknown is the gap ``W = v(x + y) - V(x, y)`` between the frictionless
value and the value with costs ``eps^3 * lambda``. All terms involving the
Merton value ``v`` are evaluated analytically, so the discretization error
only enters through ``W``, which is ``O(eps^2)``.

At every node one of three regimes is active:

* no trade: ``beta V - L V - Utilde(V_x) = 0``;
* buy:  ``(1 + eps^3 lambda_buy) V_x - V_y = 0``;
* sell: ``(1 + eps^3 lambda_sell) V_y - V_x = 0``;

and the regime is chosen by Howard policy iteration. The trade equations are
differenced along the exact direction ``(-1, 1)`` (interpolating on a grid
line) so that any function of ``x + y`` is differenced without error.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator
from scipy.sparse.csgraph import breadth_first_order
from scipy.optimize import brentq
from scipy.sparse.linalg import splu

from .merton import ClosedFormMerton, MertonSolution, NonConvergenceError
from .model import CRRA, ModelParams, ParameterError, Utility, dual_utility

logger = logging.getLogger(__name__)

__all__ = [
    "BUY",
    "NO_TRADE",
    "SELL",
    "EpsSolution",
    "GridSpec",
    "SchemeError",
    "compute_u_eps",
    "dump_boundaries_csv",
    "dump_solution_csv",
    "extract_no_trade",
    "solve_hjb_2d",
    "check_invariants",
    "dump_metadata_json",
    "NoTradeInterval",
    "stretched_axis",
    "merton_grid",
]

NO_TRADE, BUY, SELL = 0, 1, 2
REGIME_NAMES = {NO_TRADE: "NoTrade", BUY: "Buy", SELL: "Sell"}


class SchemeError(RuntimeError):
    """A row of the discretization lost monotonicity."""


@dataclass(frozen=True, eq=False)
class GridSpec:
    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        for name in ("x", "y"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.ndim != 1 or a.size < 50:
                raise ParameterError(f"{name}_grid needs at least 50 nodes")
            if not np.all(np.diff(a) > 0):
                raise ParameterError(f"{name}_grid must be strictly increasing")
            if a[0] < 0:
                raise ParameterError(f"{name}_grid must lie in [0, max]")
            object.__setattr__(self, name, a)
        if self.x[0] == 0:
            # consumption is paid from cash, so x = 0 would force c = 0
            raise ParameterError("x_grid must start above 0")

    @property
    def shape(self):
        return self.x.size, self.y.size

    def mesh(self):
        return np.meshgrid(self.x, self.y, indexing="ij")


def _tail(h0: float, length: float, ratio: float) -> np.ndarray:
    """Offsets of cells growing from ``h0`` by a factor at most ``ratio`` that end exactly at ``length``."""
    n, total, h = 0, 0.0, h0
    while total < length:
        h *= ratio
        total += h
        n += 1
    k = np.arange(1, n + 1)
    q = brentq(lambda q: h0 * np.sum(q**k) - length, 1e-3, ratio, xtol=1e-15)
    return np.cumsum(h0 * q**k)


def stretched_axis(lo: float, hi: float, a: float, b: float, rel_step: float, ratio: float = 1.06) -> np.ndarray:
    """Log-uniform nodes with relative spacing ``rel_step`` on ``[a, b]``.

    Outside ``[a, b]`` the spacing grows geometrically, by at most ``ratio``
    per node, until ``lo`` and ``hi`` are reached exactly.
    """
    if not (0 < lo <= a < b <= hi):
        raise ParameterError("need 0 < lo <= a < b <= hi")
    if not 1.0 < ratio <= 1.08:
        raise ParameterError("neighbour spacing ratio must lie in (1, 1.08]")
    n = max(2, int(np.ceil(np.log(b / a) / np.log1p(rel_step))) + 1)
    core = np.geomspace(a, b, n)
    right = b + _tail(core[-1] - core[-2], hi - b, ratio) if hi > b else np.empty(0)
    left = a - _tail(core[1] - core[0], a - lo, ratio)[::-1] if a > lo else np.empty(0)
    out = np.concatenate([left, core, right])
    out[0], out[-1] = lo, hi
    return out


def merton_grid(pi_m: float, z_range=(1 / 3, 4.0), steps=(0.006, 0.0085), tails=None) -> GridSpec:
    """Log-uniform box around the Merton ray ``y = pi_m * (x + y)``.

    ``x`` covers ``(1 - pi_m) * z_range`` and ``y`` covers ``pi_m * z_range``
    with relative node spacings ``steps``. The band is a fixed fraction of
    wealth, so a log-uniform grid resolves it equally well at every ``z``.
    ``tails=(factor, ratio)`` extends both axes by ``factor`` at each end with
    geometrically growing cells; this is only useful without a scaling
    symmetry to close the box.
    """
    if not 0 < pi_m < 1:
        raise ParameterError("the Merton fraction must lie in (0, 1)")
    z_lo, z_hi = map(float, z_range)
    if not 0 < z_lo < z_hi:
        raise ParameterError("z_range must satisfy 0 < lo < hi")
    axes = []
    for share, step in zip((1 - pi_m, pi_m), steps):
        a, b = share * z_lo, share * z_hi
        if tails is None:
            axes.append(np.geomspace(a, b, int(np.ceil(np.log(b / a) / np.log1p(step))) + 1))
        else:
            factor, ratio = tails
            axes.append(stretched_axis(a / factor, b * factor, a, b, step, ratio))
    return GridSpec(*axes)


@dataclass(eq=False)
class EpsSolution:
    grid: GridSpec
    V: np.ndarray
    W: np.ndarray
    regime: np.ndarray
    residuals: dict
    params: ModelParams
    merton: MertonSolution
    iterations: int
    final_residual: float
    history: list = field(default_factory=list)
    boundaries: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def epsilon(self) -> float:
        return self.params.epsilon

    def _interp(self, name):
        key = "_interp_" + name
        if key not in self.__dict__:
            self.__dict__[key] = RegularGridInterpolator((self.grid.x, self.grid.y), getattr(self, name))
        return self.__dict__[key]

    def gap(self, x, y):
        """Bilinear interpolation of ``W = v(x + y) - V``."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = self._interp("W")(np.stack([x, y], -1))
        return float(out[0]) if x.ndim == 0 else out

    def value(self, x, y):
        return self.merton.v(x + y) - self.gap(x, y)


def _bilinear(xg, yg, xq, yq):
    """Indices (n, 4) into the flattened grid and bilinear weights for query points."""
    nx, ny = xg.size, yg.size
    i = np.clip(np.searchsorted(xg, xq, side="right") - 1, 0, nx - 2)
    j = np.clip(np.searchsorted(yg, yq, side="right") - 1, 0, ny - 2)
    tx = np.clip((xq - xg[i]) / (xg[i + 1] - xg[i]), 0.0, 1.0)
    ty = np.clip((yq - yg[j]) / (yg[j + 1] - yg[j]), 0.0, 1.0)
    idx = np.stack([i * ny + j, (i + 1) * ny + j, i * ny + j + 1, (i + 1) * ny + j + 1], -1)
    wts = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty], -1)
    return idx, wts


class _Stencils:
    """Precomputed stencils for the three regimes on a fixed grid.

    The unknown is ``What = W / zeta(x + y)`` with ``zeta(z) = z^(1-gamma)``
    for CRRA utility (``zeta = 1`` otherwise), so that What is invariant under
    scaling and every row is divided by ``zeta``. Differences along
    ``(-1, 1)`` commute with ``zeta`` because it depends on ``x + y`` only.

    Every neighbour is stored as four bilinear indices and weights so that
    points off the grid can be mapped back inside. For CRRA utility the map is
    the scaling ``(x, y) -> (x, y) / s`` on all four edges. For other utilities
    off-grid points are clamped, which gives zero-slope edges.
    """

    def __init__(self, grid: GridSpec, p: ModelParams, m: MertonSolution, homothetic_gamma: float | None):
        self.grid, self.p, self.m = grid, p, m
        nx, ny = grid.shape
        self.nx, self.ny, self.n = nx, ny, nx * ny
        X, Y = grid.mesh()
        self.X, self.Y = X.ravel(), Y.ravel()
        Z = self.X + self.Y
        self.vz = np.asarray(m.v_z(Z), float)
        vzz = np.asarray(m.v_zz(Z), float)
        vv = np.asarray(m.v(Z), float)
        self.Ut_vz = dual_utility(m.utility, self.vz)[0]
        # beta v - L v - Utilde(v_z) for V = v(x + y), exact
        self.q = p.beta * vv - p.r * self.X * self.vz - p.mu * self.Y * self.vz \
            - 0.5 * p.sigma**2 * self.Y**2 * vzz - self.Ut_vz
        self.gamma = homothetic_gamma
        if homothetic_gamma is None:
            self.zeta, self.zl, self.zll = np.ones(self.n), np.zeros(self.n), np.zeros(self.n)
        else:
            gm = homothetic_gamma
            self.zeta = Z ** (1.0 - gm)
            self.zl = (1.0 - gm) / Z
            self.zll = -gm * (1.0 - gm) / Z**2
        I, J = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
        self.I, self.J = I.ravel(), J.ravel()
        self.k = np.arange(self.n)
        self._build()

    def _points(self, xq, yq):
        x, y = self.grid.x, self.grid.y
        if self.gamma is not None:
            up = np.maximum(np.maximum(xq / x[-1], yq / y[-1]), 1.0)
            down = np.minimum(xq / x[0], yq / y[0] if y[0] > 0 else 1.0)
            down = np.minimum(down, 1.0)
            s = np.where(up > 1.0, up, down)
        else:
            s = np.ones_like(xq)
        xq = np.clip(xq / s, x[0], x[-1])
        yq = np.clip(yq / s, y[0], y[-1])
        return _bilinear(x, y, xq, yq)

    def _build(self):
        x, y, nx, ny = self.grid.x, self.grid.y, self.nx, self.ny
        I, J, X, Y = self.I, self.J, self.X, self.Y
        # spacings; off-grid neighbours continue the end cells geometrically
        xm = np.where(I > 0, x[np.maximum(I - 1, 0)], x[0] ** 2 / x[1])
        xp = np.where(I < nx - 1, x[np.minimum(I + 1, nx - 1)], x[-1] ** 2 / x[-2])
        # a row on y = 0 has no y-terms; give it a harmless placeholder spacing
        ym = np.where(J > 0, y[np.maximum(J - 1, 0)], y[0] ** 2 / y[1] if y[0] > 0 else -y[1])
        yp = np.where(J < ny - 1, y[np.minimum(J + 1, ny - 1)], y[-1] ** 2 / y[-2])
        hxm, hxp, hym, hyp = X - xm, xp - X, Y - ym, yp - Y
        self.hxm, self.hxp, self.hym, self.hyp = hxm, hxp, hym, hyp
        self.W_ = self._points(xm, Y)
        self.E_ = self._points(xp, Y)
        self.S_ = self._points(X, ym)
        self.N_ = self._points(X, yp)
        s = hym + hyp
        self.d1 = np.stack([-hyp / (hym * s), (hyp - hym) / (hym * hyp), hym / (hyp * s)])
        self.d2 = np.stack([2 / (hym * s), -2 / (hym * hyp), 2 / (hyp * s)])
        # buy moves along (-1, 1), sell along (1, -1)
        self.buy_l = np.minimum(hxm, hyp)
        self.buy_Q = self._points(X - self.buy_l, Y + self.buy_l)
        self.sell_l = np.minimum(hxp, hym)
        self.sell_Q = self._points(X + self.sell_l, Y - self.sell_l)
        homothetic = self.gamma is not None
        self.can_buy = (I > 0) | homothetic
        self.can_sell = (J > 0) | (homothetic and y[0] > 0)
        self.can_wait = np.ones(self.n, dtype=bool)

    @staticmethod
    def _gather(W, pts):
        idx, w = pts
        return (W[idx] * w).sum(-1)

    def _slopes(self, W):
        g = self._gather
        Wx_f = (g(W, self.E_) - W) / self.hxp
        Wx_b = (W - g(W, self.W_)) / self.hxm
        Wy_b = (W - g(W, self.S_)) / self.hym
        Ws, Wn = g(W, self.S_), g(W, self.N_)
        Wy = self.d1[0] * Ws + self.d1[1] * W + self.d1[2] * Wn
        Wyy = self.d2[0] * Ws + self.d2[1] * W + self.d2[2] * Wn
        return Wx_f, Wx_b, Wy_b, Wy, Wyy

    def consumption(self, W):
        """Upwind consumption rule; returns (c, direction) with direction +1/-1/0."""
        p, U = self.p, self.m.utility
        Wx_f, Wx_b = self._slopes(W)[:2]
        Vx_f = self.vz - self.zeta * (self.zl * W + Wx_f)
        Vx_b = self.vz - self.zeta * (self.zl * W + Wx_b)
        cf = U.U_prime_inv(np.maximum(Vx_f, 1e-300))
        cb = U.U_prime_inv(np.maximum(Vx_b, 1e-300))
        rx = p.r * self.X
        direction = np.where(rx - cf > 0, 1, np.where(rx - cb < 0, -1, 0))
        c = np.where(direction == 1, cf, np.where(direction == -1, cb, rx))
        return c, direction

    def residuals(self, W, c=None, direction=None):
        """Return F, B, S as ``b - A W`` for each regime (nan where unavailable)."""
        p, m = self.p, self.m
        if c is None:
            c, direction = self.consumption(W)
        Wx_f, Wx_b, Wy_b, Wy, Wyy = self._slopes(W)
        Wx = np.where(direction == 1, Wx_f, np.where(direction == -1, Wx_b, 0.0))
        g = (self.q + self.Ut_vz + c * self.vz - m.utility.U(c)) / self.zeta
        kappa, by = self._scaled_coefficients(c)
        AW = kappa * W - (p.r * self.X - c) * Wx - by * Wy - 0.5 * p.sigma**2 * self.Y**2 * Wyy
        F = np.where(self.can_wait, g - AW, np.nan)
        cb, cs = p.cost("buy"), p.cost("sell")
        vz = self.vz / self.zeta
        B = cb * vz - cb * (self.zl * W + Wx_b) + (self._gather(W, self.buy_Q) - W) / self.buy_l
        S = cs * vz - cs * (self.zl * W + Wy_b) + (self._gather(W, self.sell_Q) - W) / self.sell_l
        return F, np.where(self.can_buy, B, np.nan), np.where(self.can_sell, S, np.nan), c, direction

    def _scaled_coefficients(self, c):
        """Zeroth-order coefficient and y-drift of the generator acting on What."""
        p = self.p
        a2 = 0.5 * p.sigma**2 * self.Y**2
        kappa = p.beta - (p.r * self.X - c + p.mu * self.Y) * self.zl - a2 * self.zll
        return kappa, p.mu * self.Y + 2 * a2 * self.zl

    def matrix(self, regime, c, direction):
        """Sparse ``A`` and right-hand side ``b`` for the chosen regimes."""
        p, m, n = self.p, self.m, self.n
        rows, cols, vals = [self.k], [self.k], []
        diag = np.zeros(n)

        def put(mask, pts, coef):
            r = np.nonzero(mask)[0]
            if r.size:
                idx, w = pts
                rows.append(np.repeat(r, 4))
                cols.append(idx[r].ravel())
                vals.append((w[r] * coef[r, None]).ravel())

        nt = regime == NO_TRADE
        drift = p.r * self.X - c
        fwd = nt & (direction == 1)
        bwd = nt & (direction == -1)
        put(fwd, self.E_, -drift / self.hxp)
        put(bwd, self.W_, drift / self.hxm)
        diag += np.where(fwd, drift / self.hxp, 0.0) - np.where(bwd, drift / self.hxm, 0.0)
        kappa, a1 = self._scaled_coefficients(c)
        a2 = 0.5 * p.sigma**2 * self.Y**2
        lo = -(a1 * self.d1[0] + a2 * self.d2[0])
        mid = -(a1 * self.d1[1] + a2 * self.d2[1])
        hi = -(a1 * self.d1[2] + a2 * self.d2[2])
        broken = nt & ((lo > 1e-14 * np.abs(mid)) | (hi > 1e-14 * np.abs(mid)))
        if np.any(broken):
            bad = np.nonzero(broken)[0][0]
            raise SchemeError(f"non-monotone diffusion stencil at node {np.unravel_index(bad, self.grid.shape)}")
        put(nt, self.S_, lo)
        put(nt, self.N_, hi)
        diag += np.where(nt, kappa + mid, 0.0)
        g = (self.q + self.Ut_vz + c * self.vz - m.utility.U(c)) / self.zeta

        cb, cs = p.cost("buy"), p.cost("sell")
        bu = regime == BUY
        put(bu, self.W_, np.full(n, -cb) / self.hxm)
        put(bu, self.buy_Q, -1.0 / self.buy_l)
        diag += np.where(bu, cb / self.hxm + 1.0 / self.buy_l + cb * self.zl, 0.0)
        se = regime == SELL
        put(se, self.S_, np.full(n, -cs) / self.hym)
        put(se, self.sell_Q, -1.0 / self.sell_l)
        diag += np.where(se, cs / self.hym + 1.0 / self.sell_l + cs * self.zl, 0.0)

        vals.insert(0, diag)
        A = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        vz = self.vz / self.zeta
        b = np.where(nt, g, np.where(bu, cb * vz, cs * vz))
        return A, b


def _initial_policy(st: "_Stencils", m: MertonSolution, p: ModelParams) -> np.ndarray:
    """Policy guess from the asymptotic band, widened by half on each side."""
    from .corrector import first_corrector_at

    Z = st.X + st.Y
    zs = np.geomspace(Z.min(), Z.max(), 25)
    fcs = [first_corrector_at(m, float(z), p.lambda_sell, p.lambda_buy) for z in zs]
    up = np.interp(np.log(Z), np.log(zs), [f.rho0 for f in fcs])
    lo = np.interp(np.log(Z), np.log(zs), [f.rho1 for f in fcs])
    scale = 1.5 * p.epsilon * np.asarray(m.eta(Z), float)
    dev = st.Y - np.asarray(m.y(Z), float)
    regime = np.full(st.n, NO_TRADE)
    regime[(dev > scale * up) & st.can_sell] = SELL
    regime[(dev < scale * lo) & st.can_buy] = BUY
    return regime


def _untrap(regime: np.ndarray, A) -> np.ndarray:
    """Switch trade nodes whose stencil chain never reaches a discounted row to NoTrade."""
    A = A.tocsr()
    rowsum = np.asarray(A.sum(axis=1)).ravel()
    strict = rowsum > 1e-12 * np.abs(A.diagonal())
    n = A.shape[0]
    # edge k -> l when row k references l; search backwards from the strict rows
    G = A.copy()
    G.setdiag(0)
    G.eliminate_zeros()
    root = sparse.csr_matrix((np.ones(int(strict.sum())), (np.full(int(strict.sum()), n), np.nonzero(strict)[0])),
                             shape=(n + 1, n + 1))
    GT = sparse.bmat([[G.T, None], [None, sparse.csr_matrix((1, 1))]]).tocsr() + root
    seen = breadth_first_order(GT, n, directed=True, return_predecessors=False)
    ok = np.zeros(n + 1, dtype=bool)
    ok[seen] = True
    trapped = ~ok[:n] & (regime != NO_TRADE)
    if trapped.any():
        logger.debug("%d trade nodes cannot reach a no-trade node; waiting there", int(trapped.sum()))
        regime = regime.copy()
        regime[trapped] = NO_TRADE
    return regime


def _choose(F, B, S, tie):
    Ff = np.where(np.isnan(F), np.inf, F)
    Bf = np.where(np.isnan(B), np.inf, B)
    Sf = np.where(np.isnan(S), np.inf, S)
    best = np.minimum(Bf, Sf)
    regime = np.where(Bf <= Sf, BUY, SELL)
    regime = np.where(Ff <= best + tie, NO_TRADE, regime)
    return regime, np.minimum(Ff, best)


def solve_hjb_2d(
    p: ModelParams,
    u: Utility,
    grid: GridSpec,
    merton: MertonSolution | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> EpsSolution:
    """Howard policy iteration for the three-regime dynamic programming equation."""
    from .merton import merton_crra

    if merton is None:
        if not isinstance(u, CRRA):
            raise ParameterError("general utility needs a precomputed Merton solution")
        merton = merton_crra(p, u.gamma)
    gamma = u.gamma if isinstance(u, CRRA) else None
    t0 = time.perf_counter()
    st = _Stencils(grid, p, merton, gamma)
    t_build = time.perf_counter() - t0
    tie = 1e-13 * np.maximum(np.abs(st.vz / st.zeta), 1.0)

    W = np.zeros(st.n)
    history = []
    regime_prev = None
    t_solve = 0.0
    it = 0
    if p.lambda_sum == 0:
        # without costs W = 0 solves the discrete system exactly; only the check below runs
        max_iter = 0
    for it in range(1, max_iter + 1):
        F, B, S, c, direction = st.residuals(W)
        if it == 1:
            # with W = 0 the trade rows cannot tell buying from selling
            regime = _initial_policy(st, merton, p)
        else:
            regime, res = _choose(F, B, S, tie)
        A, b = st.matrix(regime, c, direction)
        fixed = _untrap(regime, A)
        if fixed is not regime:
            regime = fixed
            A, b = st.matrix(regime, c, direction)
        t1 = time.perf_counter()
        W_new = splu(A.tocsc(), permc_spec="COLAMD").solve(b)
        t_solve += time.perf_counter() - t1
        change = float(np.max(np.abs(W_new - W)))
        switched = int(np.sum(regime != regime_prev)) if regime_prev is not None else st.n
        history.append({"iteration": it, "change": change, "switched": switched})
        logger.debug("hjb iteration %d: change %.3e, switched %d", it, change, switched)
        W, regime_prev = W_new, regime
        if change <= tol * max(1.0, float(np.max(np.abs(W)))) and switched == 0:
            break
    else:
        if max_iter:
            raise NonConvergenceError("policy iteration did not converge", residual=change, history=history)

    F, B, S, c, direction = st.residuals(W)
    regime, res = _choose(F, B, S, tie)
    # back to the units of the original equation
    F, B, S, res = (a * st.zeta for a in (F, B, S, res))
    W = W * st.zeta
    final = float(np.nanmax(np.abs(res)))
    if max_iter == 0 and final > 1e-8:
        raise NonConvergenceError("zero-cost check failed", residual=final, history=history)
    nx, ny = grid.shape
    sol = EpsSolution(
        grid=grid,
        V=(np.asarray(merton.v(st.X + st.Y)) - W).reshape(nx, ny),
        W=W.reshape(nx, ny),
        regime=regime.reshape(nx, ny),
        residuals={"F": F.reshape(nx, ny), "B": B.reshape(nx, ny), "S": S.reshape(nx, ny),
                   "c": c.reshape(nx, ny)},
        params=p,
        merton=merton,
        iterations=it,
        final_residual=final,
        history=history,
        timings={"build": t_build, "linear_solves": t_solve, "total": time.perf_counter() - t0},
    )
    return sol


@dataclass(frozen=True)
class NoTradeInterval:
    z: float
    y_low: float
    y_high: float
    merton_inside: bool

    @property
    def width(self) -> float:
        return self.y_high - self.y_low


def _signed_indicator(sol: EpsSolution) -> np.ndarray:
    """``F - min(B, S)``: negative where waiting is strict, positive where a trade binds."""
    r = sol.residuals
    trade = np.fmin(r["B"], r["S"])
    return np.where(sol.regime == NO_TRADE, -np.nan_to_num(trade, nan=0.0), np.fmax(r["F"], 0.0))


def _diagonal_range(grid: GridSpec, z: float):
    lo = max(grid.y[0], z - grid.x[-1])
    hi = min(grid.y[-1], z - grid.x[0])
    return lo, hi


def extract_no_trade(sol: EpsSolution, z_points, samples: int = 4001, margin: float = 0.2) -> list[NoTradeInterval]:
    """No-trade interval in ``y`` along each diagonal ``x + y = z``.

    A signed indicator (negative inside the no-trade region) is interpolated
    onto the diagonal and its zero crossings on either side of the Merton point
    give sub-grid edges. When the Merton point itself is not inside, the
    interval is reported with ``merton_inside=False`` and zero width.
    """
    grid, m = sol.grid, sol.merton
    ind = RegularGridInterpolator((grid.x, grid.y), _signed_indicator(sol))
    out = []
    for z in np.atleast_1d(np.asarray(z_points, float)):
        lo, hi = _diagonal_range(grid, z)
        ym = float(m.y(z))
        span = hi - lo
        if not (lo + margin * (ym - lo) <= ym <= hi - margin * (hi - ym)) or span <= 0:
            raise ParameterError(f"z={z:g} is too close to the grid edge")
        if grid.x[-1] < (1 + margin) * (z - ym) or grid.x[0] > (1 - margin) * (z - ym):
            raise ParameterError(f"z={z:g} is too close to the grid edge")
        ys = np.linspace(lo, hi, samples)
        f = ind(np.stack([z - ys, ys], -1))
        k = int(np.clip(np.searchsorted(ys, ym), 1, samples - 1))
        fm = np.interp(ym, ys, f)
        if not fm < 0:
            logger.warning("Merton point at z=%g is not in the no-trade region", z)
            out.append(NoTradeInterval(float(z), ym, ym, False))
            continue
        up = k + np.argmax(f[k:] >= 0) if np.any(f[k:] >= 0) else None
        dn = k - 1 - np.argmax(f[:k][::-1] >= 0) if np.any(f[:k] >= 0) else None
        if up is None or dn is None:
            raise ParameterError(f"no-trade region at z={z:g} reaches the grid edge")

        def root(a, b):
            return ys[a] + (ys[b] - ys[a]) * f[a] / (f[a] - f[b])

        out.append(NoTradeInterval(float(z), float(root(dn, dn + 1)), float(root(up - 1, up)), True))
    sol.boundaries.update({iv.z: (iv.y_low, iv.y_high) for iv in out})
    return out


def compute_u_eps(sol: EpsSolution, z_points) -> np.ndarray:
    """``(v(z) - V(z - y(z), y(z))) / eps^2`` on the Merton line."""
    z = np.atleast_1d(np.asarray(z_points, float))
    ym = np.asarray(sol.merton.y(z), float)
    return np.asarray(sol.gap(z - ym, ym), float) / sol.epsilon**2


def check_invariants(sol: EpsSolution, tol: float = 1e-8) -> dict:
    """Discrete structural properties of a solution; every entry is a scalar statistic."""
    g, V = sol.grid, sol.V
    r = sol.residuals
    scale = np.abs(sol.merton.v_z(g.mesh()[0] + g.mesh()[1]))
    out = {
        "dominance_max": float(np.max(-sol.W)),
        "buy_constraint_min": float(np.nanmin(r["B"] / scale)),
        "sell_constraint_min": float(np.nanmin(r["S"] / scale)),
        "complementarity_max": float(np.nanmax(np.abs(np.fmin(np.fmin(r["F"], r["B"]), r["S"])))),
    }

    def second_diff(a, h, axis):
        a = np.moveaxis(a, axis, 0)
        hm, hp = h[1:-1] - h[:-2], h[2:] - h[1:-1]
        d = 2 * (hm[:, None] * a[2:] - (hm + hp)[:, None] * a[1:-1] + hp[:, None] * a[:-2]) / (
            (hm * hp * (hm + hp))[:, None])
        return d

    out["concavity_x_max"] = float(np.max(second_diff(V, g.x, 0) / scale[1:-1]))
    out["concavity_y_max"] = float(np.max(second_diff(V, g.y, 1) / scale[:, 1:-1].T).max())
    out["monotone_x_min"] = float(np.min(np.diff(V, axis=0)))
    out["monotone_y_min"] = float(np.min(np.diff(V, axis=1)))
    if isinstance(sol.merton.utility, CRRA):
        gm = sol.merton.utility.gamma
        X, Y = g.mesh()
        worst = 0.0
        for s in (0.5, 2.0):
            inside = (s * X >= g.x[0]) & (s * X <= g.x[-1]) & (s * Y >= g.y[0]) & (s * Y <= g.y[-1])
            if not inside.any():
                continue
            lhs = sol.gap(s * X[inside], s * Y[inside])
            rhs = s ** (1 - gm) * sol.W[inside] if gm != 1 else sol.W[inside]
            worst = max(worst, float(np.max(np.abs(lhs - rhs) / np.maximum(np.abs(rhs), 1e-300))))
        out["homogeneity_rel_max"] = worst
    return out


def dump_solution_csv(sol: EpsSolution, path) -> Path:
    path = Path(path)
    X, Y = sol.grid.mesh()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "V", "regime"])
        for x, y, v, k in zip(X.ravel(), Y.ravel(), sol.V.ravel(), sol.regime.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v)), REGIME_NAMES[int(k)]])
    return path


def dump_boundaries_csv(intervals, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["z", "y_low", "y_high"])
        for iv in intervals:
            w.writerow([repr(iv.z), repr(iv.y_low), repr(iv.y_high)])
    return path


def solution_metadata(sol: EpsSolution) -> dict:
    g = sol.grid
    return {
        "grid": {"nx": int(g.x.size), "ny": int(g.y.size), "x_range": [float(g.x[0]), float(g.x[-1])],
                 "y_range": [float(g.y[0]), float(g.y[-1])]},
        "epsilon": sol.epsilon,
        "iterations": sol.iterations,
        "final_residual": sol.final_residual,
        "history": sol.history,
        "timings": sol.timings,
        "regime_counts": {REGIME_NAMES[k]: int(np.sum(sol.regime == k)) for k in REGIME_NAMES},
    }


def dump_metadata_json(sol: EpsSolution, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(solution_metadata(sol), indent=2, sort_keys=True))
    return path
