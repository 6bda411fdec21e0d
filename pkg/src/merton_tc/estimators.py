"""scikit-learn style wrappers over the functional modules.

Hyperparameters go to ``__init__`` unchanged; ``fit`` does the work and
stores results in trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import corrector as C
from . import ergodic as E
from . import hjb
from .merton import merton_crra
from .model import CRRA, ModelParams, ParameterError, validate_params

__all__ = ["BandPolicyEstimator", "FirstCorrectorEstimator", "MertonEstimator", "TransactionCostSolver"]


def _column(X, name="X"):
    X = check_array(np.asarray(X, dtype=float).reshape(-1, 1) if np.ndim(X) <= 1 else X, ensure_2d=True)
    if X.shape[1] != 1:
        raise ValueError(f"{name} must have a single column, got {X.shape[1]}")
    return X[:, 0]


class _MarketMixin:
    def _params(self) -> ModelParams:
        return ModelParams(r=self.r, mu=self.mu, sigma=self.sigma, beta=self.beta,
                           lambda_buy=self.lambda_buy, lambda_sell=self.lambda_sell, epsilon=self.epsilon)

    def _validated(self):
        p, u = self._params(), CRRA(self.gamma)
        bad = validate_params(p, u)
        if bad:
            raise ParameterError("; ".join(v.message for v in bad))
        return p, u


class MertonEstimator(_MarketMixin, BaseEstimator):
    """Frictionless CRRA value function; ``predict`` returns ``v(z)``."""

    def __init__(self, r=0.02, mu=0.10, sigma=0.40, beta=0.10, gamma=2.0):
        self.r = r
        self.mu = mu
        self.sigma = sigma
        self.beta = beta
        self.gamma = gamma

    lambda_buy = lambda_sell = 0.0
    epsilon = 1.0

    def fit(self, X=None, y=None):
        p, _ = self._validated()
        self.solution_ = merton_crra(p, self.gamma)
        self.pi_m_ = self.solution_.pi_M
        self.v_m_ = self.solution_.v_M
        return self

    def predict(self, X):
        check_is_fitted(self, "solution_")
        z = _column(X, "z")
        if np.any(z <= 0):
            raise ValueError("wealth must be positive")
        return np.asarray(self.solution_.v(z), float)


class FirstCorrectorEstimator(BaseEstimator):
    """Closed-form first corrector; ``predict`` returns the potential at ``rho``."""

    def __init__(self, sigma=0.40, alphabar=0.15, lambda_sell=0.01, lambda_buy=0.01):
        self.sigma = sigma
        self.alphabar = alphabar
        self.lambda_sell = lambda_sell
        self.lambda_buy = lambda_buy

    def fit(self, X=None, y=None):
        self.corrector_ = C.solve_first_corrector(self.sigma, self.alphabar, self.lambda_sell, self.lambda_buy)
        self.rho0_ = self.corrector_.rho0
        self.abar_ = self.corrector_.abar
        return self

    def predict(self, X):
        check_is_fitted(self, "corrector_")
        return np.asarray(C.eval_wbar(self.corrector_, _column(X, "rho"))[0], float)


class BandPolicyEstimator(BaseEstimator):
    """Best symmetric reflecting band found by simulation.

    ``fit(X)`` takes the candidate half-widths as a column; without ``X`` a
    15-point log grid over ``[rho0/3, 3 rho0]`` is used.
    """

    def __init__(self, sigma=0.40, alphabar=0.15, lambda_sell=0.01, lambda_buy=0.01, T=200.0, dt=1e-4,
                 n_paths=64, seed=0):
        self.sigma = sigma
        self.alphabar = alphabar
        self.lambda_sell = lambda_sell
        self.lambda_buy = lambda_buy
        self.T = T
        self.dt = dt
        self.n_paths = n_paths
        self.seed = seed

    def _fp(self):
        return E.ErgodicParams(self.sigma, self.alphabar, self.lambda_sell, self.lambda_buy)

    def fit(self, X=None, y=None):
        if X is None:
            rho0 = C.solve_first_corrector(self.sigma, self.alphabar, self.lambda_sell, self.lambda_buy).rho0
            if rho0 <= 0:
                raise ParameterError("default grid needs positive costs; pass the grid explicitly")
            b = np.geomspace(rho0 / 3, 3 * rho0, 15)
        else:
            b = _column(X, "b")
        self.b_star_, self.estimate_, curve = E.optimize_band(self._fp(), b, T=self.T, dt=self.dt,
                                                              n_paths=self.n_paths, seed=self.seed)
        self.b_grid_ = np.array([c[0] for c in curve])
        self.curve_ = np.array([c[1].mean_cost for c in curve])
        self.stderr_ = np.array([c[1].stderr for c in curve])
        return self

    def predict(self, X):
        """Analytic long-run cost of the bands ``[-b, b]``."""
        check_is_fitted(self, "b_star_")
        return np.asarray(E.analytic_band_cost(self._fp(), _column(X, "b")), float)


class TransactionCostSolver(_MarketMixin, BaseEstimator):
    """Finite-difference solution of the problem with costs ``epsilon^3 lambda``.

    ``predict`` takes rows ``(x, y)`` of bank and stock holdings and returns
    the value there.
    """

    def __init__(self, r=0.02, mu=0.10, sigma=0.40, beta=0.10, gamma=2.0, lambda_buy=0.01, lambda_sell=0.01,
                 epsilon=0.2, steps=(0.006, 0.008), z_range=(1 / 3, 4.0), tol=1e-10):
        self.r = r
        self.mu = mu
        self.sigma = sigma
        self.beta = beta
        self.gamma = gamma
        self.lambda_buy = lambda_buy
        self.lambda_sell = lambda_sell
        self.epsilon = epsilon
        self.steps = steps
        self.z_range = z_range
        self.tol = tol

    def fit(self, X=None, y=None):
        p, u = self._validated()
        m = merton_crra(p, self.gamma)
        grid = hjb.merton_grid(m.pi_M, z_range=tuple(self.z_range), steps=tuple(self.steps))
        self.solution_ = hjb.solve_hjb_2d(p, u, grid, m, tol=self.tol)
        self.n_iter_ = self.solution_.iterations
        return self

    def predict(self, X):
        check_is_fitted(self, "solution_")
        X = check_array(X)
        if X.shape[1] != 2:
            raise ValueError("expected rows of (x, y)")
        return np.asarray(self.solution_.value(X[:, 0], X[:, 1]), float)

    def u_eps(self, z):
        check_is_fitted(self, "solution_")
        return hjb.compute_u_eps(self.solution_, _column(z, "z"))

    def no_trade(self, z):
        """``(y_low, y_high)`` rows for each wealth in ``z``."""
        check_is_fitted(self, "solution_")
        ivs = hjb.extract_no_trade(self.solution_, _column(z, "z"))
        return np.array([[iv.y_low, iv.y_high] for iv in ivs])
