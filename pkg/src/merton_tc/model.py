"""Market and preference parameters, utility functions and their conjugates.

Everything downstream works with constant coefficients ``r, mu, sigma``; the
actual proportional transaction cost paid is ``epsilon**3 * lambda``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

__all__ = [
    "CRRA",
    "GeneralUtility",
    "ModelParams",
    "ParameterError",
    "Violation",
    "dual_utility",
    "load_config",
    "merton_constant",
    "merton_fraction",
    "params_from_dict",
    "utility_from_dict",
    "validate_params",
]


class ParameterError(ValueError):
    """Raised when inputs fall outside the admissible set."""


@dataclass(frozen=True)
class ModelParams:
    r: float
    mu: float
    sigma: float
    beta: float
    lambda_buy: float = 0.0
    lambda_sell: float = 0.0
    epsilon: float = 1.0

    @property
    def lambda_sum(self) -> float:
        return self.lambda_buy + self.lambda_sell

    def cost(self, side: str) -> float:
        """Actual proportional cost ``eps^3 * lambda`` for ``side`` in {"buy", "sell"}."""
        lam = self.lambda_buy if side == "buy" else self.lambda_sell
        return self.epsilon**3 * lam

    def replace(self, **changes) -> "ModelParams":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw.update(changes)
        return ModelParams(**kw)


@dataclass(frozen=True)
class CRRA:
    """Power utility ``c**(1-gamma)/(1-gamma)``; ``gamma == 1`` is log utility."""

    gamma: float

    @property
    def is_log(self) -> bool:
        return self.gamma == 1.0

    def U(self, c):
        c = np.asarray(c, dtype=float)
        if self.is_log:
            return np.log(c)
        return c ** (1.0 - self.gamma) / (1.0 - self.gamma)

    def U_prime(self, c):
        return np.asarray(c, dtype=float) ** (-self.gamma)

    def U_prime_inv(self, p):
        return np.asarray(p, dtype=float) ** (-1.0 / self.gamma)

    def risk_aversion(self, c):
        return np.full_like(np.asarray(c, dtype=float), self.gamma)


@dataclass(frozen=True)
class GeneralUtility:
    """Caller-supplied utility given pointwise by ``U`` and ``U_prime`` on (0, inf).

    ``U_prime_inv`` is optional; when absent it is obtained by bracketing
    root-finding on ``log c``.
    """

    U_fn: Callable[[np.ndarray], np.ndarray]
    U_prime_fn: Callable[[np.ndarray], np.ndarray]
    U_prime_inv_fn: Callable[[np.ndarray], np.ndarray] | None = field(default=None)
    name: str = "general"

    def U(self, c):
        return np.asarray(self.U_fn(np.asarray(c, dtype=float)), dtype=float)

    def U_prime(self, c):
        return np.asarray(self.U_prime_fn(np.asarray(c, dtype=float)), dtype=float)

    def U_prime_inv(self, p):
        p = np.asarray(p, dtype=float)
        if self.U_prime_inv_fn is not None:
            return np.asarray(self.U_prime_inv_fn(p), dtype=float)
        out = np.empty(p.shape)
        flat = out.reshape(-1)
        for k, pk in enumerate(p.reshape(-1)):
            f = lambda s: math.log(float(self.U_prime(math.exp(s)))) - math.log(pk)  # noqa: E731
            lo, hi = -5.0, 5.0
            while f(lo) < 0:
                lo *= 2
            while f(hi) > 0:
                hi *= 2
            flat[k] = math.exp(brentq(f, lo, hi, xtol=1e-14, rtol=1e-15))
        return out

    def risk_aversion(self, c):
        # -c U''/U' from a centred difference of log U' in log c
        c = np.asarray(c, dtype=float)
        h = 1e-4
        return -(np.log(self.U_prime(c * math.exp(h))) - np.log(self.U_prime(c * math.exp(-h)))) / (2 * h)


Utility = CRRA | GeneralUtility


@dataclass(frozen=True)
class Violation:
    code: str
    message: str


def merton_fraction(p: ModelParams, gamma: float) -> float:
    return (p.mu - p.r) / (gamma * p.sigma**2)


def merton_constant(p: ModelParams, gamma: float) -> float:
    """Consumption-to-wealth ratio ``v_M`` of the CRRA Merton problem."""
    return (p.beta - p.r * (1 - gamma)) / gamma - 0.5 * (p.mu - p.r) ** 2 / (gamma**2 * p.sigma**2) * (1 - gamma)


def validate_params(p: ModelParams, u: Utility, c_grid=None) -> list[Violation]:
    """Collect every violated standing assumption; an empty list means valid."""
    out: list[Violation] = []
    if not p.sigma > 0:
        out.append(Violation("sigma_nonpositive", f"sigma={p.sigma} must be > 0"))
    if not p.beta > 0:
        out.append(Violation("beta_nonpositive", f"beta={p.beta} must be > 0"))
    if not 0 < p.epsilon <= 1:
        out.append(Violation("epsilon_out_of_range", f"epsilon={p.epsilon} must lie in (0, 1]"))
    if not p.lambda_buy >= 0:
        out.append(Violation("lambda_buy_negative", f"lambda_buy={p.lambda_buy} must be >= 0"))
    if not p.lambda_sell >= 0:
        out.append(Violation("lambda_sell_negative", f"lambda_sell={p.lambda_sell} must be >= 0"))

    if isinstance(u, CRRA):
        if not u.gamma > 0:
            out.append(Violation("gamma_nonpositive", f"gamma={u.gamma} must be > 0"))
            return out
        if p.sigma > 0:
            pi_m = merton_fraction(p, u.gamma)
            if not 0 < pi_m < 1:
                out.append(Violation("merton_fraction_not_interior", f"pi_M={pi_m:.6g} not in (0, 1)"))
            vm = merton_constant(p, u.gamma)
            if not vm > 0:
                out.append(Violation("merton_constant_nonpositive", f"v_M={vm:.6g} must be > 0"))
    else:
        c = np.geomspace(1e-3, 1e3, 200) if c_grid is None else np.asarray(c_grid, dtype=float)
        up = u.U_prime(c)
        if not np.all(up > 0):
            out.append(Violation("utility_not_increasing", "U' must be positive on the sampled grid"))
        if not np.all(np.diff(up) < 0):
            out.append(Violation("utility_not_concave", "U' must be strictly decreasing on the sampled grid"))
    return out


def dual_utility(u: Utility, ctilde):
    """Convex conjugate ``sup_c {U(c) - c*ctilde}`` and its derivative ``-(U')^{-1}(ctilde)``."""
    ct = np.asarray(ctilde, dtype=float)
    if np.any(~(ct > 0)):
        raise ParameterError("dual_utility requires ctilde > 0")
    if isinstance(u, CRRA):
        if u.is_log:
            val = -np.log(ct) - 1.0
            der = -1.0 / ct
        else:
            g = u.gamma
            val = g / (1.0 - g) * ct ** ((g - 1.0) / g)
            der = -(ct ** (-1.0 / g))
    else:
        c = u.U_prime_inv(ct)
        val = u.U(c) - c * ct
        der = -c
    if np.ndim(ctilde) == 0:
        return float(val), float(der)
    return val, der


_PARAM_FIELDS = {f.name for f in fields(ModelParams)}


def params_from_dict(d: dict) -> ModelParams:
    unknown = set(d) - _PARAM_FIELDS
    if unknown:
        raise ParameterError(f"unknown model fields: {sorted(unknown)}")
    missing = {"r", "mu", "sigma", "beta"} - set(d)
    if missing:
        raise ParameterError(f"missing model fields: {sorted(missing)}")
    return ModelParams(**{k: float(v) for k, v in d.items()})


def utility_from_dict(d: dict) -> CRRA:
    unknown = set(d) - {"kind", "gamma"}
    if unknown:
        raise ParameterError(f"unknown utility fields: {sorted(unknown)}")
    kind = d.get("kind", "crra").lower()
    if kind not in ("crra", "log"):
        raise ParameterError(f"utility kind {kind!r} cannot be read from a config file")
    gamma = 1.0 if kind == "log" else float(d["gamma"])
    return CRRA(gamma)


def load_config(path: str | Path) -> dict:
    """Read a JSON run configuration.

    Top-level sections are ``model`` (ModelParams fields), ``utility``
    (``kind``/``gamma``) and one optional section per CLI subcommand.
    """
    with open(path) as fh:
        raw = json.load(fh)
    allowed = {"model", "utility", "merton", "corrector", "ergodic", "hjb", "expand", "residual", "subsolution", "seed"}
    unknown = set(raw) - allowed
    if unknown:
        raise ParameterError(f"unknown config sections: {sorted(unknown)}")
    if "model" not in raw:
        raise ParameterError("config requires a 'model' section")
    cfg = dict(raw)
    cfg["model"] = params_from_dict(raw["model"])
    cfg["utility"] = utility_from_dict(raw.get("utility", {"kind": "crra", "gamma": 2.0}))
    return cfg
