import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar

from merton_tc.model import (CRRA, GeneralUtility, ModelParams, ParameterError, dual_utility, load_config,
                             merton_constant, merton_fraction, validate_params)

from conftest import P0


def test_p0_is_valid_with_quarter_fraction(p0, crra):
    assert validate_params(p0, crra) == []
    assert merton_fraction(p0, 2.0) == pytest.approx(0.25, abs=1e-15)
    assert merton_constant(p0, 2.0) == pytest.approx(0.065, abs=1e-15)


@pytest.mark.parametrize("change, code", [
    ({"sigma": 0.0}, "sigma_nonpositive"),
    ({"beta": -0.1}, "beta_nonpositive"),
    ({"epsilon": 1.5}, "epsilon_out_of_range"),
    ({"lambda_buy": -0.01}, "lambda_buy_negative"),
    ({"mu": 0.01}, "merton_fraction_not_interior"),
])
def test_each_violation_is_reported(p0, crra, change, code):
    codes = [v.code for v in validate_params(p0.replace(**change), crra)]
    assert code in codes


def test_ill_posed_merton_constant(crra):
    p = ModelParams(r=0.02, mu=0.10, sigma=0.40, beta=0.001, lambda_buy=0, lambda_sell=0, epsilon=0.1)
    codes = [v.code for v in validate_params(p, CRRA(0.5))]
    assert "merton_constant_nonpositive" in codes


def test_cost_scales_with_epsilon_cubed(p0):
    assert p0.cost("buy") == pytest.approx(0.01 * 0.2**3)
    assert p0.replace(epsilon=0.1).cost("sell") == pytest.approx(1e-5)


def test_general_utility_concavity_is_checked():
    bad = GeneralUtility(U_fn=lambda c: c**2, U_prime_fn=lambda c: 2 * c)
    codes = [v.code for v in validate_params(ModelParams(**P0, epsilon=0.1), bad)]
    assert "utility_not_concave" in codes


@pytest.mark.parametrize("gamma", [0.5, 1.0, 2.0, 5.0])
@pytest.mark.parametrize("ct", [0.05, 1.0, 7.0])
def test_dual_matches_numerical_supremum(gamma, ct):
    u = CRRA(gamma)
    res = minimize_scalar(lambda c: -(u.U(c) - c * ct), bounds=(1e-8, 1e4), method="bounded",
                          options={"xatol": 1e-12})
    val, der = dual_utility(u, ct)
    assert val == pytest.approx(-res.fun, rel=1e-7)
    assert -der == pytest.approx(res.x, rel=1e-4)


def test_dual_rejects_nonpositive():
    with pytest.raises(ParameterError):
        dual_utility(CRRA(2.0), 0.0)


@given(st.floats(0.2, 6.0), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_dual_is_convex_and_decreasing(gamma, a, b):
    u = CRRA(gamma)
    fa, da = dual_utility(u, a)
    fb, db = dual_utility(u, b)
    assert da < 0 and db < 0
    # convexity: f(b) >= f(a) + f'(a)(b - a)
    assert fb >= fa + da * (b - a) - 1e-9 * (abs(fa) + abs(fb) + 1)


@given(st.floats(0.2, 6.0), st.floats(1e-3, 50.0))
@settings(max_examples=100, deadline=None)
def test_general_utility_dual_agrees_with_crra(gamma, ct):
    g = CRRA(gamma)
    gen = GeneralUtility(U_fn=g.U, U_prime_fn=g.U_prime)
    assert dual_utility(gen, ct)[0] == pytest.approx(dual_utility(g, ct)[0], rel=1e-6, abs=1e-9)


def test_load_config_round_trip(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": {**P0, "epsilon": 0.1}, "utility": {"kind": "crra", "gamma": 3}}))
    cfg = load_config(path)
    assert cfg["model"].epsilon == 0.1
    assert cfg["utility"].gamma == 3.0


@pytest.mark.parametrize("raw", [
    {"utility": {"gamma": 2}},
    {"model": {**P0, "bogus": 1}},
    {"model": P0, "unknown_section": {}},
    {"model": {"r": 0.02}},
])
def test_load_config_rejects(tmp_path, raw):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(raw))
    with pytest.raises(ParameterError):
        load_config(path)


def test_log_utility_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"model": P0, "utility": {"kind": "log"}}))
    assert load_config(path)["utility"].is_log
    assert np.isclose(dual_utility(CRRA(1.0), 2.0)[0], -np.log(2.0) - 1)
