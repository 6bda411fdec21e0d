import warnings

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from scipy.optimize import fsolve, minimize_scalar

from merton_tc.corrector import (AccuracyWarning, dump_second_corrector_csv, dump_wbar_csv, eval_wbar,
                                 first_corrector_at, scale_to_unbarred, second_corrector_crra, second_corrector_mc,
                                 solve_first_corrector, source_a)
from merton_tc.merton import apply_generator_A
from merton_tc.model import ParameterError

positive = st.floats(0.05, 1.0)
costs = st.floats(1e-4, 0.1)


def _pasting_by_root_finding(sigma, ab, ls, lb):
    """Solve ``w'(r0)=ls, w'(r1)=-lb, w''(r0)=w''(r1)=0`` for ``(abar, r0, r1, k1)`` numerically.

    Inside the band ``alphabar^2 w''/2 = abar - sigma^2 rho^2/2``.
    """
    def d1(r, a, k1):
        return 2 / ab**2 * (a * r - sigma**2 * r**3 / 6) + k1

    def eqs(t):
        a, r0, r1, k1 = t
        return [d1(r0, a, k1) - ls, d1(r1, a, k1) + lb, a - 0.5 * sigma**2 * r0**2, a - 0.5 * sigma**2 * r1**2]

    guess = (3 * ab**2 * (ls + lb) / (4 * sigma**2)) ** (1 / 3) * 1.3
    return fsolve(eqs, [0.5 * sigma**2 * guess**2, guess, -guess, 0.0], xtol=1e-12)


def test_p0_constants(fc0):
    assert fc0.alphabar == pytest.approx(0.15, rel=1e-9)
    a, r0, r1, k1 = _pasting_by_root_finding(0.4, 0.15, 0.01, 0.01)
    assert fc0.rho0 == pytest.approx(r0, rel=1e-10)
    assert fc0.rho1 == pytest.approx(r1, rel=1e-10)
    assert fc0.abar == pytest.approx(a, rel=1e-10)
    assert fc0.rho0 == pytest.approx(0.128248196, abs=1e-9)
    assert fc0.abar == pytest.approx(0.001315808, abs=1e-9)
    assert fc0.abar == pytest.approx(0.5 * 0.16 * fc0.rho0**2, rel=1e-14)
    assert fc0.k2 == pytest.approx(fc0.abar / 0.15**2, rel=1e-14)


def test_optimal_band_cost_minimum(fc0):
    J = lambda b: 0.16 * b**2 / 6 + 0.02 * 0.15**2 / (4 * b)  # noqa: E731
    res = minimize_scalar(J, bounds=(1e-3, 1.0), method="bounded", options={"xatol": 1e-12})
    assert res.x == pytest.approx(fc0.rho0, rel=1e-6)
    assert res.fun == pytest.approx(fc0.abar, rel=1e-10)


def test_second_corrector_value(m0, fc0, sc0):
    # u(1) = abar / (gamma v_M^(1+gamma)); the rounded figure 2.3949 agrees to 5e-4
    assert float(sc0.u(1.0)) == pytest.approx(0.001315808 / (2 * 0.065**3), rel=1e-6)
    assert float(sc0.u(1.0)) == pytest.approx(2.3949, rel=5e-4)
    assert float(sc0.u(2.0)) == pytest.approx(float(sc0.u(1.0)) / 2, rel=1e-14)


def test_second_corrector_solves_linear_equation(m0, fc0, sc0):
    z = np.geomspace(0.3, 3, 9)
    a = source_a(m0, 0.01, 0.01, fc0)
    np.testing.assert_allclose(apply_generator_A(m0, sc0.u, z), a(z), rtol=1e-6)


def test_scaled_corrector(m0, fc0):
    xi0, a, w = scale_to_unbarred(fc0, m0, 2.0)
    assert xi0 == pytest.approx(fc0.rho0, rel=1e-14)
    assert a == pytest.approx(1.0 * float(m0.v_z(2.0)) * fc0.abar)
    assert w(0.0) == 0.0
    with pytest.raises(ParameterError):
        scale_to_unbarred(fc0, m0, 0.0)


def test_zero_costs_give_zero_corrector():
    fc = solve_first_corrector(0.4, 0.15, 0.0, 0.0)
    assert fc.rho0 == fc.abar == 0.0
    assert np.all(eval_wbar(fc, np.linspace(-1, 1, 11))[0] == 0)


@pytest.mark.parametrize("args", [(0.0, 0.15, 0.01, 0.01), (0.4, 0.0, 0.01, 0.01), (0.4, 0.15, -0.01, 0.01)])
def test_rejects_bad_inputs(args):
    with pytest.raises(ParameterError):
        solve_first_corrector(*args)


def test_mc_second_corrector_small(m0, fc0, sc0):
    mc = second_corrector_mc(m0, fc0, [1.0, 2.0], n_paths=20_000, T=150.0, dt=0.05, seed=11)
    exact = sc0.u(mc.z_points)
    assert np.all(np.abs(mc.u_values - exact) <= 4 * mc.stderr)
    again = second_corrector_mc(m0, fc0, [1.0, 2.0], n_paths=20_000, T=150.0, dt=0.05, seed=11)
    np.testing.assert_array_equal(mc.u_values, again.u_values)


def test_mc_preconditions(m0, fc0):
    with pytest.raises(ParameterError):
        second_corrector_mc(m0, fc0, [1.0], T=50.0)
    with pytest.raises(ParameterError):
        second_corrector_mc(m0, fc0, [1.0], dt=1.0)
    with pytest.raises(ParameterError):
        second_corrector_mc(m0, fc0, [-1.0])


def test_mc_euler_scheme_agrees(m0, fc0, sc0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AccuracyWarning)
        mc = second_corrector_mc(m0, fc0, [1.0], n_paths=4_000, T=150.0, dt=0.05, seed=2, scheme="euler")
    assert abs(mc.u_values[0] - float(sc0.u(1.0))) <= 4 * mc.stderr[0] + 0.01


def test_dumps(tmp_path, fc0, sc0):
    p = dump_wbar_csv(fc0, np.linspace(-0.3, 0.3, 5), tmp_path / "w.csv")
    assert p.read_text().splitlines()[0] == "rho,wbar,wbar_rho,wbar_rhorho"
    p = dump_second_corrector_csv(sc0, np.array([1.0]), tmp_path / "u.csv")
    assert len(p.read_text().splitlines()) == 2


@given(positive, positive, costs, costs)
@settings(max_examples=200, deadline=None)
def test_closed_form_properties(sigma, ab, ls, lb):
    fc = solve_first_corrector(sigma, ab, ls, lb)
    scale = max(ls, lb)
    assert np.max(np.abs(fc.pasting_residuals())) <= 1e-12 * max(1.0, scale)
    rho = np.linspace(-3 * fc.rho0, 3 * fc.rho0, 2001)
    _, wr, wrr = eval_wbar(fc, rho)
    assert np.all(wr <= ls + 1e-15) and np.all(wr >= -lb - 1e-15)
    res = fc.pde_residual(rho)
    inside = (rho >= fc.rho1) & (rho <= fc.rho0)
    assert np.max(np.abs(res[inside])) <= 1e-12 * max(fc.abar, 1e-300) + 1e-18
    assert np.all(res[~inside] <= 1e-15)
    assert np.all(wrr >= -1e-12 * scale / fc.rho0)


@given(positive, positive, costs, costs)
@settings(max_examples=100, deadline=None)
def test_swapping_costs_mirrors_the_potential(sigma, ab, ls, lb):
    fc = solve_first_corrector(sigma, ab, ls, lb)
    sw = solve_first_corrector(sigma, ab, lb, ls)
    rho = np.linspace(-2 * fc.rho0, 2 * fc.rho0, 101)
    w = eval_wbar(fc, rho)[0]
    assert sw.rho0 == -fc.rho1 and sw.abar == fc.abar
    np.testing.assert_allclose(eval_wbar(sw, -rho)[0], w, rtol=0, atol=1e-15 * np.max(np.abs(w)))


@given(positive, positive, costs, costs)
@settings(max_examples=50, deadline=None)
def test_matches_root_finding(sigma, ab, ls, lb):
    fc = solve_first_corrector(sigma, ab, ls, lb)
    a, r0, r1, k1 = _pasting_by_root_finding(sigma, ab, ls, lb)
    assume(abs(r0 - fc.rho0) < 0.5 * fc.rho0)  # fsolve occasionally wanders
    assert fc.rho0 == pytest.approx(r0, rel=1e-8)
    assert fc.abar == pytest.approx(a, rel=1e-8)
    assert fc.k1 == pytest.approx(k1, rel=1e-6, abs=1e-12)


@given(positive, positive, costs)
@settings(max_examples=100, deadline=None)
def test_band_scales_with_alphabar_to_two_thirds(sigma, ab, lam):
    a = solve_first_corrector(sigma, ab, lam, lam)
    b = solve_first_corrector(sigma, ab * np.sqrt(2), lam, lam)
    assert b.rho0 == pytest.approx(2 ** (1 / 3) * a.rho0, rel=1e-12)


def test_first_corrector_at_uses_local_alphabar(m0):
    assert first_corrector_at(m0, 3.0, 0.01, 0.01).rho0 == pytest.approx(0.128248196, abs=1e-9)
