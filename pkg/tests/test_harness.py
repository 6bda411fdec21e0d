import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merton_tc import harness as H
from merton_tc.corrector import first_corrector_at, second_corrector_crra
from merton_tc.merton import merton_crra, merton_general_fd
from merton_tc.model import CRRA, ParameterError

from conftest import COARSE


@pytest.fixture(scope="module")
def quick_report(p0, crra, m0):
    return H.run_expansion_study(p0, crra, eps_list=(0.4, 0.3, 0.2), z_points=(1.0, 2.0), steps=COARSE, merton=m0,
                                 config={"note": "quick"})


def test_residual_decays_linearly(m0, fc0, sc0):
    rr = H.residual_check(m0, fc0, sc0, (0.5, 2.0), (0.2, 0.1, 0.05))
    assert all(1.6 <= q <= 2.4 for q in rr.ratios)


def test_residual_centre_coefficient_vanishes(m0, fc0, sc0):
    # at xi = 0 the eps^2 term cancels through k2 = abar / alphabar^2
    rr = H.residual_check(m0, fc0, sc0, (0.5, 2.0), (0.2, 0.1))
    assert rr.at_center[1] < 0.3 * rr.at_center[0]
    assert rr.at_center[1] < 1e-3 * rr.sup_stat[1]


def test_residual_without_costs_is_exactly_zero(p0):
    p = p0.replace(lambda_buy=0.0, lambda_sell=0.0)
    m = merton_crra(p, 2.0)
    fc = first_corrector_at(m, 1.0, 0.0, 0.0)
    rr = H.residual_check(m, fc, second_corrector_crra(m, fc), (0.5, 2.0), (0.2, 0.1))
    assert rr.sup_stat == [0.0, 0.0]


def test_residual_needs_closed_form(p0, crra, fc0, sc0):
    g = merton_general_fd(p0, crra, np.geomspace(0.1, 10, 200))
    with pytest.raises(ParameterError):
        H.residual_check(g, fc0, sc0)
    with pytest.raises(ParameterError):
        H.residual_check(merton_crra(p0, 2.0), fc0, sc0, z_window=(2.0, 1.0))


def test_subsolution_passes_and_is_dominated(sol01):
    rec = H.check_subsolution(sol01)
    assert rec.passed and rec.dominated
    assert rec.n_failing == 0 and rec.offending == []


def test_subsolution_fails_without_K(sol01):
    rec = H.check_subsolution(sol01, K=0.0)
    assert not rec.passed
    assert 0 < len(rec.offending) <= 20
    # the failures sit in the no-trade band around the Merton line
    fr = np.array([o["y"] / (o["x"] + o["y"]) for o in rec.offending])
    assert np.all(np.abs(fr - 0.25) < 0.05)


def test_subsolution_without_costs(sol_free):
    rec = H.check_subsolution(sol_free)
    assert rec.passed and rec.dominated


def test_default_constants(m0):
    c = H.default_subsolution_constants(m0)
    assert c == pytest.approx({"k_lower": 0.5, "k_upper": 0.5, "alpha_upper": 0.4 * 0.25 * 0.75})


def test_assumption_audit(m0):
    audit = H.assumption_audit(m0)
    for lo, hi in audit.values():
        assert hi - lo <= 1e-12 * max(1.0, abs(hi))
    assert audit["eta_over_z"][0] == pytest.approx(0.5)
    assert audit["y_one_minus_yz_over_z"][0] == pytest.approx(0.1875)
    assert audit["U_c_over_z_vz"][0] == pytest.approx(-0.065)


def test_fit_slope_exact_power():
    eps = np.array([0.3, 0.2, 0.1])
    slope, se, degenerate = H.fit_slope(eps, 3 * eps**2)
    assert slope == pytest.approx(2.0, abs=1e-12) and se < 1e-6 and not degenerate


def test_fit_slope_degenerate():
    slope, _, degenerate = H.fit_slope([0.3, 0.2, 0.1], [0.0, 0.0, 0.0])
    assert degenerate and np.isnan(slope)
    with pytest.raises(ParameterError):
        H.fit_slope([0.2, 0.1], [1.0, 1.0])


@given(st.lists(st.floats(0.01, 1.0), min_size=3, max_size=6, unique=True), st.floats(0.5, 4.0), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_fit_slope_recovers_power(eps, k, c):
    eps = np.array(eps)
    if eps.max() / eps.min() < 1.5:
        return
    slope, _, _ = H.fit_slope(eps, c * eps**k)
    assert slope == pytest.approx(k, rel=1e-9)


def test_expansion_rows_sorted(quick_report):
    keys = [(-r.epsilon, r.z) for r in quick_report.rows]
    assert keys == sorted(keys)
    assert len(quick_report.rows) == 6 and not quick_report.failures


def test_expansion_slope_and_widths(quick_report):
    assert quick_report.slope == pytest.approx(2.0, abs=0.15)
    assert all(abs(r.width_ratio - 1) < 0.1 for r in quick_report.rows)
    assert all(r.u_eps > 0 for r in quick_report.rows)


def test_expansion_needs_spread(p0, crra):
    with pytest.raises(ParameterError):
        H.run_expansion_study(p0, crra, eps_list=(0.2, 0.15, 0.12))


def test_expansion_records_failures(p0, crra, m0):
    rep = H.run_expansion_study(p0, crra, eps_list=(0.4, 0.3, 0.2), z_points=(0.35,), steps=COARSE, merton=m0)
    assert len(rep.failures) == 3 and rep.degenerate
    assert {f["error"] for f in rep.failures} == {"ParameterError"}


def test_expansion_without_costs(p0, crra):
    p = p0.replace(lambda_buy=0.0, lambda_sell=0.0)
    rep = H.run_expansion_study(p, crra, eps_list=(0.4, 0.3, 0.2), steps=COARSE)
    assert rep.degenerate
    assert all(r.u_eps == 0 for r in rep.rows)


def test_report_round_trip(tmp_path, quick_report):
    H.emit_report(quick_report, tmp_path)
    back = H.read_report(tmp_path)
    assert back.rows == quick_report.rows
    assert back.slope == quick_report.slope and back.slope_stderr == quick_report.slope_stderr
    assert back.config == quick_report.config and back.failures == quick_report.failures


def test_report_is_idempotent_and_deterministic(tmp_path, quick_report, p0, crra, m0):
    H.emit_report(quick_report, tmp_path / "a")
    H.emit_report(quick_report, tmp_path / "a")
    again = H.run_expansion_study(p0, crra, eps_list=(0.4, 0.3, 0.2), z_points=(1.0, 2.0), steps=COARSE,
                                  merton=m0, config={"note": "quick"})
    H.emit_report(again, tmp_path / "b")
    assert (tmp_path / "a/expansion.csv").read_bytes() == (tmp_path / "b/expansion.csv").read_bytes()
    meta = json.loads((tmp_path / "a/expansion.json").read_text())
    assert meta["config_hash"] == H.config_hash({"note": "quick"})
    assert set(meta["versions"]) == {"package", "numpy", "scipy"}


def test_empty_report(tmp_path):
    H.emit_report(H.ExpansionReport(), tmp_path)
    assert (tmp_path / "expansion.csv").read_text() == "epsilon,z,u_eps,width_ratio,residual_stat\n"
    assert H.read_report(tmp_path).rows == []


def test_config_hash_is_order_independent():
    assert H.config_hash({"a": 1, "b": [1, 2]}) == H.config_hash({"b": [1, 2], "a": 1})
    assert H.config_hash({"a": 1}) != H.config_hash({"a": 2})


def test_richardson_check(p0, crra, m0):
    rc = H.richardson_check(p0, crra, steps=(0.024, 0.034), merton=m0)
    assert rc["fine"]["shape"][0] > rc["coarse"]["shape"][0]
    assert rc["relative_change"] < 0.1
