import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from merton_tc.estimators import BandPolicyEstimator, FirstCorrectorEstimator, MertonEstimator, TransactionCostSolver
from merton_tc.model import ParameterError

from conftest import COARSE


def test_merton_estimator():
    est = MertonEstimator()
    with pytest.raises(NotFittedError):
        est.predict([1.0])
    est.fit()
    assert est.pi_m_ == pytest.approx(0.25)
    np.testing.assert_allclose(est.predict([1.0, 2.0]), [-1 / 0.065**2, -0.5 / 0.065**2])
    with pytest.raises(ValueError):
        est.predict([-1.0])


def test_params_round_trip():
    est = MertonEstimator(gamma=3.0)
    assert est.get_params()["gamma"] == 3.0
    assert clone(est).set_params(mu=0.12).get_params()["mu"] == 0.12


def test_invalid_params_raise_on_fit():
    with pytest.raises(ParameterError):
        MertonEstimator(mu=0.01).fit()


def test_first_corrector_estimator():
    est = FirstCorrectorEstimator().fit()
    assert est.rho0_ == pytest.approx(0.128248196, abs=1e-9)
    w = est.predict(np.array([[-0.3], [0.0], [0.3]]))
    assert w.shape == (3,) and w[1] == 0.0
    with pytest.raises(ValueError):
        est.predict(np.ones((2, 2)))


def test_band_policy_estimator():
    est = BandPolicyEstimator(T=50.0, dt=4e-4, n_paths=8, seed=3).fit(np.geomspace(0.04, 0.4, 7))
    assert 0.04 < est.b_star_ < 0.4
    assert est.curve_.shape == est.stderr_.shape == (7,)
    assert est.predict([est.b_star_])[0] > 0


def test_transaction_cost_solver():
    est = TransactionCostSolver(epsilon=0.2, steps=COARSE).fit()
    V = est.predict([[0.75, 0.25], [1.5, 0.5]])
    assert V[1] == pytest.approx(V[0] / 2, rel=1e-3)
    band = est.no_trade([1.0])
    assert band[0, 0] < 0.25 < band[0, 1]
    assert est.u_eps([1.0])[0] == pytest.approx(2.42, abs=0.02)
    with pytest.raises(ValueError):
        est.predict([[1.0, 2.0, 3.0]])
