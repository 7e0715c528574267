import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from panelcf import MatrixCompletionEstimator, TwoWayFixedEffects
from panelcf.dgp import DgpConfig, generate
from panelcf.estimator import check_panel, check_random_state_seed
from panelcf.panel import PanelError, build_observation_set, derive_schedule, write_panel
from panelcf.solver import SolverConfig, fit_mcnnm
from panelcf.twfe import fit_twfe


@pytest.fixture(scope="module")
def panel():
    data, _ = generate(DgpConfig(N=30, T=12, first_treat=5, last_treat=7, seed=31))
    return data


def test_params_and_clone():
    est = MatrixCompletionEstimator(lam=0.01, n_folds=3)
    params = est.get_params()
    assert params["lam"] == 0.01 and params["n_folds"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(lam=0.5)
    assert est.lam == 0.5


def test_not_fitted(panel):
    with pytest.raises(NotFittedError):
        MatrixCompletionEstimator().predict()


def test_fixed_lambda_matches_functional_api(panel):
    est = MatrixCompletionEstimator(lam=2e-3).fit(panel)
    s = derive_schedule(panel)
    ref = fit_mcnnm(panel, build_observation_set(panel, s), SolverConfig(lam=2e-3))
    np.testing.assert_array_equal(est.predict(), ref.fitted(panel.X))
    assert est.lambda_ == 2e-3 and est.cv_ is None
    assert est.score() <= 0
    es = est.event_study()
    assert es.event_time[0] == 0 and len(es.att) == len(es.n_regions)


def test_cross_validated_fit(panel):
    est = MatrixCompletionEstimator(n_lambdas=6, n_folds=3).fit(panel)
    assert est.lambda_ == est.cv_.lambda_star
    assert est.lambda_ in list(est.cv_.lambda_grid)
    assert len(est.cv_.lambda_grid) == 7  # six log-spaced values plus 0


def test_bootstrap_method(panel):
    bands = MatrixCompletionEstimator(lam=2e-3).fit(panel).bootstrap(B=10)
    assert bands.replicates.shape[0] == 10
    assert np.all(bands.lower <= bands.upper)


def test_negative_lambda_rejected(panel):
    with pytest.raises(ValueError):
        MatrixCompletionEstimator(lam=-1.0).fit(panel)


def test_dataframe_input(panel, tmp_path):
    pd = pytest.importorskip("pandas")
    path = tmp_path / "p.csv"
    write_panel(panel, path)
    df = pd.read_csv(path)
    a = MatrixCompletionEstimator(lam=2e-3).fit(df)
    b = MatrixCompletionEstimator(lam=2e-3).fit(panel)
    np.testing.assert_allclose(a.predict(), b.predict(), atol=1e-12)


def test_check_helpers(panel):
    assert check_panel(panel) is panel
    with pytest.raises(TypeError):
        check_panel(np.ones((3, 3)))
    controls_only, _ = generate(DgpConfig(N=10, T=6, first_treat=2, last_treat=3, seed=1))
    assert check_panel(controls_only, require_treated=True, require_control=True)
    assert check_random_state_seed(None) == 0
    assert check_random_state_seed(np.int64(5)) == 5
    with pytest.raises(ValueError):
        check_random_state_seed(-1)


def test_twfe_estimator(panel):
    est = TwoWayFixedEffects(n_leads=2, n_lags=3).fit(panel)
    assert est.tau_ == fit_twfe(panel).tau_hat
    assert est.predict().shape == panel.Y.shape
    es = est.event_study()
    assert es.get(-1) == 0.0
    assert clone(est).get_params()["n_lags"] == 3
