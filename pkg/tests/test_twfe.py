import numpy as np
import pytest

from panelcf.dgp import DgpConfig, generate
from panelcf.panel import PanelError, derive_schedule
from panelcf.twfe import demean_two_way, event_dummies, fit_twfe, twfe_event_study

from conftest import make_panel


def dense_ols(Y, regressors, observed):
    """OLS of Y on regressors plus full unit and time dummies (one time dummy dropped)."""
    N, T = Y.shape
    rows, cols = np.nonzero(observed)
    n = rows.size
    U = np.zeros((n, N))
    U[np.arange(n), rows] = 1
    V = np.zeros((n, T - 1))
    keep = cols > 0
    V[np.arange(n)[keep], cols[keep] - 1] = 1
    Z = np.column_stack([r[rows, cols] for r in regressors])
    A = np.column_stack([Z, U, V])
    coef, *_ = np.linalg.lstsq(A, Y[rows, cols], rcond=None)
    return coef[: Z.shape[1]]


def test_exact_model_recovers_tau():
    rng = np.random.default_rng(0)
    N, T = 8, 6
    D = np.zeros((N, T))
    D[:3, 3:] = 1
    Y = 2.0 * D + rng.normal(size=N)[:, None] + rng.normal(size=T)[None, :]
    fit = fit_twfe(make_panel(Y, D=D))
    assert fit.tau_hat == pytest.approx(2.0, abs=1e-10)
    assert abs(fit.unit_fe.sum()) < 1e-10 and abs(fit.time_fe.sum()) < 1e-10
    assert fit.n_obs_used == N * T


def test_single_treated_cell_matches_dense():
    rng = np.random.default_rng(42)
    Y = rng.normal(size=(10, 10))
    D = np.zeros((10, 10))
    D[3, 7] = 1
    fit = fit_twfe(make_panel(Y, D=D))
    ref = dense_ols(Y, [D], np.ones_like(Y, dtype=bool))
    assert fit.tau_hat == pytest.approx(ref[0], abs=1e-10)


@pytest.mark.parametrize("seed", range(25))
def test_dense_oracle_random_instances(seed):
    rng = np.random.default_rng(seed)
    N, T = rng.integers(3, 21), rng.integers(3, 21)
    while N * T > 400:
        N, T = rng.integers(3, 21), rng.integers(3, 21)
    D = np.zeros((N, T))
    n_tr = max(1, N // 3)
    starts = rng.integers(1, T, n_tr)
    for i, s in enumerate(starts):
        D[i, s:] = 1
    X = rng.normal(size=(N, T, 1))
    Y = rng.normal(size=(N, T)) + 0.5 * D + 0.3 * X[..., 0]
    observed = rng.random((N, T)) > 0.15
    Y[~observed] = np.nan
    data = make_panel(Y, D=D, X=X)
    try:
        fit = fit_twfe(data)
    except PanelError:
        pytest.skip("treatment constant on the observed cells")
    ref = dense_ols(np.nan_to_num(Y), [D, X[..., 0]], observed)
    assert fit.tau_hat == pytest.approx(ref[0], abs=1e-8)
    assert fit.beta[0] == pytest.approx(ref[1], abs=1e-8)


def test_constant_treatment_errors():
    with pytest.raises(PanelError):
        fit_twfe(make_panel(np.ones((3, 3))))


def test_shift_invariance():
    data, _ = generate(DgpConfig(N=20, T=10, first_treat=4, last_treat=6, seed=3))
    from dataclasses import replace

    a = fit_twfe(data)
    b = fit_twfe(replace(data, Y=data.Y + 7.5))
    assert b.tau_hat == pytest.approx(a.tau_hat, abs=1e-10)
    assert b.intercept == pytest.approx(a.intercept + 7.5, abs=1e-9)


def test_demeaning_converges_and_is_orthogonal():
    rng = np.random.default_rng(1)
    N, T = 7, 5
    mask = rng.random((N, T)) > 0.2
    rows, cols = np.nonzero(mask)
    v = rng.normal(size=rows.size)
    r = demean_two_way(v, rows, cols, N, T)
    assert np.abs(np.bincount(rows, r, N)).max() < 1e-10
    assert np.abs(np.bincount(cols, r, T)).max() < 1e-10


def test_event_dummies_binning():
    data = make_panel(np.ones((2, 8)), D=[[0, 0, 0, 0, 1, 1, 1, 1], [0] * 8])
    s = derive_schedule(data)
    dm, labels = event_dummies(s, 2, 1)
    assert list(labels) == [-2, 0, 1]
    # t=0,1,2 are event times -4,-3,-2 -> binned into -2
    assert dm[0, :3, 0].tolist() == [1, 1, 1]
    assert dm[0, 3].sum() == 0  # reference year -1
    assert dm[0, 5:, 2].tolist() == [1, 1, 1]
    assert dm[1].sum() == 0


def test_event_study_zero_effect():
    data, _ = generate(DgpConfig(N=80, T=20, effect="zero", first_treat=8, last_treat=10, K=0, seed=2))
    es = twfe_event_study(data, derive_schedule(data), 3, 5)
    assert es.get(-1) == 0.0
    post = [es.get(e) for e in range(0, 6)]
    assert np.all(np.abs(post) < 0.05)


def test_event_study_constant_effect():
    data, _ = generate(DgpConfig(N=120, T=20, K=0, first_treat=8, last_treat=10, seed=4))
    es = twfe_event_study(data, derive_schedule(data), 3, 5)
    for e in range(0, 6):
        assert es.get(e) == pytest.approx(0.1, abs=0.03)
    for e in (-3, -2):
        assert es.get(e) == pytest.approx(0.0, abs=0.03)


def test_event_study_unsupported_time_is_nan():
    D = np.zeros((4, 6))
    D[0, 3:] = 1
    Y = np.random.default_rng(0).normal(size=(4, 6))
    data = make_panel(Y, D=D)
    es = twfe_event_study(data, derive_schedule(data), 1, 5)
    # only event times 0..2 exist for the single treated region
    assert np.isnan(es.get(4)) and np.isnan(es.get(5))
    k = list(es.event_time).index(4)
    assert es.n_regions[k] == 0
    assert es.get(-1) == 0.0


def test_unidentified_treatment_rejected():
    # every region adopts in the same year: the dummy equals a year effect
    D = np.zeros((4, 5))
    D[:, 2:] = 1
    Y = np.random.default_rng(3).normal(size=(4, 5))
    with pytest.raises(PanelError, match="absorbed"):
        fit_twfe(make_panel(Y, D=D))
    # one treated cell plus a covariate that only varies on that cell
    D = np.zeros((3, 3))
    D[0, 2] = 1
    X = D[..., None] * 2.0
    with pytest.raises(PanelError, match="collinear"):
        fit_twfe(make_panel(Y[:3, :3], D=D, X=X))
