"""
Scikit-learn style wrappers around the functional estimators.

The estimators take a whole :class:`~panelcf.panel.PanelDataset` as ``X``
(the panel carries outcomes, treatment and covariates together), so
``fit(panel)`` and ``predict(panel)`` replace the usual ``(X, y)`` pair.
Hyper-parameters live on the instance and follow the ``get_params`` /
``set_params`` protocol, which makes ``sklearn.base.clone`` work.
"""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .effects import EffectsMatrix, EventStudySeries, att_event_study, impute_effects
from .inference import AttBands, BootstrapConfig, bootstrap_att
from .panel import (
    PanelDataset,
    PanelError,
    build_observation_set,
    derive_schedule,
    panel_from_frame,
)
from .solver import SolverConfig, cross_validate, default_lambda_grid, fit_mcnnm
from .twfe import fit_twfe, twfe_event_study

__all__ = ["MatrixCompletionEstimator", "TwoWayFixedEffects", "check_panel", "check_random_state_seed"]


def check_panel(panel, *, require_treated: bool = False, require_control: bool = False) -> PanelDataset:
    """Coerce and validate estimator input.

    Parameters
    ----------
    panel : PanelDataset or pandas.DataFrame
        A long-format frame is parsed with the default column schema.
    require_treated, require_control : bool
        Demand at least one ever-treated or never-treated region.

    Returns
    -------
    PanelDataset
    """
    if not isinstance(panel, PanelDataset):
        if hasattr(panel, "to_csv") and hasattr(panel, "columns"):
            panel = panel_from_frame(panel)
        else:
            raise TypeError(f"expected a PanelDataset or DataFrame, got {type(panel).__name__}")
    ever = panel.D.max(axis=1) > 0
    if require_treated and not ever.any():
        raise PanelError("panel has no treated region")
    if require_control and ever.all():
        raise PanelError("panel has no control region")
    return panel


def check_random_state_seed(seed) -> int:
    """Integer seed in ``[0, 2**63)`` from an int or ``None`` (-> 0)."""
    if seed is None:
        return 0
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, (int, np.integer)):
        raise TypeError("random_state must be an integer or None")
    if seed < 0:
        raise ValueError("random_state must be nonnegative")
    return int(seed)


def _same_shape(panel: PanelDataset, fitted_shape) -> None:
    if panel.Y.shape != fitted_shape:
        raise ValueError(f"panel shape {panel.Y.shape} does not match the fitted shape {fitted_shape}")


class MatrixCompletionEstimator(BaseEstimator):
    """Counterfactual imputation by nuclear-norm penalized matrix completion.

    Parameters
    ----------
    lam : float or None
        Penalty weight. ``None`` selects it by K-fold cross-validation.
    n_folds, n_lambdas : int
        Cross-validation folds and size of the default grid.
    max_iters, tol : solver limits.
    include_unit_fe, include_time_fe : bool
    allow_reversal : bool
        Accept treatment paths that switch off again.
    random_state : int or None
    n_jobs : int
        Worker threads for cross-validation.

    Attributes
    ----------
    fit_ : FactorFit
    cv_ : CvResult or None
    lambda_ : float
    schedule_, observation_set_ : derived treatment structure
    effects_ : EffectsMatrix
    """

    def __init__(
        self,
        lam: Optional[float] = None,
        n_folds: int = 5,
        n_lambdas: int = 30,
        max_iters: int = 2000,
        tol: float = 1e-7,
        include_unit_fe: bool = True,
        include_time_fe: bool = True,
        allow_reversal: bool = False,
        random_state: Optional[int] = 0,
        n_jobs: int = 1,
    ):
        self.lam = lam
        self.n_folds = n_folds
        self.n_lambdas = n_lambdas
        self.max_iters = max_iters
        self.tol = tol
        self.include_unit_fe = include_unit_fe
        self.include_time_fe = include_time_fe
        self.allow_reversal = allow_reversal
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _solver_config(self, lam: float = 0.0) -> SolverConfig:
        return SolverConfig(
            lam=lam,
            max_iters=self.max_iters,
            tol=self.tol,
            include_unit_fe=self.include_unit_fe,
            include_time_fe=self.include_time_fe,
            seed=check_random_state_seed(self.random_state),
        )

    def fit(self, panel, y=None):
        """Fit on the untreated cells of ``panel``; ``y`` is ignored."""
        panel = check_panel(panel)
        schedule = derive_schedule(panel, allow_reversal=self.allow_reversal)
        obs = build_observation_set(panel, schedule)
        cfg = self._solver_config()
        if self.lam is None:
            grid = default_lambda_grid(panel, obs, cfg, n=self.n_lambdas)
            self.cv_ = cross_validate(panel, obs, grid, self.n_folds, cfg, n_jobs=self.n_jobs)
            lam = self.cv_.lambda_star
        else:
            if not self.lam >= 0:
                raise ValueError("lam must be nonnegative")
            self.cv_ = None
            lam = float(self.lam)
        self.lambda_ = lam
        self.fit_ = fit_mcnnm(panel, obs, replace(cfg, lam=lam))
        self.schedule_ = schedule
        self.observation_set_ = obs
        self.effects_ = impute_effects(panel, self.fit_, schedule)
        self.panel_ = panel
        self.n_regions_, self.n_years_ = panel.Y.shape
        return self

    def predict(self, panel=None) -> np.ndarray:
        """Untreated outcome ``y(0)`` for every cell of the fitted panel.

        A different panel with the same shape may be passed to score new
        covariate values.
        """
        check_is_fitted(self, "fit_")
        panel = self.panel_ if panel is None else check_panel(panel)
        _same_shape(panel, (self.n_regions_, self.n_years_))
        return self.fit_.fitted(panel.X)

    def effects(self) -> EffectsMatrix:
        check_is_fitted(self, "fit_")
        return self.effects_

    def event_study(self, alignment: str = "event-time", include_placebo: bool = False) -> EventStudySeries:
        check_is_fitted(self, "fit_")
        return att_event_study(self.effects_, self.schedule_, alignment, include_placebo)

    def bootstrap(self, B: int = 1000, level: float = 0.95, n_jobs: int = 1) -> AttBands:
        """Bootstrap bands around the event-study ATT of the fitted model."""
        check_is_fitted(self, "fit_")
        cfg = BootstrapConfig(B=B, seed=check_random_state_seed(self.random_state), level=level, n_jobs=n_jobs)
        return bootstrap_att(self.panel_, self.observation_set_, self.fit_, cfg,
                             self.schedule_, self._solver_config(self.lambda_))

    def score(self, panel=None, y=None) -> float:
        """Negative mean squared error of the fit on the observation set."""
        check_is_fitted(self, "fit_")
        panel = self.panel_ if panel is None else check_panel(panel)
        _same_shape(panel, (self.n_regions_, self.n_years_))
        mask = self.observation_set_.mask & panel.observed
        r = (panel.Y - self.fit_.fitted(panel.X))[mask]
        return -float(r @ r / r.size)


class TwoWayFixedEffects(BaseEstimator):
    """Homogeneous-effect TWFE regression with an optional event study.

    Parameters
    ----------
    use_covariates : bool
    n_leads, n_lags : int
        Window of the event-study dummies.
    allow_reversal : bool

    Attributes
    ----------
    fit_ : TwfeFit
    tau_ : float
    """

    def __init__(self, use_covariates: bool = True, n_leads: int = 5, n_lags: int = 10,
                 allow_reversal: bool = False):
        self.use_covariates = use_covariates
        self.n_leads = n_leads
        self.n_lags = n_lags
        self.allow_reversal = allow_reversal

    def fit(self, panel, y=None):
        panel = check_panel(panel, require_treated=True)
        self.fit_ = fit_twfe(panel, self.use_covariates)
        self.tau_ = self.fit_.tau_hat
        self.schedule_ = derive_schedule(panel, allow_reversal=self.allow_reversal)
        self.panel_ = panel
        return self

    def predict(self, panel=None) -> np.ndarray:
        """Fitted outcomes including the treatment term."""
        check_is_fitted(self, "fit_")
        panel = self.panel_ if panel is None else check_panel(panel)
        _same_shape(panel, self.panel_.Y.shape)
        f = self.fit_
        out = f.intercept + f.unit_fe[:, None] + f.time_fe[None, :] + f.tau_hat * panel.D
        if self.use_covariates and panel.n_covariates:
            out = out + panel.X @ f.beta
        return out

    def event_study(self) -> EventStudySeries:
        check_is_fitted(self, "fit_")
        return twfe_event_study(self.panel_, self.schedule_, self.n_leads, self.n_lags, self.use_covariates)
