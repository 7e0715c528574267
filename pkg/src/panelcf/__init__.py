"""Counterfactual panel estimation by nuclear-norm matrix completion."""
__version__ = "0.1.0"

from .dgp import DgpConfig, DgpTruth, generate, mask_additional
from .effects import (
    EffectsMatrix,
    EventStudySeries,
    att_event_study,
    distribution_summary,
    euro_effect,
    gini,
    gini_path,
    impute_effects,
    intensity_curve,
    quintile_att,
)
from .estimator import MatrixCompletionEstimator, TwoWayFixedEffects, check_panel
from .inference import AttBands, BootstrapConfig, att_pointwise_se, bootstrap_att
from .panel import (
    ObservationSet,
    PanelDataset,
    PanelError,
    SchemaError,
    TreatmentSchedule,
    build_observation_set,
    derive_schedule,
    load_panel,
    transform_outcome,
    write_panel,
)
from .solver import (
    CvResult,
    FactorFit,
    SolverConfig,
    cross_validate,
    fit_mcnnm,
    lambda_max,
    objective,
    shrink,
    soft_impute,
)
from .twfe import TwfeFit, fit_twfe, twfe_event_study
