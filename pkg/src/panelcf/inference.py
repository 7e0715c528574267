"""
Parametric bootstrap bands for the event-study ATT.

Each replicate rebuilds the panel from the fitted untreated outcomes plus
resampled error rows of control regions, adds the estimated effects back
on the treated support, refits the completion model with the tuning
parameter held fixed and recomputes the ATT path.

In-sample residuals understate how far an imputed counterfactual can be
from the truth, so the error rows of control regions use out-of-sample
prediction errors after a pseudo adoption date. Control regions are split
into groups; each group has its post-pseudo-adoption cells hidden in turn
and the model is refit on the rest.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .effects import att_event_study, impute_effects
from .panel import ObservationSet, PanelDataset, TreatmentSchedule, derive_schedule
from .solver import FactorFit, SolverConfig, _AdditiveDesign, cross_validate, fit_mcnnm

logger = logging.getLogger(__name__)

__all__ = ["BootstrapConfig", "AttBands", "BootstrapError", "bootstrap_att", "att_pointwise_se", "bands_from_replicates"]


class BootstrapError(RuntimeError):
    pass


@dataclass(frozen=True)
class BootstrapConfig:
    """Bootstrap settings.

    ``errors`` picks the control error rows that are resampled: held-out
    prediction errors after a pseudo adoption date (``"out-of-sample"``)
    or plain fit residuals (``"in-sample"``, narrower bands).
    """

    B: int = 1000
    seed: int = 0
    level: float = 0.95
    refit_lambda: bool = False
    n_jobs: int = 1
    errors: str = "out-of-sample"

    def __post_init__(self):
        if self.errors not in ("out-of-sample", "in-sample"):
            raise ValueError(f"unknown error pool {self.errors!r}")
        if self.B < 2:
            raise ValueError("B must be at least 2")
        if not 0 < self.level < 1:
            raise ValueError("level must lie in (0, 1)")


@dataclass
class AttBands:
    event_time: np.ndarray
    att: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    se: np.ndarray
    n_regions: np.ndarray
    replicates: np.ndarray
    level: float
    n_failed: int = 0

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["event_time", "att", "lo", "hi", "se", "n_regions"])
            for k, e in enumerate(self.event_time):
                w.writerow([
                    int(e),
                    repr(float(self.att[k])),
                    repr(float(self.lower[k])),
                    repr(float(self.upper[k])),
                    repr(float(self.se[k])),
                    int(self.n_regions[k]),
                ])


def att_pointwise_se(bands: AttBands) -> np.ndarray:
    """Bootstrap standard error per event time."""
    return bands.se.copy()


def bands_from_replicates(point, replicates: np.ndarray, level: float):
    """Median-centred percentile bands and replicate standard deviations.

    The replicate distribution is shifted so its median sits on the point
    estimate, which keeps ``lower <= point <= upper``. Columns are sorted
    first, so the result does not depend on replicate order.
    """
    reps = np.sort(np.asarray(replicates, dtype=float), axis=0)
    alpha = 1.0 - level
    lo_q = np.quantile(reps, alpha / 2, axis=0)
    hi_q = np.quantile(reps, 1 - alpha / 2, axis=0)
    med = np.quantile(reps, 0.5, axis=0)
    point = np.asarray(point, dtype=float)
    lower = point + (lo_q - med)
    upper = point + (hi_q - med)
    # shift first so a constant column gives exactly zero
    se = (reps - reps[:1]).std(axis=0, ddof=1)
    return lower, upper, se


def _residual_pool(observed: np.ndarray, available: np.ndarray, controls: np.ndarray):
    # for each region, control rows with residuals wherever the region has data
    ctrl_obs = available[controls]
    pools = []
    for i in range(observed.shape[0]):
        need = observed[i]
        ok = np.all(ctrl_obs | ~need, axis=1)
        pools.append(controls[ok] if ok.any() else controls)
    return pools


def _warm_start(fit: FactorFit, lam: float):
    # at lam = 0 unobserved cells never leave their start, so a warm start
    # from the full-sample fit would copy it; start over along the path
    return fit.L if lam > 0 else None


def _oos_errors(data, O_mask, schedule, fit, solver_cfg, seed, n_groups=10):
    # control error rows: in-sample before a pseudo adoption date drawn from
    # the treated adoption dates, held-out prediction error afterwards
    N, T = data.Y.shape
    fitted = fit.fitted(data.X)
    err = np.where(O_mask, data.Y - fitted, np.nan)
    controls = np.flatnonzero(~schedule.is_treated)
    starts = schedule.last_pre[schedule.treated]
    if starts.size == 0 or controls.size < 2:
        return err
    rng = np.random.default_rng(np.random.SeedSequence([seed, 2**32]))
    pseudo = rng.choice(starts, controls.size)
    groups = np.array_split(rng.permutation(controls.size), min(n_groups, controls.size))
    t = np.arange(T)
    for g in groups:
        hide = np.zeros((N, T), dtype=bool)
        hide[controls[g]] = t[None, :] >= pseudo[g][:, None]
        hide &= O_mask
        mask = O_mask & ~hide
        if not hide.any() or not mask[controls[g]].any(axis=1).all():
            continue
        gfit = fit_mcnnm(data, mask, solver_cfg, L_init=_warm_start(fit, solver_cfg.lam))
        err[hide] = (data.Y - gfit.fitted(data.X))[hide]
    return err


def _replicate(b, data, obs_mask, schedule, fit, fitted, resid, pools, tau_support,
               cfg, solver_cfg, design, event_times):
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, b]))
    N, T = data.Y.shape
    draws = np.array([pool[rng.integers(len(pool))] for pool in pools])
    e_star = np.nan_to_num(resid[draws])
    Y_star = fitted + e_star + np.nan_to_num(tau_support)
    Y_star = np.where(data.observed, Y_star, np.nan)
    sim = replace(data, Y=Y_star)
    lam = fit.lam
    if cfg.refit_lambda:
        lam = cross_validate(sim, obs_mask, cfg=replace(solver_cfg, seed=int(rng.integers(2**63)))).lambda_star
        rfit = fit_mcnnm(sim, obs_mask, replace(solver_cfg, lam=lam), L_init=_warm_start(fit, lam))
    else:
        rfit = fit_mcnnm(sim, obs_mask, replace(solver_cfg, lam=lam), L_init=_warm_start(fit, lam),
                         _design=design)
    eff = impute_effects(sim, rfit, schedule)
    es = att_event_study(eff, schedule)
    att = np.array([es.get(e) for e in event_times])
    return rfit.converged, att


def bootstrap_att(
    data: PanelDataset,
    O: ObservationSet,
    fit: FactorFit,
    cfg: BootstrapConfig,
    schedule: Optional[TreatmentSchedule] = None,
    solver_cfg: Optional[SolverConfig] = None,
) -> AttBands:
    """Parametric bootstrap of the event-time ATT path.

    Parameters
    ----------
    data, O, fit :
        Panel, observation set and the converged full-sample fit.
    cfg : BootstrapConfig
    schedule : TreatmentSchedule, optional
        Derived from ``data`` when omitted.
    solver_cfg : SolverConfig, optional
        Solver settings for the refits; ``lam`` is taken from ``fit``.

    Raises
    ------
    BootstrapError
        If more than 10% of the replicates fail to converge.
    """
    schedule = schedule or derive_schedule(data)
    solver_cfg = replace(solver_cfg or SolverConfig(), lam=fit.lam)
    if not fit.converged:
        logger.warning("bootstrapping around a fit that did not converge")
    effects = impute_effects(data, fit, schedule)
    point = att_event_study(effects, schedule)
    event_times = point.event_time

    fitted = fit.fitted(data.X)
    if cfg.errors == "out-of-sample":
        resid = _oos_errors(data, O.mask, schedule, fit, solver_cfg, cfg.seed)
    else:
        resid = np.where(O.mask, data.Y - fitted, np.nan)
    controls = np.flatnonzero(~schedule.is_treated)
    if controls.size == 0:
        raise BootstrapError("bootstrap needs at least one control region")
    pools = _residual_pool(data.observed, O.mask, controls)
    tau_support = np.where(effects.support, effects.tau_hat, 0.0)
    design = _AdditiveDesign(data.X, O.mask, solver_cfg, data.covariate_names)

    args = (data, O.mask, schedule, fit, fitted, resid, pools, tau_support,
            cfg, solver_cfg, design, event_times)
    if cfg.n_jobs == 1:
        results = [_replicate(b, *args) for b in range(cfg.B)]
    else:
        with ThreadPoolExecutor(max_workers=cfg.n_jobs) as pool:
            results = list(pool.map(lambda b: _replicate(b, *args), range(cfg.B)))

    ok = np.array([r[0] for r in results])
    n_failed = int((~ok).sum())
    if n_failed > 0.1 * cfg.B:
        raise BootstrapError(f"{n_failed} of {cfg.B} bootstrap replicates failed to converge")
    if n_failed:
        logger.warning("%d bootstrap replicates did not converge and were skipped", n_failed)
    reps = np.array([r[1] for r in results if r[0]])
    lower, upper, se = bands_from_replicates(point.att, reps, cfg.level)
    return AttBands(
        event_time=event_times,
        att=point.att,
        lower=lower,
        upper=upper,
        se=se,
        n_regions=point.n_regions,
        replicates=reps,
        level=cfg.level,
        n_failed=n_failed,
    )
