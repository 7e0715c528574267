"""
Two-way fixed effects baseline: the homogeneous-effect regression
``y_it = tau D_it + X_it'beta + a_i + b_t + e_it`` and its lead/lag
event-study version.

Unit and time effects are swept out by alternating row/column demeaning
over the observed cells, which is equivalent to including the dummies.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from .effects import EventStudySeries
from .panel import PanelDataset, PanelError, TreatmentSchedule

__all__ = ["TwfeFit", "demean_two_way", "fit_twfe", "twfe_event_study", "event_dummies"]


@dataclass
class TwfeFit:
    tau_hat: float
    unit_fe: np.ndarray
    time_fe: np.ndarray
    intercept: float
    beta: np.ndarray
    residual_variance: float
    n_obs_used: int

    def to_json(self, path) -> None:
        doc = {
            "tau_hat": self.tau_hat,
            "unit_fe": self.unit_fe.tolist(),
            "time_fe": self.time_fe.tolist(),
            "intercept": self.intercept,
            "beta": self.beta.tolist(),
            "residual_variance": self.residual_variance,
            "n_obs_used": self.n_obs_used,
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def _group_mean(values, idx, n):
    s = np.bincount(idx, weights=values, minlength=n)
    c = np.bincount(idx, minlength=n)
    return np.divide(s, c, out=np.zeros(n), where=c > 0)


def demean_two_way(v: np.ndarray, rows: np.ndarray, cols: np.ndarray, N: int, T: int,
                   tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Residual of ``v`` (one value per observed cell) after unit and time means.

    Alternates row and column demeaning until the largest update falls
    below ``tol`` times the scale of ``v``.
    """
    out = np.array(v, dtype=float)
    scale = max(np.abs(out).max(), 1.0) if out.size else 1.0
    for _ in range(max_iter):
        rm = _group_mean(out, rows, N)
        out -= rm[rows]
        cm = _group_mean(out, cols, T)
        out -= cm[cols]
        if max(np.abs(rm).max(), np.abs(cm).max()) <= tol * scale:
            return out
    raise RuntimeError("two-way demeaning did not converge")


def _effects_from_residual(r, rows, cols, N, T, tol=1e-13, max_iter=100_000):
    # unit and time effects of an additive fit to r, by alternating means
    a, b = np.zeros(N), np.zeros(T)
    scale = max(np.abs(r).max(), 1.0)
    for _ in range(max_iter):
        a_new = _group_mean(r - b[cols], rows, N)
        b_new = _group_mean(r - a_new[rows], cols, T)
        done = max(np.abs(a_new - a).max(), np.abs(b_new - b).max()) <= tol * scale
        a, b = a_new, b_new
        if done:
            break
    mu = a.mean() + b.mean()
    return mu, a - a.mean(), b - b.mean()


def _cells(data: PanelDataset, use_covariates: bool):
    mask = data.observed.copy()
    if use_covariates and data.n_covariates:
        mask &= ~np.isnan(data.X).any(axis=2)
    return np.nonzero(mask)


def fit_twfe(data: PanelDataset, use_covariates: bool = True) -> TwfeFit:
    """Least-squares TWFE estimate of a single treatment effect."""
    rows, cols = _cells(data, use_covariates)
    N, T = data.Y.shape
    d = data.D[rows, cols]
    if d.min() == d.max():
        raise PanelError("treatment indicator is constant; effect not identified")
    y = data.Y[rows, cols]
    p = data.n_covariates if use_covariates else 0
    Z = np.column_stack([d] + [data.X[rows, cols, k] for k in range(p)])
    Zt = np.column_stack([demean_two_way(z, rows, cols, N, T) for z in Z.T])
    yt = demean_two_way(y, rows, cols, N, T)
    scale = max(float(np.linalg.norm(Z, axis=0).max()), 1.0)
    if np.linalg.norm(Zt[:, 0]) <= 1e-8 * scale:
        raise PanelError("treatment indicator is absorbed by the region and year effects; effect not identified")
    if np.linalg.matrix_rank(Zt, tol=1e-8 * scale) < Zt.shape[1]:
        raise PanelError("treatment and covariates are collinear given the fixed effects; effect not identified")
    coef, *_ = np.linalg.lstsq(Zt, yt, rcond=None)
    tau, beta = float(coef[0]), coef[1:]
    r = y - Z @ coef
    mu, a, b = _effects_from_residual(r, rows, cols, N, T)
    e = r - mu - a[rows] - b[cols]
    dof = max(len(y) - (N + T - 1) - Z.shape[1], 1)
    return TwfeFit(
        tau_hat=tau,
        unit_fe=a,
        time_fe=b,
        intercept=float(mu),
        beta=np.asarray(beta),
        residual_variance=float(e @ e / dof),
        n_obs_used=int(len(y)),
    )


def event_dummies(schedule: TreatmentSchedule, n_leads: int, n_lags: int) -> Tuple[np.ndarray, np.ndarray]:
    """Event-time dummy array (N, T, k) and its event-time labels.

    Relative years beyond the window are binned into the end points; year
    -1 is the omitted reference.
    """
    if n_leads < 0 or n_lags < 0:
        raise ValueError("n_leads and n_lags must be nonnegative")
    labels = [e for e in range(-n_leads, n_lags + 1) if e != -1]
    rel = schedule.event_time()
    treated = schedule.is_treated
    lo = -n_leads if n_leads >= 2 else -1
    binned = np.clip(rel, lo, n_lags)
    out = np.zeros(rel.shape + (len(labels),))
    for k, e in enumerate(labels):
        out[..., k] = (binned == e) & treated[:, None]
    return out, np.array(labels)


def twfe_event_study(
    data: PanelDataset,
    schedule: TreatmentSchedule,
    n_leads: int,
    n_lags: int,
    use_covariates: bool = True,
) -> EventStudySeries:
    """Lead/lag TWFE regression with reference year -1.

    Event times without any supporting cell get a NaN coefficient and
    ``n_regions == 0``.
    """
    rows, cols = _cells(data, use_covariates)
    N, T = data.Y.shape
    dummies, labels = event_dummies(schedule, n_leads, n_lags)
    Dm = dummies[rows, cols]
    support = Dm.any(axis=0)
    p = data.n_covariates if use_covariates else 0
    Z = np.column_stack([Dm[:, support]] + [data.X[rows, cols, k] for k in range(p)])
    Zt = np.column_stack([demean_two_way(z, rows, cols, N, T) for z in Z.T])
    yt = demean_two_way(data.Y[rows, cols], rows, cols, N, T)
    coef, *_ = np.linalg.lstsq(Zt, yt, rcond=None)

    rel = schedule.event_time()
    att = np.full(len(labels), np.nan)
    att[support] = coef[: support.sum()]
    n_regions = np.zeros(len(labels), dtype=int)
    for k in range(len(labels)):
        n_regions[k] = len(np.unique(rows[Dm[:, k] == 1]))
    # reference year pinned at zero
    times = np.append(labels, -1)
    att = np.append(att, 0.0)
    ref_rows = schedule.treated[
        [np.any((rel[i] == -1) & data.observed[i]) for i in schedule.treated]
    ] if schedule.n_treated else np.array([], dtype=int)
    n_regions = np.append(n_regions, len(ref_rows))
    order = np.argsort(times)
    return EventStudySeries(times[order], att[order], n_regions[order])
