"""
Treatment-effect analytics on top of a fitted completion model: imputed
effects, event-study ATT, euro conversions, distribution summaries,
quintile groups, regional Gini paths and intensity-response curves.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .panel import PanelDataset, PanelError, TreatmentSchedule
from .solver import FactorFit

__all__ = [
    "EffectsMatrix",
    "EventStudySeries",
    "DistributionSummary",
    "GiniPath",
    "IntensityCurve",
    "QuintileResult",
    "impute_effects",
    "att_event_study",
    "euro_effect",
    "distribution_summary",
    "central_moments",
    "quintile_assign",
    "quintile_att",
    "gini",
    "gini_path",
    "local_linear",
    "silverman_bandwidth",
    "intensity_curve",
]


@dataclass
class EffectsMatrix:
    """Estimated effects on the treated support (NaN elsewhere).

    ``placebo`` holds in-sample residuals of treated regions before
    adoption; it is used only for pre-treatment diagnostics.
    """

    tau_hat: np.ndarray
    y0_hat: np.ndarray
    levels0_hat: Optional[np.ndarray]
    support: np.ndarray
    placebo: np.ndarray
    event_time: np.ndarray
    treated: np.ndarray
    n_missing_treated: int = 0

    def region_effects(self, event_time: int) -> np.ndarray:
        """Effects of treated regions at one event time (NaN if absent)."""
        out = np.full(len(self.treated), np.nan)
        for k, i in enumerate(self.treated):
            src = self.tau_hat if event_time >= 0 else self.placebo
            hit = np.flatnonzero(self.event_time[i] == event_time)
            if hit.size:
                out[k] = src[i, hit[0]]
        return out

    def region_mean_effects(self) -> np.ndarray:
        """Per treated region, mean effect over its post-treatment window."""
        out = np.full(len(self.treated), np.nan)
        for k, i in enumerate(self.treated):
            vals = self.tau_hat[i][self.support[i]]
            if vals.size:
                out[k] = vals.mean()
        return out


@dataclass
class EventStudySeries:
    event_time: np.ndarray
    att: np.ndarray
    n_regions: np.ndarray
    placebo: np.ndarray = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    se: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.placebo is None:
            self.placebo = self.event_time < 0

    def as_dict(self) -> Dict[int, float]:
        return {int(e): float(a) for e, a in zip(self.event_time, self.att)}

    def get(self, event_time: int, default=np.nan) -> float:
        hit = np.flatnonzero(self.event_time == event_time)
        return float(self.att[hit[0]]) if hit.size else default

    def to_csv(self, path, label: str = "event_time") -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = [label, "att", "n_regions", "placebo"]
            if self.lower is not None:
                header += ["lo", "hi", "se"]
            w.writerow(header)
            for k, e in enumerate(self.event_time):
                row = [int(e), repr(float(self.att[k])), int(self.n_regions[k]), int(self.placebo[k])]
                if self.lower is not None:
                    row += [repr(float(v[k])) for v in (self.lower, self.upper, self.se)]
                w.writerow(row)


@dataclass
class DistributionSummary:
    horizon: Union[int, str]
    share_positive: float
    skewness: Optional[float]
    kurtosis: Optional[float]
    n_regions: int
    mean: float = np.nan


@dataclass
class GiniPath:
    years: np.ndarray
    gini_observed: np.ndarray
    gini_counterfactual: np.ndarray
    n_regions: np.ndarray


@dataclass
class IntensityCurve:
    horizon: int
    grid: np.ndarray
    att: np.ndarray
    argmax: float
    peak: float
    bandwidth: float
    n_regions: int

    @property
    def peak_percent(self) -> float:
        """Peak effect converted from log points to percent."""
        return 100.0 * float(np.expm1(self.peak))


@dataclass
class QuintileResult:
    groups: np.ndarray
    series: List[EventStudySeries]
    observed_path: List[EventStudySeries] = field(default_factory=list)
    counterfactual_path: List[EventStudySeries] = field(default_factory=list)


# ---------------------------------------------------------------------------


def impute_effects(data: PanelDataset, fit: FactorFit, schedule: TreatmentSchedule) -> EffectsMatrix:
    """Counterfactuals and effects for treated cells after adoption.

    Treated cells without an observed outcome are left out of the support
    and counted in ``n_missing_treated``.
    """
    post = schedule.post_mask() & schedule.is_treated[:, None]
    observed = data.observed
    support = post & observed
    fitted = fit.fitted(data.X)
    y0 = np.where(support, fitted, np.nan)
    tau = np.where(support, data.Y - fitted, np.nan)
    pre = ~schedule.post_mask() & schedule.is_treated[:, None] & observed
    placebo = np.where(pre, data.Y - fitted, np.nan)
    levels0 = None
    if data.levels is not None:
        levels0 = np.exp(y0) if data.is_log else y0.copy()
    return EffectsMatrix(
        tau_hat=tau,
        y0_hat=y0,
        levels0_hat=levels0,
        support=support,
        placebo=placebo,
        event_time=schedule.event_time(),
        treated=schedule.treated.copy(),
        n_missing_treated=int((post & ~observed).sum()),
    )


def att_event_study(
    effects: EffectsMatrix,
    schedule: TreatmentSchedule,
    alignment: str = "event-time",
    include_placebo: bool = False,
) -> EventStudySeries:
    """Average effect on the treated by event time or calendar period.

    In ``"event-time"`` mode, time 0 is the first treated year and each
    value averages the regions observed at that relative year. In
    ``"calendar"`` mode the average at period ``t`` runs over regions
    treated by ``t``; ``event_time`` then holds 0-based period indices.
    Times without support are omitted.
    """
    rows = effects.treated
    if alignment not in ("event-time", "calendar"):
        raise ValueError(f"unknown alignment {alignment!r}")
    if rows.size == 0:
        return EventStudySeries(np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=int))
    if alignment == "event-time":
        rel = effects.event_time[rows]
        tau = effects.tau_hat[rows]
        sup = effects.support[rows]
        times, att, n = [], [], []
        lo = int(rel.min()) if include_placebo else 0
        for e in range(lo, int(rel.max()) + 1):
            if e < 0:
                vals = effects.placebo[rows][rel == e]
                vals = vals[~np.isnan(vals)]
            else:
                vals = tau[(rel == e) & sup]
            if vals.size:
                times.append(e)
                att.append(vals.mean())
                n.append(vals.size)
        return EventStudySeries(np.array(times, dtype=int), np.array(att), np.array(n, dtype=int))
    if alignment == "calendar":
        times, att, n = [], [], []
        for t in range(schedule.n_periods):
            sup = effects.support[rows, t]
            if sup.any():
                vals = effects.tau_hat[rows, t][sup]
                times.append(t)
                att.append(vals.mean())
                n.append(vals.size)
    return EventStudySeries(np.array(times, dtype=int), np.array(att), np.array(n, dtype=int))


def euro_effect(data: PanelDataset, effects: EffectsMatrix, horizon: int):
    """Level difference ``(exp(tau) - 1) * counterfactual level`` at one event time.

    Returns ``(per_region, mean)``; regions without data at the horizon are
    NaN in ``per_region`` and excluded from the mean.
    """
    if not data.is_log:
        raise PanelError("euro conversion needs a log-transformed outcome")
    if effects.levels0_hat is None:
        raise PanelError("euro conversion needs raw outcome levels")
    per = np.full(len(effects.treated), np.nan)
    for k, i in enumerate(effects.treated):
        hit = np.flatnonzero((effects.event_time[i] == horizon) & effects.support[i])
        if hit.size:
            t = hit[0]
            per[k] = np.expm1(effects.tau_hat[i, t]) * effects.levels0_hat[i, t]
    valid = per[~np.isnan(per)]
    mean = float(valid.sum() / valid.size) if valid.size else np.nan
    return per, mean


def central_moments(x: np.ndarray):
    """Population skewness ``m3 / m2^1.5`` and raw kurtosis ``m4 / m2^2``."""
    x = np.asarray(x, dtype=float)
    d = x - x.mean()
    m2 = np.mean(d ** 2)
    if m2 == 0:
        return np.nan, np.nan
    return float(np.mean(d ** 3) / m2 ** 1.5), float(np.mean(d ** 4) / m2 ** 2)


def distribution_summary(
    effects: EffectsMatrix,
    horizons: Sequence[Union[int, str]] = (7, 14, 21, "avg"),
) -> List[DistributionSummary]:
    """Cross-region distribution of effects per horizon.

    ``"avg"`` uses each region's mean effect over its whole post-treatment
    window.
    """
    out = []
    for h in horizons:
        vals = effects.region_mean_effects() if h == "avg" else effects.region_effects(int(h))
        vals = vals[~np.isnan(vals)]
        n = vals.size
        share = 100.0 * np.count_nonzero(vals > 0) / n if n else np.nan
        skew = kurt = None
        if n >= 3:
            skew, kurt = central_moments(vals)
        out.append(DistributionSummary(h, share, skew, kurt, n, float(vals.mean()) if n else np.nan))
    return out


def _pre_treatment_value(data: PanelDataset, schedule: TreatmentSchedule, i: int) -> float:
    series = data.levels if data.levels is not None else data.Y
    pre = series[i, : schedule.last_pre[i]]
    pre = pre[~np.isnan(pre)]
    if pre.size == 0:
        raise PanelError(f"no pre-treatment outcome for region {data.region_ids[i]}")
    return float(pre[-1])


def quintile_assign(values: Sequence[float], ids: Sequence[str], n_groups: int = 5) -> np.ndarray:
    """Group index (0 = lowest) per element by empirical quantiles.

    Ties are broken by id; an element sitting exactly on a boundary goes to
    the lower group.
    """
    n = len(values)
    order = sorted(range(n), key=lambda k: (values[k], ids[k]))
    groups = np.empty(n, dtype=int)
    for rank, k in enumerate(order, start=1):
        groups[k] = -(-n_groups * rank // n) - 1
    return groups


def quintile_att(
    effects: EffectsMatrix,
    data: PanelDataset,
    schedule: TreatmentSchedule,
    n_groups: int = 5,
) -> QuintileResult:
    """Event-study ATT within groups formed by the last pre-treatment level."""
    rows = effects.treated
    if len(rows) < n_groups:
        raise PanelError(f"need at least {n_groups} treated regions for quintile analysis")
    values = [_pre_treatment_value(data, schedule, i) for i in rows]
    groups = quintile_assign(values, [data.region_ids[i] for i in rows], n_groups)
    series, obs_paths, cf_paths = [], [], []
    for g in range(n_groups):
        members = rows[groups == g]
        sub = _restrict(effects, members)
        series.append(att_event_study(sub, schedule))
        obs_paths.append(_mean_path(data.Y, sub))
        cf_paths.append(_mean_path(sub.y0_hat, sub))
    return QuintileResult(groups, series, obs_paths, cf_paths)


def _restrict(effects: EffectsMatrix, members: np.ndarray) -> EffectsMatrix:
    from dataclasses import replace

    return replace(effects, treated=np.asarray(members))


def _mean_path(values: np.ndarray, effects: EffectsMatrix) -> EventStudySeries:
    rows = effects.treated
    rel = effects.event_time[rows]
    sup = effects.support[rows]
    v = values[rows]
    times, avg, n = [], [], []
    for e in range(0, int(rel.max()) + 1 if rows.size else 0):
        vals = v[(rel == e) & sup]
        if vals.size:
            times.append(e)
            avg.append(vals.mean())
            n.append(vals.size)
    return EventStudySeries(np.array(times, dtype=int), np.array(avg), np.array(n, dtype=int))


def gini(x: Sequence[float]) -> float:
    """Gini index ``sum_ij |x_i - x_j| / (2 n^2 mean)`` of positive values."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    if n == 0:
        return np.nan
    if np.any(x <= 0):
        raise PanelError("Gini coefficient needs strictly positive values")
    # sum over pairs |xi - xj| = 2 * sum_k (2k - n - 1) x_(k)
    k = np.arange(1, n + 1)
    # the weights sum to zero, so shifting by the minimum is exact for equal samples
    return float(np.sum((2 * k - n - 1) * (x - x[0])) / (n * n * x.mean()))


def gini_path(data: PanelDataset, effects: EffectsMatrix) -> GiniPath:
    """Yearly cross-regional Gini, observed and with counterfactual levels.

    The counterfactual series swaps in imputed levels for treated cells and
    keeps observed levels everywhere else.
    """
    if data.levels is None or effects.levels0_hat is None:
        raise PanelError("Gini path needs raw outcome levels")
    obs = data.levels
    valid = ~np.isnan(obs)
    if np.any(obs[valid] <= 0):
        raise PanelError("Gini path needs strictly positive levels")
    cf = np.where(effects.support, effects.levels0_hat, obs)
    g_obs, g_cf, n = [], [], []
    for t in range(data.n_years):
        col = valid[:, t]
        g_obs.append(gini(obs[col, t]) if col.any() else np.nan)
        g_cf.append(gini(cf[col, t]) if col.any() else np.nan)
        n.append(int(col.sum()))
    return GiniPath(np.array(data.years), np.array(g_obs), np.array(g_cf), np.array(n))


# ---------------------------------------------------------------------------
# intensity curves


def silverman_bandwidth(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def local_linear(x: np.ndarray, y: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian-kernel local-linear regression evaluated on ``grid``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    out = np.empty(len(grid))
    for g, x0 in enumerate(grid):
        d = x - x0
        w = np.exp(-0.5 * (d / bandwidth) ** 2)
        s0, s1, s2 = w.sum(), (w * d).sum(), (w * d * d).sum()
        t0, t1 = (w * y).sum(), (w * d * y).sum()
        det = s0 * s2 - s1 * s1
        # degenerate local design (single effective point): fall back to the local mean
        out[g] = (s2 * t0 - s1 * t1) / det if det > 1e-12 * s0 * s2 else t0 / s0
    return out


def region_intensity(data: PanelDataset, effects: EffectsMatrix, how: str = "mean") -> np.ndarray:
    """Per treated region, mean (or cumulative) intensity over treated years."""
    if data.intensity is None:
        raise PanelError("panel has no intensity column")
    if how not in ("mean", "cumulative"):
        raise ValueError(f"unknown intensity aggregation {how!r}")
    out = np.full(len(effects.treated), np.nan)
    for k, i in enumerate(effects.treated):
        on = data.D[i] == 1
        if on.any():
            vals = data.intensity[i, on]
            out[k] = vals.mean() if how == "mean" else vals.sum()
    return out


def intensity_curve(
    effects: EffectsMatrix,
    data: PanelDataset,
    horizons: Sequence[int] = (-1, 7, 14, 21),
    bandwidth: Optional[float] = None,
    aggregation: str = "mean",
    n_grid: int = 100,
) -> List[IntensityCurve]:
    """Smoothed effect at each horizon as a function of treatment intensity."""
    inten = region_intensity(data, effects, aggregation)
    curves = []
    for h in horizons:
        tau = effects.region_effects(int(h))
        ok = ~np.isnan(tau) & ~np.isnan(inten)
        if ok.sum() < 10:
            raise PanelError(f"horizon {h}: fewer than 10 regions with intensity and effect")
        x, y = inten[ok], tau[ok]
        bw = bandwidth if bandwidth is not None else silverman_bandwidth(x)
        grid = np.linspace(x.min(), x.max(), n_grid)
        fit = local_linear(x, y, grid, bw)
        k = int(np.argmax(fit))
        curves.append(IntensityCurve(int(h), grid, fit, float(grid[k]), float(fit[k]), float(bw), int(ok.sum())))
    return curves
