"""
Panel data model: region-year CSV ingestion, treatment schedules and the
observation set used for estimation.

Input CSV layout
----------------
One row per region-year with a header row::

    region,year,outcome[,cov_*...,treated,intensity,level]

Empty fields are missing values. Region-years that do not appear in the
file are treated as missing-at-source.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

__all__ = [
    "PanelError",
    "SchemaError",
    "PanelDataset",
    "TreatmentSchedule",
    "ObservationSet",
    "load_panel",
    "write_panel",
    "panel_from_frame",
    "derive_schedule",
    "build_observation_set",
    "transform_outcome",
    "validation_report",
]

LOG_TRANSFORMS = ("log", "log-per-capita", "log-ratio")

DEFAULT_SCHEMA = {
    "region": "region",
    "year": "year",
    "outcome": "outcome",
    "treated": "treated",
    "intensity": "intensity",
    "level": "level",
    "covariate_prefix": "cov_",
}


class PanelError(ValueError):
    """Raised for malformed or inconsistent panel data."""


class SchemaError(PanelError):
    """The file layout does not match the expected columns."""


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Rectangular region x year panel.

    Attributes
    ----------
    region_ids : list of str
        Region identifiers, length N.
    years : list of int
        Consecutive calendar years, length T.
    Y : ndarray (N, T)
        Outcomes. ``NaN`` marks missing-at-source cells.
    D : ndarray (N, T)
        Binary treatment indicator.
    X : ndarray (N, T, p)
        Covariates, ``p`` may be 0.
    intensity : ndarray (N, T), optional
        Transfer amount as a share of the outcome level.
    levels : ndarray (N, T), optional
        Raw outcome levels (e.g. euro per capita).
    transform : str
        How ``Y`` relates to ``levels``: ``"identity"`` or one of the log
        transforms.
    covariate_names : list of str
    """

    region_ids: List[str]
    years: List[int]
    Y: np.ndarray
    D: np.ndarray
    X: np.ndarray
    intensity: Optional[np.ndarray] = None
    levels: Optional[np.ndarray] = None
    transform: str = "identity"
    covariate_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        N, T = len(self.region_ids), len(self.years)
        if N < 2 or T < 2:
            raise PanelError(f"panel must have at least 2 regions and 2 years, got N={N}, T={T}")
        if len(set(self.region_ids)) != N:
            raise PanelError("region identifiers must be unique")
        if any(b - a != 1 for a, b in zip(self.years, self.years[1:])):
            raise PanelError("years must be consecutive and strictly increasing")
        for name in ("Y", "D"):
            if getattr(self, name).shape != (N, T):
                raise PanelError(f"{name} has shape {getattr(self, name).shape}, expected {(N, T)}")
        if self.X.ndim != 3 or self.X.shape[:2] != (N, T):
            raise PanelError(f"X has shape {self.X.shape}, expected ({N}, {T}, p)")
        if len(self.covariate_names) != self.X.shape[2]:
            raise PanelError("covariate_names must match the covariate dimension of X")
        if not np.all((self.D == 0) | (self.D == 1)):
            raise PanelError("treatment indicator must be binary")
        for name in ("intensity", "levels"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (N, T):
                raise PanelError(f"{name} has shape {arr.shape}, expected {(N, T)}")
        if self.intensity is not None:
            it = self.intensity
            if np.any(it[~np.isnan(it)] < 0):
                raise PanelError("intensity must be nonnegative")
            bad = (self.D == 0) & ~np.isnan(it) & (it != 0)
            if bad.any():
                i, t = np.argwhere(bad)[0]
                raise PanelError(
                    f"intensity must be 0 where untreated: region {self.region_ids[i]}, "
                    f"year {self.years[t]}"
                )
        if self.transform not in ("identity",) + LOG_TRANSFORMS:
            raise PanelError(f"unknown outcome transform {self.transform!r}")

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    @property
    def n_years(self) -> int:
        return len(self.years)

    @property
    def n_covariates(self) -> int:
        return self.X.shape[2]

    @property
    def observed(self) -> np.ndarray:
        """Boolean mask of cells with an outcome present at source."""
        return ~np.isnan(self.Y)

    @property
    def is_log(self) -> bool:
        return self.transform in LOG_TRANSFORMS

    def take_regions(self, index: Sequence[int]) -> "PanelDataset":
        """Return the panel restricted (and reordered) to ``index``."""
        index = np.asarray(index)
        sub = lambda a: None if a is None else a[index]  # noqa: E731
        return replace(
            self,
            region_ids=[self.region_ids[i] for i in index],
            Y=self.Y[index],
            D=self.D[index],
            X=self.X[index],
            intensity=sub(self.intensity),
            levels=sub(self.levels),
        )


@dataclass(frozen=True, eq=False)
class TreatmentSchedule:
    """Adoption timing.

    ``last_pre[i]`` is the number of periods before region ``i`` is first
    treated (``T`` for controls). With 0-based period indices, period
    ``last_pre[i]`` is the first treated one, so event time is
    ``t - last_pre[i]``.
    """

    last_pre: np.ndarray
    treated: np.ndarray
    n_periods: int
    reversals: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    @property
    def n_treated(self) -> int:
        return len(self.treated)

    @property
    def n_control(self) -> int:
        return len(self.last_pre) - len(self.treated)

    @property
    def is_treated(self) -> np.ndarray:
        mask = np.zeros(len(self.last_pre), dtype=bool)
        mask[self.treated] = True
        return mask

    def post_mask(self) -> np.ndarray:
        """N x T mask of cells after each region's last pre-treatment period."""
        t = np.arange(self.n_periods)
        return t[None, :] >= self.last_pre[:, None]

    def event_time(self) -> np.ndarray:
        """N x T integer matrix of years relative to first treatment.

        Entries for control regions are meaningless and should be masked by
        the caller.
        """
        t = np.arange(self.n_periods)
        return t[None, :] - self.last_pre[:, None]


@dataclass(frozen=True, eq=False)
class ObservationSet:
    """Cells used as observed entries when fitting the completion model."""

    mask: np.ndarray
    impute_mask: np.ndarray
    missing_mask: np.ndarray

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @property
    def n_impute(self) -> int:
        return int(self.impute_mask.sum())

    @property
    def frac_missing(self) -> float:
        return 1.0 - self.n_obs / self.mask.size

    def cells(self) -> np.ndarray:
        """(n_obs, 2) array of (i, t) index pairs in row-major order."""
        return np.argwhere(self.mask)

    def summary(self) -> Dict[str, float]:
        return {
            "n_obs": self.n_obs,
            "n_impute": self.n_impute,
            "n_missing": int(self.missing_mask.sum()),
            "frac_missing": self.frac_missing,
        }


# ---------------------------------------------------------------------------
# ingestion


def _parse_float(text: str, what: str, region: str, year: int) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise PanelError(
            f"non-numeric {what} value {text!r} for region {region}, year {year}"
        ) from None


def load_panel(
    path,
    schema: Optional[Mapping[str, str]] = None,
    *,
    outcome_scale: str = "identity",
) -> PanelDataset:
    """Read a region-year CSV into a rectangular :class:`PanelDataset`.

    Parameters
    ----------
    path : path-like
        UTF-8 CSV with a header row.
    schema : mapping, optional
        Overrides for column names (keys as in ``DEFAULT_SCHEMA``).
    outcome_scale : str
        Transform label attached to the outcome column. Use ``"log"`` when
        the outcome column is already in logs and ``level`` holds the raw
        values.
    """
    cols = dict(DEFAULT_SCHEMA)
    if schema:
        cols.update(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames
        if not header:
            raise PanelError(f"{path}: no rows")
        header = [h.strip() for h in header]
        reader.fieldnames = header
        rows = list(reader)
    if not rows:
        raise PanelError(f"{path}: no rows")
    for key in ("region", "year", "outcome"):
        if cols[key] not in header:
            raise SchemaError(f"{path}: missing required column {cols[key]!r}")
    cov_cols = sorted(h for h in header if h.startswith(cols["covariate_prefix"]))

    records = {}
    for lineno, row in enumerate(rows, start=2):
        region = row[cols["region"]].strip()
        year_text = row[cols["year"]].strip()
        if region == "":
            raise PanelError(f"{path}:{lineno}: empty region identifier")
        try:
            year = int(year_text)
        except ValueError:
            raise PanelError(f"{path}:{lineno}: invalid year {year_text!r}") from None
        if (region, year) in records:
            raise PanelError(f"duplicate row for region {region}, year {year}")
        records[(region, year)] = row

    regions = sorted({r for r, _ in records})
    present_years = sorted({y for _, y in records})
    years = list(range(present_years[0], present_years[-1] + 1))
    gaps = sorted(set(years) - set(present_years))
    if gaps:
        raise PanelError(f"years with no rows inside the sample span: {gaps}")

    N, T, p = len(regions), len(years), len(cov_cols)
    r_index = {r: i for i, r in enumerate(regions)}
    Y = np.full((N, T), np.nan)
    X = np.full((N, T, p), np.nan)
    D = np.full((N, T), np.nan)
    has_treated = cols["treated"] in header
    has_intensity = cols["intensity"] in header
    has_level = cols["level"] in header
    intensity = np.full((N, T), np.nan) if has_intensity else None
    levels = np.full((N, T), np.nan) if has_level else None

    for (region, year), row in records.items():
        i, t = r_index[region], year - years[0]
        Y[i, t] = _parse_float(row[cols["outcome"]], "outcome", region, year)
        for k, c in enumerate(cov_cols):
            X[i, t, k] = _parse_float(row[c], c, region, year)
        if has_treated:
            d = _parse_float(row[cols["treated"]], "treated", region, year)
            if not (math.isnan(d) or d in (0.0, 1.0)):
                raise PanelError(f"treated must be 0 or 1 (region {region}, year {year})")
            D[i, t] = d
        if has_intensity:
            intensity[i, t] = _parse_float(row[cols["intensity"]], "intensity", region, year)
        if has_level:
            levels[i, t] = _parse_float(row[cols["level"]], "level", region, year)

    if not has_treated:
        D = np.where(np.nan_to_num(intensity) > 0, 1.0, 0.0) if has_intensity else np.zeros((N, T))
    else:
        D = _fill_treatment(D)
    if intensity is not None:
        # absent rows carry no transfer
        intensity = np.where(np.isnan(intensity), 0.0, intensity)

    return PanelDataset(
        region_ids=regions,
        years=years,
        Y=Y,
        D=D,
        X=X,
        intensity=intensity,
        levels=levels,
        transform=outcome_scale,
        covariate_names=[c[len(cols["covariate_prefix"]):] for c in cov_cols],
    )


def _fill_treatment(D: np.ndarray) -> np.ndarray:
    # absent rows inherit the last known status; leading gaps are untreated
    out = D.copy()
    for row in out:
        last = 0.0
        for t in range(len(row)):
            if np.isnan(row[t]):
                row[t] = last
            else:
                last = row[t]
    return out


def panel_from_frame(df, schema: Optional[Mapping[str, str]] = None, **kwargs) -> PanelDataset:
    """Build a panel from a long-format :class:`pandas.DataFrame`."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "panel.csv"
        df.to_csv(path, index=False)
        return load_panel(path, schema, **kwargs)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_panel(data: PanelDataset, path) -> None:
    """Write ``data`` in the CSV layout read by :func:`load_panel`.

    Missing-at-source cells are written as rows with an empty outcome, so a
    reload reproduces the dataset exactly.
    """
    header = ["region", "year", "outcome"]
    header += [f"cov_{c}" for c in data.covariate_names]
    header.append("treated")
    if data.intensity is not None:
        header.append("intensity")
    if data.levels is not None:
        header.append("level")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, region in enumerate(data.region_ids):
            for t, year in enumerate(data.years):
                row = [region, year, _fmt(data.Y[i, t])]
                row += [_fmt(v) for v in data.X[i, t]]
                row.append(int(data.D[i, t]))
                if data.intensity is not None:
                    row.append(_fmt(data.intensity[i, t]))
                if data.levels is not None:
                    row.append(_fmt(data.levels[i, t]))
                w.writerow(row)


# ---------------------------------------------------------------------------
# schedule and observation set


def derive_schedule(data: PanelDataset, allow_reversal: bool = False) -> TreatmentSchedule:
    """Compute each region's last pre-treatment period.

    Treatment must be absorbing. With ``allow_reversal=True`` a region that
    drops out of treatment keeps its first adoption date and every later
    period is an imputation target.
    """
    D = data.D
    N, T = D.shape
    last_pre = np.full(N, T, dtype=int)
    reversals = []
    for i in range(N):
        on = np.flatnonzero(D[i] == 1)
        if on.size == 0:
            continue
        first = on[0]
        last_pre[i] = first
        if np.any(D[i, first:] == 0):
            if not allow_reversal:
                t = first + int(np.flatnonzero(D[i, first:] == 0)[0])
                raise PanelError(
                    f"non-absorbing treatment for region {data.region_ids[i]}: "
                    f"treated then untreated in {data.years[t]}"
                )
            reversals.append(i)
    treated = np.flatnonzero(last_pre < T)
    return TreatmentSchedule(
        last_pre=last_pre,
        treated=treated,
        n_periods=T,
        reversals=np.asarray(reversals, dtype=int),
    )


def build_observation_set(data: PanelDataset, schedule: TreatmentSchedule) -> ObservationSet:
    """Partition cells into observed, to-impute and missing-at-source."""
    observed = data.observed
    post = schedule.post_mask()
    mask = observed & ~post
    impute = observed & post
    missing = ~observed
    if schedule.n_treated:
        n_pre = mask[schedule.treated].sum(axis=1)
        empty = schedule.treated[n_pre == 0]
        if empty.size:
            names = ", ".join(data.region_ids[i] for i in empty)
            raise PanelError(f"treated regions with no observed pre-treatment period: {names}")
    return ObservationSet(mask=mask, impute_mask=impute, missing_mask=missing)


# ---------------------------------------------------------------------------
# outcome transforms


def transform_outcome(
    data: PanelDataset,
    kind: str,
    denominator: Optional[np.ndarray] = None,
) -> PanelDataset:
    """Replace ``Y`` by a transformed series, keeping the raw levels.

    ``kind`` is one of ``"identity"``, ``"log-per-capita"`` (log of level,
    divided by ``denominator`` e.g. population when given) or
    ``"log-ratio"`` (log of level over ``denominator``, which is required).
    Levels come from ``data.levels`` when present, otherwise from ``Y``.
    The stored ``levels`` are the quantity whose log becomes ``Y``.
    """
    base = data.levels if data.levels is not None else data.Y
    if kind == "identity":
        return replace(data, Y=base.copy(), levels=base.copy(), transform="identity")
    if kind not in ("log-per-capita", "log-ratio"):
        raise PanelError(f"unknown transform {kind!r}")
    if kind == "log-ratio" and denominator is None:
        raise PanelError("log-ratio transform needs a denominator")
    value = base if denominator is None else base / denominator
    bad = ~np.isnan(value) & (value <= 0)
    if bad.any():
        i, t = np.argwhere(bad)[0]
        raise PanelError(
            f"non-positive level {value[i, t]!r} at region {data.region_ids[i]}, "
            f"year {data.years[t]} under {kind} transform"
        )
    with np.errstate(invalid="ignore"):
        Y = np.log(value)
    return replace(data, Y=Y, levels=value.copy(), transform=kind)


def validation_report(data: PanelDataset, allow_reversal: bool = False) -> Dict:
    """Summary used by ``panelcf validate``.

    Structural problems are reported as issues instead of raised.
    """
    issues = []
    n_obs = None
    n_treated = int((data.D.sum(axis=1) > 0).sum())
    try:
        schedule = derive_schedule(data, allow_reversal=allow_reversal)
        obs = build_observation_set(data, schedule)
        n_obs = obs.n_obs
        if schedule.reversals.size:
            issues.append(
                f"{schedule.reversals.size} regions with treatment reversals "
                "(post-adoption periods excluded from estimation)"
            )
        if data.n_covariates:
            miss = np.isnan(data.X[obs.mask]).any(axis=1).sum()
            if miss:
                issues.append(f"{int(miss)} observed cells with missing covariates")
    except PanelError as exc:
        issues.append(str(exc))
    n_missing = int((~data.observed).sum())
    if n_missing:
        issues.append(f"{n_missing} region-years missing at source")
    empty = [r for r, row in zip(data.region_ids, data.observed) if not row.any()]
    if empty:
        issues.append(f"regions with no observed outcome: {', '.join(empty)}")
    return {
        "n_regions": data.n_regions,
        "n_years": data.n_years,
        "n_treated": n_treated,
        "n_obs": n_obs,
        "issues": issues,
    }
