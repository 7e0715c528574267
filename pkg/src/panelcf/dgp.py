"""
Synthetic panels from a low-rank factor model with known ground truth.

    y_it = tau_it D_it + X_it'beta + baseline + lambda_i'f_t + eps_it

Factors follow independent AR(1) paths, loadings are Gaussian and treatment
is assigned either at random or to the units with the largest first
loading (confounded design).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .panel import PanelDataset, PanelError, build_observation_set, derive_schedule

__all__ = ["DgpConfig", "DgpTruth", "generate", "mask_additional"]


@dataclass(frozen=True)
class DgpConfig:
    """Generator settings.

    ``effect`` is ``"zero"``, ``"constant"`` (``tau = effect_size``) or
    ``"linear"`` (``tau = effect_size * (t - T_i)``, i.e. ``effect_size``
    in the first treated year). ``adoption`` is ``"simultaneous"`` (all
    treated units adopt at period index ``first_treat``) or ``"staggered"``
    (uniform over ``first_treat .. last_treat``).
    """

    N: int = 100
    T: int = 30
    K: int = 2
    p: int = 1
    ar_coef: float = 0.8
    factor_scale: float = 0.1
    loading_mean: float = 0.0
    loading_sd: float = 1.0
    beta: Tuple[float, ...] = (0.5,)
    baseline: float = 9.0
    noise_sd: float = 0.1
    effect: str = "constant"
    effect_size: float = 0.1
    assignment: str = "random"
    treated_share: float = 0.4
    adoption: str = "staggered"
    first_treat: int = 10
    last_treat: int = 14
    intensity_range: Tuple[float, float] = (0.001, 0.012)
    start_year: int = 1990
    seed: int = 0

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be nonnegative")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not 0 < self.treated_share < 1:
            raise ValueError("treated_share must lie in (0, 1)")
        if len(self.beta) != self.p:
            raise ValueError(f"beta has {len(self.beta)} entries, expected p={self.p}")
        if self.effect not in ("zero", "constant", "linear"):
            raise ValueError(f"unknown effect schedule {self.effect!r}")
        if self.assignment not in ("random", "loading"):
            raise ValueError(f"unknown assignment rule {self.assignment!r}")
        if self.adoption not in ("simultaneous", "staggered"):
            raise ValueError(f"unknown adoption pattern {self.adoption!r}")
        last = self.first_treat if self.adoption == "simultaneous" else self.last_treat
        if not 1 <= self.first_treat <= last < self.T:
            raise ValueError("adoption periods must leave at least one pre- and post-period")


@dataclass
class DgpTruth:
    """Ground truth behind a generated panel.

    ``L`` includes ``baseline``, so ``Y = L + X beta + noise + tau * D``
    holds exactly.
    """

    L: np.ndarray
    factors: np.ndarray
    loadings: np.ndarray
    tau: np.ndarray
    beta: np.ndarray
    noise: np.ndarray
    treated: np.ndarray
    adoption_index: np.ndarray
    config: DgpConfig = field(repr=False)

    def att_by_event_time(self, max_event: Optional[int] = None):
        """True mean effect over treated units at each event time >= 0."""
        N, T = self.tau.shape
        rel = np.arange(T)[None, :] - self.adoption_index[:, None]
        rows = self.treated
        out = {}
        for e in range(0, T):
            if max_event is not None and e > max_event:
                break
            sel = rel[rows] == e
            if sel.any():
                out[e] = float(self.tau[rows][sel].mean())
        return out

    def to_json(self, path) -> None:
        doc = {
            "config": asdict(self.config),
            "beta": self.beta.tolist(),
            "treated": self.treated.tolist(),
            "adoption_index": self.adoption_index.tolist(),
            "att_by_event_time": {str(k): v for k, v in self.att_by_event_time().items()},
            "L": self.L.tolist(),
            "tau": self.tau.tolist(),
        }
        Path(path).write_text(json.dumps(doc) + "\n")


def _ar1(rng, T, K, coef, scale):
    f = np.empty((T, K))
    sd0 = scale / np.sqrt(1 - coef ** 2) if abs(coef) < 1 else scale
    f[0] = rng.normal(0.0, sd0, K)
    for t in range(1, T):
        f[t] = coef * f[t - 1] + rng.normal(0.0, scale, K)
    return f


def generate(cfg: DgpConfig) -> Tuple[PanelDataset, DgpTruth]:
    """Draw one panel and its ground truth. Deterministic given ``cfg.seed``."""
    if cfg.K == 0 and cfg.assignment == "loading":
        raise ValueError("loading-ranked assignment needs at least one factor")
    rng = np.random.default_rng(cfg.seed)
    N, T, K, p = cfg.N, cfg.T, cfg.K, cfg.p

    F = _ar1(rng, T, K, cfg.ar_coef, cfg.factor_scale)
    Lam = rng.normal(cfg.loading_mean, cfg.loading_sd, (N, K))
    L = cfg.baseline + Lam @ F.T
    X = rng.normal(0.0, 1.0, (N, T, p))
    beta = np.asarray(cfg.beta, dtype=float)
    noise = rng.normal(0.0, 1.0, (N, T)) * cfg.noise_sd

    n_tr = int(round(cfg.treated_share * N))
    n_tr = min(max(n_tr, 1), N - 1)
    if cfg.assignment == "random":
        treated = np.sort(rng.choice(N, n_tr, replace=False))
    else:
        treated = np.sort(np.argsort(-Lam[:, 0], kind="stable")[:n_tr])
    if cfg.adoption == "simultaneous":
        starts = np.full(n_tr, cfg.first_treat)
    else:
        starts = rng.integers(cfg.first_treat, cfg.last_treat + 1, n_tr)
    adoption = np.full(N, T)
    adoption[treated] = starts

    rel = np.arange(T)[None, :] - adoption[:, None]
    D = (rel >= 0).astype(float)
    if cfg.effect == "zero":
        tau = np.zeros((N, T))
    elif cfg.effect == "constant":
        tau = np.full((N, T), cfg.effect_size)
    else:
        tau = cfg.effect_size * (rel + 1.0)
    tau = np.where(D == 1, tau, 0.0)

    Y = L + (X @ beta if p else 0.0) + noise + tau * D

    lo, hi = cfg.intensity_range
    base_int = rng.uniform(lo, hi, N)
    wiggle = 1.0 + 0.1 * rng.normal(size=(N, T))
    intensity = np.where(D == 1, np.maximum(base_int[:, None] * wiggle, 0.0), 0.0)

    data = PanelDataset(
        region_ids=[f"R{i:03d}" for i in range(N)],
        years=list(range(cfg.start_year, cfg.start_year + T)),
        Y=Y,
        D=D,
        X=X,
        intensity=intensity,
        levels=np.exp(Y),
        transform="log",
        covariate_names=[f"x{k}" for k in range(p)],
    )
    truth = DgpTruth(
        L=L,
        factors=F,
        loadings=Lam,
        tau=tau,
        beta=beta,
        noise=noise,
        treated=treated,
        adoption_index=adoption,
        config=cfg,
    )
    return data, truth


def mask_additional(data: PanelDataset, fraction: float, seed: int, max_draws: int = 10):
    """Hide a random share of the estimation cells.

    Returns the masked panel and the boolean mask of hidden cells. Exactly
    ``round(fraction * |O|)`` cells are hidden; draws leaving a treated
    region without pre-treatment data are rejected.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    schedule = derive_schedule(data, allow_reversal=True)
    obs = build_observation_set(data, schedule)
    cells = np.argwhere(obs.mask)
    n_hide = int(round(fraction * len(cells)))
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        pick = cells[rng.choice(len(cells), n_hide, replace=False)] if n_hide else cells[:0]
        hidden = np.zeros(data.Y.shape, dtype=bool)
        hidden[pick[:, 0], pick[:, 1]] = True
        remaining = obs.mask & ~hidden
        if np.all(remaining[schedule.treated].any(axis=1)):
            Y = data.Y.copy()
            Y[hidden] = np.nan
            return replace(data, Y=Y), hidden
    raise PanelError(f"no valid mask after {max_draws} draws; fraction {fraction} too large")
