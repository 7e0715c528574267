"""Acceptance criteria 1-11.

Each test prints one ``[n] PASS|FAIL ...`` line (collected in the pytest
terminal summary) and then asserts the criterion at its stated tolerance.
The Monte Carlo criteria take several minutes on one core.
"""

import itertools
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from panelcf.cli import main as cli_main
from panelcf.dgp import DgpConfig, generate
from panelcf.effects import att_event_study, central_moments, gini, impute_effects
from panelcf.inference import BootstrapConfig, bootstrap_att
from panelcf.panel import PanelError, build_observation_set, derive_schedule
from panelcf.solver import (
    SolverConfig,
    cross_validate,
    fit_mcnnm,
    lambda_max,
    nuclear_norm,
    objective,
    shrink,
)
from panelcf.twfe import fit_twfe, twfe_event_study

import conftest
from conftest import make_panel


def record(n, ok, text):
    line = f"[{n:>2}] {'PASS' if ok else 'FAIL'} {text}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def cv_fit(data, seed=0):
    s = derive_schedule(data)
    O = build_observation_set(data, s)
    lam = cross_validate(data, O, cfg=SolverConfig(seed=seed)).lambda_star
    return s, O, fit_mcnnm(data, O, SolverConfig(lam=lam))


# ---------------------------------------------------------------------------


def test_01_proximal_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = -np.inf
    for _ in range(50):
        A = rng.normal(size=(4, 4)) * rng.uniform(0.1, 3.0)
        tau = rng.uniform(0.0, 2.0)
        Z = shrink(A, tau)

        def obj(C):
            sv = np.linalg.svd(C, compute_uv=False)
            return 0.5 * np.sum((C - A) ** 2, axis=(-2, -1)) + tau * sv.sum(axis=-1)

        scale = np.linalg.norm(A)
        cloud = [
            A + rng.normal(size=(4000, 4, 4)) * scale / 2,
            rng.normal(size=(3000, 4, 4)) * scale,
            Z + rng.normal(size=(3000, 4, 4)) * 1e-2 * scale,
        ]
        local = [Z + rng.normal(size=(200, 4, 4)) * eps for eps in (1e-4, 1e-6, 1e-8)]
        cands = np.concatenate(cloud + local + [np.zeros((1, 4, 4)), A[None]])
        gap = obj(Z[None])[0] - obj(cands).min()
        worst = max(worst, gap)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 5
    record(1, ok, f"proximal oracle: max excess over candidates {worst:.2e} (<=1e-9), {elapsed:.1f}s (<5s)")
    assert ok


def test_02_exact_fit_sanity():
    t0 = time.perf_counter()
    gen, _ = generate(DgpConfig(N=60, T=20, first_treat=8, last_treat=10, seed=5))
    data = make_panel(gen.Y, X=gen.X)  # nobody treated: every cell observed
    O = build_observation_set(data, derive_schedule(data))
    assert O.mask.all()
    fit = fit_mcnnm(data, O, SolverConfig(lam=0.0))
    resid = np.linalg.norm(data.Y - fit.fitted(data.X))
    top = lambda_max(data, O)
    fit_max = fit_mcnnm(data, O, SolverConfig(lam=top))
    fit_big = fit_mcnnm(data, O, SolverConfig(lam=10 * top))
    zero = not fit_max.L.any() and not fit_big.L.any()
    elapsed = time.perf_counter() - t0
    ok = resid < 1e-8 and zero and elapsed < 1
    record(2, ok, f"exact fit: residual {resid:.1e} (<1e-8), L=0 at lambda_max: {zero}, {elapsed:.2f}s (<1s)")
    assert ok


def test_03_monotone_objective():
    worst = -np.inf
    for seed in range(20):
        data, _ = generate(DgpConfig(N=100, T=30, seed=seed))
        s = derive_schedule(data)
        O = build_observation_set(data, s)
        top = lambda_max(data, O)
        for frac in (0.3, 0.03, 0.003):
            for method in ("accelerated", "block"):
                fit = fit_mcnnm(data, O, SolverConfig(lam=frac * top, method=method))
                tr = np.asarray(fit.objective_trace)
                rel = np.max((tr[1:] - tr[:-1]) / np.abs(tr[:-1])) if tr.size > 1 else -np.inf
                worst = max(worst, rel)
    ok = worst <= 1e-10
    record(3, ok, f"monotone objective: max relative increase {worst:.1e} (<=1e-10) over 20 draws x 3 lambdas x 2 solvers")
    assert ok


def test_04_dgp_recovery():
    t0 = time.perf_counter()
    errs = []
    for seed in range(20):
        data, _ = generate(DgpConfig(N=200, T=30, K=2, noise_sd=0.1, effect="constant", effect_size=0.1,
                                     treated_share=0.4, first_treat=15, last_treat=19, seed=seed))
        s, O, fit = cv_fit(data, seed)
        es = att_event_study(impute_effects(data, fit, s), s)
        errs.append(np.mean([es.get(h) for h in range(1, 11)]) - 0.10)
    elapsed = time.perf_counter() - t0
    mae = float(np.mean(np.abs(errs)))
    ok = mae < 0.02 and elapsed < 300
    record(4, ok, f"DGP recovery: mean |ATT(1-10) - 0.10| = {mae:.4f} (<0.02), bias of average {np.mean(errs):+.4f}, "
                  f"{elapsed:.0f}s (<300s)")
    assert ok


CONFOUNDING_DGP = dict(N=200, T=40, K=2, ar_coef=0.0, factor_scale=0.3, first_treat=20, last_treat=24)


def test_05_confounding_comparison():
    horizons = range(1, 11)
    wins = 0
    for seed in range(20):
        data, truth = generate(DgpConfig(assignment="loading", seed=seed, **CONFOUNDING_DGP))
        s, O, fit = cv_fit(data, seed)
        mc = att_event_study(impute_effects(data, fit, s), s)
        tw = twfe_event_study(data, s, 5, 10)
        att = truth.att_by_event_time()
        bias_mc = np.mean([abs(mc.get(h) - att[h]) for h in horizons])
        bias_tw = np.mean([abs(tw.get(h) - att[h]) for h in horizons])
        wins += bias_tw > bias_mc
    gaps = []
    for seed in range(20):
        data, _ = generate(DgpConfig(assignment="random", seed=100 + seed, **CONFOUNDING_DGP))
        s, O, fit = cv_fit(data, seed)
        mc = att_event_study(impute_effects(data, fit, s), s)
        tw = twfe_event_study(data, s, 5, 10)
        gaps.append([mc.get(h) - tw.get(h) for h in horizons])
    gap = float(np.abs(np.mean(gaps, axis=0)).max())
    ok = wins >= 18 and gap < 0.02
    record(5, ok, f"confounding: MC-NNM less biased than TWFE in {wins}/20 loading-ranked draws (>=18); "
                  f"random assignment mean-trajectory gap {gap:.4f} (<0.02)")
    assert ok


def _dense_design(D, X, observed):
    N, T = D.shape
    rows, cols = np.nonzero(observed)
    n = rows.size
    U = np.zeros((n, N))
    U[np.arange(n), rows] = 1
    V = np.zeros((n, T))
    V[np.arange(n), cols] = 1
    return np.column_stack([D[rows, cols], X[rows, cols], U, V[:, 1:][:, observed[:, 1:].any(axis=0)]])


def _dense_ols_tau(Y, D, X, observed):
    A = _dense_design(D, X, observed)
    return np.linalg.lstsq(A, Y[observed], rcond=None)[0][0]


def test_06_twfe_oracle():
    rng = np.random.default_rng(6)
    worst, n_inst, n_unidentified, wrong_skip = 0.0, 0, 0, 0
    for N, T in itertools.product(range(2, 21), range(2, 21)):
        if N * T > 400:
            continue
        for rep in range(2):
            D = np.zeros((N, T))
            starts = rng.integers(1, T + 1, N)  # T means never treated
            for i, s0 in enumerate(starts):
                D[i, s0:] = 1
            X = rng.normal(size=(N, T, 1))
            Y = rng.normal(size=(N, T)) + 0.3 * D + X[..., 0]
            observed = rng.random((N, T)) > 0.1 * rep
            Y[~observed] = np.nan
            d_obs = D[observed]
            if d_obs.min() == d_obs.max() or np.isnan(Y).all(axis=1).any():
                continue
            data = make_panel(Y, D=D, X=X)
            try:
                fit = fit_twfe(data)
            except PanelError:
                # only allowed when the dummy-variable design is rank deficient
                A = _dense_design(D, X[..., 0], observed)
                n_unidentified += 1
                wrong_skip += np.linalg.matrix_rank(A) == A.shape[1]
                continue
            ref = _dense_ols_tau(np.nan_to_num(Y), D, X[..., 0], observed)
            worst = max(worst, abs(fit.tau_hat - ref))
            n_inst += 1
    ok = worst <= 1e-8 and n_inst > 100 and wrong_skip == 0
    record(6, ok, f"TWFE oracle: max |tau - dense OLS| {worst:.1e} (<=1e-8) on {n_inst} instances with N*T<=400; "
                  f"{n_unidentified} rank-deficient instances rejected, {wrong_skip} wrongly")
    assert ok


def test_07_bootstrap():
    t0 = time.perf_counter()
    data, _ = generate(DgpConfig(N=60, T=20, K=0, noise_sd=0.0, first_treat=10, last_treat=12, seed=1))
    s = derive_schedule(data)
    O = build_observation_set(data, s)
    fit = fit_mcnnm(data, O, SolverConfig(lam=0.0))
    width = float(np.max(np.ptp(np.vstack([bootstrap_att(data, O, fit, BootstrapConfig(B=50), s).lower,
                                           bootstrap_att(data, O, fit, BootstrapConfig(B=50), s).upper]), axis=0)))
    # informational: the default two-factor generator without noise still has completion error
    d2, _ = generate(DgpConfig(N=60, T=20, noise_sd=0.0, first_treat=10, last_treat=12, seed=1))
    s2 = derive_schedule(d2)
    O2 = build_observation_set(d2, s2)
    b2 = bootstrap_att(d2, O2, fit_mcnnm(d2, O2, SolverConfig(lam=0.0)), BootstrapConfig(B=50), s2)
    width2 = float(np.max(b2.upper - b2.lower))

    hits = []
    for seed in range(100):
        data, truth = generate(DgpConfig(N=60, T=20, seed=seed, first_treat=10, last_treat=12))
        s, O, fit = cv_fit(data, seed)
        bands = bootstrap_att(data, O, fit, BootstrapConfig(B=200, seed=seed), s)
        att = truth.att_by_event_time()
        sel = [int(np.flatnonzero(bands.event_time == e)[0]) for e in range(1, 6)]
        target = np.array([att[e] for e in range(1, 6)])
        hits.append((bands.lower[sel] <= target) & (target <= bands.upper[sel]))
    cov = np.mean(hits, axis=0)
    elapsed = time.perf_counter() - t0
    ok = width < 1e-6 and cov.min() >= 0.85 and elapsed < 900
    record(7, ok, f"bootstrap: zero-noise width {width:.1e} (<1e-6, exact-model DGP; two-factor DGP {width2:.2g} by design); "
                  f"coverage at 1-5 {np.round(cov, 2).tolist()} mean {cov.mean():.3f} (>=0.85), {elapsed:.0f}s (<900s)")
    assert ok


def test_08_gini_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        x = rng.lognormal(sigma=rng.uniform(0.1, 2), size=rng.integers(1, 51))
        n = x.size
        pair = sum(abs(a - b) for a, b in itertools.product(x, x)) / (2 * n * n * x.mean())
        worst = max(worst, abs(gini(x) - pair), abs(gini(x * 123.4) - gini(x)))
    equal = gini(np.full(17, 3.3))
    ok = worst <= 1e-12 and equal == 0.0 and gini([1, 2, 3, 4]) == pytest.approx(0.25, abs=1e-15)
    record(8, ok, f"Gini: max deviation from pairwise oracle / under scaling {worst:.1e} (<=1e-12), equal sample {equal}")
    assert ok


def test_09_moment_oracle():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        x = rng.standard_gamma(rng.uniform(0.5, 5), size=rng.integers(3, 600))
        n = len(x)
        m = sum(x) / n
        m2 = sum((v - m) ** 2 for v in x) / n
        m3 = sum((v - m) ** 3 for v in x) / n
        m4 = sum((v - m) ** 4 for v in x) / n
        sk, ku = central_moments(x)
        worst = max(worst, abs(sk - m3 / m2 ** 1.5), abs(ku - m4 / m2 ** 2))
    sk2, ku2 = central_moments(np.tile([-1.0, 1.0], 25))
    ok = worst <= 1e-12 and abs(sk2) <= 1e-12 and abs(ku2 - 1) <= 1e-12
    record(9, ok, f"moments: max deviation {worst:.1e} (<=1e-12), two-point (skew, kurt) = ({sk2:.1g}, {ku2:.12g})")
    assert ok


def test_10_cli_determinism(tmp_path):
    sim = tmp_path / "sim"
    assert cli_main(["simulate", "--N", "40", "--T", "14", "--first-treat", "6", "--last-treat", "8",
                     "--seed", "10", "--out-dir", str(sim)]) == 0
    panel = str(sim / "panel.csv")
    snaps = []
    for k, threads in enumerate(("1", "1", "4")):
        est, boot = tmp_path / f"est{k}", tmp_path / f"boot{k}"
        assert cli_main(["estimate", panel, "--auto-cv", "--n-lambdas", "8", "--seed", "3",
                         "--threads", threads, "--out-dir", str(est)]) == 0
        assert cli_main(["bootstrap", panel, "--fit", str(est / "fit.json"), "--B", "40", "--seed", "3",
                         "--threads", threads, "--out-dir", str(boot)]) == 0
        snaps.append({f"{d.name[:-1]}/{p.name}": p.read_bytes()
                      for d in (est, boot) for p in sorted(d.iterdir())})
    ok = snaps[0] == snaps[1] == snaps[2]
    record(10, ok, f"CLI determinism: {len(snaps[0])} files byte-identical across 2 runs and --threads 1/4: {ok}")
    assert ok


def test_11_replication():
    path = os.environ.get("PANELCF_EU_PANEL")
    if not path or not os.path.isfile(path):
        conftest.ACCEPTANCE_LINES.append("[11] SKIP replication: set PANELCF_EU_PANEL to a region-year CSV")
        pytest.skip("no EU panel supplied (non-blocking criterion)")
    from panelcf.effects import distribution_summary, gini_path, intensity_curve
    from panelcf.panel import load_panel

    data = load_panel(path, outcome_scale="log")
    s, O, fit = cv_fit(data)
    eff = impute_effects(data, fit, s)
    es = att_event_study(eff, s)
    share7 = distribution_summary(eff, (7,))[0].share_positive
    g = gini_path(data, eff).gini_observed
    curves = intensity_curve(eff, data, horizons=(7, 14, 21))
    argmax = [100 * c.argmax for c in curves]
    checks = [
        abs(es.get(7) - 0.17) <= 0.05,
        abs(es.get(21) - 0.30) <= 0.05,
        abs(share7 - 75.32) <= 2,
        g[0] > g[-1] and g[-1] < 0.28,
        all(abs(a - b) <= 0.1 for a, b in zip(argmax, (0.6, 0.7, 0.86))),
    ]
    # non-blocking: reported, never failed
    record(11, all(checks), f"replication: ATT7 {es.get(7):.3f}, ATT21 {es.get(21):.3f}, share7 {share7:.2f}, "
                            f"Gini {g[0]:.3f}->{g[-1]:.3f}, argmax % {np.round(argmax, 2).tolist()}")
