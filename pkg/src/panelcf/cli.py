"""
``panelcf`` command line front end.

Every subcommand writes its outputs plus a ``manifest.json`` under
``--out-dir``. Failures print a JSON error object on stderr. Usage errors
(bad flags, missing files, missing columns) exit with status 2, data
errors with status 1.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .dgp import DgpConfig, generate
from .effects import (
    att_event_study,
    distribution_summary,
    euro_effect,
    gini_path,
    impute_effects,
    intensity_curve,
    quintile_att,
)
from .inference import BootstrapConfig, BootstrapError, bootstrap_att
from .panel import (
    PanelError,
    SchemaError,
    build_observation_set,
    derive_schedule,
    load_panel,
    transform_outcome,
    validation_report,
    write_panel,
)
from .solver import FactorFit, SolverConfig, cross_validate, default_lambda_grid, fit_mcnnm
from .twfe import twfe_event_study

logger = logging.getLogger("panelcf")

# flags that change how fast a run goes but never what it writes
_NON_SEMANTIC = {"threads", "out_dir", "command", "func", "verbose"}
# input files enter the manifest through their content hash, not their location
_PATH_ARGS = {"input", "fit", "truth"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# output helpers


def _num(x):
    if x is None:
        return None
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    x = float(x)
    return None if math.isnan(x) else x


def _cell(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else repr(float(x))
    return str(x)


class Outputs:
    """Collects written files for the manifest."""

    def __init__(self, out_dir: Path, fmt: str):
        self.dir = out_dir
        self.fmt = fmt
        self.files: List[Path] = []
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.dir / name
        self.files.append(p)
        return p

    def table(self, stem: str, header: Sequence[str], rows: Sequence[Sequence]) -> Path:
        if self.fmt == "json":
            p = self.path(stem + ".json")
            recs = [{h: _num(v) if not isinstance(v, str) else v for h, v in zip(header, r)} for r in rows]
            p.write_text(json.dumps(recs, indent=2) + "\n")
            return p
        p = self.path(stem + ".csv")
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(v) for v in r])
        return p

    def json(self, name: str, doc) -> Path:
        p = self.path(name)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, out: Outputs, inputs: Sequence[Path]) -> None:
    skip = _NON_SEMANTIC | _PATH_ARGS
    config = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    ins = {Path(p).name: _sha256(Path(p)) for p in inputs}
    key = hashlib.sha256(json.dumps({"command": args.command, "config": config, "inputs": ins},
                                    sort_keys=True).encode()).hexdigest()
    doc = {
        "tool": "panelcf",
        "version": __version__,
        "command": args.command,
        "config": config,
        "inputs": ins,
        "outputs": {p.name: _sha256(p) for p in sorted(out.files)},
        "manifest_hash": key,
    }
    (out.dir / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared steps


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("PANELCF_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"PANELCF_SEED must be an integer, got {env!r}")


def _threads(args) -> int:
    return args.threads if args.threads is not None else (os.cpu_count() or 1)


def _load(args):
    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    data = load_panel(path, outcome_scale=args.outcome_scale)
    if args.transform:
        data = transform_outcome(data, args.transform)
    schedule = derive_schedule(data, allow_reversal=args.allow_reversal)
    obs = build_observation_set(data, schedule)
    return data, schedule, obs


def _solver_cfg(args) -> SolverConfig:
    return SolverConfig(max_iters=args.max_iters, tol=args.tol, seed=_seed(args))


def _grid(args, data, obs, cfg):
    if args.grid:
        try:
            vals = [float(v) for v in args.grid.split(",")]
        except ValueError:
            raise UsageError(f"--grid must be comma-separated numbers, got {args.grid!r}")
        return np.asarray(vals)
    return default_lambda_grid(data, obs, cfg, n=args.n_lambdas)


def _write_cv(out: Outputs, cv) -> None:
    header = ["lambda", "mean_mse"] + [f"fold_{k}" for k in range(cv.fold_mse.shape[1])]
    rows = [[lam, m] + list(f) for lam, m, f in zip(cv.lambda_grid, cv.mean_mse, cv.fold_mse)]
    out.table("cv", header, rows)
    out.json("cv_summary.json", {"lambda_star": cv.lambda_star, "se_rule_lambda": cv.se_rule_lambda,
                                 "K_folds": int(cv.fold_mse.shape[1])})


def _resolve_fit(args, data, obs, out: Optional[Outputs]):
    cfg = _solver_cfg(args)
    if getattr(args, "fit", None):
        fit = FactorFit.from_json(args.fit)
        if fit.L.shape != data.Y.shape:
            raise PanelError("fit artifact does not match the panel dimensions")
        return fit, replace(cfg, lam=fit.lam)
    if args.lam is None and not args.auto_cv:
        raise UsageError("give --lambda, --auto-cv or --fit")
    if args.lam is not None:
        if args.lam < 0:
            raise UsageError("--lambda must be nonnegative")
        lam = args.lam
    else:
        cv = cross_validate(data, obs, _grid(args, data, obs, cfg), args.folds, cfg, n_jobs=_threads(args))
        if out is not None:
            _write_cv(out, cv)
        lam = cv.lambda_star
    cfg = replace(cfg, lam=lam)
    return fit_mcnnm(data, obs, cfg), cfg


def _series_rows(series, extra=None):
    rows = []
    for k, e in enumerate(series.event_time):
        row = [int(e), series.att[k], int(series.n_regions[k]), int(series.placebo[k])]
        if extra:
            row += [v[k] for v in extra]
        rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args, out: Outputs):
    path = Path(args.input)
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    data = load_panel(path, outcome_scale=args.outcome_scale)
    report = validation_report(data, allow_reversal=args.allow_reversal)
    out.json("validation.json", report)
    print(json.dumps(report, sort_keys=True))
    return [path]


def cmd_cv(args, out: Outputs):
    data, schedule, obs = _load(args)
    cfg = _solver_cfg(args)
    cv = cross_validate(data, obs, _grid(args, data, obs, cfg), args.folds, cfg, n_jobs=_threads(args))
    _write_cv(out, cv)
    return [Path(args.input)]


def cmd_estimate(args, out: Outputs):
    data, schedule, obs = _load(args)
    fit, cfg = _resolve_fit(args, data, obs, out)
    if not fit.converged:
        logger.warning("solver stopped after %d iterations without converging", fit.iterations)
    fit.to_json(out.path("fit.json"), data.region_ids, data.years)
    out.files.append(out.dir / "fit_L.csv")
    effects = impute_effects(data, fit, schedule)
    rows = []
    for i in schedule.treated:
        for t in range(data.n_years):
            if effects.support[i, t]:
                rows.append([data.region_ids[i], data.years[t], int(effects.event_time[i, t]),
                             data.Y[i, t], effects.y0_hat[i, t], effects.tau_hat[i, t]])
    out.table("effects", ["region", "year", "event_time", "y", "y0_hat", "tau_hat"], rows)
    es = att_event_study(effects, schedule, args.alignment, include_placebo=True)
    out.table("att", ["event_time", "att", "n_regions", "placebo"], _series_rows(es))
    return [Path(args.input)] + ([Path(args.fit)] if args.fit else [])


def cmd_bootstrap(args, out: Outputs):
    data, schedule, obs = _load(args)
    fit, cfg = _resolve_fit(args, data, obs, out)
    bcfg = BootstrapConfig(B=args.B, seed=_seed(args), level=args.level, refit_lambda=args.refit_lambda,
                           n_jobs=_threads(args), errors=args.errors)
    bands = bootstrap_att(data, obs, fit, bcfg, schedule, cfg)
    rows = [[int(e), bands.att[k], bands.lower[k], bands.upper[k], bands.se[k], int(bands.n_regions[k])]
            for k, e in enumerate(bands.event_time)]
    out.table("bands", ["event_time", "att", "lo", "hi", "se", "n_regions"], rows)
    out.json("bootstrap_summary.json", {"B": args.B, "level": args.level, "n_failed": bands.n_failed,
                                        "lambda": fit.lam, "errors": args.errors})
    return [Path(args.input)] + ([Path(args.fit)] if args.fit else [])


def _parse_horizons(text: str) -> List:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok == "avg":
            out.append("avg")
            continue
        try:
            out.append(int(tok))
        except ValueError:
            raise UsageError(f"bad horizon {tok!r}")
    return out


def cmd_report(args, out: Outputs):
    data, schedule, obs = _load(args)
    fit, _ = _resolve_fit(args, data, obs, None)
    effects = impute_effects(data, fit, schedule)
    headline: Dict = {"lambda": fit.lam, "rank": fit.rank, "n_treated": schedule.n_treated}

    es = att_event_study(effects, schedule)
    headline["att"] = {str(h): _num(es.get(h)) for h in (7, 14, 21)}

    summaries = distribution_summary(effects, _parse_horizons(args.horizons))
    out.table("distribution", ["horizon", "share_positive", "skewness", "kurtosis", "mean", "n_regions"],
              [[str(s.horizon), s.share_positive, s.skewness, s.kurtosis, s.mean, s.n_regions]
               for s in summaries])
    headline["distribution"] = {str(s.horizon): {"share_positive": _num(s.share_positive),
                                                 "skewness": _num(s.skewness),
                                                 "kurtosis": _num(s.kurtosis)} for s in summaries}

    hs = summaries_int(summaries)
    mean_tau = effects.region_mean_effects()
    at_h = [effects.region_effects(h) for h in hs]
    per_region = [[data.region_ids[i], int(schedule.last_pre[i]), mean_tau[k]] + [v[k] for v in at_h]
                  for k, i in enumerate(effects.treated)]
    out.table("region_effects", ["region", "last_pre", "mean_tau"] + [f"tau_{h}" for h in hs], per_region)

    if data.is_log and data.levels is not None:
        euro = {}
        for h in hs:
            _, mean = euro_effect(data, effects, h)
            euro[str(h)] = _num(mean)
        headline["euro_effect"] = euro
    else:
        headline["euro_effect"] = None

    if schedule.n_treated >= 5:
        q = quintile_att(effects, data, schedule)
        rows = []
        for g, (s, o, c) in enumerate(zip(q.series, q.observed_path, q.counterfactual_path)):
            obs_map, cf_map = o.as_dict(), c.as_dict()
            for k, e in enumerate(s.event_time):
                rows.append([g + 1, int(e), s.att[k], int(s.n_regions[k]),
                             obs_map.get(int(e)), cf_map.get(int(e))])
        out.table("quintiles", ["quintile", "event_time", "att", "n_regions", "observed_mean", "counterfactual_mean"],
                  rows)
        out.table("quintile_members", ["region", "quintile"],
                  [[data.region_ids[i], int(g) + 1] for i, g in zip(schedule.treated, q.groups)])
    else:
        logger.warning("fewer than 5 treated regions; quintile analysis skipped")

    if data.levels is not None:
        gp = gini_path(data, effects)
        out.table("gini", ["year", "gini_observed", "gini_counterfactual", "n_regions"],
                  [[int(y), a, b, int(n)] for y, a, b, n in
                   zip(gp.years, gp.gini_observed, gp.gini_counterfactual, gp.n_regions)])
        headline["gini"] = {"first": _num(gp.gini_observed[0]), "last": _num(gp.gini_observed[-1])}

    if np.any(data.intensity > 0):
        curves = []
        for h in _parse_horizons(args.intensity_horizons):
            try:
                curves += intensity_curve(effects, data, [h], args.bandwidth, args.intensity_aggregation)
            except PanelError as exc:
                logger.warning("intensity curve skipped: %s", exc)
        if curves:
            rows = [[c.horizon, float(x), float(y)] for c in curves for x, y in zip(c.grid, c.att)]
            out.table("intensity", ["horizon", "intensity", "att"], rows)
            headline["intensity"] = {str(c.horizon): {"argmax": c.argmax, "peak": c.peak,
                                                      "peak_percent": c.peak_percent,
                                                      "bandwidth": c.bandwidth} for c in curves}
    out.json("headline.json", headline)
    return [Path(args.input)] + ([Path(args.fit)] if args.fit else [])


def summaries_int(summaries) -> List[int]:
    return [int(s.horizon) for s in summaries if s.horizon != "avg"]


def cmd_simulate(args, out: Outputs):
    try:
        cfg = DgpConfig(
            N=args.N, T=args.T, K=args.K, p=args.p,
            ar_coef=args.ar_coef, factor_scale=args.factor_scale,
            beta=tuple([args.beta] * args.p), noise_sd=args.noise_sd,
            effect=args.effect, effect_size=args.effect_size,
            assignment=args.assignment, treated_share=args.treated_share,
            adoption=args.adoption, first_treat=args.first_treat, last_treat=args.last_treat,
            seed=_seed(args),
        )
    except ValueError as exc:
        raise UsageError(str(exc))
    data, truth = generate(cfg)
    write_panel(data, out.path("panel.csv"))
    truth.to_json(out.path("truth.json"))
    return []


def cmd_compare(args, out: Outputs):
    data, schedule, obs = _load(args)
    fit, _ = _resolve_fit(args, data, obs, None)
    effects = impute_effects(data, fit, schedule)
    mc = att_event_study(effects, schedule, include_placebo=True)
    tw = twfe_event_study(data, schedule, args.n_leads, args.n_lags, not args.no_covariates)
    truth = None
    if args.truth:
        doc = json.loads(Path(args.truth).read_text())
        truth = {int(k): float(v) for k, v in doc["att_by_event_time"].items()}
    rows = []
    for e in range(-args.n_leads, args.n_lags + 1):
        m = mc.get(e, None)
        w = tw.get(e, None)
        row = [e, m, w]
        if truth is not None:
            tv = truth.get(e, 0.0 if e < 0 else None)
            row += [tv,
                    None if (m is None or tv is None) else m - tv,
                    None if (w is None or tv is None or math.isnan(w)) else w - tv]
        rows.append(row)
    header = ["event_time", "mcnnm_att", "twfe_att"]
    if truth is not None:
        header += ["truth", "mcnnm_bias", "twfe_bias"]
    out.table("compare", header, rows)
    if truth is not None:
        post = [r for r in rows if r[0] >= 1 and r[4] is not None and r[5] is not None]
        out.json("compare_summary.json", {
            "mean_abs_bias_mcnnm": float(np.mean([abs(r[4]) for r in post])) if post else None,
            "mean_abs_bias_twfe": float(np.mean([abs(r[5]) for r in post])) if post else None,
        })
    return [Path(args.input)] + [Path(p) for p in (args.fit, args.truth) if p]


# ---------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="random seed (falls back to PANELCF_SEED, then 0)")
    p.add_argument("--threads", type=int, default=d, help="worker threads for CV and bootstrap")
    p.add_argument("--out-dir", default=argparse.SUPPRESS if suppress else ".", help="output directory")
    p.add_argument("--format", choices=("csv", "json"), default=argparse.SUPPRESS if suppress else "csv",
                   help="format of tabular outputs")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def _input_flags(p):
    p.add_argument("input", help="region-year CSV")
    p.add_argument("--outcome-scale", choices=("identity", "log"), default="identity",
                   help="scale of the outcome column as stored")
    p.add_argument("--transform", choices=("identity", "log-per-capita", "log-ratio"), default=None,
                   help="transform the level column into the outcome")
    p.add_argument("--allow-reversal", action="store_true",
                   help="accept treatment that switches off; later periods are imputed")


def _solver_flags(p, fit_source: bool = True):
    p.add_argument("--max-iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--n-lambdas", type=int, default=30)
    p.add_argument("--grid", default=None, help="comma-separated descending lambda grid ending at 0")
    if fit_source:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--lambda", dest="lam", type=float, default=None)
        g.add_argument("--auto-cv", action="store_true")
        g.add_argument("--fit", default=None, help="fit.json written by 'estimate'")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="panelcf", description="Counterfactual panel estimation by matrix completion.")
    parser.add_argument("--version", action="version", version=f"panelcf {__version__}")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("validate", help="check a panel CSV")
    _input_flags(p)
    _global_flags(p, True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("cv", help="cross-validate the penalty")
    _input_flags(p)
    _solver_flags(p, fit_source=False)
    _global_flags(p, True)
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("estimate", help="fit and impute counterfactuals")
    _input_flags(p)
    _solver_flags(p)
    p.add_argument("--alignment", choices=("event-time", "calendar"), default="event-time")
    _global_flags(p, True)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bootstrap", help="bootstrap ATT bands")
    _input_flags(p)
    _solver_flags(p)
    p.add_argument("--B", type=int, default=1000)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--refit-lambda", action="store_true")
    p.add_argument("--errors", choices=("out-of-sample", "in-sample"), default="out-of-sample")
    _global_flags(p, True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("report", help="distribution, quintile, Gini and intensity tables")
    _input_flags(p)
    _solver_flags(p)
    p.add_argument("--horizons", default="7,14,21,avg")
    p.add_argument("--intensity-horizons", default="-1,7,14,21")
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--intensity-aggregation", choices=("mean", "cumulative"), default="mean")
    _global_flags(p, True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="draw a synthetic panel with known truth")
    d = DgpConfig()
    p.add_argument("--N", type=int, default=d.N)
    p.add_argument("--T", type=int, default=d.T)
    p.add_argument("--K", type=int, default=d.K)
    p.add_argument("--p", type=int, default=d.p)
    p.add_argument("--ar-coef", type=float, default=d.ar_coef)
    p.add_argument("--factor-scale", type=float, default=d.factor_scale)
    p.add_argument("--beta", type=float, default=d.beta[0], help="common covariate coefficient")
    p.add_argument("--noise-sd", type=float, default=d.noise_sd)
    p.add_argument("--effect", choices=("zero", "constant", "linear"), default=d.effect)
    p.add_argument("--effect-size", type=float, default=d.effect_size)
    p.add_argument("--assignment", choices=("random", "loading"), default=d.assignment)
    p.add_argument("--treated-share", type=float, default=d.treated_share)
    p.add_argument("--adoption", choices=("simultaneous", "staggered"), default=d.adoption)
    p.add_argument("--first-treat", type=int, default=d.first_treat)
    p.add_argument("--last-treat", type=int, default=d.last_treat)
    _global_flags(p, True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("compare", help="matrix completion vs TWFE event study")
    _input_flags(p)
    _solver_flags(p)
    p.add_argument("--n-leads", type=int, default=5)
    p.add_argument("--n-lags", type=int, default=10)
    p.add_argument("--no-covariates", action="store_true", help="leave covariates out of the TWFE regression")
    p.add_argument("--truth", default=None, help="truth.json from 'simulate' for bias columns")
    _global_flags(p, True)
    p.set_defaults(func=cmd_compare)
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if getattr(args, "fit", None) and not Path(args.fit).is_file():
            raise UsageError(f"fit file not found: {args.fit}")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        out = Outputs(Path(args.out_dir), args.format)
        # single-threaded BLAS keeps results identical whatever --threads says
        with threadpool_limits(limits=1):
            inputs = args.func(args, out)
        _write_manifest(args, out, inputs)
    except (UsageError, SchemaError) as exc:
        return _fail("usage", str(exc), 2)
    except (PanelError, BootstrapError, ValueError, KeyError, OSError) as exc:
        return _fail("data", f"{type(exc).__name__}: {exc}", 1)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
