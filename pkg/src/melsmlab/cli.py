"""Command-line entry point: simulate, fit, study, report, inflation.

Exit codes are stable: 0 success, 1 usage/config error, 2 data/parse error,
3 fit failure, 4 I/O error.  Every run writes a resolved-config echo next to
its outputs so it can be reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, LongitudinalDataset
from .formula import DesignError, FormulaError, parse_formula
from .harness import (
    PRACTICES,
    builtin_plan,
    fit_melsm,
    read_records_csv,
    run_study,
    scale_plan,
)
from .model import MelsmSpec, NumericalError, PriorConfig
from .report import figure_groups, inflation_analytic, inflation_monte_carlo, boxplot_svg, summarize
from .sampler import SamplerConfig, SamplerError
from .simgen import BASELINE_COVARIANCE, ScenarioConfig, generate

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_FIT = 3
EXIT_IO = 4

_PRACTICE_VARIANTS = {"P1": "base", "P2": "base", "P3": "sinus", "P4": "random_slopes", "P5": "student_re"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1, not argparse's default 2
        raise UsageError(message)


def _write_echo(out_dir: Path, name: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"{name}.config.json"
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--chains", type=int, default=2)
    p.add_argument("--warmup", type=int, default=1000)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--target-accept", type=float, default=0.8)
    p.add_argument("--max-depth", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)


def _sampler_from_args(args) -> SamplerConfig:
    return SamplerConfig(
        chains=args.chains,
        warmup_iters=args.warmup,
        sampling_iters=args.samples,
        target_accept=args.target_accept,
        max_tree_depth=args.max_depth,
        seed=args.seed,
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="melsmlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"melsmlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with its truth manifest")
    p.add_argument("--config", type=Path, help="JSON scenario config; flags override its values")
    p.add_argument("--practice", choices=PRACTICES, help="use this practice's generative variant")
    p.add_argument("--n", type=int, help="number of subjects")
    p.add_argument("--m", type=int, help="mean encounters per subject")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="dataset", help="basename for the output files")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a location/scale model to a dataset CSV")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--location", required=True, help='e.g. "y ~ age + albumin + (1|id)"')
    p.add_argument("--scale", required=True, help='e.g. "log(omega) ~ age + trig + (1|id)"')
    p.add_argument("--re-df", type=float, default=None,
                   help="degrees of freedom for student random effects (default 3)")
    p.add_argument("--save-draws", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("study", help="run one of the five practice studies")
    p.add_argument("--practice", choices=PRACTICES, required=True)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--scale-factor", type=float, default=1.0,
                   help="proportionally shrink subjects, encounters, reps and iterations")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--progress", action="store_true")
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("report", help="coverage table and boxplot figures from records.csv")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("inflation", help="variance-inflation identity: analytic vs monte carlo")
    p.add_argument("--delta", required=True, help="comma-separated bias vector, e.g. 0.5,0,0,0")
    p.add_argument("--omega", type=float, default=1.0, help="residual standard deviation")
    p.add_argument("--draws", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_inflation)

    return parser


def cmd_simulate(args) -> int:
    overrides = {}
    if args.practice:
        overrides["variant"] = _PRACTICE_VARIANTS[args.practice]
    if args.n is not None:
        overrides["n_subjects"] = args.n
    if args.m is not None:
        overrides["mean_encounters"] = args.m
    overrides["seed"] = args.seed
    try:
        if args.config:
            base = ScenarioConfig.from_dict(json.loads(args.config.read_text(encoding="utf-8")))
            config = replace(base, **overrides)
        else:
            config = ScenarioConfig(**overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid scenario config: {exc}") from exc

    generated = generate(config)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    generated.data.to_csv(out / f"{args.name}.csv")
    generated.truth.save(out / f"{args.name}.truth.json")
    _write_echo(out, "simulate", {"name": args.name, "config": config.to_dict()})
    print(f"wrote {out / (args.name + '.csv')} ({generated.data.n_rows} rows, "
          f"{generated.data.n_subjects} subjects)")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = LongitudinalDataset.from_csv(args.data)
    spec = MelsmSpec(
        location=parse_formula(args.location),
        scale=parse_formula(args.scale),
        priors=PriorConfig(),
        student_df=args.re_df,
    )
    sampler = _sampler_from_args(args)
    fit = fit_melsm(data, spec, sampler)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    fit.save_json(out / "fit.json", save_draws=args.save_draws)
    _write_echo(out, "fit", {
        "data": str(args.data),
        "location": args.location,
        "scale": args.scale,
        "re_df": args.re_df,
        "priors": dataclasses.asdict(PriorConfig()),
        "sampler": sampler.to_dict(),
    })
    diag = fit.diagnostics
    print(f"fit written to {out / 'fit.json'} "
          f"(rhat_max={diag['rhat_max']:.3f}, divergences={diag['divergence_count']})")
    if fit.failed:
        print("fit flagged as failed: warmup never left the divergent regime", file=sys.stderr)
        return EXIT_FIT
    return EXIT_OK


def cmd_study(args) -> int:
    plan = builtin_plan(args.practice, replications=args.reps, base_seed=args.seed,
                        sampler=_sampler_from_args(args))
    plan = scale_plan(plan, args.scale_factor)
    records = run_study(plan, args.out, jobs=args.jobs, progress=args.progress)
    n_failed = sum(1 for r in records if r.flag == "failed")
    print(f"{len(records)} records in {args.out / 'records.csv'} ({n_failed} flagged failed)")
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_records_csv(args.records)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    table = summarize(records)
    table.save(out / "coverage.csv")

    from .figures import render_boxplot_png

    estimands = []
    for rec in records:
        if rec.estimand not in estimands and rec.flag != "failed":
            estimands.append(rec.estimand)
    practices = sorted({r.practice for r in records})
    n_figs = 0
    for practice in practices:
        practice_records = [r for r in records if r.practice == practice]
        for estimand in estimands:
            groups, truth = figure_groups(practice_records, estimand)
            if not groups:
                continue
            svg = boxplot_svg(groups, truth, title=f"{practice} {estimand}")
            (out / f"{practice}_{estimand}.svg").write_text(svg, encoding="utf-8")
            render_boxplot_png(groups, truth, out / f"{practice}_{estimand}.png",
                               title=f"{practice} {estimand}")
            n_figs += 1
    _write_echo(out, "report", {"records": str(args.records), "figures": n_figs})
    print(f"coverage table and {n_figs} figure pairs written to {out}")
    return EXIT_OK


def cmd_inflation(args) -> int:
    try:
        delta = np.array([float(v) for v in args.delta.split(",")])
    except ValueError as exc:
        raise UsageError(f"bad --delta: {exc}") from exc
    cov = np.asarray(BASELINE_COVARIANCE)
    if delta.size != cov.shape[0]:
        raise UsageError(f"--delta needs {cov.shape[0]} components, got {delta.size}")
    analytic = inflation_analytic(delta, cov)
    total = analytic + args.omega**2
    mc = inflation_monte_carlo(delta, cov, args.omega, n_draws=args.draws, seed=args.seed)
    print(f"analytic inflation (delta' Sigma delta): {analytic:.6g}")
    print(f"base variance omega^2:                   {args.omega ** 2:.6g}")
    print(f"analytic total variance:                 {total:.6g}")
    print(f"monte-carlo total variance (n={args.draws}): {mc:.6g}")
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        _write_echo(args.out, "inflation", {
            "delta": [float(v) for v in delta],
            "omega": args.omega,
            "draws": args.draws,
            "seed": args.seed,
            "analytic_inflation": analytic,
            "analytic_total_variance": total,
            "monte_carlo_total_variance": mc,
        })
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormulaError, DesignError, DataError) as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SamplerError, NumericalError) as exc:
        print(f"fit failure [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_FIT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
