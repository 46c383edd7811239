"""Simulation-study orchestration: plans, replication runs, persisted records.

A study plan pairs a grid of generative scenarios with a list of competing
model specifications.  Each replication draws one dataset per scenario and
fits every specification on that same dataset; one record is persisted per
(replication, model, estimand).  Records are appended incrementally so a
partially completed study can resume, and the finished file is rewritten in
canonical order so equal seeds give byte-identical output.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import LongitudinalDataset
from .formula import parse_formula
from .model import MelsmModel, MelsmSpec, NumericalError, PriorConfig
from .rng import substream_seed
from .sampler import Fit, SamplerConfig, SamplerError, credible_interval, nuts_sample
from .simgen import ScenarioConfig, TruthManifest, generate

PRACTICES = ("P1", "P2", "P3", "P4", "P5")
RECORDS_HEADER = (
    "practice", "scenario", "model", "rep", "estimand", "estimate", "lower",
    "upper", "truth", "rhat_max", "divergences", "flag", "seconds",
)
INTERVAL_LEVEL = 0.95
UNRELIABLE_DIVERGENCE_FRACTION = 0.10
FAILED_ESTIMAND = "(fit)"


@dataclass(frozen=True)
class ModelSpecDef:
    name: str
    location: str
    scale: str
    student_df: float | None = None

    def to_melsm_spec(self, priors: PriorConfig) -> MelsmSpec:
        return MelsmSpec(
            location=parse_formula(self.location),
            scale=parse_formula(self.scale),
            priors=priors,
            student_df=self.student_df,
        )


@dataclass
class StudyPlan:
    practice: str
    scenarios: list[tuple[str, ScenarioConfig]]
    model_specs: list[ModelSpecDef]
    replications: int = 100
    base_seed: int = 20240
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.practice not in PRACTICES:
            raise ValueError(f"unknown practice '{self.practice}'")
        if self.replications < 1:
            raise ValueError("replications must be positive")
        for spec in self.model_specs:
            spec.to_melsm_spec(self.priors)  # formulas must parse

    def to_json_dict(self) -> dict:
        return {
            "version": __version__,
            "practice": self.practice,
            "scenarios": [
                {"id": sid, "config": cfg.to_dict()} for sid, cfg in self.scenarios
            ],
            "model_specs": [dataclasses.asdict(s) for s in self.model_specs],
            "replications": self.replications,
            "base_seed": self.base_seed,
            "sampler": self.sampler.to_dict(),
            "priors": dataclasses.asdict(self.priors),
            "dataset_seed_rule": "substream(base_seed, practice, scenario_id, 'data', rep)",
            "fit_seed_rule": "substream(base_seed, practice, scenario_id, 'fit', rep, model)",
        }


@dataclass
class StudyRecord:
    practice: str
    scenario: str
    model: str
    rep: int
    estimand: str
    estimate: float | None
    lower: float | None
    upper: float | None
    truth: float | None
    rhat_max: float | None
    divergences: int
    flag: str
    seconds: float | None = None

    def to_row(self) -> list[str]:
        def num(v):
            return "" if v is None else repr(float(v))

        return [
            self.practice, self.scenario, self.model, str(self.rep), self.estimand,
            num(self.estimate), num(self.lower), num(self.upper), num(self.truth),
            num(self.rhat_max), str(self.divergences), self.flag,
            "NA",  # wall time lives in timings.csv; records.csv stays reproducible
        ]

    @classmethod
    def from_row(cls, row: list[str]) -> "StudyRecord":
        def num(s):
            return None if s in ("", "NA") else float(s)

        return cls(
            practice=row[0], scenario=row[1], model=row[2], rep=int(row[3]),
            estimand=row[4], estimate=num(row[5]), lower=num(row[6]),
            upper=num(row[7]), truth=num(row[8]), rhat_max=num(row[9]),
            divergences=int(row[10]), flag=row[11], seconds=num(row[12]),
        )


# --- built-in plans -----------------------------------------------------------

_LOC_BASE = "y ~ age + albumin + (1|id)"
_SCL_BASE = "log(omega) ~ age + trig + (1|id)"

_SPECS: dict[str, list[ModelSpecDef]] = {
    "P1": [
        ModelSpecDef("melsm", _LOC_BASE, _SCL_BASE),
        ModelSpecDef("lmm", _LOC_BASE, "log(omega) ~ 1"),
    ],
    "P2": [
        ModelSpecDef("correct", _LOC_BASE, _SCL_BASE),
        ModelSpecDef(
            "all",
            "y ~ age + albumin + trig + platelet + (1|id)",
            "log(omega) ~ age + albumin + trig + platelet + (1|id)",
        ),
        ModelSpecDef("mis_y", "y ~ albumin + (1|id)", _SCL_BASE),
        ModelSpecDef("mis_omega", _LOC_BASE, "log(omega) ~ trig + (1|id)"),
        ModelSpecDef("no_u_omega", _LOC_BASE, "log(omega) ~ age + trig"),
        ModelSpecDef("no_u_omega_mis_omega", _LOC_BASE, "log(omega) ~ trig"),
    ],
    "P3": [
        ModelSpecDef("correct", "y ~ sin(age) + albumin + (1|id)", _SCL_BASE),
        ModelSpecDef("non_sinus", _LOC_BASE, _SCL_BASE),
    ],
    "P4": [
        ModelSpecDef(
            "correct", "y ~ age + albumin + (1 + age|id)", "log(omega) ~ age + trig + (1 + age|id)"
        ),
        ModelSpecDef(
            "no_u_omega_age", "y ~ age + albumin + (1 + age|id)", _SCL_BASE
        ),
        ModelSpecDef("no_slopes", _LOC_BASE, _SCL_BASE),
    ],
    "P5": [
        ModelSpecDef(
            "student",
            "y ~ age + albumin + (1|gr(id, dist='student'))",
            "log(omega) ~ age + trig + (1|gr(id, dist='student'))",
            student_df=3.0,
        ),
        ModelSpecDef("gaussian", _LOC_BASE, _SCL_BASE),
    ],
}

_VARIANTS = {"P1": "base", "P2": "base", "P3": "sinus", "P4": "random_slopes", "P5": "student_re"}


def builtin_plan(practice: str, replications: int = 100, base_seed: int = 20240,
                 sampler: SamplerConfig | None = None,
                 priors: PriorConfig | None = None) -> StudyPlan:
    """The five practice studies with their published grids and specifications."""
    if practice not in _SPECS:
        raise ValueError(f"unknown practice '{practice}' (expected one of {PRACTICES})")
    variant = _VARIANTS[practice]
    if practice == "P1":
        scenarios = [
            (f"N{n}_M15", ScenarioConfig(n_subjects=n, mean_encounters=15))
            for n in (100, 300, 500, 1000)
        ] + [
            (f"N200_M{m}", ScenarioConfig(n_subjects=200, mean_encounters=m))
            for m in (5, 10, 20)
        ]
    else:
        scenarios = [("N200_M15", ScenarioConfig(variant=variant))]
    return StudyPlan(
        practice=practice,
        scenarios=scenarios,
        model_specs=list(_SPECS[practice]),
        replications=replications,
        base_seed=base_seed,
        sampler=sampler or SamplerConfig(),
        priors=priors or PriorConfig(),
    )


def scale_plan(plan: StudyPlan, factor: float) -> StudyPlan:
    """Proportionally shrink replication count, subject counts, encounter means
    and sampler iterations for desk-scale runs."""
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    if factor == 1.0:
        return plan
    scenarios = [
        (
            sid,
            replace(
                cfg,
                n_subjects=max(2, round(cfg.n_subjects * factor)),
                mean_encounters=max(1, round(cfg.mean_encounters * factor)),
            ),
        )
        for sid, cfg in plan.scenarios
    ]
    sampler = replace(
        plan.sampler,
        warmup_iters=max(150, round(plan.sampler.warmup_iters * factor)),
        sampling_iters=max(150, round(plan.sampler.sampling_iters * factor)),
    )
    return replace(
        plan,
        scenarios=scenarios,
        replications=max(1, round(plan.replications * factor)),
        sampler=sampler,
    )


# --- fitting and record extraction --------------------------------------------

_SIN_ESTIMAND = re.compile(r"^(beta_[yw])\.sin\((\w+)\)$")


def canonical_estimand(name: str) -> str:
    """Design-column name -> canonical estimand name (sin(age) maps to age)."""
    return _SIN_ESTIMAND.sub(r"\1.\2", name)


def fit_melsm(data: LongitudinalDataset, spec: MelsmSpec, sampler: SamplerConfig) -> Fit:
    model = MelsmModel(spec, data)
    return nuts_sample(model, model.init_vector(), sampler)


def extract_records(fit: Fit, truth: TruthManifest, practice: str, scenario: str,
                    model_name: str, rep: int, seconds: float | None = None) -> list[StudyRecord]:
    """One record per estimand the fitted model estimates."""
    total_draws = fit.config.chains * fit.config.sampling_iters
    divergences = int(fit.diagnostics["divergence_count"])
    if fit.failed:
        flag = "failed"
    elif divergences > UNRELIABLE_DIVERGENCE_FRACTION * total_draws:
        flag = "unreliable"
    else:
        flag = "ok"
    rhat_max = fit.diagnostics.get("rhat_max")
    records = []
    names = [n for n in fit.parameter_names if not n.startswith("z.")]
    for name in sorted(names, key=canonical_estimand):
        pooled = fit.draws_for(name)
        lo, hi = credible_interval(pooled, INTERVAL_LEVEL)
        estimand = canonical_estimand(name)
        records.append(
            StudyRecord(
                practice=practice, scenario=scenario, model=model_name, rep=rep,
                estimand=estimand, estimate=float(pooled.mean()), lower=lo, upper=hi,
                truth=truth.truth_of(estimand), rhat_max=rhat_max,
                divergences=divergences, flag=flag, seconds=seconds,
            )
        )
    return records


def failed_record(practice: str, scenario: str, model_name: str, rep: int,
                  seconds: float | None = None) -> StudyRecord:
    return StudyRecord(
        practice=practice, scenario=scenario, model=model_name, rep=rep,
        estimand=FAILED_ESTIMAND, estimate=None, lower=None, upper=None,
        truth=None, rhat_max=None, divergences=0, flag="failed", seconds=seconds,
    )


def dataset_seed(plan: StudyPlan, scenario_id: str, rep: int) -> int:
    return substream_seed(plan.base_seed, plan.practice, scenario_id, "data", rep)


def _fit_seed(plan: StudyPlan, scenario_id: str, rep: int, model: str) -> int:
    return substream_seed(plan.base_seed, plan.practice, scenario_id, "fit", rep, model)


def _run_task(args) -> tuple[list[StudyRecord], list[tuple[str, str, int, float]]]:
    plan, scenario_idx, rep, wanted_models = args
    scenario_id, cfg = plan.scenarios[scenario_idx]
    cfg = replace(cfg, seed=dataset_seed(plan, scenario_id, rep))
    generated = generate(cfg)
    records: list[StudyRecord] = []
    timings: list[tuple[str, str, int, float]] = []
    for spec_def in plan.model_specs:
        if spec_def.name not in wanted_models:
            continue
        sampler = replace(plan.sampler, seed=_fit_seed(plan, scenario_id, rep, spec_def.name))
        start = time.perf_counter()
        try:
            fit = fit_melsm(generated.data, spec_def.to_melsm_spec(plan.priors), sampler)
            elapsed = time.perf_counter() - start
            records.extend(
                extract_records(
                    fit, generated.truth, plan.practice, scenario_id, spec_def.name,
                    rep, seconds=elapsed,
                )
            )
        except (SamplerError, NumericalError, FloatingPointError, np.linalg.LinAlgError):
            elapsed = time.perf_counter() - start
            records.append(
                failed_record(plan.practice, scenario_id, spec_def.name, rep, seconds=elapsed)
            )
        timings.append((scenario_id, spec_def.name, rep, elapsed))
    return records, timings


# --- persistence ----------------------------------------------------------------


def read_records_csv(path: str | Path) -> list[StudyRecord]:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORDS_HEADER:
            raise ValueError(f"{path}: bad records header {header!r}")
        for row in reader:
            if row:
                records.append(StudyRecord.from_row(row))
    return records


def write_records_csv(records: list[StudyRecord], path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORDS_HEADER)
        for rec in records:
            writer.writerow(rec.to_row())


def _canonical_sort(records: list[StudyRecord], plan: StudyPlan) -> list[StudyRecord]:
    scen_rank = {sid: i for i, (sid, _) in enumerate(plan.scenarios)}
    model_rank = {s.name: i for i, s in enumerate(plan.model_specs)}
    big = 1 << 30
    return sorted(
        records,
        key=lambda r: (
            scen_rank.get(r.scenario, big), r.rep, model_rank.get(r.model, big), r.estimand,
        ),
    )


def run_study(plan: StudyPlan, out_dir: str | Path, jobs: int | None = None,
              progress: bool = False) -> list[StudyRecord]:
    """Execute the plan, persisting records.csv, study.json and timings.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records_path = out / "records.csv"
    (out / "study.json").write_text(
        json.dumps(plan.to_json_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )

    done: set[tuple[str, int, str]] = set()
    existing: list[StudyRecord] = []
    if records_path.exists():
        existing = read_records_csv(records_path)
        done = {(r.scenario, r.rep, r.model) for r in existing}

    tasks = []
    for scenario_idx, (scenario_id, _) in enumerate(plan.scenarios):
        for rep in range(plan.replications):
            wanted = tuple(
                s.name for s in plan.model_specs if (scenario_id, rep, s.name) not in done
            )
            if wanted:
                tasks.append((plan, scenario_idx, rep, wanted))

    timings_path = out / "timings.csv"
    if not timings_path.exists():
        timings_path.write_text("scenario,model,rep,seconds\n", encoding="utf-8")

    all_records = list(existing)
    with records_path.open("a", encoding="utf-8", newline="") as rec_fh, \
            timings_path.open("a", encoding="utf-8") as time_fh:
        rec_writer = csv.writer(rec_fh, lineterminator="\n")
        if not existing and records_path.stat().st_size == 0:
            rec_writer.writerow(RECORDS_HEADER)

        def consume(result):
            recs, times = result
            for rec in recs:
                rec_writer.writerow(rec.to_row())
            rec_fh.flush()
            for scenario_id, model, rep, secs in times:
                time_fh.write(f"{scenario_id},{model},{rep},{secs:.3f}\n")
            all_records.extend(recs)
            if progress:
                done_frac = len(all_records)
                print(f"[study {plan.practice}] {done_frac} records persisted", flush=True)

        jobs = jobs or os.cpu_count() or 1
        if jobs <= 1 or len(tasks) <= 1:
            for task in tasks:
                consume(_run_task(task))
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for result in pool.map(_run_task, tasks):
                    consume(result)

    final = _canonical_sort(all_records, plan)
    write_records_csv(final, records_path)
    return final
