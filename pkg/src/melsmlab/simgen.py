"""Synthetic longitudinal data with covariate- and subject-dependent variance.

Covariates are drawn on the standardized scale from a fixed baseline
covariance (the published PBC covariance), encounter counts are uniform on
{1, ..., 2M-1}, age advances by one unit per encounter while every other
covariate stays constant, and the outcome follows the location/scale
generative equations with per-subject random intercepts (plus optional
uncorrelated random slopes or Student-t intercepts).

Every draw comes from a named substream of the scenario seed, so datasets
are bit-reproducible and independent of generation order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import COVARIATE_NAMES, LongitudinalDataset
from .rng import stream

VARIANTS = ("base", "sinus", "random_slopes", "student_re")

# Observed covariance of the standardized baseline covariates
# (age, albumin, trig, platelet).
BASELINE_COVARIANCE = (
    (1.02, -0.23, 0.02, -0.14),
    (-0.23, 0.90, -0.10, 0.18),
    (0.02, -0.10, 1.00, 0.10),
    (-0.14, 0.18, 0.10, 0.89),
)

DEFAULT_BETA_Y = (0.5, 0.5, 0.0, 0.0)
DEFAULT_BETA_W = (0.8, 0.0, 0.8, 0.0)


@dataclass(frozen=True)
class ScenarioConfig:
    n_subjects: int = 200
    mean_encounters: int = 15
    cov_matrix: tuple = BASELINE_COVARIANCE
    beta_y: tuple = DEFAULT_BETA_Y
    beta_w: tuple = DEFAULT_BETA_W
    sd_y: float = 2.0
    sd_w: float = 1.0
    rho: float = 0.0
    variant: str = "base"
    sd_slope_y: float = 1.0
    sd_slope_w: float = 0.5
    re_df: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if self.mean_encounters < 1:
            raise ValueError("mean_encounters must be positive")
        if not -1.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (-1, 1)")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant '{self.variant}'")
        if min(self.sd_y, self.sd_w, self.sd_slope_y, self.sd_slope_w) < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.re_df <= 0:
            raise ValueError("re_df must be positive")
        if len(self.beta_y) != 4 or len(self.beta_w) != 4:
            raise ValueError("beta vectors run over (age, albumin, trig, platelet)")

    @property
    def covariance(self) -> np.ndarray:
        return np.asarray(self.cov_matrix, dtype=float)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cov_matrix"] = [list(row) for row in self.cov_matrix]
        d["beta_y"] = list(self.beta_y)
        d["beta_w"] = list(self.beta_w)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        d = dict(d)
        for key in ("cov_matrix",):
            if key in d:
                d[key] = tuple(tuple(row) for row in d[key])
        for key in ("beta_y", "beta_w"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class EncounterPlan:
    counts: np.ndarray       # encounters per subject
    subject_row: np.ndarray  # flat row -> subject ordinal
    j: np.ndarray            # flat encounter index, 0-based
    age: np.ndarray          # flat age at encounter

    def ages_for(self, i: int) -> np.ndarray:
        return self.age[self.subject_row == i]


@dataclass
class TruthManifest:
    config: ScenarioConfig
    u: dict[str, np.ndarray]

    def truth_of(self, estimand: str) -> float | None:
        """True value of a canonical dotted estimand name, if it has one."""
        cfg = self.config
        if estimand == "rho":
            return cfg.rho
        if estimand in ("beta_y.intercept", "beta_w.intercept"):
            return 0.0
        for prefix, betas in (("beta_y.", cfg.beta_y), ("beta_w.", cfg.beta_w)):
            if estimand.startswith(prefix):
                cov = estimand[len(prefix):]
                if cov in COVARIATE_NAMES:
                    return float(betas[COVARIATE_NAMES.index(cov)])
                return None
        if estimand == "sd_re_location":
            return cfg.sd_y
        if estimand == "sd_re_scale":
            return cfg.sd_w
        if estimand == "sd_re_location.age":
            return cfg.sd_slope_y if cfg.variant == "random_slopes" else 0.0
        if estimand == "sd_re_scale.age":
            return cfg.sd_slope_w if cfg.variant == "random_slopes" else 0.0
        return None

    def to_json_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "u": {k: [float(x) for x in v] for k, v in self.u.items()},
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "TruthManifest":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            config=ScenarioConfig.from_dict(d["config"]),
            u={k: np.asarray(v) for k, v in d["u"].items()},
        )


@dataclass
class GeneratedDataset:
    data: LongitudinalDataset
    truth: TruthManifest


def psd_factor(cov: np.ndarray) -> np.ndarray:
    """Lower-triangular-like factor F with F @ F.T = cov; accepts singular PSD."""
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValueError("covariance matrix must be square")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError("covariance matrix must be symmetric")
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        eigval, eigvec = np.linalg.eigh(cov)
        tol = 1e-10 * max(1.0, float(np.max(np.abs(eigval))))
        if eigval.min() < -tol:
            raise ValueError("covariance matrix is not positive semidefinite") from None
        return eigvec * np.sqrt(np.clip(eigval, 0.0, None))


def sample_baseline_covariates(n_subjects: int, cov: np.ndarray,
                               rng: np.random.Generator) -> np.ndarray:
    """Rows i.i.d. multivariate normal with mean zero and the given covariance."""
    factor = psd_factor(cov)
    z = rng.standard_normal((n_subjects, factor.shape[0]))
    return z @ factor.T


def sample_encounters(n_subjects: int, mean_encounters: int, rng: np.random.Generator,
                      baseline_age: np.ndarray | None = None) -> EncounterPlan:
    """Encounter counts uniform on {1, ..., 2M-1}; age advances by one per visit."""
    if mean_encounters < 1:
        raise ValueError("mean_encounters must be positive")
    counts = rng.integers(1, 2 * mean_encounters, size=n_subjects)
    subject_row = np.repeat(np.arange(n_subjects), counts)
    j = np.concatenate([np.arange(c) for c in counts]) if n_subjects else np.empty(0, int)
    if baseline_age is None:
        baseline_age = np.zeros(n_subjects)
    age = baseline_age[subject_row] + j
    return EncounterPlan(counts=counts, subject_row=subject_row, j=j, age=age)


def sample_random_effects(config: ScenarioConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Per-subject intercept (and, per variant, slope) effects."""
    n = config.n_subjects
    if config.variant == "student_re":
        z = rng.standard_t(config.re_df, size=(n, 2))
    else:
        z = rng.standard_normal((n, 2))
    rho = config.rho
    u_y0 = config.sd_y * z[:, 0]
    u_w0 = config.sd_w * (rho * z[:, 0] + np.sqrt(1.0 - rho * rho) * z[:, 1])
    u = {"u_y0": u_y0, "u_w0": u_w0}
    if config.variant == "random_slopes":
        u["u_y_age"] = config.sd_slope_y * rng.standard_normal(n)
        u["u_w_age"] = config.sd_slope_w * rng.standard_normal(n)
    return u


def generate_outcome(config: ScenarioConfig, covariates: np.ndarray, plan: EncounterPlan,
                     u: dict[str, np.ndarray]) -> LongitudinalDataset:
    """Assemble rows and draw the outcome under the scenario's generative law."""
    rows = plan.subject_row
    cols = {name: covariates[rows, k] for k, name in enumerate(COVARIATE_NAMES)}
    cols["age"] = plan.age

    loc_age = np.sin(plan.age) if config.variant == "sinus" else plan.age
    x_loc = np.column_stack([loc_age, cols["albumin"], cols["trig"], cols["platelet"]])
    x_scl = np.column_stack([plan.age, cols["albumin"], cols["trig"], cols["platelet"]])

    mu = x_loc @ np.asarray(config.beta_y) + u["u_y0"][rows]
    eta = x_scl @ np.asarray(config.beta_w) + u["u_w0"][rows]
    if config.variant == "random_slopes":
        mu = mu + u["u_y_age"][rows] * plan.age
        eta = eta + u["u_w_age"][rows] * plan.age
    omega = np.exp(eta)

    eps = np.empty(len(rows))
    offset = 0
    for i, c in enumerate(plan.counts):
        c = int(c)
        eps[offset : offset + c] = stream(config.seed, "noise", i).standard_normal(c)
        offset += c
    y = mu + eps * omega

    return LongitudinalDataset(
        subject_id=rows.astype(np.int64),
        j=plan.j,
        covariates=cols,
        y=y,
    )


def generate(config: ScenarioConfig) -> GeneratedDataset:
    """Full scenario draw: covariates, encounters, random effects, outcome."""
    covariates = sample_baseline_covariates(
        config.n_subjects, config.covariance, stream(config.seed, "covariates")
    )
    plan = sample_encounters(
        config.n_subjects,
        config.mean_encounters,
        stream(config.seed, "encounters"),
        baseline_age=covariates[:, 0],
    )
    u = sample_random_effects(config, stream(config.seed, "random_effects"))
    data = generate_outcome(config, covariates, plan, u)
    return GeneratedDataset(data=data, truth=TruthManifest(config=config, u=u))
