"""Mixed-effects location-scale model laboratory.

Fits longitudinal models whose residual standard deviation is itself a
regression (log link, fixed and random effects), generates synthetic cohorts
with known truths, and orchestrates misspecification studies that report
coverage and bias per estimand.
"""

__version__ = "0.1.0"

from .data import COVARIATE_NAMES, DataError, LongitudinalDataset
from .formula import (
    DesignError,
    DesignMatrices,
    FormulaAst,
    FormulaError,
    RandomTerm,
    Term,
    build_design,
    parse_formula,
    pretty,
)
from .model import (
    LinearPredictors,
    MelsmModel,
    MelsmSpec,
    NumericalError,
    ParameterVector,
    PriorConfig,
)
from .sampler import (
    Fit,
    SamplerConfig,
    SamplerError,
    SimpleTarget,
    compute_ess,
    compute_rhat,
    credible_interval,
    nuts_sample,
)
from .simgen import (
    BASELINE_COVARIANCE,
    GeneratedDataset,
    ScenarioConfig,
    TruthManifest,
    generate,
    sample_baseline_covariates,
    sample_encounters,
    sample_random_effects,
)
from .harness import (
    ModelSpecDef,
    StudyPlan,
    StudyRecord,
    builtin_plan,
    fit_melsm,
    run_study,
    scale_plan,
)
from .report import (
    BoxGroup,
    BoxplotStyle,
    CoverageTable,
    boxplot_svg,
    box_stats,
    coverage,
    figure_groups,
    inflation_analytic,
    inflation_monte_carlo,
    kolmogorov_distance_gaussian_vs_student,
    summarize,
)

__all__ = [name for name in dir() if not name.startswith("_")]
