"""Multilevel Gaussian mixed models, mixed GAMLSS fitting and diagnostics."""

from .data import (
    DesignMatrices,
    LongTable,
    ModelSpec,
    Term,
    build_design,
    ingest_csv,
    parse_formula,
    parse_model_spec,
    table_from_columns,
    term_dof,
)
from .diagnostics import (
    ResidualSummary,
    WormPanel,
    residual_summary,
    worm_panel,
    worm_panels_by,
    worm_plot_svg,
)
from .estimators import HierarchicalRegressor
from .gamlss import GamlssFit, extract_ranef, fit_gamlss, quantile_residuals
from .inference import (
    AnovaTable,
    FitSummary,
    LrtResult,
    ShapiroResult,
    aic,
    chisq_sf,
    f_sf,
    lrt,
    sequential_f,
    shapiro_wilk,
)
from .lmm import LmmFit, VarianceComponents, blup, fit_lmm, fitted, marginal_loglik
from .simulate import (
    FitRecipe,
    TruthSpec,
    replicate_study,
    simulate,
    truth_from_config,
)

__version__ = "0.1.0"

__all__ = [
    "DesignMatrices",
    "LongTable",
    "ModelSpec",
    "Term",
    "build_design",
    "ingest_csv",
    "parse_formula",
    "parse_model_spec",
    "table_from_columns",
    "term_dof",
    "LmmFit",
    "VarianceComponents",
    "blup",
    "fit_lmm",
    "fitted",
    "marginal_loglik",
    "GamlssFit",
    "fit_gamlss",
    "quantile_residuals",
    "extract_ranef",
    "AnovaTable",
    "FitSummary",
    "LrtResult",
    "ShapiroResult",
    "aic",
    "chisq_sf",
    "f_sf",
    "lrt",
    "sequential_f",
    "shapiro_wilk",
    "WormPanel",
    "ResidualSummary",
    "worm_panel",
    "worm_panels_by",
    "worm_plot_svg",
    "residual_summary",
    "HierarchicalRegressor",
    "TruthSpec",
    "FitRecipe",
    "simulate",
    "replicate_study",
    "truth_from_config",
    "__version__",
]
