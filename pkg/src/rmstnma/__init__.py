"""RMST network meta-analysis of individual participant data."""

from .dataset import Dataset, SurvivalRecord, read_csv, summarize, write_csv
from .errors import (
    ArmUnidentifiableError,
    CensoringWeightError,
    DataFormatError,
    InsufficientSampleError,
    RankDeficientError,
    RmstNmaError,
)
from .ipcw import Link, Param, StudyFit, build_weights, fit_ipcw_rmst, fit_study
from .mvmeta import MvmetaFit, MvmetaInput, Structure, reml_fit, reml_loglik
from .pipeline import ContrastEstimate, Method, NmaFit, all_contrasts, contrast, fit, fit_npf, fit_one_stage, fit_two_stage
from .pql import MixedDesign, PqlFit, assemble_design, pql_fit
from .simulation import GeneratorParams, MetricsTable, ScenarioConfig, run_scenario, true_log_rmst
from .survival import StepFunction, Target, kaplan_meier, nelson_aalen, rmst_nonparametric

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SurvivalRecord",
    "read_csv",
    "summarize",
    "write_csv",
    "ArmUnidentifiableError",
    "CensoringWeightError",
    "DataFormatError",
    "InsufficientSampleError",
    "RankDeficientError",
    "RmstNmaError",
    "Link",
    "Param",
    "StudyFit",
    "build_weights",
    "fit_ipcw_rmst",
    "fit_study",
    "MvmetaFit",
    "MvmetaInput",
    "Structure",
    "reml_fit",
    "reml_loglik",
    "ContrastEstimate",
    "Method",
    "NmaFit",
    "all_contrasts",
    "contrast",
    "fit",
    "fit_npf",
    "fit_one_stage",
    "fit_two_stage",
    "MixedDesign",
    "PqlFit",
    "assemble_design",
    "pql_fit",
    "GeneratorParams",
    "MetricsTable",
    "ScenarioConfig",
    "run_scenario",
    "true_log_rmst",
    "StepFunction",
    "Target",
    "kaplan_meier",
    "nelson_aalen",
    "rmst_nonparametric",
    "__version__",
]
