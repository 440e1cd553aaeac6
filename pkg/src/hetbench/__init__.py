"""Synthetic multilevel benchmark for heterogeneous treatment-effect estimation."""

from .config import dump_config, load_config, read_config, write_config
from .core import EstimateReport, GroundTruth, SchoolProfile, StudentRecord, validate_dataset
from .covariates import CovariateSpec
from .dgp import DgpConfig, GeneratedData, generate_dataset
from .scoring import METHODS, ScoreCard, replicate, score

__version__ = "0.1.0"

__all__ = [
    "CovariateSpec", "DgpConfig", "EstimateReport", "GeneratedData", "GroundTruth",
    "METHODS", "SchoolProfile", "ScoreCard", "StudentRecord", "dump_config",
    "generate_dataset", "load_config", "read_config", "replicate", "score",
    "validate_dataset", "write_config",
]
