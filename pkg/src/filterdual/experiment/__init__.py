"""Experiment orchestration: configs, the command line and the acceptance suite."""

from .acceptance import PROFILES, CriterionResult, run_acceptance
from .config import DEFAULT_TOLERANCES, ExperimentConfig

__all__ = ["PROFILES", "CriterionResult", "run_acceptance", "DEFAULT_TOLERANCES", "ExperimentConfig"]
