"""Adaptive linear-quadratic regulation with perturbed greedy policies."""

from .dynamics import NoiseModel, PerturbationConfig, SystemSpec
from .errors import (
    AdaptiveLQRError,
    ConfigurationError,
    InstabilityError,
    IntegrityError,
    NonConvergenceError,
    NumericalError,
    SingularityError,
)
from .harness import ExperimentConfig, compare_policies, run_experiment
from .metrics import closed_form_decomposition, coupled_regret, telescoping_oracle
from .policies import bootstrap_stabilizer, make_policy, simulate
from .presets import preset
from .riccati import CostPair, DynamicsPair, solve_riccati

__version__ = "0.1.0"

__all__ = [
    "AdaptiveLQRError",
    "ConfigurationError",
    "CostPair",
    "DynamicsPair",
    "ExperimentConfig",
    "InstabilityError",
    "IntegrityError",
    "NoiseModel",
    "NonConvergenceError",
    "NumericalError",
    "PerturbationConfig",
    "SingularityError",
    "SystemSpec",
    "bootstrap_stabilizer",
    "closed_form_decomposition",
    "compare_policies",
    "coupled_regret",
    "make_policy",
    "preset",
    "run_experiment",
    "simulate",
    "solve_riccati",
    "telescoping_oracle",
]
