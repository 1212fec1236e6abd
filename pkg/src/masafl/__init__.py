"""Deterministic federated-learning simulator: backdoor attacks, robust
aggregators, and an unlearning-based filtering defense."""

__version__ = "0.1.0"

from .attacks import AttackSpec, TrainConfig
from .data import Dataset, LabeledExample, PoisonSpec, TriggerSpec, gen_synthetic, plus_trigger
from .defenses import AggregationOutcome
from .harness import ExperimentConfig, ExperimentReport, RoundReport, run_experiment
from .masa import MasaConfig, masa_aggregate, mds
from .nn import ModelState, OptimizerState, init_model

__all__ = [
    "__version__",
    "AttackSpec",
    "TrainConfig",
    "Dataset",
    "LabeledExample",
    "PoisonSpec",
    "TriggerSpec",
    "gen_synthetic",
    "plus_trigger",
    "AggregationOutcome",
    "ExperimentConfig",
    "ExperimentReport",
    "RoundReport",
    "run_experiment",
    "MasaConfig",
    "masa_aggregate",
    "mds",
    "ModelState",
    "OptimizerState",
    "init_model",
]
