"""Federated recommendation with composite (similarity + complementarity) aggregation."""

from .aggregation import AggregationSpec, compute_round_weights, solve_weights
from .config import ExperimentConfig, load_config
from .dataset import load_ratings, parse_ratings
from .federation import Federation, run_experiment, run_gap_experiment

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "ExperimentConfig",
    "Federation",
    "compute_round_weights",
    "load_config",
    "load_ratings",
    "parse_ratings",
    "run_experiment",
    "run_gap_experiment",
    "solve_weights",
]
