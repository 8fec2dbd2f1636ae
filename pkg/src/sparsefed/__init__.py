"""Desk-scale simulator for personalized federated learning with per-client
sparse subnetworks, including dynamic and static mask search, dense and
compressed baselines, and exact communication/compute accounting."""

from .config import ExperimentConfig, load_config
from .engine import run_experiment
from .masks import LayerLayout, Mask, PruneSchedule

__all__ = ["ExperimentConfig", "load_config", "run_experiment",
           "LayerLayout", "Mask", "PruneSchedule"]
__version__ = "0.1.0"
