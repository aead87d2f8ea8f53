"""Latency-map segmentation of edge-computing users, with a tick-based simulator.

Pipeline: measure latencies, embed devices and users in a 2-D latency map,
split users by mobility, cluster each layer, and place tasks on the devices
of the user's subspace.
"""

from .engine import MetricsReport, SimulationError, run, simulate
from .model import (ClusteringMode, ExperimentConfig, InvalidConfig, PlacementMetric, Policy,
                    load_config, validate_config)

__all__ = ["ClusteringMode", "ExperimentConfig", "InvalidConfig", "MetricsReport", "PlacementMetric", "Policy",
           "SimulationError", "load_config", "run", "simulate", "validate_config"]
__version__ = "0.1.0"
