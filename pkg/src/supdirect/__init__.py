"""Supervisory observer with DIRECT parameter sampling."""

from .direct import (
    Partition,
    identify_potentially_optimal,
    init_partition,
    min_distance_to_samples,
    termination_iterations,
)
from .harness import Scenario, compute_metrics, direct_static, load_scenario, run_scenario
from .supervisor import ParamBox, Supervisor, SupervisorConfig

__version__ = "0.1.0"
