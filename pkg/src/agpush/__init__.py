"""Asynchronous gradient-push and perturbed push-sum over directed graphs with delays."""

from .agp import AgpRun, StepSizePolicy, agent_pseudocode_run, run_agp, step_size
from .analysis import bias_report, rate_diagnostics, reweighted_minimizer, reweighted_weights
from .objectives import LeastSquaresObjective, LogisticObjective, QuadraticObjective
from .pushsum import run_pushsum
from .runtime import reconstruct_schedule, run_threaded
from .schedule import RateRatio, Schedule, generate_schedule, verify_bounds
from .topology import (
    ReferenceGraph,
    augment,
    build_consensus_matrix,
    build_reference_graph,
    complete_graph,
    fig1_graph,
    ring_graph,
)

__version__ = "0.1.0"

__all__ = [
    "AgpRun",
    "LeastSquaresObjective",
    "LogisticObjective",
    "QuadraticObjective",
    "RateRatio",
    "ReferenceGraph",
    "Schedule",
    "StepSizePolicy",
    "agent_pseudocode_run",
    "augment",
    "bias_report",
    "build_consensus_matrix",
    "build_reference_graph",
    "complete_graph",
    "fig1_graph",
    "generate_schedule",
    "rate_diagnostics",
    "reconstruct_schedule",
    "reweighted_minimizer",
    "reweighted_weights",
    "ring_graph",
    "run_agp",
    "run_pushsum",
    "run_threaded",
    "step_size",
    "verify_bounds",
]
