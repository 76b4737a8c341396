"""Throughput and timeout probability of TCP NewReno over ON/OFF channels."""

__version__ = "0.1.0"

from .chain import (  # noqa: E402
    PerfMetrics,
    StationaryDistribution,
    analyze_flow,
    build_chain,
    build_joint,
    metrics_per_flow,
    prob_timeout,
    solve_stationary,
    throughput,
)
from .channel import (  # noqa: E402
    ChannelGenerator,
    DurationDistribution,
    PhaseTypeRepresentation,
    assemble_generator,
    closed_form_kernel,
    make_phase_type,
    off_fraction,
    uniformized_kernel,
)
from .tcp import CwndState, TcpParams  # noqa: E402

__all__ = [
    "ChannelGenerator",
    "CwndState",
    "DurationDistribution",
    "PerfMetrics",
    "PhaseTypeRepresentation",
    "StationaryDistribution",
    "TcpParams",
    "analyze_flow",
    "assemble_generator",
    "build_chain",
    "build_joint",
    "closed_form_kernel",
    "make_phase_type",
    "metrics_per_flow",
    "off_fraction",
    "prob_timeout",
    "solve_stationary",
    "throughput",
    "uniformized_kernel",
]
