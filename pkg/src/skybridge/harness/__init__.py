from .metrics import EmptyInput, MetricsReport, RequestRecord, compute_sd, emit_report
from .network import NetworkModel, NetworkSegment, SimLink
from .scenario import Scenario, ScenarioError, SimCloud, load_scenario, run_scenario, run_sd_comparison
from .vtime import VirtualTimeLoop, run_virtual

__all__ = [
    "EmptyInput", "MetricsReport", "RequestRecord", "compute_sd", "emit_report",
    "NetworkModel", "NetworkSegment", "SimLink",
    "Scenario", "ScenarioError", "SimCloud", "load_scenario", "run_scenario",
    "run_sd_comparison", "VirtualTimeLoop", "run_virtual",
]
