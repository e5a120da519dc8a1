"""Closed-loop traffic simulation: IDM background agents, the
collision-avoidance planner, scenario suites, scoring, and benchmark
glue."""

from .idm import EMERGENCY_DECEL, IdmParams, idm_accel
from .world import Vehicle, World
from .planner import (CANDIDATE_ACCELS, PlanResult, SimConfig,
                      collision_check, footprint_discs, plan,
                      protection_time, protection_time_dtheta,
                      protection_time_dv)
from .closedloop import (AV_VID, ModelSim, OracleSim, RouteTask, Scenario,
                         ScenarioTrace, read_trace, run_scenario,
                         write_trace)
from .scoring import SimMetrics, contact_events, score_scenario
from .scenarios import (occlusion_suite, platoon_min_gap, platoon_world,
                        scenario_lanes, standard_suite)
from .benchmark import (BENCHMARK_COLUMNS, BenchmarkRow, aggregate,
                        read_benchmark_csv, run_benchmark,
                        write_benchmark_csv)

__all__ = [
    "IdmParams", "idm_accel", "EMERGENCY_DECEL", "Vehicle", "World",
    "SimConfig", "PlanResult", "CANDIDATE_ACCELS", "plan",
    "collision_check", "footprint_discs", "protection_time",
    "protection_time_dv", "protection_time_dtheta",
    "AV_VID", "RouteTask", "Scenario", "ScenarioTrace", "run_scenario",
    "OracleSim", "ModelSim", "write_trace", "read_trace",
    "SimMetrics", "score_scenario", "contact_events",
    "standard_suite", "occlusion_suite", "scenario_lanes",
    "platoon_world", "platoon_min_gap",
    "BenchmarkRow", "BENCHMARK_COLUMNS", "run_benchmark", "aggregate",
    "write_benchmark_csv", "read_benchmark_csv",
]
