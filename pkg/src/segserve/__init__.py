"""Discrete-event simulation of segmented, utility-driven LLM serving for robots."""

from .engine import Engine, EngineCostModel, GenerationState, StopRule
from .metrics import (RequestMetrics, aggregate, aggregate_log, audit_log, compute_request_metrics,
                      summarize_log)
from .scheduler import Policy, QueuedTask, Scheduler, SchedulerConfig, TaskQueue, priority
from .simcore import EventKind, EventLog, SimConfig, SimResult, Simulation, run
from .tuf import (NORMAL_TUF, URGENT_TUF, TimeUtilityFunction, eval_tuf, eval_tuf_array,
                  eval_tuf_suspended, eval_tuf_suspended_array)
from .workload import (PRESETS, WID1, WID2, WID3, ArrivalEvent, WorkloadSpec, builtin_library,
                       compose_workload)

__all__ = [
    "Engine", "EngineCostModel", "GenerationState", "StopRule",
    "RequestMetrics", "aggregate", "aggregate_log", "audit_log", "compute_request_metrics",
    "summarize_log",
    "Policy", "QueuedTask", "Scheduler", "SchedulerConfig", "TaskQueue", "priority",
    "EventKind", "EventLog", "SimConfig", "SimResult", "Simulation", "run",
    "NORMAL_TUF", "URGENT_TUF", "TimeUtilityFunction", "eval_tuf", "eval_tuf_array",
    "eval_tuf_suspended", "eval_tuf_suspended_array",
    "PRESETS", "WID1", "WID2", "WID3", "ArrivalEvent", "WorkloadSpec", "builtin_library",
    "compose_workload",
]
