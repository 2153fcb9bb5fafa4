"""streamload: open-loop load generation and latency profiling for
token-streaming inference servers, with a client queueing model and a
zero-delay mock server for measuring the client's own overhead."""

__version__ = "0.1.0"

from .engine import (
    ClientCalibration,
    EngineConfig,
    FidelityReport,
    StageResult,
    auto_size,
    calibrate_client,
    run_closed_loop,
    run_stage,
)
from .metrics import (
    NtpotDecomposition,
    RequestRecord,
    StageSummary,
    aggregate,
    itl,
    ntpot,
    ntpot_decomposed,
    tpot,
    ttft,
)
from .mockserver import MockBehavior, MockServerHandle, serve
from .profile import LatencyProfile, build_profile, detect_saturation, emit_report
from .queueing import (
    QueueModelParams,
    ServiceDistribution,
    min_workers,
    partitioned_utilization,
    pk_wait,
    simulate_mg1,
    utilization,
)
from .schedule import ArrivalSchedule, SweepPlan, build_sweep, constant_schedule, poisson_schedule
from .workload import PromptInstance, WorkloadSpec, load_dataset, prefixed_prompts, synth_prompt

__all__ = [
    "__version__",
    "ArrivalSchedule",
    "ClientCalibration",
    "EngineConfig",
    "FidelityReport",
    "LatencyProfile",
    "MockBehavior",
    "MockServerHandle",
    "NtpotDecomposition",
    "PromptInstance",
    "QueueModelParams",
    "RequestRecord",
    "ServiceDistribution",
    "StageResult",
    "StageSummary",
    "SweepPlan",
    "WorkloadSpec",
    "aggregate",
    "auto_size",
    "build_profile",
    "build_sweep",
    "calibrate_client",
    "constant_schedule",
    "detect_saturation",
    "emit_report",
    "itl",
    "load_dataset",
    "min_workers",
    "ntpot",
    "ntpot_decomposed",
    "partitioned_utilization",
    "pk_wait",
    "poisson_schedule",
    "prefixed_prompts",
    "run_closed_loop",
    "run_stage",
    "serve",
    "simulate_mg1",
    "synth_prompt",
    "tpot",
    "ttft",
    "utilization",
]
