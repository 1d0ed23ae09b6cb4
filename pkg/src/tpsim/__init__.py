"""Trace-driven simulator and policy library for tiered-SLO serving clusters
with adaptive tensor-parallelism reconfiguration."""

from .engine import CompletionRecord, EngineConfig, RunResult, Simulator, run
from .metrics import MetricsReport, compare, goodput, percentile
from .migration import (
    CostModelParams,
    KvLayout,
    MigrationPlan,
    latency_aggregate,
    latency_per_page,
    latency_pipelined,
    plan_repartition,
    switch_cost,
    weight_memory,
)
from .policy import (
    ClusterConfig,
    ConfigCandidate,
    DynamicPolicy,
    Group,
    OraclePolicy,
    StaticPolicy,
    assign_pool,
    balance_stages,
    enumerate_candidates,
    goodput_efficiency,
    make_envelopes,
    plan_window,
    weighted_score,
)
from .profile import (
    PerfProfile,
    ThroughputEnvelope,
    bundled_profile,
    derive_envelope,
    derive_slos,
    load_profile,
    lookup_latency,
    save_profile,
)
from .trace import (
    Request,
    SloTier,
    SyntheticSpec,
    TierDemand,
    generate_trace,
    load_trace,
    observe_demand,
    save_trace,
)

__version__ = "0.1.0"
