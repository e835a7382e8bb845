"""teola-sim: primitive-level dataflow orchestration and scheduling simulator."""

__version__ = "0.1.0"

from .graph import (  # noqa: F401
    EGraph,
    Edge,
    MetadataProfile,
    Payload,
    PGraph,
    PrimitiveKind,
    PrimitiveNode,
    assign_depths,
    topo_sort,
)
from .workflow import Component, QueryConfig, WorkflowTemplate, validate_template  # noqa: F401
from .optimizer import PassId, compile_query, optimize, transform  # noqa: F401
from .engines import EngineProfile, EngineSet, latency, max_efficient_batch  # noqa: F401
from .workloads import AppKind, WorkloadSpec, build_app_template, generate_workload  # noqa: F401
