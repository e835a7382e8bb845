"""Experiment driver: workload x mode x scheduler runs producing Reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .engines import EngineSet, load_profiles
from .errors import ConfigParse
from .graph import EGraph
from .optimizer import (
    ALL_PASSES,
    OptimizerCache,
    PassId,
    chain_graph,
    chain_parallel_graph,
    compile_query,
)
from .runtime import RuntimeOptions, Simulator, Trace, SCHEDULERS
from .workflow import QueryConfig, WorkflowTemplate
from .workloads import AppKind, Query, WorkloadSpec, build_app_template, colocate, generate_workload

MODE_TEOLA = "teola"
MODE_CHAIN = "chain"
MODE_CHAIN_PARALLEL = "chain-parallel"
MODES = (MODE_TEOLA, MODE_CHAIN, MODE_CHAIN_PARALLEL)

# Deterministic graph-build cost model (ms); wall-clock timing would break
# trace reproducibility. A cache hit skips most of the optimization work.
BUILD_BASE_MS = 0.5
BUILD_PER_NODE_MS = 0.05
BUILD_CACHE_HIT_FACTOR = 0.2


def pass_set(names) -> set[PassId]:
    """Parse a pass list; accepts 'all', 'none', or explicit pass names."""
    if names in (None, "all", ["all"]):
        return set(ALL_PASSES)
    if names in ("none", [], ["none"]):
        return set()
    out = set()
    for n in names:
        if isinstance(n, PassId):
            out.add(n)
            continue
        try:
            out.add(PassId(n))
        except ValueError as exc:
            raise ConfigParse(f"unknown pass {n!r}") from exc
    return out


@dataclass
class ExperimentConfig:
    name: str = "exp"
    profiles: str = "default"
    workloads: list[WorkloadSpec] = field(default_factory=list)
    mode: str = MODE_TEOLA
    scheduler: str = "topo"
    passes: set[PassId] = field(default_factory=lambda: set(ALL_PASSES))
    seed: int = 0
    output_dir: str | None = None
    blind_timeout_ms: float = 10.0
    batch_caps: dict[str, float] = field(default_factory=dict)
    hop_ms: float = 1.0
    per_token_ms: float = 0.002

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigParse(f"unknown mode {self.mode!r}")
        if self.scheduler not in SCHEDULERS:
            raise ConfigParse(f"unknown scheduler {self.scheduler!r}")
        if not self.workloads:
            raise ConfigParse("experiment needs at least one workload")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "profiles": self.profiles,
            "workloads": [w.to_dict() for w in self.workloads],
            "mode": self.mode,
            "scheduler": self.scheduler,
            "passes": sorted(p.value for p in self.passes),
            "seed": self.seed,
            "output_dir": self.output_dir,
            "blind_timeout_ms": self.blind_timeout_ms,
            "batch_caps": self.batch_caps,
            "hop_ms": self.hop_ms,
            "per_token_ms": self.per_token_ms,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "ExperimentConfig":
        try:
            return cls(
                name=raw.get("name", "exp"),
                profiles=raw.get("profiles", "default"),
                workloads=[WorkloadSpec.from_dict(w) for w in raw.get("workloads", [])],
                mode=raw.get("mode", MODE_TEOLA),
                scheduler=raw.get("scheduler", "topo"),
                passes=pass_set(raw.get("passes", "all")),
                seed=int(raw.get("seed", 0)),
                output_dir=raw.get("output_dir"),
                blind_timeout_ms=float(raw.get("blind_timeout_ms", 10.0)),
                batch_caps={k: float(v) for k, v in raw.get("batch_caps", {}).items()},
                hop_ms=float(raw.get("hop_ms", 1.0)),
                per_token_ms=float(raw.get("per_token_ms", 0.002)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigParse(f"bad experiment config: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigParse(f"experiment config not found: {path}")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigParse(f"cannot parse {path}: {exc}") from exc


def _percentile(sorted_vals: list[float], q: float) -> float:
    if not sorted_vals:
        return 0.0
    idx = max(0, min(len(sorted_vals) - 1, int(-(-q * len(sorted_vals) // 1)) - 1))
    return sorted_vals[idx]


@dataclass
class Report:
    """Per-query latencies plus aggregates, utilization, and breakdowns."""

    config: dict
    rows: list[dict] = field(default_factory=list)
    per_app: dict[str, dict] = field(default_factory=dict)
    overall: dict = field(default_factory=dict)
    utilization: dict[str, float] = field(default_factory=dict)
    cache_stats: dict = field(default_factory=dict)

    @staticmethod
    def aggregate(rows: list[dict]) -> dict:
        lats = sorted(r["latency_ms"] for r in rows)
        n = len(lats)
        agg = {
            "count": n,
            "mean_ms": sum(lats) / n if n else 0.0,
            "p50_ms": _percentile(lats, 0.50),
            "p95_ms": _percentile(lats, 0.95),
            "p99_ms": _percentile(lats, 0.99),
        }
        for part in ("graph_build_ms", "queueing_ms", "execution_ms", "communication_ms"):
            agg[f"mean_{part}"] = sum(r[part] for r in rows) / n if n else 0.0
        return agg

    def finalize(self) -> None:
        apps = sorted({r["app_id"] for r in self.rows})
        self.per_app = {a: self.aggregate([r for r in self.rows if r["app_id"] == a]) for a in apps}
        self.overall = self.aggregate(self.rows)

    def build_share(self) -> float:
        if not self.rows or self.overall.get("mean_ms", 0) == 0:
            return 0.0
        return self.overall["mean_graph_build_ms"] / self.overall["mean_ms"]

    def mean_latency(self, app_id: str | None = None) -> float:
        if app_id is None:
            return self.overall.get("mean_ms", 0.0)
        return self.per_app[app_id]["mean_ms"]

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": self.rows,
            "per_app": self.per_app,
            "overall": self.overall,
            "utilization": self.utilization,
            "cache_stats": self.cache_stats,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Report":
        return cls(
            config=dict(raw["config"]),
            rows=[dict(r) for r in raw["rows"]],
            per_app={k: dict(v) for k, v in raw["per_app"].items()},
            overall=dict(raw["overall"]),
            utilization=dict(raw["utilization"]),
            cache_stats=dict(raw.get("cache_stats", {})),
        )

    @classmethod
    def load(cls, path: str | Path) -> "Report":
        return cls.from_dict(json.loads(Path(path).read_text()))


def build_graph_for_mode(
    mode: str,
    template: WorkflowTemplate,
    config: QueryConfig,
    profiles: EngineSet,
    passes: set[PassId],
    cache: OptimizerCache | None,
) -> tuple[EGraph, float]:
    """Build the executable graph for one query and model its build cost.

    Chain mode ignores pass toggles entirely: the sequential baseline has no
    optimizer to configure.
    """
    if mode == MODE_CHAIN:
        g = chain_graph(template, config, profiles)
        return g, BUILD_BASE_MS + BUILD_PER_NODE_MS * len(g.nodes)
    if mode == MODE_CHAIN_PARALLEL:
        g = chain_parallel_graph(template, config, profiles)
        return g, BUILD_BASE_MS + BUILD_PER_NODE_MS * len(g.nodes)
    hits_before = cache.hits if cache else 0
    g = compile_query(template, config, profiles, frozenset(passes), cache)
    cost = BUILD_BASE_MS + BUILD_PER_NODE_MS * len(g.nodes)
    if cache is not None and cache.hits > hits_before:
        cost *= BUILD_CACHE_HIT_FACTOR
    return g, cost


def critical_path_breakdown(sim: Simulator, query_id: str) -> dict[str, float]:
    """Decompose a query's end-to-end latency along its realized critical path."""
    ctx = sim.contexts[query_id]
    assert ctx.finish_ms is not None
    sink = max(ctx.stats, key=lambda n: (ctx.stats[n].complete_ms or -1, n))
    queueing = execution = communication = 0.0
    nid = sink
    while nid is not None:
        st = ctx.stats[nid]
        execution += st.complete_ms - st.first_start_ms
        queueing += st.first_start_ms - st.ready_ms
        if st.trigger_parent is not None:
            communication += st.ready_ms - st.trigger_parent_complete_ms
        nid = st.trigger_parent
    return {
        "graph_build_ms": ctx.build_ms,
        "queueing_ms": queueing,
        "execution_ms": execution,
        "communication_ms": communication,
    }


def run_experiment(cfg: ExperimentConfig) -> tuple[Report, Trace]:
    """Run one experiment deterministically; returns the report and full trace."""
    profiles = load_profiles(cfg.profiles)
    streams = []
    for i, spec in enumerate(cfg.workloads):
        seeded = WorkloadSpec(
            app=spec.app,
            app_id=spec.app_id,
            rate_qps=spec.rate_qps,
            duration_s=spec.duration_s,
            seed=spec.seed + 1_000_003 * cfg.seed + 7919 * i,
            overrides=spec.overrides,
        )
        streams.append(generate_workload(seeded))
    queries = colocate(*streams) if len(streams) > 1 else streams[0]

    templates: dict[AppKind, WorkflowTemplate] = {}
    cache = OptimizerCache()
    options = RuntimeOptions(
        scheduler=cfg.scheduler,
        hop_ms=cfg.hop_ms,
        per_token_ms=cfg.per_token_ms,
        preschedule=cfg.mode == MODE_TEOLA,
        blind_timeout_ms=cfg.blind_timeout_ms,
        batch_caps=dict(cfg.batch_caps),
    )
    sim = Simulator(profiles, options)
    for q in queries:
        template = templates.setdefault(q.app, build_app_template(q.app))
        graph, build_ms = build_graph_for_mode(
            cfg.mode, template, q.config, profiles, cfg.passes, cache
        )
        sim.submit_query(graph, q.arrival_ms + build_ms, arrival_ms=q.arrival_ms,
                         build_ms=build_ms)
    trace = sim.run()

    report = Report(config=cfg.to_dict())
    for q in queries:
        ctx = sim.contexts[q.query_id]
        assert ctx.finish_ms is not None, f"query {q.query_id} did not finish"
        parts = critical_path_breakdown(sim, q.query_id)
        row = {
            "query_id": q.query_id,
            "app_id": q.app_id,
            "app": q.app.value,
            "arrival_ms": round(q.arrival_ms, 6),
            "finish_ms": round(ctx.finish_ms, 6),
            "latency_ms": round(ctx.latency_ms, 6),
            **{k: round(v, 6) for k, v in parts.items()},
        }
        report.rows.append(row)
    report.finalize()
    report.utilization = engine_utilization(sim, trace)
    report.cache_stats = {"hits": cache.hits, "misses": cache.misses}
    return report, trace


def engine_utilization(sim: Simulator, trace: Trace) -> dict[str, float]:
    horizon = max((b.end_ms for b in trace.batches), default=0.0)
    if horizon <= 0:
        return {}
    busy: dict[str, float] = {}
    for b in trace.batches:
        busy[b.engine_id] = busy.get(b.engine_id, 0.0) + (b.end_ms - b.start_ms)
    return {
        eid: round(busy.get(eid, 0.0) / (state.profile.instances * horizon), 6)
        for eid, state in sorted(sim.engines.items())
    }


def sweep(base: ExperimentConfig, rates: list[float], modes: list[str] | None = None,
          schedulers: list[str] | None = None) -> list[tuple[dict, Report]]:
    """Grid of runs over rates x modes x schedulers; shares the base seed."""
    results = []
    for rate in rates:
        for mode in modes or [base.mode]:
            for sched in schedulers or [base.scheduler]:
                workloads = [
                    WorkloadSpec(w.app, w.app_id, rate, w.duration_s, w.seed, w.overrides)
                    for w in base.workloads
                ]
                cfg = ExperimentConfig(
                    name=f"{base.name}-r{rate}-{mode}-{sched}",
                    profiles=base.profiles,
                    workloads=workloads,
                    mode=mode,
                    scheduler=sched,
                    passes=set(base.passes),
                    seed=base.seed,
                    blind_timeout_ms=base.blind_timeout_ms,
                    batch_caps=dict(base.batch_caps),
                    hop_ms=base.hop_ms,
                    per_token_ms=base.per_token_ms,
                )
                report, _ = run_experiment(cfg)
                results.append(({"rate_qps": rate, "mode": mode, "scheduler": sched}, report))
    return results


def speedup_table(baseline: Report, candidate: Report) -> list[dict]:
    """One row per app: mean-latency ratio of baseline over candidate."""
    rows = []
    apps = sorted(set(baseline.per_app) | set(candidate.per_app))
    for app in apps:
        b = baseline.per_app.get(app, {}).get("mean_ms")
        c = candidate.per_app.get(app, {}).get("mean_ms")
        if b and c:
            rows.append({
                "app_id": app,
                "baseline_mean_ms": round(b, 3),
                "candidate_mean_ms": round(c, 3),
                "speedup": round(b / c, 4),
            })
    if baseline.overall.get("mean_ms") and candidate.overall.get("mean_ms"):
        rows.append({
            "app_id": "overall",
            "baseline_mean_ms": round(baseline.overall["mean_ms"], 3),
            "candidate_mean_ms": round(candidate.overall["mean_ms"], 3),
            "speedup": round(baseline.overall["mean_ms"] / candidate.overall["mean_ms"], 4),
        })
    return rows
