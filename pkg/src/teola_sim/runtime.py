"""Two-tier runtime: per-query graph scheduling over per-engine batch schedulers.

The graph tier tracks in-degrees and an object store per query, dispatching
primitive nodes to engine queues as their inputs arrive. Each engine scheduler
forms batches from its queue with one of three policies (topology-aware, blind
per-invocation, blind throughput-oriented) and runs them on non-preemptive
instances. Everything is driven by a deterministic discrete-event loop over a
virtual millisecond clock.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .engines import (
    EngineInstance,
    EngineProfile,
    EngineSet,
    decode_step_ms,
    effective_prefill_tokens,
    latency,
    node_request_loads,
    select_instance,
)
from .errors import CapacityExceeded, DuplicateQueryId, NonQuiescent, UnknownNode
from .graph import (
    CONTROL_KINDS,
    DECODE_KINDS,
    PREFILL_KINDS,
    EGraph,
    Edge,
    Payload,
    PrimitiveKind,
    PrimitiveNode,
)

SCHEDULER_TOPO = "topo"
SCHEDULER_BLIND_PO = "blind-po"
SCHEDULER_BLIND_TO = "blind-to"
SCHEDULERS = (SCHEDULER_TOPO, SCHEDULER_BLIND_PO, SCHEDULER_BLIND_TO)

ORCHESTRATOR = "orchestrator"

PHASE_PREFILL = "prefill"
PHASE_DECODE = "decode"
PHASE_GENERAL = "general"


def node_phase(kind: PrimitiveKind) -> str:
    if kind in PREFILL_KINDS:
        return PHASE_PREFILL
    if kind in DECODE_KINDS:
        return PHASE_DECODE
    return PHASE_GENERAL


@dataclass
class RuntimeOptions:
    scheduler: str = SCHEDULER_TOPO
    hop_ms: float = 1.0
    per_token_ms: float = 0.002
    preschedule: bool = True
    preschedule_threshold_tokens: float = 4096.0
    blind_timeout_ms: float = 10.0
    # Per-engine batch cap in the engine's load unit; defaults to max_slots.
    batch_caps: dict[str, float] = field(default_factory=dict)
    max_events: int = 2_000_000


class TraceEvent(NamedTuple):
    timestamp_ms: float
    query_id: str
    node_id: str
    kind: str
    engine: str
    event: str  # enqueue | batch | start | complete


@dataclass
class BatchRecord:
    engine_id: str
    instance_id: int
    start_ms: float
    end_ms: float
    load: float
    cap: float
    phase: str
    node_ids: tuple[str, ...]


@dataclass
class NodeStat:
    ready_ms: float | None = None
    first_start_ms: float | None = None
    complete_ms: float | None = None
    trigger_parent: str | None = None
    trigger_parent_complete_ms: float | None = None


@dataclass
class Trace:
    events: list[TraceEvent] = field(default_factory=list)
    batches: list[BatchRecord] = field(default_factory=list)

    def rows(self) -> list[tuple]:
        return [tuple(e) for e in self.events]

    def for_query(self, query_id: str) -> list[TraceEvent]:
        return [e for e in self.events if e.query_id == query_id]

    def completions(self) -> dict[tuple[str, str], float]:
        return {
            (e.query_id, e.node_id): e.timestamp_ms
            for e in self.events
            if e.event == "complete"
        }


@dataclass
class QueryContext:
    query_id: str
    graph: EGraph
    arrival_ms: float
    build_ms: float = 0.0
    submit_ms: float = 0.0
    finish_ms: float | None = None
    indeg: dict[str, int] = field(default_factory=dict)
    # in-degree net of completed parents, ignoring transfer delays; used to
    # answer "which children did this completion unblock"
    logical_indeg: dict[str, int] = field(default_factory=dict)
    store: dict[tuple[str, str], Payload] = field(default_factory=dict)
    stats: dict[str, NodeStat] = field(default_factory=dict)
    remaining: int = 0

    @property
    def latency_ms(self) -> float | None:
        if self.finish_ms is None:
            return None
        return self.finish_ms - self.arrival_ms


@dataclass
class NodeTask:
    """A primitive node pending at an engine queue, with its request bundle."""

    ctx: QueryContext
    node: PrimitiveNode
    arrival_ms: float
    seq: int
    loads: list[float] = field(default_factory=list)
    next_request: int = 0
    remaining_complete: int = 0

    @property
    def node_id(self) -> str:
        return self.node.node_id

    @property
    def depth(self) -> int:
        return self.ctx.graph.depth.get(self.node.node_id, 0)

    @property
    def phase(self) -> str:
        return node_phase(self.node.kind)

    def pending(self) -> int:
        return len(self.loads) - self.next_request

    def peek_loads(self) -> list[float]:
        return self.loads[self.next_request:]


@dataclass
class BatchPlan:
    entries: list[tuple[NodeTask, int]] = field(default_factory=list)
    load: float = 0.0
    phase: str = PHASE_GENERAL

    def __bool__(self) -> bool:
        return bool(self.entries)

    def node_ids(self) -> tuple[str, ...]:
        return tuple(t.node_id for t, _ in self.entries)


def _take_from_task(task: NodeTask, budget: float, batch_empty: bool) -> tuple[int, float]:
    """How many of the task's next requests fit in the remaining budget.

    A single request larger than the whole cap is admitted alone so oversized
    prompts cannot deadlock the queue.
    """
    count = 0
    load = 0.0
    for req in task.peek_loads():
        fits = load + req <= budget + 1e-9
        if not fits and not (batch_empty and count == 0):
            break
        count += 1
        load += req
        if not fits:
            break
    return count, load


def form_batch_topo(queue: list[NodeTask], max_slots: float, now: float) -> BatchPlan:
    """Topology-aware batch formation.

    Tasks are bucketed per query, buckets ordered by their earliest arrival;
    each pass over the buckets pops requests from the nodes tied at each
    bucket's current maximum depth, and passes repeat while slots remain.
    """
    plan = BatchPlan()
    live = [t for t in queue if t.pending() > 0]
    if not live:
        return plan
    anchor = _topo_anchor(live)
    plan.phase = anchor.phase
    live = [t for t in live if t.phase == plan.phase]
    taken: dict[int, int] = {}

    while plan.load < max_slots - 1e-9:
        remaining = [t for t in live if t.pending() - taken.get(id(t), 0) > 0]
        if not remaining:
            break
        buckets: dict[str, list[NodeTask]] = {}
        for t in remaining:
            buckets.setdefault(t.ctx.query_id, []).append(t)
        ordered = sorted(
            buckets.values(), key=lambda ts: (min(t.arrival_ms for t in ts), ts[0].ctx.query_id)
        )
        progressed = False
        for bucket in ordered:
            budget = max_slots - plan.load
            if budget <= 1e-9:
                break
            dmax = max(t.depth for t in bucket)
            for task in sorted((t for t in bucket if t.depth == dmax), key=lambda t: t.node_id):
                budget = max_slots - plan.load
                if budget <= 1e-9:
                    break
                offset = taken.get(id(task), 0)
                loads = task.peek_loads()[offset:]
                count = 0
                load = 0.0
                for req in loads:
                    if plan.load + load + req > max_slots + 1e-9 and (plan.entries or count > 0):
                        break
                    count += 1
                    load += req
                if count:
                    plan.entries.append((task, count))
                    plan.load += load
                    taken[id(task)] = offset + count
                    progressed = True
        if not progressed:
            break
    _merge_plan_entries(plan)
    return plan


def _topo_anchor(tasks: list[NodeTask]) -> NodeTask:
    """Highest-depth node of the earliest-arriving bucket sets the batch phase."""
    buckets: dict[str, list[NodeTask]] = {}
    for t in tasks:
        buckets.setdefault(t.ctx.query_id, []).append(t)
    first = min(buckets.values(), key=lambda ts: (min(t.arrival_ms for t in ts), ts[0].ctx.query_id))
    return sorted(first, key=lambda t: (-t.depth, t.node_id))[0]


def _merge_plan_entries(plan: BatchPlan) -> None:
    merged: dict[int, list] = {}
    order = []
    for task, count in plan.entries:
        if id(task) not in merged:
            merged[id(task)] = [task, 0]
            order.append(id(task))
        merged[id(task)][1] += count
    plan.entries = [(merged[k][0], merged[k][1]) for k in order]


def form_batch_blind(
    queue: list[NodeTask],
    max_bs: float,
    timeout_ms: float,
    now: float,
    bundle_mode: bool = False,
) -> tuple[BatchPlan, float | None]:
    """FIFO batch formation.

    Throughput-oriented mode fills the cap across invocations and dispatches
    when full, otherwise waits for the oldest entry to hit the timeout.
    Per-invocation mode (``bundle_mode``) dispatches one node's bundle at a
    time without mixing and never waits. Returns (plan, wake_at).
    """
    plan = BatchPlan()
    live = sorted((t for t in queue if t.pending() > 0), key=lambda t: (t.arrival_ms, t.seq))
    if not live:
        return plan, None
    head = live[0]
    plan.phase = head.phase

    if bundle_mode:
        count, load = _take_from_task(head, max_bs, batch_empty=True)
        if count:
            plan.entries.append((head, count))
            plan.load = load
        return plan, None

    leftovers = False
    for task in live:
        if task.phase != plan.phase:
            continue
        budget = max_bs - plan.load
        if budget <= 1e-9:
            leftovers = True
            break
        count = 0
        load = 0.0
        for req in task.peek_loads():
            if plan.load + load + req > max_bs + 1e-9 and (plan.entries or count > 0):
                leftovers = True
                break
            count += 1
            load += req
        if count:
            plan.entries.append((task, count))
            plan.load += load
        if task.pending() > count:
            leftovers = True

    full = leftovers or plan.load >= max_bs - 1e-9
    if full:
        return plan, None
    if now - head.arrival_ms >= timeout_ms - 1e-9:
        return plan, None
    return BatchPlan(phase=plan.phase), head.arrival_ms + timeout_ms


@dataclass
class _EngineState:
    profile: EngineProfile
    instances: list[EngineInstance]
    queue: list[NodeTask] = field(default_factory=list)
    timer_at: float | None = None


class Simulator:
    """Deterministic event-driven execution of submitted e-graphs."""

    def __init__(self, engines: EngineSet, options: RuntimeOptions | None = None):
        self.options = options or RuntimeOptions()
        if self.options.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.options.scheduler!r}")
        self.engines: dict[str, _EngineState] = {
            eid: _EngineState(p, [EngineInstance(i) for i in range(p.instances)])
            for eid, p in engines.items()
        }
        self.contexts: dict[str, QueryContext] = {}
        self.trace = Trace()
        self.now = 0.0
        self._events: list[tuple[float, int, int, tuple]] = []
        self._seq = itertools.count()
        self._dirty: set[str] = set()
        self._preschedule_records: list[tuple[str, str, str, str]] = []

    # -- event plumbing ------------------------------------------------------

    _DELIVER, _REQ_DONE, _BATCH_DONE, _TIMER, _SUBMIT = range(5)

    def _push(self, t: float, tag: int, payload: tuple) -> None:
        heapq.heappush(self._events, (t, next(self._seq), tag, payload))

    def _emit(self, ts, ctx, node, event, engine=None) -> None:
        self.trace.events.append(
            TraceEvent(
                round(ts, 6),
                ctx.query_id,
                node.node_id,
                node.kind.value,
                engine if engine is not None else (node.meta.engine_id or ORCHESTRATOR),
                event,
            )
        )

    # -- public API ----------------------------------------------------------

    def submit_query(self, graph: EGraph, now: float, arrival_ms: float | None = None,
                     build_ms: float = 0.0) -> QueryContext:
        if graph.query_id in self.contexts:
            raise DuplicateQueryId(f"query {graph.query_id!r} already submitted")
        self._push(now, self._SUBMIT, (graph, arrival_ms if arrival_ms is not None else now, build_ms))
        return self._register(graph, now, arrival_ms if arrival_ms is not None else now, build_ms)

    def _register(self, graph, submit_ms, arrival_ms, build_ms) -> QueryContext:
        ctx = QueryContext(
            query_id=graph.query_id,
            graph=graph,
            arrival_ms=arrival_ms,
            build_ms=build_ms,
            submit_ms=submit_ms,
            remaining=len(graph.nodes),
        )
        ctx.indeg = {n: 0 for n in graph.nodes}
        for e in graph.edges:
            ctx.indeg[e.dst] += 1
        ctx.logical_indeg = dict(ctx.indeg)
        ctx.stats = {n: NodeStat() for n in graph.nodes}
        self.contexts[graph.query_id] = ctx
        if self.options.preschedule:
            for e in graph.edges:
                record = self.preschedule(ctx, e)
                if record is not None:
                    self._preschedule_records.append(record)
        return ctx

    def preschedule(self, ctx: QueryContext, e: Edge) -> tuple[str, str, str, str] | None:
        """Pre-dispatch record for an adjacent pair whose output travels
        straight to the child's engine, skipping the scheduler relay."""
        if not self._prescheduled(ctx.graph, e):
            return None
        dst_engine = ctx.graph.nodes[e.dst].meta.engine_id or ORCHESTRATOR
        return (ctx.query_id, e.src, e.dst, dst_engine)

    def preschedule_records(self) -> list[tuple[str, str, str, str]]:
        return list(self._preschedule_records)

    def _prescheduled(self, graph: EGraph, e: Edge) -> bool:
        src, dst = graph.nodes[e.src], graph.nodes[e.dst]
        if src.kind in CONTROL_KINDS or dst.kind in CONTROL_KINDS:
            return True  # control nodes live on the orchestrator: single hop
        if src.meta.engine_id and src.meta.engine_id == dst.meta.engine_id:
            return True
        payload = src.meta.outputs.get(e.key) if e.key else None
        return bool(payload and payload.tokens >= self.options.preschedule_threshold_tokens)

    def _hops(self, graph: EGraph, e: Edge) -> int:
        return 1 if (self.options.preschedule and self._prescheduled(graph, e)) else 2

    def _edge_delay(self, graph: EGraph, e: Edge) -> float:
        src, dst = graph.nodes[e.src], graph.nodes[e.dst]
        # A partial-decode continuation never leaves the instance: no transfer.
        if (
            src.kind is PrimitiveKind.PARTIAL_DECODING
            and dst.kind is PrimitiveKind.PARTIAL_DECODING
            and src.meta.engine_id == dst.meta.engine_id
        ):
            return 0.0
        payload = src.meta.outputs.get(e.key, Payload(0, 0)) if e.key else Payload(0, 0)
        return self._hops(graph, e) * (
            self.options.hop_ms + payload.tokens * self.options.per_token_ms
        )

    def on_primitive_complete(self, ctx: QueryContext, node_id: str, now: float) -> list[str]:
        """Record outputs, decrement child in-degrees, return newly-ready nodes."""
        if node_id not in ctx.graph.nodes:
            raise UnknownNode(f"{node_id!r} is not part of query {ctx.query_id!r}")
        node = ctx.graph.nodes[node_id]
        for key, payload in node.meta.outputs.items():
            ctx.store[(node_id, key)] = payload
        stat = ctx.stats[node_id]
        stat.complete_ms = now
        self._emit(now, ctx, node, "complete")
        ctx.remaining -= 1
        if ctx.remaining == 0:
            ctx.finish_ms = now
        ready = []
        for e in ctx.graph.edges:
            if e.src != node_id:
                continue
            ctx.logical_indeg[e.dst] -= 1
            if ctx.logical_indeg[e.dst] == 0:
                ready.append(e.dst)
            self._push(now + self._edge_delay(ctx.graph, e), self._DELIVER, (ctx.query_id, e))
        return sorted(ready)

    def run(self, until: float | None = None) -> Trace:
        """Process events in (timestamp, sequence) order until quiescent."""
        processed = 0
        while self._events:
            t = self._events[0][0]
            if until is not None and t > until:
                break
            self.now = t
            while self._events and self._events[0][0] <= t + 1e-12:
                _, _, tag, payload = heapq.heappop(self._events)
                processed += 1
                if processed > self.options.max_events:
                    raise NonQuiescent(f"exceeded {self.options.max_events} events")
                self._handle(tag, payload, t)
            for eid in sorted(self._dirty):
                self._try_form(eid, t)
            self._dirty.clear()
        return self.trace

    # -- event handlers ------------------------------------------------------

    def _handle(self, tag: int, payload: tuple, t: float) -> None:
        if tag == self._SUBMIT:
            graph, _, _ = payload
            ctx = self.contexts[graph.query_id]
            for nid in sorted(ctx.graph.nodes):
                if ctx.indeg[nid] == 0:
                    self._node_ready(ctx, nid, t)
        elif tag == self._DELIVER:
            qid, e = payload
            ctx = self.contexts[qid]
            stat = ctx.stats[e.dst]
            src_complete = ctx.stats[e.src].complete_ms
            if stat.ready_ms is None or t >= stat.ready_ms:
                stat.ready_ms = t
                stat.trigger_parent = e.src
                stat.trigger_parent_complete_ms = src_complete
            ctx.indeg[e.dst] -= 1
            if ctx.indeg[e.dst] == 0:
                self._node_ready(ctx, e.dst, t)
        elif tag == self._REQ_DONE:
            task, count = payload
            task.remaining_complete -= count
            if task.remaining_complete == 0:
                self.on_primitive_complete(task.ctx, task.node_id, t)
        elif tag == self._BATCH_DONE:
            eid, instance_id, kv = payload
            state = self.engines[eid]
            state.instances[instance_id].kv_occupied -= kv
            self._dirty.add(eid)
        elif tag == self._TIMER:
            eid = payload[0]
            self.engines[eid].timer_at = None
            self._dirty.add(eid)

    def _node_ready(self, ctx: QueryContext, nid: str, t: float) -> None:
        node = ctx.graph.nodes[nid]
        stat = ctx.stats[nid]
        if stat.ready_ms is None:
            stat.ready_ms = t
        for e in ctx.graph.edges:
            if e.dst == nid and e.key is not None:
                assert (e.src, e.key) in ctx.store, (
                    f"{nid} dispatched before input {e.key!r} from {e.src} materialized"
                )
        if node.kind in CONTROL_KINDS:
            self._emit(t, ctx, node, "enqueue", ORCHESTRATOR)
            stat.first_start_ms = t
            self._emit(t, ctx, node, "start", ORCHESTRATOR)
            self.on_primitive_complete(ctx, nid, t)
            return
        eid = node.meta.engine_id
        state = self.engines[eid]
        task = NodeTask(
            ctx=ctx,
            node=node,
            arrival_ms=t,
            seq=next(self._seq),
            loads=node_request_loads(node, state.profile),
        )
        task.remaining_complete = len(task.loads)
        state.queue.append(task)
        self._emit(t, ctx, node, "enqueue")
        self._dirty.add(eid)

    # -- engine scheduling ----------------------------------------------------

    def _cap(self, state: _EngineState) -> float:
        return self.options.batch_caps.get(state.profile.engine_id, state.profile.max_slots)

    def _try_form(self, eid: str, t: float) -> None:
        state = self.engines[eid]
        while True:
            if not any(i.idle(t) for i in state.instances):
                return
            cap = self._cap(state)
            wake = None
            if self.options.scheduler == SCHEDULER_TOPO:
                plan = form_batch_topo(state.queue, cap, t)
            else:
                plan, wake = form_batch_blind(
                    state.queue,
                    cap,
                    self.options.blind_timeout_ms,
                    t,
                    bundle_mode=self.options.scheduler == SCHEDULER_BLIND_PO,
                )
            if not plan:
                if wake is not None and (state.timer_at is None or wake < state.timer_at - 1e-9):
                    state.timer_at = wake
                    self._push(wake, self._TIMER, (eid,))
                return
            self._dispatch(state, plan, t)

    def _dispatch(self, state: _EngineState, plan: BatchPlan, t: float) -> None:
        profile = state.profile
        instance = select_instance(state.instances, profile.category, t)
        assert instance is not None
        duration, completions, kv = self._execute(profile, plan, t)
        instance.busy_until = t + duration
        instance.kv_occupied += kv
        instance.executed_requests += sum(c for _, c in plan.entries)

        for task, count in plan.entries:
            task.next_request += count
            self._emit(t, task.ctx, task.node, "batch")
            if task.ctx.stats[task.node_id].first_start_ms is None:
                task.ctx.stats[task.node_id].first_start_ms = t
                self._emit(t, task.ctx, task.node, "start")
        state.queue = [task for task in state.queue if task.pending() > 0]
        for task, count, done_at in completions:
            self._push(done_at, self._REQ_DONE, (task, count))
        self._push(t + duration, self._BATCH_DONE, (profile.engine_id, instance.instance_id, kv))
        self.trace.batches.append(
            BatchRecord(
                profile.engine_id,
                instance.instance_id,
                t,
                t + duration,
                plan.load,
                self._cap(state),
                plan.phase,
                plan.node_ids(),
            )
        )

    def _execute(self, profile: EngineProfile, plan: BatchPlan, t: float):
        """Timing for one batch; returns (duration, per-task completions, kv load)."""
        if not plan.entries:
            raise CapacityExceeded("empty batch")
        total = plan.load
        kv = total if profile.category == "llm" else 0.0
        completions = []
        if plan.phase == PHASE_DECODE:
            step = decode_step_ms(profile, total)
            duration = 0.0
            for task, count in plan.entries:
                done = t + task.node.meta.decode_tokens * step
                duration = max(duration, task.node.meta.decode_tokens * step)
                completions.append((task, count, done))
        elif plan.phase == PHASE_PREFILL:
            base = latency(profile, total)
            weighted = 0.0
            for task, count in plan.entries:
                eps = (
                    profile.epsilon
                    if task.node.kind
                    in (PrimitiveKind.PARTIAL_PREFILLING, PrimitiveKind.FULL_PREFILLING)
                    else 1.0
                )
                share = effective_prefill_tokens(task.node) / task.node.meta.batch_items * count
                weighted += eps * share
            duration = base * (weighted / total if total > 0 else 1.0)
            completions = [(task, count, t + duration) for task, count in plan.entries]
        else:
            duration = latency(profile, total)
            completions = [(task, count, t + duration) for task, count in plan.entries]
        return duration, completions, kv


def run_queries(
    engines: EngineSet,
    submissions: Iterable[tuple[EGraph, float, float]],
    options: RuntimeOptions | None = None,
) -> tuple[Simulator, Trace]:
    """Submit (graph, arrival_ms, build_ms) triples and run to quiescence."""
    sim = Simulator(engines, options)
    for graph, arrival, build in submissions:
        sim.submit_query(graph, arrival + build, arrival_ms=arrival, build_ms=build)
    trace = sim.run()
    return sim, trace
