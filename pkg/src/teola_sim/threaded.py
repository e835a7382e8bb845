"""Threaded execution mode.

Same scheduling contract as the simulated mode, realized with real threads:
one context per query delivering readiness, one scheduler thread per engine
forming batches under a lock, and latencies served as scaled sleeps. Useful
as a liveness/integration exercise of the shared policy code; timing is
approximate and nothing here is used by the acceptance suite, which runs the
deterministic simulator only.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from .engines import EngineSet, latency, decode_step_ms, node_request_loads
from .graph import CONTROL_KINDS, EGraph
from .runtime import (
    NodeTask,
    PHASE_DECODE,
    QueryContext,
    RuntimeOptions,
    Trace,
    TraceEvent,
    form_batch_blind,
    form_batch_topo,
    SCHEDULER_TOPO,
    SCHEDULER_BLIND_PO,
)


@dataclass
class _Engine:
    profile: object
    queue: list = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)
    wake: threading.Condition = None

    def __post_init__(self):
        self.wake = threading.Condition(self.lock)


class ThreadedRuntime:
    """Executes e-graphs on threads; clock is wall time divided by ``speed``."""

    def __init__(self, engines: EngineSet, options: RuntimeOptions | None = None,
                 speed: float = 200.0):
        self.options = options or RuntimeOptions()
        self.speed = speed
        self.engines = {eid: _Engine(p) for eid, p in engines.items()}
        self.contexts: dict[str, QueryContext] = {}
        self.trace = Trace()
        self._trace_lock = threading.Lock()
        self._stop = False
        self._threads: list[threading.Thread] = []
        self._t0 = time.monotonic()
        self._seq = 0
        self._done = threading.Event()
        self._pending = 0
        self._pending_lock = threading.Lock()

    def _now(self) -> float:
        return (time.monotonic() - self._t0) * 1000.0 * self.speed

    def _emit(self, ctx, node, event):
        with self._trace_lock:
            self.trace.events.append(
                TraceEvent(round(self._now(), 3), ctx.query_id, node.node_id,
                           node.kind.value, node.meta.engine_id or "orchestrator", event)
            )

    def submit(self, graph: EGraph) -> QueryContext:
        ctx = QueryContext(query_id=graph.query_id, graph=graph, arrival_ms=self._now(),
                           remaining=len(graph.nodes))
        ctx.indeg = {n: 0 for n in graph.nodes}
        for e in graph.edges:
            ctx.indeg[e.dst] += 1
        ctx.lock = threading.Lock()  # type: ignore[attr-defined]
        self.contexts[graph.query_id] = ctx
        with self._pending_lock:
            self._pending += len(graph.nodes)
        for nid in sorted(graph.nodes):
            if ctx.indeg[nid] == 0:
                self._dispatch(ctx, nid)
        return ctx

    def _dispatch(self, ctx: QueryContext, nid: str) -> None:
        node = ctx.graph.nodes[nid]
        if node.kind in CONTROL_KINDS:
            self._emit(ctx, node, "enqueue")
            self._emit(ctx, node, "complete")
            self._complete(ctx, nid)
            return
        engine = self.engines[node.meta.engine_id]
        task = NodeTask(ctx=ctx, node=node, arrival_ms=self._now(), seq=self._next_seq(),
                        loads=node_request_loads(node, engine.profile))
        task.remaining_complete = len(task.loads)
        with engine.lock:
            engine.queue.append(task)
            engine.wake.notify()
        self._emit(ctx, node, "enqueue")

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _complete(self, ctx: QueryContext, nid: str) -> None:
        node = ctx.graph.nodes[nid]
        for key, payload in node.meta.outputs.items():
            ctx.store[(nid, key)] = payload
        ready = []
        with ctx.lock:  # type: ignore[attr-defined]
            for e in ctx.graph.edges:
                if e.src != nid:
                    continue
                ctx.indeg[e.dst] -= 1
                if ctx.indeg[e.dst] == 0:
                    ready.append(e.dst)
            ctx.remaining -= 1
            if ctx.remaining == 0:
                ctx.finish_ms = self._now()
        for child in ready:
            self._dispatch(ctx, child)
        with self._pending_lock:
            self._pending -= 1
            if self._pending == 0:
                self._done.set()

    def _engine_loop(self, eid: str) -> None:
        engine = self.engines[eid]
        cap = self.options.batch_caps.get(eid, engine.profile.max_slots)
        while not self._stop:
            with engine.lock:
                if not any(t.pending() > 0 for t in engine.queue):
                    engine.wake.wait(timeout=0.01)
                    continue
                now = self._now()
                if self.options.scheduler == SCHEDULER_TOPO:
                    plan = form_batch_topo(engine.queue, cap, now)
                else:
                    plan, wake = form_batch_blind(
                        engine.queue, cap, self.options.blind_timeout_ms, now,
                        bundle_mode=self.options.scheduler == SCHEDULER_BLIND_PO)
                    if not plan and wake is not None:
                        engine.wake.wait(timeout=max(0.0, (wake - now) / 1000.0 / self.speed))
                        continue
                if not plan:
                    continue
                for task, count in plan.entries:
                    task.next_request += count
                engine.queue = [t for t in engine.queue if t.pending() > 0]
            if plan.phase == PHASE_DECODE:
                step = decode_step_ms(engine.profile, plan.load)
                duration = max(t.node.meta.decode_tokens for t, _ in plan.entries) * step
            else:
                duration = latency(engine.profile, plan.load)
            time.sleep(duration / 1000.0 / self.speed)
            for task, count in plan.entries:
                task.remaining_complete -= count
                self._emit(task.ctx, task.node, "batch")
                if task.remaining_complete == 0:
                    self._emit(task.ctx, task.node, "complete")
                    self._complete(task.ctx, task.node_id)

    def run(self, graphs: list[EGraph], timeout_s: float = 30.0) -> Trace:
        for eid in sorted(self.engines):
            th = threading.Thread(target=self._engine_loop, args=(eid,), daemon=True)
            self._threads.append(th)
            th.start()
        for g in graphs:
            self.submit(g)
        finished = self._done.wait(timeout=timeout_s)
        self._stop = True
        for engine in self.engines.values():
            with engine.lock:
                engine.wake.notify_all()
        for th in self._threads:
            th.join(timeout=1.0)
        if not finished:
            raise TimeoutError("threaded runtime did not quiesce")
        return self.trace
