"""Two-tier scheduler: dispatch safety, batching policies, pre-scheduling,
and the event loop."""

import random

import pytest

from teola_sim.engines import EngineProfile, EngineSet, load_profiles
from teola_sim.errors import DuplicateQueryId, UnknownNode
from teola_sim.graph import (
    BATCHABLE,
    EGraph,
    Edge,
    MetadataProfile,
    Payload,
    PGraph,
    PrimitiveKind,
    PrimitiveNode,
    assign_depths,
)
from teola_sim.optimizer import ALL_PASSES, optimize, transform
from teola_sim.runtime import (
    NodeTask,
    QueryContext,
    RuntimeOptions,
    Simulator,
    form_batch_blind,
    form_batch_topo,
    run_queries,
)
from teola_sim.scenarios import (
    EMBED_BATCH_LARGE,
    EMBED_BATCH_LARGE_TOTAL_MS,
    EMBED_BATCH_SMALL,
    EMBED_BATCH_SMALL_TOTAL_MS,
    embedding_batch_graph,
    embedding_batch_profiles,
    queue_snapshot_pair,
    queue_snapshot_profiles,
)
from teola_sim.workloads import AppKind, build_app_template, default_query_config

PROFILES = load_profiles("default")


def simple_graph(edges, items=None, engine="embed0", query_id="q0"):
    ids = sorted({x for e in edges for x in e[:2]} | set(items or {}))
    nodes = {}
    for nid in ids:
        inputs = tuple(f"{src}_out" for src, dst in edges if dst == nid)
        nodes[nid] = PrimitiveNode(nid, PrimitiveKind.EMBEDDING, MetadataProfile(
            inputs=inputs,
            outputs={f"{nid}_out": Payload(1, 8)},
            engine_id=engine,
            batch_items=(items or {}).get(nid, 1),
            annotations=frozenset({BATCHABLE}),
        ))
    g = PGraph(nodes=nodes,
               edges=[Edge(s, d, f"{s}_out") for s, d in edges], query_id=query_id)
    return EGraph(nodes=g.nodes, edges=g.edges, query_id=query_id, depth=assign_depths(g))


def make_task(sim_or_graph, node_id, arrival, seq, graph=None):
    graph = graph or sim_or_graph
    ctx = QueryContext(query_id=graph.query_id, graph=graph, arrival_ms=arrival)
    node = graph.nodes[node_id]
    from teola_sim.engines import node_request_loads
    profile = PROFILES.get(node.meta.engine_id) or EngineProfile(
        node.meta.engine_id or "x", "embedding", 1, ((1, 10),))
    task = NodeTask(ctx=ctx, node=node, arrival_ms=arrival, seq=seq,
                    loads=node_request_loads(node, profile))
    task.remaining_complete = len(task.loads)
    return task


class TestSubmitAndComplete:
    def test_single_node_enqueued_immediately(self):
        g = simple_graph([], items={"only": 1})
        sim, trace = run_queries(PROFILES, [(g, 0.0, 0.0)], RuntimeOptions())
        events = [e.event for e in trace.for_query("q0") if e.node_id == "only"]
        assert events == ["enqueue", "batch", "start", "complete"]

    def test_duplicate_query_id_rejected(self):
        sim = Simulator(PROFILES)
        g = simple_graph([], items={"a": 1})
        sim.submit_query(g, 0.0)
        with pytest.raises(DuplicateQueryId):
            sim.submit_query(simple_graph([], items={"a": 1}), 1.0)

    def test_optimized_graph_enqueues_both_branch_heads_at_once(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
        t0 = [ev for ev in trace.events if ev.event == "enqueue" and ev.timestamp_ms == 0.0]
        engines = {ev.engine for ev in t0}
        assert "embed0" in engines and "llm0" in engines  # concurrent branch heads

    def test_pruned_condition_branch_never_enqueues(self):
        from teola_sim.workflow import QueryConfig
        t = build_app_template(AppKind.SEARCH_ENGINE_GEN)
        cfg = QueryConfig(query_id="q0", params={
            "decide": {"needs_search": False},
            "synthesize": {"context_segments": [["draft_answer", 60]]},
        })
        e = optimize(transform(t, cfg, PROFILES), PROFILES, ALL_PASSES)
        sim, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
        assert not any(ev.node_id.startswith("web_search") for ev in trace.events)
        assert sim.contexts["q0"].finish_ms is not None

    def test_chain_completion_readies_child(self):
        g = simple_graph([("a", "b")])
        sim, trace = run_queries(PROFILES, [(g, 0.0, 0.0)], RuntimeOptions())
        done = trace.completions()
        enq = {e.node_id: e.timestamp_ms for e in trace.events if e.event == "enqueue"}
        assert enq["b"] > done[("q0", "a")] - 1e-9

    def test_diamond_join_waits_for_both_parents(self):
        g = simple_graph([("a", "j"), ("b", "j")], items={"a": 1, "b": 12})
        sim, trace = run_queries(PROFILES, [(g, 0.0, 0.0)], RuntimeOptions())
        done = trace.completions()
        enq = {e.node_id: e.timestamp_ms for e in trace.events if e.event == "enqueue"}
        assert enq["j"] >= max(done[("q0", "a")], done[("q0", "b")])

    def test_unknown_node_rejected(self):
        sim = Simulator(PROFILES)
        g = simple_graph([], items={"a": 1})
        ctx = sim.submit_query(g, 0.0)
        with pytest.raises(UnknownNode):
            sim.on_primitive_complete(ctx, "ghost", 0.0)

    def test_completion_returns_newly_ready_children(self):
        sim = Simulator(PROFILES)
        g = simple_graph([("a", "b"), ("a", "j"), ("b", "j")])
        ctx = sim.submit_query(g, 0.0)
        assert sim.on_primitive_complete(ctx, "a", 1.0) == ["b"]  # j still waits on b
        assert sim.on_primitive_complete(ctx, "b", 2.0) == ["j"]

    def test_partial_decode_overlaps_with_consumer(self):
        # first partial decode's consumer runs while the next segment decodes
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
        done = trace.completions()
        starts = {ev.node_id: ev.timestamp_ms for ev in trace.events if ev.event == "start"}
        assert starts["query_embedding.embed.s0"] < done[("q0", "query_expansion.decode.pd2")]


class TestFormBatchTopo:
    def test_cross_query_deep_nodes_win(self):
        q1, q2 = queue_snapshot_pair()
        tasks = [make_task(q1, "A", 0.0, 1), make_task(q1, "B", 0.0, 2),
                 make_task(q2, "G", 0.0, 3), make_task(q2, "H", 0.0, 4)]
        plan = form_batch_topo(tasks, 1024.0, 0.0)
        assert sorted(plan.node_ids()) == ["A", "H"]

    def test_empty_queue_empty_plan(self):
        assert not form_batch_topo([], 16.0, 0.0)

    def test_single_query_fills_deep_first(self):
        g = simple_graph([("x", "y"), ("y", "z")], items={"x": 3, "y": 1, "z": 1})
        tasks = [make_task(g, "z", 0.0, 1), make_task(g, "x", 0.0, 2)]
        plan = form_batch_topo(tasks, 16.0, 0.0)
        # both fit; the depth-2 node's requests come first in the plan
        assert plan.node_ids() == ("x", "z")

    def test_requests_span_batches(self):
        g = simple_graph([], items={"big": 40})
        task = make_task(g, "big", 0.0, 1)
        plan = form_batch_topo([task], 16.0, 0.0)
        assert plan.entries[0][1] == 16
        task.next_request += 16
        plan2 = form_batch_topo([task], 16.0, 0.0)
        assert plan2.entries[0][1] == 16


class TestFormBatchBlind:
    def test_fifo_picks_arrival_order(self):
        q1, q2 = queue_snapshot_pair()
        tasks = [make_task(q1, "A", 0.0, 1), make_task(q1, "B", 0.0, 2),
                 make_task(q2, "G", 0.0, 3), make_task(q2, "H", 0.0, 4)]
        plan, wake = form_batch_blind(tasks, 1024.0, 10.0, 0.0)
        assert sorted(plan.node_ids()) == ["A", "B"]
        assert wake is None

    def test_timeout_flushes_partial_batch(self):
        g = simple_graph([], items={"three": 3})
        task = make_task(g, "three", 0.0, 1)
        plan, wake = form_batch_blind([task], 4.0, 10.0, 5.0)
        assert not plan and wake == pytest.approx(10.0)
        plan, _ = form_batch_blind([task], 4.0, 10.0, 12.0)
        assert plan.entries[0][1] == 3  # all three dispatched on timeout

    def test_bundle_mode_keeps_invocation_intact(self):
        g1 = simple_graph([], items={"bundle": 3}, query_id="qa")
        g2 = simple_graph([], items={"other": 4}, query_id="qb")
        tasks = [make_task(g1, "bundle", 0.0, 1), make_task(g2, "other", 0.5, 2)]
        plan, wake = form_batch_blind(tasks, 16.0, 10.0, 0.6, bundle_mode=True)
        assert plan.node_ids() == ("bundle",)
        assert plan.entries[0][1] == 3
        assert wake is None


class TestPreschedule:
    def test_same_engine_pair_prescheduled(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim = Simulator(PROFILES, RuntimeOptions())
        sim.submit_query(e, 0.0)
        records = {(src, dst) for _, src, dst, _ in sim.preschedule_records()}
        assert ("query_expansion.prefill", "query_expansion.decode.pd0") in records

    def test_large_payload_crosses_engines(self):
        g = simple_graph([("emb", "ing")], items={"emb": 48, "ing": 48})
        g.nodes["emb"].meta.outputs["emb_out"] = Payload(48, 48 * 256)  # over threshold
        g.nodes["ing"].meta.engine_id = "vdb-ingest0"
        sim = Simulator(PROFILES, RuntimeOptions())
        sim.submit_query(g, 0.0)
        assert any(src == "emb" and dst == "ing" for _, src, dst, _ in sim.preschedule_records())

    def test_small_payload_across_engines_not_prescheduled(self):
        t = build_app_template(AppKind.NAIVE_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.NAIVE_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim = Simulator(PROFILES, RuntimeOptions())
        sim.submit_query(e, 0.0)
        # top-3 chunks from search to the synthesize prefills: 768 token
        # equivalents, below the relay threshold, different engines
        pairs = {(src, dst) for _, src, dst, _ in sim.preschedule_records()}
        assert not any(src.startswith("search") and dst.startswith("synthesize")
                       for src, dst in pairs)


class TestEmbeddingBatchScenario:
    def test_small_fixed_batches(self):
        sim, _ = run_queries(
            embedding_batch_profiles(), [(embedding_batch_graph(), 0.0, 0.0)],
            RuntimeOptions(scheduler="blind-po", batch_caps={"embed0": EMBED_BATCH_SMALL},
                           hop_ms=0, per_token_ms=0))
        assert sim.contexts["q0"].latency_ms == pytest.approx(EMBED_BATCH_SMALL_TOTAL_MS)

    def test_efficient_batches(self):
        sim, _ = run_queries(
            embedding_batch_profiles(), [(embedding_batch_graph(), 0.0, 0.0)],
            RuntimeOptions(scheduler="blind-to", batch_caps={"embed0": EMBED_BATCH_LARGE},
                           hop_ms=0, per_token_ms=0))
        assert sim.contexts["q0"].latency_ms == pytest.approx(EMBED_BATCH_LARGE_TOTAL_MS)


class TestRun:
    def test_no_queries_empty_trace(self):
        sim = Simulator(PROFILES)
        trace = sim.run()
        assert trace.events == [] and trace.batches == []

    def test_two_identical_queries_one_llm_instance_queue(self):
        profiles = EngineSet.from_profiles([
            EngineProfile("llm0", "llm", 1, ((512, 500), (1024, 800)),
                          decode_table=((1, 10),), max_slots=512)])
        graphs = []
        for qid in ("q1", "q2"):
            node = PrimitiveNode("p", PrimitiveKind.PREFILLING, MetadataProfile(
                outputs={"kv": Payload(1, 512)}, engine_id="llm0",
                token_counts={"prompt": 512}, query_id=qid))
            g = PGraph(nodes={"p": node}, edges=[], query_id=qid)
            graphs.append(EGraph(nodes=g.nodes, edges=g.edges, query_id=qid,
                                 depth=assign_depths(g)))
        sim, trace = run_queries(profiles, [(graphs[0], 0.0, 0.0), (graphs[1], 0.0, 0.0)],
                                 RuntimeOptions(hop_ms=0, per_token_ms=0))
        # 512-token cap forces serial execution on the single instance
        done = trace.completions()
        assert done[("q1", "p")] == pytest.approx(500.0)
        assert done[("q2", "p")] == pytest.approx(1000.0)

    def test_non_preemption_no_overlapping_intervals(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
        spans: dict[tuple[str, int], list[tuple[float, float]]] = {}
        for b in trace.batches:
            spans.setdefault((b.engine_id, b.instance_id), []).append((b.start_ms, b.end_ms))
        for intervals in spans.values():
            intervals.sort()
            for (s1, e1), (s2, e2) in zip(intervals, intervals[1:]):
                assert s2 >= e1 - 1e-9

    def test_slot_discipline_on_every_batch(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        _, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
        for b in trace.batches:
            assert b.load <= b.cap + 1e-9

    def test_determinism_identical_traces(self):
        def one_run():
            t = build_app_template(AppKind.ADVANCED_RAG_QA)
            e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA),
                                   PROFILES), PROFILES, ALL_PASSES)
            _, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
            return trace.rows()

        assert one_run() == one_run()

    def test_liveness_on_random_graphs(self):
        rng = random.Random(99)
        for case in range(30):
            n = rng.randint(1, 20)
            ids = [f"n{i:02d}" for i in range(n)]
            edges = []
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.2:
                        edges.append((ids[i], ids[j]))
            items = {nid: rng.randint(1, 24) for nid in ids}
            g = simple_graph(edges, items=items, query_id=f"q{case}")
            sim, _ = run_queries(PROFILES, [(g, 0.0, 0.0)], RuntimeOptions())
            assert sim.contexts[f"q{case}"].finish_ms is not None

    def test_safety_inputs_present_before_start(self):
        # the runtime asserts object-store coverage at dispatch; run a few
        # workloads end to end with assertions enabled
        for kind in (AppKind.NAIVE_RAG_QA, AppKind.LLM_AGENT):
            t = build_app_template(kind)
            e = optimize(transform(t, default_query_config(kind), PROFILES),
                         PROFILES, ALL_PASSES)
            sim, trace = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
            done = trace.completions()
            starts = {ev.node_id: ev.timestamp_ms for ev in trace.events
                      if ev.event == "start"}
            for edge in e.edges:
                if edge.dst in starts:
                    assert starts[edge.dst] >= done[("q0", edge.src)] - 1e-9


class TestOptimizationNeverSlowsSingleQuery:
    def test_monotonic_makespan_all_builtins(self):
        # with a fixed profile set, the fully optimized graph never has a
        # longer makespan than the unoptimized one
        for kind in AppKind:
            t = build_app_template(kind)
            cfg = default_query_config(kind)
            p = optimize(transform(t, cfg, PROFILES), PROFILES, set())
            e = optimize(transform(t, cfg, PROFILES), PROFILES, ALL_PASSES)
            sim_p, _ = run_queries(PROFILES, [(p, 0.0, 0.0)], RuntimeOptions())
            sim_e, _ = run_queries(PROFILES, [(e, 0.0, 0.0)], RuntimeOptions())
            assert sim_e.contexts["q0"].latency_ms <= sim_p.contexts["q0"].latency_ms, kind

    def test_single_query_topo_strictly_beats_blind_on_shared_llm(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        cfg = default_query_config(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, cfg, PROFILES), PROFILES, ALL_PASSES)
        sim_t, _ = run_queries(PROFILES, [(e.clone(), 0.0, 0.0)],
                               RuntimeOptions(scheduler="topo"))
        sim_b, _ = run_queries(PROFILES, [(e.clone(), 0.0, 0.0)],
                               RuntimeOptions(scheduler="blind-to"))
        assert sim_t.contexts["q0"].latency_ms < sim_b.contexts["q0"].latency_ms


class TestEventBound:
    def test_non_quiescent_raises_on_tiny_event_budget(self):
        from teola_sim.errors import NonQuiescent
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        sim = Simulator(PROFILES, RuntimeOptions(max_events=5))
        sim.submit_query(e, 0.0)
        with pytest.raises(NonQuiescent):
            sim.run()


class TestSnapshotSchedulers:
    def test_topo_matches_oracle_optimum_blind_strictly_worse(self):
        from teola_sim.scenarios import queue_snapshot_oracle, work_conserving_pairings
        outcomes = queue_snapshot_oracle()
        pairings = work_conserving_pairings(outcomes)
        best = min(outcomes, key=lambda o: o.combined)
        assert best.schedule == (("A", "H"), ("B", "G"))
        assert len(pairings) <= 24

        profiles = queue_snapshot_profiles()
        opts = RuntimeOptions(scheduler="topo", hop_ms=0, per_token_ms=0)
        q1, q2 = queue_snapshot_pair()
        sim, trace = run_queries(profiles, [(q1, 0.0, 0.0), (q2, 0.0, 0.0)], opts)
        topo_sum = sim.contexts["q1"].latency_ms + sim.contexts["q2"].latency_ms
        first = [b for b in trace.batches if b.engine_id == "llm0"][0]
        assert sorted(first.node_ids) == ["A", "H"]
        assert topo_sum == pytest.approx(best.combined)

        q1, q2 = queue_snapshot_pair()
        sim, trace = run_queries(
            profiles, [(q1, 0.0, 0.0), (q2, 0.0, 0.0)],
            RuntimeOptions(scheduler="blind-to", hop_ms=0, per_token_ms=0))
        blind_sum = sim.contexts["q1"].latency_ms + sim.contexts["q2"].latency_ms
        first = [b for b in trace.batches if b.engine_id == "llm0"][0]
        assert sorted(first.node_ids) == ["A", "B"]
        assert blind_sum > topo_sum
