"""Transformation and rewrite passes: decomposition shapes, pass semantics,
fixpoint behavior, and the shape cache."""

import random

import pytest

from teola_sim.engines import load_profiles
from teola_sim.errors import ConfigMissing, InvalidMode, UnknownRoleKind
from teola_sim.graph import (
    BATCHABLE,
    Edge,
    MetadataProfile,
    Payload,
    PGraph,
    PrimitiveKind,
    PrimitiveNode,
    graph_fingerprint,
    is_isomorphic,
    serialize_graph,
    topo_sort,
    validate_graph,
)
from teola_sim.optimizer import (
    ALL_PASSES,
    OptimizerCache,
    PASS_ORDER,
    PassId,
    chain_graph,
    compile_query,
    decompose_component,
    optimize,
    pipeline_decode,
    prune_dependencies,
    split_prefill,
    stage_decompose,
    transform,
)
from teola_sim.workflow import Component, QueryConfig
from teola_sim.workloads import AppKind, build_app_template, default_query_config

PROFILES = load_profiles("default")


def kinds_of(g, kind):
    return sorted(n for n, x in g.nodes.items() if x.kind is kind)


class TestDecompose:
    def test_indexing_is_embed_then_ingest(self):
        comp = Component("idx", "indexing", {"embed": "embed0", "ingest": "vdb-ingest0"},
                         in_kwargs=("doc_chunks",), out_kwargs=("index",))
        sub = decompose_component(comp, {"chunk_count": 48, "chunk_token_len": 256})
        assert [n.kind for n in sub.nodes] == [PrimitiveKind.EMBEDDING, PrimitiveKind.INGESTION]
        assert sub.nodes[0].meta.batch_items == 48
        assert sub.edges[0].src == "idx.embed" and sub.edges[0].dst == "idx.ingest"

    def test_expansion_is_prefill_then_splittable_decode(self):
        comp = Component("qe", "query-expansion", "llm0",
                         in_kwargs=("question",), out_kwargs=("expanded_queries",))
        sub = decompose_component(comp, {"expansion_count": 3})
        prefill, decode = sub.nodes
        assert prefill.kind is PrimitiveKind.PREFILLING
        assert decode.kind is PrimitiveKind.DECODING
        assert decode.splittable and decode.meta.out_segments == 3

    def test_search_passthrough_output_items(self):
        comp = Component("s", "search", "vdb-search0",
                         in_kwargs=("index", "query_vectors"), out_kwargs=("chunks",))
        sub = decompose_component(comp, {"query_count": 1, "per_query_top_k": 3})
        assert sub.nodes[0].meta.outputs["chunks"].items == 3

    def test_unknown_role_raises(self):
        with pytest.raises(UnknownRoleKind):
            decompose_component(Component("x", "telepathy", "llm0"), {})

    def test_missing_config_raises(self):
        comp = Component("idx", "indexing", "embed0",
                         in_kwargs=("doc_chunks",), out_kwargs=("index",))
        with pytest.raises(ConfigMissing):
            decompose_component(comp, {})

    def test_bad_mode_raises(self):
        comp = Component("s", "llm-synthesize", "llm0",
                         in_kwargs=("question", "ctx"), out_kwargs=("answer",))
        with pytest.raises(InvalidMode):
            decompose_component(comp, {"synthesis_mode": "psychic"})


class TestTransform:
    def test_refine_mode_chains_three_pairs(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        p = transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES)
        prefills = [n for n in p.nodes.values()
                    if n.kind is PrimitiveKind.PREFILLING and n.node_id.startswith("synthesize")]
        decodes = [n for n in p.nodes.values()
                   if n.kind is PrimitiveKind.DECODING and n.node_id.startswith("synthesize")]
        assert len(prefills) == 3 and len(decodes) == 3
        # chained: d1 feeds p2, d2 feeds p3
        assert Edge("synthesize.d1", "synthesize.p2", "synthesize.draft1") in p.edges
        assert Edge("synthesize.d2", "synthesize.p3", "synthesize.draft2") in p.edges

    def test_single_item_embedding_stays_single_node(self):
        t = build_app_template(AppKind.NAIVE_RAG_QA)
        p = transform(t, default_query_config(AppKind.NAIVE_RAG_QA), PROFILES)
        emb = [n for n in p.nodes if n.startswith("query_embedding")]
        assert emb == ["query_embedding.embed"]

    def test_tree_mode_three_parallel_pairs_plus_final(self):
        t = build_app_template(AppKind.NAIVE_RAG_QA)
        p = transform(t, default_query_config(AppKind.NAIVE_RAG_QA), PROFILES)
        syn_p = [n for n in p.nodes if n.startswith("synthesize.p")]
        syn_d = [n for n in p.nodes if n.startswith("synthesize.d")]
        assert len(syn_p) == 4 and len(syn_d) == 4  # 3 leaves + 1 final call
        final_in = {e.src for e in p.edges if e.dst == "synthesize.p_final"}
        assert final_in == {"synthesize.d1", "synthesize.d2", "synthesize.d3"}

    def test_condition_prunes_untaken_branch(self):
        t = build_app_template(AppKind.SEARCH_ENGINE_GEN)
        cfg = QueryConfig(params={
            "decide": {"needs_search": False},
            "synthesize": {"context_segments": [["draft_answer", 60]]},
        })
        p = transform(t, cfg, PROFILES)
        assert not any(n.startswith("web_search") for n in p.nodes)
        taken = transform(t, default_query_config(AppKind.SEARCH_ENGINE_GEN), PROFILES)
        assert any(n.startswith("web_search") for n in taken.nodes)


class TestPruneDependencies:
    def test_pure_data_chain_unchanged(self):
        nodes = {
            "a": PrimitiveNode("a", PrimitiveKind.EMBEDDING, MetadataProfile(
                outputs={"x": Payload(1, 4)}, engine_id="embed0")),
            "b": PrimitiveNode("b", PrimitiveKind.INGESTION, MetadataProfile(
                inputs=("x",), outputs={"y": Payload(1, 4)}, engine_id="vdb-ingest0")),
        }
        g = PGraph(nodes=nodes, edges=[Edge("a", "b", "x")], query_id="q")
        out, fired = prune_dependencies(g)
        assert not fired and out.edges == g.edges

    def test_ordering_edge_removed_forming_branches(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        p = transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES)
        assert Edge("indexing.ingest", "query_expansion.prefill", None) in p.edges
        out, fired = prune_dependencies(p)
        assert fired
        assert Edge("indexing.ingest", "query_expansion.prefill", None) not in out.edges
        # expansion head becomes a new source, and the index dependency is
        # rewired straight to the consumer that needs it
        assert "query_expansion.prefill" in out.sources()
        assert Edge("indexing.ingest", "search.search", "index") in out.edges

    def test_ordering_edge_parallel_to_data_path(self):
        # ordering edge u->v plus data path u->w->v: only u->v goes away and
        # every input key of v stays covered by some producer
        nodes = {
            "u": PrimitiveNode("u", PrimitiveKind.EMBEDDING, MetadataProfile(
                outputs={"x": Payload(1, 4)}, engine_id="embed0")),
            "w": PrimitiveNode("w", PrimitiveKind.INGESTION, MetadataProfile(
                inputs=("x",), outputs={"y": Payload(1, 4)}, engine_id="vdb-ingest0")),
            "v": PrimitiveNode("v", PrimitiveKind.SEARCHING, MetadataProfile(
                inputs=("y",), outputs={"z": Payload(1, 4)}, engine_id="vdb-search0")),
        }
        edges = [Edge("u", "w", "x"), Edge("w", "v", "y"), Edge("u", "v", None)]
        g = PGraph(nodes=nodes, edges=edges, query_id="q")

        def coverage(graph):
            covered = {}
            for n, x in graph.nodes.items():
                have = {e.key for e in graph.edges if e.dst == n}
                covered[n] = all(k in have for k in x.meta.inputs)
            return covered

        before = coverage(g)
        out, fired = prune_dependencies(g)
        assert fired
        assert Edge("u", "v", None) not in out.edges
        assert Edge("w", "v", "y") in out.edges
        assert coverage(out) == before


def _batch_node(nid, items, engine="embed0", kind=PrimitiveKind.EMBEDDING,
                inputs=(), out_key=None, out_items=None, batchable=True):
    out_key = out_key or f"{nid}_out"
    return PrimitiveNode(nid, kind, MetadataProfile(
        inputs=tuple(inputs),
        outputs={out_key: Payload(out_items or items, (out_items or items) * 8)},
        engine_id=engine,
        batch_items=items,
        annotations=frozenset({BATCHABLE}) if batchable else frozenset(),
    ))


class TestStageDecompose:
    def test_oversized_batch_with_nonbatchable_consumer_gets_aggregate(self):
        nodes = {
            "emb": _batch_node("emb", 48, out_key="vecs"),
            "ing": _batch_node("ing", 48, engine="vdb-ingest0", kind=PrimitiveKind.INGESTION,
                               inputs=("vecs",), out_key="index", batchable=False),
        }
        g = PGraph(nodes=nodes, edges=[Edge("emb", "ing", "vecs")], query_id="q")
        out, fired = stage_decompose(g, PROFILES)
        assert fired
        stages = kinds_of(out, PrimitiveKind.EMBEDDING)
        assert stages == ["emb.s0", "emb.s1", "emb.s2"]
        aggs = kinds_of(out, PrimitiveKind.AGGREGATE)
        assert len(aggs) == 1
        assert {e.src for e in out.edges if e.dst == aggs[0]} == set(stages)
        assert Edge(aggs[0], "ing", "vecs") in out.edges

    def test_below_threshold_unchanged(self):
        g = PGraph(nodes={"emb": _batch_node("emb", 8)}, edges=[], query_id="q")
        out, fired = stage_decompose(g, PROFILES)
        assert not fired and sorted(out.nodes) == ["emb"]

    def test_batchable_consumer_pipelines_stage_to_stage(self):
        nodes = {
            "emb": _batch_node("emb", 48, out_key="vecs"),
            "ing": _batch_node("ing", 48, engine="vdb-ingest0", kind=PrimitiveKind.INGESTION,
                               inputs=("vecs",), out_key="index"),
        }
        g = PGraph(nodes=nodes, edges=[Edge("emb", "ing", "vecs")], query_id="q")
        out, fired = stage_decompose(g, PROFILES)
        assert fired
        assert not kinds_of(out, PrimitiveKind.AGGREGATE)
        for i in range(3):
            assert Edge(f"emb.s{i}", f"ing.s{i}", "vecs") in out.edges
        # item slices line up pairwise
        for i in range(3):
            assert out.nodes[f"emb.s{i}"].meta.slice_of["vecs"][:2] == (16 * i, 16 * i + 16)


class TestSplitPrefill:
    def _prefill(self, segments, produced_edges):
        node = PrimitiveNode("p", PrimitiveKind.PREFILLING, MetadataProfile(
            inputs=tuple(k for k, _ in produced_edges),
            outputs={"kv": Payload(1, sum(t for _, t in segments))},
            engine_id="llm0",
            token_counts=dict(segments),
        ))
        producers = {}
        edges = []
        for key, _tokens in produced_edges:
            producers[key] = PrimitiveNode(f"src_{key}", PrimitiveKind.SEARCHING,
                                           MetadataProfile(outputs={key: Payload(1, 64)},
                                                           engine_id="vdb-search0"))
            edges.append(Edge(f"src_{key}", "p", key))
        nodes = {"p": node, **{p.node_id: p for p in producers.values()}}
        return PGraph(nodes=nodes, edges=edges, query_id="q")

    def test_static_prefix_splits(self):
        g = self._prefill([("instruction", 60), ("question", 40), ("context", 256)],
                          [("context", 256)])
        out, fired = split_prefill(g)
        assert fired
        part = out.nodes["p.partial"]
        full = out.nodes["p.full"]
        assert part.kind is PrimitiveKind.PARTIAL_PREFILLING
        assert part.meta.prompt_tokens == 100
        assert full.kind is PrimitiveKind.FULL_PREFILLING
        assert full.meta.prompt_tokens == 256
        assert Edge("p.partial", "p.full", "p.kvp") in out.edges
        assert Edge("src_context", "p.full", "context") in out.edges
        # the partial has no produced inputs: it can start immediately
        assert "p.partial" in out.sources()

    def test_fully_static_prompt_not_split(self):
        g = self._prefill([("instruction", 60), ("question", 40)], [])
        out, fired = split_prefill(g)
        assert not fired and "p" in out.nodes

    def test_produced_first_segment_not_split(self):
        g = self._prefill([("context", 256), ("question", 40)], [("context", 256)])
        out, fired = split_prefill(g)
        assert not fired


class TestPipelineDecode:
    def _decode_graph(self, m, consumer_items, consumer_batchable=True):
        dec = PrimitiveNode("d", PrimitiveKind.DECODING, MetadataProfile(
            outputs={"queries": Payload(m, m * 20)},
            engine_id="llm0",
            decode_tokens=m * 20,
            context_tokens=80,
            out_segments=m,
            annotations=frozenset({"splittable"}),
        ))
        emb = _batch_node("emb", consumer_items, inputs=("queries",),
                          batchable=consumer_batchable)
        g = PGraph(nodes={"d": dec, "emb": emb},
                   edges=[Edge("d", "emb", "queries")], query_id="q")
        return g

    def test_three_segments_feed_three_embeddings(self):
        out, fired = pipeline_decode(self._decode_graph(3, 3))
        assert fired
        pds = kinds_of(out, PrimitiveKind.PARTIAL_DECODING)
        assert pds == ["d.pd0", "d.pd1", "d.pd2"]
        assert Edge("d.pd0", "d.pd1", "d.stream") in out.edges
        embs = kinds_of(out, PrimitiveKind.EMBEDDING)
        assert len(embs) == 3
        for i in range(3):
            assert Edge(f"d.pd{i}", f"emb.s{i}", "queries") in out.edges

    def test_single_segment_unchanged(self):
        out, fired = pipeline_decode(self._decode_graph(1, 1))
        assert not fired and "d" in out.nodes

    def test_nonbatchable_consumer_blocks_split(self):
        g = self._decode_graph(3, 3, consumer_batchable=False)
        # precondition: the pass requires a batchable downstream consumer
        consumer = g.nodes["emb"]
        assert not consumer.batchable
        out, fired = pipeline_decode(g)
        assert not fired and "d" in out.nodes


class TestOptimize:
    def test_all_passes_reproduce_branching_pipelined_shape(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                     PROFILES, ALL_PASSES)
        # two parallel branches: doc embedding stage and the expansion prefill
        sources = set(e.sources())
        assert "indexing.embed.s0" in sources and "query_expansion.prefill" in sources
        # three partial decodes and split prefills present
        assert len(kinds_of(e, PrimitiveKind.PARTIAL_DECODING)) == 3
        assert len(kinds_of(e, PrimitiveKind.PARTIAL_PREFILLING)) == 3

    def test_empty_pass_set_is_identity_plus_depths(self):
        t = build_app_template(AppKind.NAIVE_RAG_QA)
        p = transform(t, default_query_config(AppKind.NAIVE_RAG_QA), PROFILES)
        e = optimize(p, PROFILES, set())
        assert is_isomorphic(p, e)
        assert e.depth and e.provenance == ()

    def test_fixed_pass_order_is_used(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        log: list[PassId] = []
        optimize(transform(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES),
                 PROFILES, ALL_PASSES, pass_log=log)
        per_round = len(PASS_ORDER)
        assert len(log) % per_round == 0
        for i in range(0, len(log), per_round):
            assert tuple(log[i:i + per_round]) == PASS_ORDER

    @pytest.mark.parametrize("pass_id", list(PASS_ORDER))
    def test_each_pass_is_idempotent_on_builtins(self, pass_id):
        from teola_sim.optimizer import PASS_FUNCS
        for kind in AppKind:
            t = build_app_template(kind)
            g = transform(t, default_query_config(kind), PROFILES)
            if pass_id is not PassId.DEPENDENCY_PRUNING:
                g, _ = prune_dependencies(g)
            once, _ = PASS_FUNCS[pass_id](g, PROFILES)
            twice, fired = PASS_FUNCS[pass_id](once, PROFILES)
            assert not fired, (kind, pass_id)
            assert serialize_graph(once) == serialize_graph(twice)

    def test_cache_returns_isomorphic_graph_with_new_query_id(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        cache = OptimizerCache()
        e1 = compile_query(t, default_query_config(AppKind.ADVANCED_RAG_QA, "q1"),
                           PROFILES, ALL_PASSES, cache)
        e2 = compile_query(t, default_query_config(AppKind.ADVANCED_RAG_QA, "q2"),
                           PROFILES, ALL_PASSES, cache)
        assert cache.hits == 1 and cache.misses == 1
        assert e2.query_id == "q2"
        assert all(n.meta.query_id == "q2" for n in e2.nodes.values())
        assert is_isomorphic(e1, e2)
        fresh = compile_query(t, default_query_config(AppKind.ADVANCED_RAG_QA, "q3"),
                              PROFILES, ALL_PASSES, None)
        assert is_isomorphic(e2, fresh)

    def test_chain_graph_serializes_components(self):
        t = build_app_template(AppKind.ADVANCED_RAG_QA)
        e = chain_graph(t, default_query_config(AppKind.ADVANCED_RAG_QA), PROFILES)
        # with component-order edges every component's head waits for the
        # previous component's tail
        assert Edge("indexing.ingest", "query_expansion.prefill", None) in e.edges
        assert Edge("query_expansion.decode", "query_embedding.embed", "expanded_queries") in e.edges


SEMANTIC_ROLES = [
    ("indexing", {"chunk_count": (8, 64)}),
    ("query-expansion", {"expansion_count": (2, 4)}),
    ("llm-synthesize", {"chunk_inputs": (2, 4)}),
]


def _fuzz_case(rng: random.Random):
    """Random chain template over the built-in roles with random knobs."""
    n_mid = rng.randint(1, 3)
    comps = [
        Component("idx", "indexing", {"embed": "embed0", "ingest": "vdb-ingest0"},
                  in_kwargs=("doc_chunks",), out_kwargs=("index",),
                  params={"chunk_count": rng.randint(4, 80),
                          "chunk_token_len": rng.choice([64, 128, 256])}),
    ]
    edges = []
    prev = "idx"
    expansion = rng.random() < 0.6
    mcount = rng.randint(2, 4)
    if expansion:
        comps.append(Component("exp", "query-expansion", "llm0",
                               in_kwargs=("question",), out_kwargs=("queries",),
                               annotations=frozenset({"splittable"}),
                               params={"expansion_count": mcount,
                                       "tokens_per_query": rng.randint(8, 40)}))
        edges.append((prev, "exp"))
        prev = "exp"
        qkey = "queries"
        qcount = mcount
    else:
        qkey, qcount = "question", 1
    comps.append(Component("qemb", "query-embedding", "embed0",
                           in_kwargs=(qkey,), out_kwargs=("vectors",),
                           annotations=frozenset({"batchable"}),
                           params={"query_count": qcount}))
    edges.append((prev, "qemb"))
    comps.append(Component("srch", "search", "vdb-search0",
                           in_kwargs=("index", "vectors"), out_kwargs=("cands",),
                           params={"query_count": qcount,
                                   "per_query_top_k": rng.choice([4, 8, 16])}))
    edges.append(("qemb", "srch"))
    use_rerank = rng.random() < 0.5
    last_key = "cands"
    prev = "srch"
    if use_rerank:
        comps.append(Component("rr", "rerank", "rerank0",
                               in_kwargs=("cands",), out_kwargs=("top",),
                               params={"candidate_count": 999, "top_k": 3}))
        edges.append(("srch", "rr"))
        prev, last_key = "rr", "top"
    comps.append(Component("syn", "llm-synthesize", "llm0",
                           in_kwargs=("question", last_key), out_kwargs=("answer",),
                           params={"synthesis_mode": rng.choice(["refine", "tree", "oneshot"]),
                                   "chunk_inputs": rng.randint(2, 4),
                                   "chunk_tokens": rng.choice([64, 128, 256]),
                                   "answer_tokens": rng.randint(20, 120)}))
    edges.append((prev, "syn"))
    from teola_sim.workflow import WorkflowTemplate
    template = WorkflowTemplate(name="fuzz", components=tuple(comps), edges=tuple(edges),
                                source_keys=("question", "doc_chunks"))
    passes = frozenset(rng.sample(sorted(ALL_PASSES, key=lambda p: p.value),
                                  rng.randint(0, 4)))
    return template, passes


def _input_coverage_ok(g) -> bool:
    """Every produced input key is reachable from its producer."""
    order = topo_sort(g)
    ancestors = {n: set() for n in g.nodes}
    parents = g.parents()
    for n in order:
        for e in parents[n]:
            ancestors[n] |= ancestors[e.src] | {e.src}
    producers = {}
    for n, x in g.nodes.items():
        for k in x.meta.outputs:
            producers.setdefault(k, set()).add(n)
    for n, x in g.nodes.items():
        direct = {e.key for e in parents[n]}
        for k in x.meta.inputs:
            if k in direct:
                continue
            makers = producers.get(k, set())
            if makers and not makers & ancestors[n]:
                return False
    return True


class TestConservation:
    def test_stage_splits_conserve_items_and_tokens(self):
        # no payload is created or lost: stage groups sum to the original node
        for kind in (AppKind.ADVANCED_RAG_QA, AppKind.CONTEXTUAL_RETRIEVAL):
            t = build_app_template(kind)
            p = transform(t, default_query_config(kind), PROFILES)
            e = optimize(p, PROFILES, ALL_PASSES)
            for nid, orig in p.nodes.items():
                stages = [x for x in e.nodes.values()
                          if x.node_id == nid or x.node_id.startswith(nid + ".s")]
                if len(stages) <= 1:
                    continue
                for key, payload in orig.meta.outputs.items():
                    items = sum(s.meta.outputs[key].items for s in stages)
                    tokens = sum(s.meta.outputs[key].tokens for s in stages)
                    assert items == payload.items, (nid, key)
                    assert tokens == pytest.approx(payload.tokens, abs=len(stages)), (nid, key)


class TestFuzzSemanticsPreservation:
    def test_thousand_random_templates(self):
        rng = random.Random(20260810)
        for i in range(1000):
            template, passes = _fuzz_case(rng)
            cfg = QueryConfig(query_id=f"fz{i}")
            p = transform(template, cfg, PROFILES)
            e = optimize(p, PROFILES, passes)
            assert validate_graph(e) == [], (i, validate_graph(e))
            assert _input_coverage_ok(e), i
            for edge in e.edges:
                assert e.depth[edge.src] > e.depth[edge.dst], i
