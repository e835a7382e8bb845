"""Template-to-graph transformation and the graph rewrite passes.

``transform`` expands a workflow template plus per-query configuration into a
primitive-level graph. ``optimize`` then applies up to four rewrite passes in
a fixed order, iterating to a fixpoint:

1. dependency pruning   - drop ordering edges, keep/add only data edges
2. stage decomposition  - micro-batch oversized batchable nodes
3. prefill split        - precompute the static prompt prefix
4. decode pipelining    - stream splittable decode output segment by segment
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

from .engines import EngineSet, max_efficient_batch
from .errors import (
    ConfigMissing,
    ConfigParse,
    InvalidMode,
    OptimizerLimit,
    UnknownRoleKind,
)
from .graph import (
    BATCHABLE,
    CONTROL_KINDS,
    DECODE_KINDS,
    PREFILL_KINDS,
    SPLITTABLE,
    EGraph,
    Edge,
    MetadataProfile,
    Payload,
    PGraph,
    PrimitiveKind,
    PrimitiveNode,
    assign_depths,
    restamp_query,
    topo_sort,
)
from . import workflow as wf
from .workflow import Component, QueryConfig, WorkflowTemplate, validate_template


class PassId(str, Enum):
    DEPENDENCY_PRUNING = "dependency-pruning"
    STAGE_DECOMPOSITION = "stage-decomposition"
    PREFILL_SPLIT = "prefill-split"
    DECODE_PIPELINING = "decode-pipelining"


PASS_ORDER = (
    PassId.DEPENDENCY_PRUNING,
    PassId.STAGE_DECOMPOSITION,
    PassId.PREFILL_SPLIT,
    PassId.DECODE_PIPELINING,
)
ALL_PASSES = frozenset(PASS_ORDER)
PARALLELIZATION_PASSES = frozenset({PassId.DEPENDENCY_PRUNING, PassId.PREFILL_SPLIT})
PIPELINING_PASSES = frozenset({PassId.STAGE_DECOMPOSITION, PassId.DECODE_PIPELINING})

MAX_REWRITE_ROUNDS = 8


# ---------------------------------------------------------------------------
# Component decomposition


@dataclass
class SubGraph:
    """Primitive expansion of one component, with designated heads and tail."""

    nodes: list[PrimitiveNode] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)
    producers: dict[str, str] = field(default_factory=dict)
    consumers: dict[str, list[str]] = field(default_factory=dict)
    heads: list[str] = field(default_factory=list)
    tail: str = ""


def _need(comp: Component, params: dict, key: str):
    if key not in params:
        raise ConfigMissing(comp.name, key)
    return params[key]


def _prefill(nid, engine, segments, inputs, out_key, batch_items=1, annotations=frozenset()):
    tokens = sum(t for _, t in segments)
    meta = MetadataProfile(
        inputs=tuple(inputs),
        outputs={out_key: Payload(batch_items, tokens * batch_items)},
        engine_id=engine,
        batch_items=batch_items,
        token_counts=dict(segments),
        annotations=frozenset(annotations),
    )
    return PrimitiveNode(nid, PrimitiveKind.PREFILLING, meta)


def _decode(nid, engine, kv_key, out_key, out_payload, decode_tokens, context_tokens,
            batch_items=1, out_segments=1, annotations=frozenset()):
    meta = MetadataProfile(
        inputs=(kv_key,),
        outputs={out_key: out_payload},
        engine_id=engine,
        batch_items=batch_items,
        decode_tokens=decode_tokens,
        context_tokens=context_tokens,
        out_segments=out_segments,
        annotations=frozenset(annotations),
    )
    return PrimitiveNode(nid, PrimitiveKind.DECODING, meta)


def decompose_component(comp: Component, params: dict) -> SubGraph:
    """Expand one component into its primitive sub-graph."""
    name = comp.name
    out_key = comp.out_kwargs[0] if comp.out_kwargs else f"{name}.out"
    sub = SubGraph()

    if comp.role == wf.ROLE_INDEXING:
        count = int(_need(comp, params, "chunk_count"))
        tok = int(params.get("chunk_token_len", 256))
        vec_key = f"{name}.vectors"
        emb = PrimitiveNode(
            f"{name}.embed",
            PrimitiveKind.EMBEDDING,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={vec_key: Payload(count, count * tok)},
                engine_id=comp.engine("embed") or comp.engine(),
                batch_items=count,
                annotations=frozenset({BATCHABLE}),
            ),
        )
        ing = PrimitiveNode(
            f"{name}.ingest",
            PrimitiveKind.INGESTION,
            MetadataProfile(
                inputs=(vec_key,),
                outputs={out_key: Payload(count, count * tok)},
                engine_id=comp.engine("ingest") or comp.engine(),
                batch_items=count,
                annotations=frozenset({BATCHABLE}),
            ),
        )
        sub.nodes = [emb, ing]
        sub.edges = [Edge(emb.node_id, ing.node_id, vec_key)]
        sub.producers[out_key] = ing.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [emb.node_id]
        sub.heads, sub.tail = [emb.node_id], ing.node_id

    elif comp.role == wf.ROLE_QUERY_EMBEDDING:
        count = int(params.get("query_count", 1))
        tok = int(params.get("query_token_len", 40))
        emb = PrimitiveNode(
            f"{name}.embed",
            PrimitiveKind.EMBEDDING,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={out_key: Payload(count, count * tok)},
                engine_id=comp.engine(),
                batch_items=count,
                annotations=frozenset({BATCHABLE}),
            ),
        )
        sub.nodes = [emb]
        sub.producers[out_key] = emb.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [emb.node_id]
        sub.heads, sub.tail = [emb.node_id], emb.node_id

    elif comp.role == wf.ROLE_SEARCH:
        queries = int(params.get("query_count", 1))
        top_k = int(_need(comp, params, "per_query_top_k"))
        tok = int(params.get("chunk_token_len", 256))
        s = PrimitiveNode(
            f"{name}.search",
            PrimitiveKind.SEARCHING,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={out_key: Payload(queries * top_k, queries * top_k * tok)},
                engine_id=comp.engine(),
                batch_items=queries,
                annotations=comp.annotations | {BATCHABLE},
            ),
        )
        sub.nodes = [s]
        sub.producers[out_key] = s.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [s.node_id]
        sub.heads, sub.tail = [s.node_id], s.node_id

    elif comp.role == wf.ROLE_RERANK:
        cands = int(_need(comp, params, "candidate_count"))
        top_k = int(params.get("top_k", 3))
        tok = int(params.get("chunk_token_len", 256))
        r = PrimitiveNode(
            f"{name}.rerank",
            PrimitiveKind.RERANKING,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={out_key: Payload(top_k, top_k * tok)},
                engine_id=comp.engine(),
                batch_items=cands,
                annotations=comp.annotations,
            ),
        )
        sub.nodes = [r]
        sub.producers[out_key] = r.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [r.node_id]
        sub.heads, sub.tail = [r.node_id], r.node_id

    elif comp.role == wf.ROLE_QUERY_EXPANSION:
        m = int(_need(comp, params, "expansion_count"))
        instr = int(params.get("instruction_tokens", 40))
        quest = int(params.get("question_tokens", 40))
        per_q = int(params.get("tokens_per_query", 20))
        pid = f"{name}.prefill"
        kv = f"{pid}.kv"
        p = _prefill(pid, comp.engine(), [("instruction", instr), ("question", quest)],
                     inputs=tuple(comp.in_kwargs), out_key=kv)
        d = _decode(
            f"{name}.decode", comp.engine(), kv, out_key,
            Payload(m, m * per_q), decode_tokens=m * per_q,
            context_tokens=instr + quest, out_segments=m,
            annotations=frozenset({SPLITTABLE}),
        )
        sub.nodes = [p, d]
        sub.edges = [Edge(p.node_id, d.node_id, kv)]
        sub.producers[out_key] = d.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [p.node_id]
        sub.heads, sub.tail = [p.node_id], d.node_id

    elif comp.role == wf.ROLE_SYNTHESIZE:
        sub = _decompose_synthesize(comp, params, out_key)

    elif comp.role == wf.ROLE_PROXY_JUDGE:
        instr = int(params.get("instruction_tokens", 40))
        quest = int(params.get("question_tokens", 40))
        extra_tokens = params.get("input_tokens", {})
        dec_tok = int(params.get("decode_tokens", 32))
        segments = [("instruction", instr), ("question", quest)]
        for k in comp.in_kwargs:
            if k != "question":
                segments.append((k, int(extra_tokens.get(k, 64))))
        pid = f"{name}.prefill"
        kv = f"{pid}.kv"
        p = _prefill(pid, comp.engine(), segments, inputs=tuple(comp.in_kwargs), out_key=kv)
        d = _decode(f"{name}.decode", comp.engine(), kv, out_key,
                    Payload(1, dec_tok), dec_tok, sum(t for _, t in segments))
        sub.nodes = [p, d]
        sub.edges = [Edge(p.node_id, d.node_id, kv)]
        sub.producers[out_key] = d.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [p.node_id]
        sub.heads, sub.tail = [p.node_id], d.node_id

    elif comp.role == wf.ROLE_TOOL_CALL:
        calls = int(_need(comp, params, "call_count"))
        tok = int(params.get("result_tokens", 100))
        t = PrimitiveNode(
            f"{name}.calls",
            PrimitiveKind.SEARCHING,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={out_key: Payload(calls, calls * tok)},
                engine_id=comp.engine(),
                batch_items=calls,
                annotations=comp.annotations | {BATCHABLE},
            ),
        )
        sub.nodes = [t]
        sub.producers[out_key] = t.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [t.node_id]
        sub.heads, sub.tail = [t.node_id], t.node_id

    elif comp.role == wf.ROLE_CONTEXTUALIZE:
        count = int(_need(comp, params, "chunk_count"))
        tok = int(params.get("chunk_token_len", 256))
        neighbors = int(params.get("neighbor_count", 4))
        instr = int(params.get("instruction_tokens", 50))
        summary = int(params.get("summary_tokens", 40))
        window = tok * (1 + neighbors)
        pid = f"{name}.prefill"
        kv = f"{pid}.kv"
        p = _prefill(pid, comp.engine(), [("instruction", instr), (comp.in_kwargs[0], window)],
                     inputs=tuple(comp.in_kwargs), out_key=kv,
                     batch_items=count, annotations=frozenset({BATCHABLE}))
        d = _decode(f"{name}.decode", comp.engine(), kv, out_key,
                    Payload(count, count * (tok + summary)), summary, instr + window,
                    batch_items=count, annotations=frozenset({BATCHABLE}))
        sub.nodes = [p, d]
        sub.edges = [Edge(p.node_id, d.node_id, kv)]
        sub.producers[out_key] = d.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [p.node_id]
        sub.heads, sub.tail = [p.node_id], d.node_id

    elif comp.role == wf.ROLE_CONDITION:
        c = PrimitiveNode(
            f"{name}.cond",
            PrimitiveKind.CONDITION,
            MetadataProfile(
                inputs=tuple(comp.in_kwargs),
                outputs={out_key: Payload(1, 1)},
            ),
        )
        sub.nodes = [c]
        sub.producers[out_key] = c.node_id
        for k in comp.in_kwargs:
            sub.consumers[k] = [c.node_id]
        sub.heads, sub.tail = [c.node_id], c.node_id

    else:
        raise UnknownRoleKind(f"component {comp.name!r} has unknown role {comp.role!r}")

    return sub


def _decompose_synthesize(comp: Component, params: dict, out_key: str) -> SubGraph:
    name = comp.name
    mode = params.get("synthesis_mode", "oneshot")
    if mode not in wf.SYNTHESIS_MODES:
        raise InvalidMode(f"component {name!r}: unknown synthesis_mode {mode!r}")
    instr = int(params.get("instruction_tokens", 60))
    quest = int(params.get("question_tokens", 40))
    chunk_tok = int(params.get("chunk_tokens", 256))
    answer_tok = int(params.get("answer_tokens", 120))
    final_tok = int(params.get("final_tokens", answer_tok))
    context_key = params.get("context_key")
    if context_key is None:
        others = [k for k in comp.in_kwargs if k != "question"]
        context_key = others[0] if others else "context"

    sub = SubGraph()
    engine = comp.engine()

    def pair(idx, segments, kv_out, content_key, payload, tokens):
        pid = f"{name}.p{idx}"
        kv = f"{pid}.kv"
        p = _prefill(pid, engine, segments,
                     inputs=tuple(k for k, _ in segments if k != "instruction"), out_key=kv)
        d = _decode(f"{name}.d{idx}", engine, kv, content_key, payload, tokens,
                    context_tokens=sum(t for _, t in segments))
        sub.nodes += [p, d]
        sub.edges.append(Edge(p.node_id, d.node_id, kv))
        return p, d

    if mode == "refine":
        chunks = int(_need(comp, params, "chunk_inputs"))
        prev_key = None
        first_p = last_d = None
        for i in range(1, chunks + 1):
            segs = [("instruction", instr), ("question", quest)]
            if prev_key:
                segs.append((prev_key, answer_tok))
            segs.append((context_key, chunk_tok))
            content = out_key if i == chunks else f"{name}.draft{i}"
            tokens = final_tok if i == chunks else answer_tok
            p, d = pair(i, segs, None, content, Payload(1, tokens), tokens)
            if prev_key:
                sub.edges.append(Edge(f"{name}.d{i-1}", p.node_id, prev_key))
            else:
                first_p = p
            prev_key = content
            last_d = d
        sub.producers[out_key] = last_d.node_id
        sub.consumers["question"] = [f"{name}.p{i}" for i in range(1, chunks + 1)]
        sub.consumers[context_key] = [f"{name}.p{i}" for i in range(1, chunks + 1)]
        sub.heads, sub.tail = [first_p.node_id], last_d.node_id

    elif mode == "tree":
        chunks = int(_need(comp, params, "chunk_inputs"))
        drafts = []
        for i in range(1, chunks + 1):
            segs = [("instruction", instr), ("question", quest), (context_key, chunk_tok)]
            content = f"{name}.draft{i}"
            pair(i, segs, None, content, Payload(1, answer_tok), answer_tok)
            drafts.append(content)
        segs = [("instruction", instr), ("question", quest)] + [(d, answer_tok) for d in drafts]
        pf, df = pair("_final", segs, None, out_key, Payload(1, final_tok), final_tok)
        for i, d in enumerate(drafts, start=1):
            sub.edges.append(Edge(f"{name}.d{i}", pf.node_id, d))
        sub.producers[out_key] = df.node_id
        sub.consumers["question"] = [f"{name}.p{i}" for i in range(1, chunks + 1)] + [pf.node_id]
        sub.consumers[context_key] = [f"{name}.p{i}" for i in range(1, chunks + 1)]
        sub.heads = [f"{name}.p{i}" for i in range(1, chunks + 1)]
        sub.tail = df.node_id

    else:  # oneshot
        declared = params.get("context_segments")
        if declared is None:
            chunks = int(params.get("chunk_inputs", 1))
            declared = [[context_key, chunks * chunk_tok]]
        segs = [("instruction", instr), ("question", quest)]
        segs += [(k, int(t)) for k, t in declared]
        p, d = pair(1, segs, None, out_key, Payload(1, final_tok), final_tok)
        sub.producers[out_key] = d.node_id
        sub.consumers["question"] = [p.node_id]
        for k, _ in declared:
            sub.consumers.setdefault(k, []).append(p.node_id)
        sub.heads, sub.tail = [p.node_id], d.node_id

    return sub


# ---------------------------------------------------------------------------
# Template -> p-graph


def transform(t: WorkflowTemplate, c: QueryConfig, profiles: EngineSet | None = None) -> PGraph:
    """Expand every component, then wire template edges tail-to-head.

    Template edges sharing data keys become data edges to every consumer of
    that key; edges without shared keys become ordering edges. Condition
    components are evaluated against the query config here and the untaken
    branch is pruned before submission.
    """
    report = validate_template(t, profiles)
    if not report:
        raise ConfigParse("invalid template: " + "; ".join(report.violations))

    subs: dict[str, SubGraph] = {}
    g = PGraph(query_id=c.query_id)
    for comp in t.components:
        sub = decompose_component(comp, c.for_component(comp))
        subs[comp.name] = sub
        for node in sub.nodes:
            node.meta.query_id = c.query_id
            node.meta.app_id = c.app_id
            g.nodes[node.node_id] = node
        g.edges.extend(sub.edges)

    for a, b in t.edges:
        sa, sb = subs[a], subs[b]
        shared = [k for k in t.component(a).out_kwargs if k in t.component(b).in_kwargs]
        wired = False
        for k in shared:
            src = sa.producers.get(k)
            for dst in sb.consumers.get(k, ()):
                g.edges.append(Edge(src, dst, k))
                wired = True
        if not wired:
            for head in sb.heads:
                g.edges.append(Edge(sa.tail, head, None))

    # Resolve Condition components against the config and prune the untaken side.
    for comp in t.components:
        if comp.role != wf.ROLE_CONDITION:
            continue
        params = c.for_component(comp)
        key = params.get("condition_key", "enabled")
        value = bool(params.get(key, True))
        pruned = params.get("on_false", []) if value else params.get("on_true", [])
        drop: set[str] = set()
        for comp_name in pruned:
            drop.update(n.node_id for n in subs[comp_name].nodes)
        if drop:
            g.nodes = {k: v for k, v in g.nodes.items() if k not in drop}
            g.edges = [e for e in g.edges if e.src not in drop and e.dst not in drop]

    g.edges = _dedupe(g.edges)
    topo_sort(g)  # raises CyclicGraph on a bad template
    return g


def _dedupe(edges: list[Edge]) -> list[Edge]:
    seen: set[Edge] = set()
    out = []
    for e in edges:
        if e not in seen and e.src != e.dst:
            seen.add(e)
            out.append(e)
    return out


# ---------------------------------------------------------------------------
# Pass 1: dependency pruning


def prune_dependencies(g: PGraph, engines: EngineSet | None = None) -> tuple[PGraph, bool]:
    """Keep only data-carrying edges; cover any input key produced by an
    ancestor with a direct edge from its latest upstream producer."""
    out = g.clone()
    order = topo_sort(out)
    pos = {n: i for i, n in enumerate(order)}
    parents = out.parents()
    ancestors: dict[str, set[str]] = {n: set() for n in out.nodes}
    for n in order:
        for e in parents[n]:
            ancestors[n] |= ancestors[e.src] | {e.src}

    new_edges: list[Edge] = []
    for e in out.edges:
        src_out = out.nodes[e.src].meta.outputs
        dst_in = set(out.nodes[e.dst].meta.inputs)
        shared = [k for k in src_out if k in dst_in]
        if e.key is not None and e.key in shared:
            new_edges.append(e)
        elif e.key is None and shared:
            new_edges.extend(Edge(e.src, e.dst, k) for k in shared)
        # otherwise the edge carries no data and is dropped

    covered: dict[str, set[str]] = {n: set() for n in out.nodes}
    for e in new_edges:
        covered[e.dst].add(e.key)
    for v in order:
        for k in out.nodes[v].meta.inputs:
            if k in covered[v]:
                continue
            makers = [u for u in ancestors[v] if k in out.nodes[u].meta.outputs]
            if makers:
                u = max(makers, key=lambda x: (pos[x], x))
                new_edges.append(Edge(u, v, k))
                covered[v].add(k)

    new_edges = _dedupe(new_edges)
    fired = set(new_edges) != set(out.edges)
    out.edges = new_edges
    return out, fired


# ---------------------------------------------------------------------------
# Stage splitting machinery shared by passes 2 and 4


def _even_ranges(total: int, size: int) -> list[tuple[int, int]]:
    return [(i, min(i + size, total)) for i in range(0, total, size)]


def _even_shares(total: int, parts: int) -> list[int]:
    base, rem = divmod(total, parts)
    return [base + (1 if i < rem else 0) for i in range(parts)]


def _splittable_outputs(node: PrimitiveNode) -> bool:
    b = node.meta.batch_items
    return all(p.items % b == 0 for p in node.meta.outputs.values())


def _split_node(g: PGraph, node_id: str, ranges: list[tuple[int, int]]) -> list[str]:
    """Replace a node with per-range stage nodes and rewire its edges.

    Producers that carry item slices over the same total are wired to the
    stages whose ranges overlap; all other inputs are replicated to every
    stage. Outgoing edges are replicated from each stage and resolved when or
    if the consumer splits in turn.
    """
    node = g.nodes[node_id]
    total = node.meta.batch_items
    in_edges = [e for e in g.edges if e.dst == node_id]
    out_edges = [e for e in g.edges if e.src == node_id]

    stage_ids = []
    for i, (a, b) in enumerate(ranges):
        span = b - a
        meta = MetadataProfile(
            inputs=node.meta.inputs,
            outputs={},
            engine_id=node.meta.engine_id,
            batch_items=span,
            token_counts=dict(node.meta.token_counts),
            decode_tokens=node.meta.decode_tokens,
            context_tokens=node.meta.context_tokens,
            out_segments=1,
            annotations=node.meta.annotations,
            cached_prefix_tokens=node.meta.cached_prefix_tokens,
            query_id=node.meta.query_id,
            app_id=node.meta.app_id,
        )
        for k, p in node.meta.outputs.items():
            scale = p.items // total
            base = node.meta.slice_of.get(k, (0, total * scale, p.items))[0]
            meta.outputs[k] = Payload(span * scale, round(p.tokens * span / total))
            meta.slice_of[k] = (base + a * scale, base + b * scale, p.items if k not in node.meta.slice_of else node.meta.slice_of[k][2])
        sid = f"{node_id}.s{i}"
        g.nodes[sid] = PrimitiveNode(sid, node.kind, meta)
        stage_ids.append(sid)

    # Input wiring: slice-aligned producers connect range-to-range.
    by_key: dict[str, list[Edge]] = {}
    for e in in_edges:
        by_key.setdefault(e.key, []).append(e)
    new_edges = []
    for key, edges in by_key.items():
        slices = {}
        aligned = key is not None
        for e in edges:
            s = g.nodes[e.src].meta.slice_of.get(key)
            if s is None or s[2] != total:
                aligned = False
                break
            slices[e.src] = s
        if aligned and len(edges) > 1:
            for i, (a, b) in enumerate(ranges):
                for e in edges:
                    sa, sb, _ = slices[e.src]
                    if sa < b and a < sb:
                        new_edges.append(Edge(e.src, stage_ids[i], key))
        else:
            for e in edges:
                new_edges.extend(Edge(e.src, sid, e.key) for sid in stage_ids)
    for e in out_edges:
        new_edges.extend(Edge(sid, e.dst, e.key) for sid in stage_ids)

    del g.nodes[node_id]
    g.edges = _dedupe([e for e in g.edges if node_id not in (e.src, e.dst)] + new_edges)
    return stage_ids


def _insert_aggregates(g: PGraph) -> bool:
    """Close staged pipelines feeding unsplit non-batchable consumers.

    One Aggregate per (consumer, key) whose producers all carry item slices
    over one total; batchable or control consumers join stage edges directly.
    """
    fired = False
    parents = g.parents()
    for cid in list(g.nodes):
        consumer = g.nodes[cid]
        if consumer.kind in CONTROL_KINDS or consumer.batchable:
            continue
        by_key: dict[str, list[Edge]] = {}
        for e in parents[cid]:
            if e.key is not None:
                by_key.setdefault(e.key, []).append(e)
        for key, edges in by_key.items():
            if len(edges) < 2:
                continue
            slices = [g.nodes[e.src].meta.slice_of.get(key) for e in edges]
            if any(s is None for s in slices) or len({s[2] for s in slices}) != 1:
                continue
            items = sum(g.nodes[e.src].meta.outputs[key].items for e in edges)
            tokens = sum(g.nodes[e.src].meta.outputs[key].tokens for e in edges)
            agg_id = f"{cid}.agg.{key.replace('/', '_')}"
            g.nodes[agg_id] = PrimitiveNode(
                agg_id,
                PrimitiveKind.AGGREGATE,
                MetadataProfile(
                    inputs=(key,),
                    outputs={key: Payload(items, tokens)},
                    query_id=consumer.meta.query_id,
                    app_id=consumer.meta.app_id,
                ),
            )
            g.edges = [e for e in g.edges if not (e.dst == cid and e.key == key)]
            g.edges.extend(Edge(e.src, agg_id, key) for e in edges)
            g.edges.append(Edge(agg_id, cid, key))
            fired = True
    if fired:
        g.edges = _dedupe(g.edges)
    return fired


# ---------------------------------------------------------------------------
# Pass 2: stage decomposition


def stage_decompose(g: PGraph, engines: EngineSet | None) -> tuple[PGraph, bool]:
    """Micro-batch batchable nodes whose load exceeds the engine's maximum
    efficient batch size; token loads for LLM nodes, items otherwise."""
    if engines is None:
        return g, False
    out = g.clone()
    fired = False
    for nid in topo_sort(g):
        if nid not in out.nodes:
            continue
        node = out.nodes[nid]
        if node.kind in CONTROL_KINDS or not node.batchable:
            continue
        profile = engines.get(node.meta.engine_id)
        if profile is None:
            continue
        beff = max_efficient_batch(profile)
        items = node.meta.batch_items
        if node.kind in PREFILL_KINDS or node.kind in DECODE_KINDS:
            per_item = node.meta.prompt_tokens if node.kind in PREFILL_KINDS else max(
                1, node.meta.context_tokens
            )
            if items * per_item <= beff:
                continue
            stage_items = max(1, int(beff // max(1, per_item)))
        else:
            if items <= beff:
                continue
            stage_items = max(1, int(beff))
        if stage_items >= items or not _splittable_outputs(node):
            continue
        _split_node(out, nid, _even_ranges(items, stage_items))
        fired = True
    if _insert_aggregates(out):
        fired = True
    return out, fired


# ---------------------------------------------------------------------------
# Pass 3: prefill split


def split_prefill(g: PGraph, engines: EngineSet | None = None) -> tuple[PGraph, bool]:
    """Split single-prompt prefills into a partial part over the leading
    segments available at source and a full part over the produced suffix."""
    out = g.clone()
    fired = False
    for nid in list(out.nodes):
        node = out.nodes[nid]
        if node.kind is not PrimitiveKind.PREFILLING or node.meta.batch_items != 1:
            continue
        segs = list(node.meta.token_counts.items())
        if len(segs) < 2:
            continue
        in_edges = [e for e in out.edges if e.dst == nid]
        produced = {e.key for e in in_edges if e.key is not None}
        prefix_len = 0
        for name, _ in segs:
            if name in produced:
                break
            prefix_len += 1
        if not 0 < prefix_len < len(segs):
            continue

        prefix, suffix = segs[:prefix_len], segs[prefix_len:]
        kvp = f"{nid}.kvp"
        part = PrimitiveNode(
            f"{nid}.partial",
            PrimitiveKind.PARTIAL_PREFILLING,
            MetadataProfile(
                inputs=tuple(k for k, _ in prefix),
                outputs={kvp: Payload(1, sum(t for _, t in prefix))},
                engine_id=node.meta.engine_id,
                token_counts=dict(prefix),
                cached_prefix_tokens=node.meta.cached_prefix_tokens,
                query_id=node.meta.query_id,
                app_id=node.meta.app_id,
            ),
        )
        full = PrimitiveNode(
            f"{nid}.full",
            PrimitiveKind.FULL_PREFILLING,
            MetadataProfile(
                inputs=(kvp,) + tuple(k for k, _ in suffix),
                outputs=dict(node.meta.outputs),
                engine_id=node.meta.engine_id,
                token_counts=dict(suffix),
                context_tokens=sum(t for _, t in prefix),
                query_id=node.meta.query_id,
                app_id=node.meta.app_id,
            ),
        )
        out.nodes[part.node_id] = part
        out.nodes[full.node_id] = full
        suffix_keys = {k for k, _ in suffix}
        new_edges = [Edge(part.node_id, full.node_id, kvp)]
        for e in out.edges:
            if e.dst == nid:
                target = full.node_id if e.key in suffix_keys else part.node_id
                new_edges.append(Edge(e.src, target, e.key))
            elif e.src == nid:
                new_edges.append(Edge(full.node_id, e.dst, e.key))
            else:
                new_edges.append(e)
        del out.nodes[nid]
        out.edges = _dedupe(new_edges)
        fired = True
    return out, fired


# ---------------------------------------------------------------------------
# Pass 4: decode pipelining


def pipeline_decode(g: PGraph, engines: EngineSet | None = None) -> tuple[PGraph, bool]:
    """Replace a splittable decode with chained partial decodes, each feeding
    one per-segment stage of its batchable consumers; the per-segment split
    propagates down itemwise batchable consumers and closes with Aggregates."""
    out = g.clone()
    fired = False
    for nid in list(out.nodes):
        node = out.nodes.get(nid)
        if node is None or node.kind is not PrimitiveKind.DECODING or not node.splittable:
            continue
        m = node.meta.out_segments
        if m <= 1 or node.meta.batch_items != 1:
            continue
        consumers = [e for e in out.edges if e.src == nid]
        ok = bool(consumers)
        for e in consumers:
            c = out.nodes[e.dst]
            if (
                not c.batchable
                or c.kind in CONTROL_KINDS
                or c.meta.batch_items < m
                or c.meta.batch_items % m != 0
                or not _splittable_outputs(c)
            ):
                ok = False
        if not ok:
            continue

        shares = _even_shares(node.meta.decode_tokens, m)
        chain_key = f"{nid}.stream"
        pd_ids = []
        for i in range(m):
            meta = MetadataProfile(
                inputs=node.meta.inputs if i == 0 else (chain_key,),
                outputs={},
                engine_id=node.meta.engine_id,
                decode_tokens=shares[i],
                context_tokens=node.meta.context_tokens,
                query_id=node.meta.query_id,
                app_id=node.meta.app_id,
            )
            for k, p in node.meta.outputs.items():
                per = p.items // m
                meta.outputs[k] = Payload(per, round(p.tokens / m))
                meta.slice_of[k] = (i * per, (i + 1) * per, p.items)
            if i < m - 1:
                meta.outputs[chain_key] = Payload(1, node.meta.context_tokens)
            pid = f"{nid}.pd{i}"
            out.nodes[pid] = PrimitiveNode(pid, PrimitiveKind.PARTIAL_DECODING, meta)
            pd_ids.append(pid)

        new_edges = []
        for e in out.edges:
            if e.dst == nid:
                new_edges.append(Edge(e.src, pd_ids[0], e.key))
            elif e.src == nid:
                new_edges.extend(Edge(pid, e.dst, e.key) for pid in pd_ids)
            else:
                new_edges.append(e)
        new_edges += [Edge(pd_ids[i], pd_ids[i + 1], chain_key) for i in range(m - 1)]
        del out.nodes[nid]
        out.edges = _dedupe(new_edges)

        for e in consumers:
            _propagate_split(out, e.dst, m)
        fired = True
    if _insert_aggregates(out):
        fired = True
    return out, fired


def _propagate_split(g: PGraph, nid: str, parts: int) -> None:
    """Split a consumer into per-segment stages and continue downstream while
    consumers stay batchable and itemwise-compatible."""
    node = g.nodes.get(nid)
    if node is None or node.meta.slice_of:
        return
    items = node.meta.batch_items
    downstream = [e.dst for e in g.edges if e.src == nid]
    stage_size = items // parts
    _split_node(g, nid, _even_ranges(items, stage_size))
    out_total = {k: p.items for k, p in node.meta.outputs.items()}
    for did in dict.fromkeys(downstream):
        child = g.nodes.get(did)
        if child is None or child.meta.slice_of:
            continue
        feeds = {e.key for e in g.edges if e.dst == did and e.key in out_total}
        if not feeds:
            continue
        if (
            child.batchable
            and child.kind not in CONTROL_KINDS
            and all(out_total[k] == child.meta.batch_items for k in feeds)
            and child.meta.batch_items % parts == 0
            and _splittable_outputs(child)
        ):
            _propagate_split(g, did, parts)


# ---------------------------------------------------------------------------
# Optimization driver and cache


PASS_FUNCS = {
    PassId.DEPENDENCY_PRUNING: prune_dependencies,
    PassId.STAGE_DECOMPOSITION: stage_decompose,
    PassId.PREFILL_SPLIT: split_prefill,
    PassId.DECODE_PIPELINING: pipeline_decode,
}


def optimize(
    p: PGraph,
    engines: EngineSet | None = None,
    passes: frozenset[PassId] | set[PassId] = ALL_PASSES,
    pass_log: list[PassId] | None = None,
) -> EGraph:
    """Apply the enabled passes in fixed order to a fixpoint, then annotate depths."""
    g = p.clone()
    firings: list[str] = []
    for _ in range(MAX_REWRITE_ROUNDS):
        changed = False
        for pid in PASS_ORDER:
            if pid not in passes:
                continue
            if pass_log is not None:
                pass_log.append(pid)
            g, fired = PASS_FUNCS[pid](g, engines)
            if fired:
                changed = True
                firings.append(pid.value)
        if not changed:
            break
    else:
        raise OptimizerLimit(
            f"rewrites did not converge within {MAX_REWRITE_ROUNDS} rounds for {p.query_id!r}"
        )
    return EGraph(
        nodes=g.nodes,
        edges=g.edges,
        query_id=p.query_id,
        depth=assign_depths(g),
        provenance=tuple(dict.fromkeys(firings)),
    )


@dataclass(frozen=True)
class OptimizerCacheKey:
    template_id: str
    config_form: str
    profile_fingerprint: str
    passes: tuple[str, ...]

    def digest(self) -> str:
        blob = "|".join((self.template_id, self.config_form, self.profile_fingerprint,
                         ",".join(self.passes)))
        return hashlib.sha256(blob.encode()).hexdigest()


class OptimizerCache:
    """Shape cache for optimized graphs; hits are restamped with the query id."""

    def __init__(self):
        self._store: dict[str, EGraph] = {}
        self.hits = 0
        self.misses = 0

    def key_for(self, template: WorkflowTemplate, config: QueryConfig,
                engines: EngineSet | None, passes) -> OptimizerCacheKey:
        tpl_blob = json.dumps(template.to_dict(), sort_keys=True, separators=(",", ":"))
        return OptimizerCacheKey(
            template_id=hashlib.sha256(tpl_blob.encode()).hexdigest(),
            config_form=config.canonical(),
            profile_fingerprint=engines.fingerprint() if engines else "",
            passes=tuple(sorted(p.value for p in passes)),
        )

    def get(self, key: OptimizerCacheKey) -> EGraph | None:
        return self._store.get(key.digest())

    def put(self, key: OptimizerCacheKey, graph: EGraph) -> None:
        self._store[key.digest()] = graph


def compile_query(
    template: WorkflowTemplate,
    config: QueryConfig,
    engines: EngineSet | None = None,
    passes: frozenset[PassId] | set[PassId] = ALL_PASSES,
    cache: OptimizerCache | None = None,
) -> EGraph:
    """Template + config -> optimized e-graph, optionally via the shape cache."""
    if cache is not None:
        key = cache.key_for(template, config, engines, passes)
        hit = cache.get(key)
        if hit is not None:
            cache.hits += 1
            return restamp_query(hit, config.query_id, config.app_id)
        cache.misses += 1
        e = optimize(transform(template, config, engines), engines, passes)
        cache.put(key, e)
        return e
    return optimize(transform(template, config, engines), engines, passes)


def chain_graph(template: WorkflowTemplate, config: QueryConfig,
                profiles: EngineSet | None = None) -> EGraph:
    """Sequential-module baseline: the unoptimized graph plus component-order
    edges, so each component starts only after its predecessor finishes."""
    g = transform(template, config, profiles)
    subs = {comp.name: decompose_component(comp, config.for_component(comp))
            for comp in template.components}
    present = {n for n in g.nodes}
    # Chain only the components that survived condition pruning.
    order = [c.name for c in template.components if subs[c.name].tail in present]
    for a, b in zip(order, order[1:]):
        for head in subs[b].heads:
            if head in present:
                g.edges.append(Edge(subs[a].tail, head, None))
    g.edges = _dedupe(g.edges)
    return EGraph(nodes=g.nodes, edges=g.edges, query_id=g.query_id,
                  depth=assign_depths(g), provenance=("chain",))


def chain_parallel_graph(template: WorkflowTemplate, config: QueryConfig,
                         profiles: EngineSet | None = None) -> EGraph:
    """Module-parallel baseline with instruction prefix caching: independent
    components run concurrently, and each prefill discounts a cached leading
    instruction segment; no decomposition passes are applied."""
    g = transform(template, config, profiles)
    g, _ = prune_dependencies(g)
    for node in g.nodes.values():
        if node.kind in PREFILL_KINDS and node.meta.token_counts:
            first_name, first_tokens = next(iter(node.meta.token_counts.items()))
            if first_name == "instruction":
                node.meta.cached_prefix_tokens = first_tokens
    return EGraph(nodes=g.nodes, edges=g.edges, query_id=g.query_id,
                  depth=assign_depths(g), provenance=("chain-parallel",))
