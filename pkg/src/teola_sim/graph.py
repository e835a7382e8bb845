"""Primitive-level dataflow graph IR.

A query's workflow is a DAG of symbolic primitive nodes. Payloads are
descriptors (item counts, token counts), never real tensors or text; the
latency model supplies all timing. Graphs are treated as immutable after
construction: rewrite passes clone and return new graphs.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, NamedTuple

from .errors import CyclicGraph

BATCHABLE = "batchable"
SPLITTABLE = "splittable"


class PrimitiveKind(str, Enum):
    RERANKING = "Reranking"
    INGESTION = "Ingestion"
    SEARCHING = "Searching"
    EMBEDDING = "Embedding"
    PREFILLING = "Prefilling"
    DECODING = "Decoding"
    PARTIAL_PREFILLING = "PartialPrefilling"
    FULL_PREFILLING = "FullPrefilling"
    PARTIAL_DECODING = "PartialDecoding"
    CONDITION = "Condition"
    AGGREGATE = "Aggregate"


PREFILL_KINDS = frozenset(
    {PrimitiveKind.PREFILLING, PrimitiveKind.PARTIAL_PREFILLING, PrimitiveKind.FULL_PREFILLING}
)
DECODE_KINDS = frozenset({PrimitiveKind.DECODING, PrimitiveKind.PARTIAL_DECODING})
LLM_KINDS = PREFILL_KINDS | DECODE_KINDS
CONTROL_KINDS = frozenset({PrimitiveKind.CONDITION, PrimitiveKind.AGGREGATE})

# Canonical engine category for each kind; Condition/Aggregate run on the
# orchestrator itself.
ENGINE_CATEGORY = {
    PrimitiveKind.RERANKING: "rerank",
    PrimitiveKind.INGESTION: "ingest",
    PrimitiveKind.SEARCHING: "search",
    PrimitiveKind.EMBEDDING: "embedding",
    PrimitiveKind.PREFILLING: "llm",
    PrimitiveKind.DECODING: "llm",
    PrimitiveKind.PARTIAL_PREFILLING: "llm",
    PrimitiveKind.FULL_PREFILLING: "llm",
    PrimitiveKind.PARTIAL_DECODING: "llm",
    PrimitiveKind.CONDITION: "control",
    PrimitiveKind.AGGREGATE: "control",
}

# Engine categories and the kinds they execute. "tool" engines serve external
# lookups, which reuse the Searching primitive.
CATEGORY_ACCEPTS = {
    "rerank": frozenset({PrimitiveKind.RERANKING}),
    "ingest": frozenset({PrimitiveKind.INGESTION}),
    "search": frozenset({PrimitiveKind.SEARCHING}),
    "tool": frozenset({PrimitiveKind.SEARCHING}),
    "embedding": frozenset({PrimitiveKind.EMBEDDING}),
    "llm": LLM_KINDS,
}


@dataclass(frozen=True)
class Payload:
    """Symbolic size descriptor for data flowing along an edge."""

    items: int = 1
    tokens: int = 0

    def to_list(self) -> list[int]:
        return [self.items, self.tokens]

    @classmethod
    def from_list(cls, raw) -> "Payload":
        return cls(int(raw[0]), int(raw[1]))


@dataclass
class MetadataProfile:
    """Per-node attribute profile.

    ``token_counts`` holds the ordered prompt segments of a prefill node
    (segment name -> token count); segment names that match an input key are
    produced upstream, the rest are available with the query. ``slice_of``
    records, per output key, which item slice of an original node a stage
    covers: key -> (start, stop, total).
    """

    inputs: tuple[str, ...] = ()
    outputs: dict[str, Payload] = field(default_factory=dict)
    engine_id: str = ""
    batch_items: int = 1
    token_counts: dict[str, int] = field(default_factory=dict)
    decode_tokens: int = 0
    context_tokens: int = 0
    out_segments: int = 1
    annotations: frozenset[str] = frozenset()
    cached_prefix_tokens: int = 0
    slice_of: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    query_id: str = ""
    app_id: str = ""

    @property
    def prompt_tokens(self) -> int:
        return sum(self.token_counts.values())

    def validate(self) -> list[str]:
        problems = []
        if self.batch_items < 1:
            problems.append(f"batch_items must be >= 1, got {self.batch_items}")
        if any(t < 0 for t in self.token_counts.values()):
            problems.append("token counts must be >= 0")
        if self.out_segments < 1:
            problems.append(f"out_segments must be >= 1, got {self.out_segments}")
        bad = self.annotations - {BATCHABLE, SPLITTABLE}
        if bad:
            problems.append(f"unknown annotations: {sorted(bad)}")
        return problems

    def to_dict(self) -> dict:
        return {
            "inputs": list(self.inputs),
            "outputs": {k: p.to_list() for k, p in self.outputs.items()},
            "engine_id": self.engine_id,
            "batch_items": self.batch_items,
            # list of pairs: prompt segment order is significant and must
            # survive canonical (sorted-key) serialization
            "token_counts": [[k, v] for k, v in self.token_counts.items()],
            "decode_tokens": self.decode_tokens,
            "context_tokens": self.context_tokens,
            "out_segments": self.out_segments,
            "annotations": sorted(self.annotations),
            "cached_prefix_tokens": self.cached_prefix_tokens,
            "slice_of": {k: list(v) for k, v in self.slice_of.items()},
            "query_id": self.query_id,
            "app_id": self.app_id,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "MetadataProfile":
        counts = raw.get("token_counts", [])
        pairs = counts.items() if isinstance(counts, Mapping) else counts
        return cls(
            inputs=tuple(raw.get("inputs", ())),
            outputs={k: Payload.from_list(v) for k, v in raw.get("outputs", {}).items()},
            engine_id=raw.get("engine_id", ""),
            batch_items=int(raw.get("batch_items", 1)),
            token_counts={k: int(v) for k, v in pairs},
            decode_tokens=int(raw.get("decode_tokens", 0)),
            context_tokens=int(raw.get("context_tokens", 0)),
            out_segments=int(raw.get("out_segments", 1)),
            annotations=frozenset(raw.get("annotations", ())),
            cached_prefix_tokens=int(raw.get("cached_prefix_tokens", 0)),
            slice_of={k: tuple(v) for k, v in raw.get("slice_of", {}).items()},
            query_id=raw.get("query_id", ""),
            app_id=raw.get("app_id", ""),
        )


@dataclass
class PrimitiveNode:
    node_id: str
    kind: PrimitiveKind
    meta: MetadataProfile

    @property
    def batchable(self) -> bool:
        return BATCHABLE in self.meta.annotations

    @property
    def splittable(self) -> bool:
        return SPLITTABLE in self.meta.annotations

    def shape_label(self) -> tuple:
        """Structural label used for isomorphism checks; query identity excluded."""
        m = self.meta
        return (
            self.kind.value,
            m.engine_id,
            m.batch_items,
            tuple(m.token_counts.items()),
            m.decode_tokens,
            m.out_segments,
            tuple(sorted(m.annotations)),
            tuple(sorted((k, p.items, p.tokens) for k, p in m.outputs.items())),
            tuple(sorted(m.inputs)),
            tuple(sorted((k, v) for k, v in m.slice_of.items())),
        )

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "kind": self.kind.value, "meta": self.meta.to_dict()}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "PrimitiveNode":
        return cls(raw["node_id"], PrimitiveKind(raw["kind"]), MetadataProfile.from_dict(raw["meta"]))


class Edge(NamedTuple):
    src: str
    dst: str
    key: str | None  # None marks an ordering-only edge carrying no data


@dataclass
class PGraph:
    """Per-query primitive dataflow graph prior to optimization."""

    nodes: dict[str, PrimitiveNode] = field(default_factory=dict)
    edges: list[Edge] = field(default_factory=list)
    query_id: str = ""

    def children(self) -> dict[str, list[Edge]]:
        out: dict[str, list[Edge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            out[e.src].append(e)
        return out

    def parents(self) -> dict[str, list[Edge]]:
        out: dict[str, list[Edge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            out[e.dst].append(e)
        return out

    def sources(self) -> list[str]:
        indeg = {n: 0 for n in self.nodes}
        for e in self.edges:
            indeg[e.dst] += 1
        return sorted(n for n, d in indeg.items() if d == 0)

    def sinks(self) -> list[str]:
        outdeg = {n: 0 for n in self.nodes}
        for e in self.edges:
            outdeg[e.src] += 1
        return sorted(n for n, d in outdeg.items() if d == 0)

    def clone(self) -> "PGraph":
        return parse_graph(serialize_graph(self))

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "nodes": [self.nodes[k].to_dict() for k in sorted(self.nodes)],
            "edges": sorted([e.src, e.dst, e.key] for e in self.edges),
        }


@dataclass
class EGraph(PGraph):
    """Optimized executable graph with depth annotations and pass provenance."""

    depth: dict[str, int] = field(default_factory=dict)
    provenance: tuple[str, ...] = ()

    def clone(self) -> "EGraph":
        return parse_graph(serialize_graph(self))

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["depth"] = {k: self.depth[k] for k in sorted(self.depth)}
        d["provenance"] = list(self.provenance)
        return d


def topo_sort(g: PGraph) -> list[str]:
    """Topological order with ties broken by ascending node_id."""
    indeg = {n: 0 for n in g.nodes}
    for e in g.edges:
        indeg[e.dst] += 1
    children = g.children()
    ready = [n for n, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order: list[str] = []
    while ready:
        n = heapq.heappop(ready)
        order.append(n)
        for e in children[n]:
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(ready, e.dst)
    if len(order) != len(g.nodes):
        raise CyclicGraph(f"graph {g.query_id!r} contains a cycle")
    return order


def assign_depths(g: PGraph) -> dict[str, int]:
    """Depth of each node: sinks are 0, parents sit above their deepest child."""
    order = topo_sort(g)
    children = g.children()
    depth = {n: 0 for n in g.nodes}
    for n in reversed(order):
        for e in children[n]:
            depth[n] = max(depth[n], depth[e.dst] + 1)
    return depth


def validate_graph(g: PGraph, profiles: Mapping | None = None) -> list[str]:
    """Structural violations: cycles, dangling endpoints, bad keys, bad bindings."""
    problems: list[str] = []
    for e in g.edges:
        if e.src not in g.nodes:
            problems.append(f"edge source {e.src!r} does not exist")
        if e.dst not in g.nodes:
            problems.append(f"edge target {e.dst!r} does not exist")
    if problems:
        return problems
    try:
        topo_sort(g)
    except CyclicGraph as exc:
        problems.append(str(exc))
    for e in g.edges:
        if e.key is None:
            continue
        if e.key not in g.nodes[e.src].meta.outputs:
            problems.append(f"edge {e.src}->{e.dst}: key {e.key!r} not produced by source")
        if e.key not in g.nodes[e.dst].meta.inputs:
            problems.append(f"edge {e.src}->{e.dst}: key {e.key!r} not consumed by target")
    for node in g.nodes.values():
        problems.extend(f"{node.node_id}: {p}" for p in node.meta.validate())
        if node.kind in CONTROL_KINDS:
            continue
        if profiles is not None:
            prof = profiles.get(node.meta.engine_id)
            if prof is None:
                problems.append(f"{node.node_id}: unknown engine {node.meta.engine_id!r}")
            elif node.kind not in CATEGORY_ACCEPTS.get(prof.category, frozenset()):
                problems.append(
                    f"{node.node_id}: kind {node.kind.value} not served by "
                    f"{prof.category!r} engine {node.meta.engine_id!r}"
                )
    if isinstance(g, EGraph) and g.depth:
        for e in g.edges:
            if g.depth.get(e.src, 0) <= g.depth.get(e.dst, 0):
                problems.append(f"edge {e.src}->{e.dst}: depth must strictly decrease")
    return problems


def serialize_graph(g: PGraph) -> str:
    """Canonical JSON form: stable key ordering, sorted nodes and edges."""
    return json.dumps(g.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def parse_graph(text: str) -> PGraph:
    raw = json.loads(text) if isinstance(text, str) else text
    nodes = {n["node_id"]: PrimitiveNode.from_dict(n) for n in raw["nodes"]}
    edges = [Edge(s, d, k) for s, d, k in raw["edges"]]
    if "depth" in raw:
        return EGraph(
            nodes=nodes,
            edges=edges,
            query_id=raw.get("query_id", ""),
            depth={k: int(v) for k, v in raw["depth"].items()},
            provenance=tuple(raw.get("provenance", ())),
        )
    return PGraph(nodes=nodes, edges=edges, query_id=raw.get("query_id", ""))


def graph_fingerprint(g: PGraph, ignore_query: bool = True) -> str:
    """Hash of the label/structure of a graph, independent of node ids.

    Iterative Weisfeiler-Lehman style refinement over shape labels. Two graphs
    with equal fingerprints are treated as having identical shape.
    """
    labels = {n: repr(node.shape_label()) for n, node in g.nodes.items()}
    if not ignore_query:
        labels = {n: labels[n] + g.nodes[n].meta.query_id for n in labels}
    children = g.children()
    parents = g.parents()
    for _ in range(max(1, len(g.nodes).bit_length())):
        nxt = {}
        for n in g.nodes:
            down = sorted(f"{e.key}:{labels[e.dst]}" for e in children[n])
            up = sorted(f"{e.key}:{labels[e.src]}" for e in parents[n])
            nxt[n] = hashlib.sha256(
                (labels[n] + "|" + ";".join(down) + "|" + ";".join(up)).encode()
            ).hexdigest()
        labels = nxt
    digest = hashlib.sha256()
    for h in sorted(labels.values()):
        digest.update(h.encode())
    digest.update(str(len(g.edges)).encode())
    return digest.hexdigest()


def is_isomorphic(a: PGraph, b: PGraph) -> bool:
    """Exact isomorphism over (structure, shape labels)."""
    if len(a.nodes) != len(b.nodes) or len(a.edges) != len(b.edges):
        return False
    import networkx as nx
    from networkx.algorithms import isomorphism

    def build(g: PGraph):
        gx = nx.MultiDiGraph()
        for n, node in g.nodes.items():
            gx.add_node(n, label=node.shape_label())
        for e in g.edges:
            gx.add_edge(e.src, e.dst, key=e.key, label=e.key)
        return gx

    matcher = isomorphism.MultiDiGraphMatcher(
        build(a),
        build(b),
        node_match=lambda x, y: x["label"] == y["label"],
        edge_match=lambda x, y: sorted(d["label"] or "" for d in x.values())
        == sorted(d["label"] or "" for d in y.values()),
    )
    return matcher.is_isomorphic()


def diff_graphs(a: PGraph, b: PGraph) -> list[str]:
    """Human-readable structural differences; empty when isomorphic."""
    if is_isomorphic(a, b):
        return []
    lines = []
    if len(a.nodes) != len(b.nodes):
        lines.append(f"node count: {len(a.nodes)} vs {len(b.nodes)}")
    if len(a.edges) != len(b.edges):
        lines.append(f"edge count: {len(a.edges)} vs {len(b.edges)}")

    def kind_counts(g: PGraph):
        counts: dict[str, int] = {}
        for node in g.nodes.values():
            counts[node.kind.value] = counts.get(node.kind.value, 0) + 1
        return counts

    ka, kb = kind_counts(a), kind_counts(b)
    for kind in sorted(set(ka) | set(kb)):
        if ka.get(kind, 0) != kb.get(kind, 0):
            lines.append(f"{kind}: {ka.get(kind, 0)} vs {kb.get(kind, 0)}")
    la = sorted(n.shape_label() for n in a.nodes.values())
    lb = sorted(n.shape_label() for n in b.nodes.values())
    if la != lb:
        only_a = [x for x in la if x not in lb]
        only_b = [x for x in lb if x not in la]
        for x in only_a[:5]:
            lines.append(f"only in first: {x[0]} on {x[1]!r} items={x[2]}")
        for x in only_b[:5]:
            lines.append(f"only in second: {x[0]} on {x[1]!r} items={x[2]}")
    if not lines:
        lines.append("same node shapes but different wiring")
    return lines


def relabel_nodes(g: PGraph, mapping: Mapping[str, str]) -> PGraph:
    """Rename node ids; structure and metadata are untouched."""
    nodes = {mapping[n]: replace(node, node_id=mapping[n]) for n, node in g.nodes.items()}
    edges = [Edge(mapping[e.src], mapping[e.dst], e.key) for e in g.edges]
    if isinstance(g, EGraph):
        return EGraph(
            nodes=nodes,
            edges=edges,
            query_id=g.query_id,
            depth={mapping[n]: d for n, d in g.depth.items()},
            provenance=g.provenance,
        )
    return PGraph(nodes=nodes, edges=edges, query_id=g.query_id)


def restamp_query(g: EGraph, query_id: str, app_id: str | None = None) -> EGraph:
    """Clone a graph for a new query; only query identity changes."""
    out = g.clone()
    out.query_id = query_id
    for node in out.nodes.values():
        node.meta.query_id = query_id
        if app_id is not None:
            node.meta.app_id = app_id
    return out
