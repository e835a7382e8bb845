"""Built-in application templates and the seeded stochastic workload generator."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, NamedTuple

from .errors import ConfigParse, UnknownApp
from .graph import BATCHABLE, SPLITTABLE
from .workflow import (
    Component,
    QueryConfig,
    WorkflowTemplate,
    ROLE_CONDITION,
    ROLE_CONTEXTUALIZE,
    ROLE_INDEXING,
    ROLE_PROXY_JUDGE,
    ROLE_QUERY_EMBEDDING,
    ROLE_QUERY_EXPANSION,
    ROLE_RERANK,
    ROLE_SEARCH,
    ROLE_SYNTHESIZE,
    ROLE_TOOL_CALL,
)


class AppKind(str, Enum):
    SEARCH_ENGINE_GEN = "SearchEngineGen"
    LLM_AGENT = "LlmAgent"
    NAIVE_RAG_QA = "NaiveRagQA"
    ADVANCED_RAG_QA = "AdvancedRagQA"
    CONTEXTUAL_RETRIEVAL = "ContextualRetrieval"

    @classmethod
    def parse(cls, name: str) -> "AppKind":
        for kind in cls:
            if kind.value.lower() == str(name).lower():
                return kind
        raise UnknownApp(f"unknown app kind {name!r}")


# Default engine ids referenced by the built-in templates; the bundled
# profile sets define all of them.
CORE_LLM = "llm0"
SMALL_LLM = "llm-small0"
CTX_LLM = "llm-ctx0"
EMBED = "embed0"
VDB_INGEST = "vdb-ingest0"
VDB_SEARCH = "vdb-search0"
RERANKER = "rerank0"
WEB_SEARCH = "web0"
TOOLS = "tool0"

CHUNK_TOKENS = 256
CHUNK_OVERLAP = 30  # documented chunking default; carried in template params


def build_app_template(kind: AppKind) -> WorkflowTemplate:
    """Canonical workflow template for one of the five built-in applications."""
    if kind is AppKind.NAIVE_RAG_QA:
        return WorkflowTemplate(
            name=kind.value,
            components=(
                Component(
                    "indexing", ROLE_INDEXING,
                    {"embed": EMBED, "ingest": VDB_INGEST},
                    in_kwargs=("doc_chunks",), out_kwargs=("index",),
                    params={"chunk_count": 48, "chunk_token_len": CHUNK_TOKENS,
                            "chunk_overlap": CHUNK_OVERLAP},
                ),
                Component(
                    "query_embedding", ROLE_QUERY_EMBEDDING, EMBED,
                    in_kwargs=("question",), out_kwargs=("query_vectors",),
                    params={"query_count": 1, "query_token_len": 40},
                ),
                Component(
                    "search", ROLE_SEARCH, VDB_SEARCH,
                    in_kwargs=("index", "query_vectors"), out_kwargs=("top_chunks",),
                    params={"query_count": 1, "per_query_top_k": 3,
                            "chunk_token_len": CHUNK_TOKENS},
                ),
                Component(
                    "synthesize", ROLE_SYNTHESIZE, CORE_LLM,
                    in_kwargs=("question", "top_chunks"), out_kwargs=("answer",),
                    params={"synthesis_mode": "tree", "chunk_inputs": 3,
                            "chunk_tokens": CHUNK_TOKENS, "instruction_tokens": 60,
                            "question_tokens": 40, "answer_tokens": 60,
                            "final_tokens": 80, "context_key": "top_chunks"},
                ),
            ),
            edges=(("indexing", "query_embedding"), ("query_embedding", "search"),
                   ("search", "synthesize")),
            source_keys=("question", "doc_chunks"),
        )

    if kind is AppKind.ADVANCED_RAG_QA:
        return WorkflowTemplate(
            name=kind.value,
            components=(
                Component(
                    "indexing", ROLE_INDEXING,
                    {"embed": EMBED, "ingest": VDB_INGEST},
                    in_kwargs=("doc_chunks",), out_kwargs=("index",),
                    params={"chunk_count": 48, "chunk_token_len": CHUNK_TOKENS,
                            "chunk_overlap": CHUNK_OVERLAP},
                ),
                Component(
                    "query_expansion", ROLE_QUERY_EXPANSION, CORE_LLM,
                    in_kwargs=("question",), out_kwargs=("expanded_queries",),
                    annotations=frozenset({SPLITTABLE}),
                    params={"expansion_count": 3, "instruction_tokens": 40,
                            "question_tokens": 40, "tokens_per_query": 20},
                ),
                Component(
                    "query_embedding", ROLE_QUERY_EMBEDDING, EMBED,
                    in_kwargs=("expanded_queries",), out_kwargs=("query_vectors",),
                    annotations=frozenset({BATCHABLE}),
                    params={"query_count": 3, "query_token_len": 20},
                ),
                Component(
                    "search", ROLE_SEARCH, VDB_SEARCH,
                    in_kwargs=("index", "query_vectors"), out_kwargs=("candidate_chunks",),
                    params={"query_count": 3, "per_query_top_k": 16,
                            "chunk_token_len": CHUNK_TOKENS},
                ),
                Component(
                    "rerank", ROLE_RERANK, RERANKER,
                    in_kwargs=("question", "candidate_chunks"), out_kwargs=("top_chunks",),
                    params={"candidate_count": 48, "top_k": 3,
                            "chunk_token_len": CHUNK_TOKENS},
                ),
                Component(
                    "synthesize", ROLE_SYNTHESIZE, CORE_LLM,
                    in_kwargs=("question", "top_chunks"), out_kwargs=("answer",),
                    params={"synthesis_mode": "refine", "chunk_inputs": 3,
                            "chunk_tokens": CHUNK_TOKENS, "instruction_tokens": 60,
                            "question_tokens": 40, "answer_tokens": 60,
                            "final_tokens": 80, "context_key": "top_chunks"},
                ),
            ),
            edges=(("indexing", "query_expansion"), ("query_expansion", "query_embedding"),
                   ("query_embedding", "search"), ("search", "rerank"),
                   ("rerank", "synthesize")),
            source_keys=("question", "doc_chunks"),
        )

    if kind is AppKind.SEARCH_ENGINE_GEN:
        return WorkflowTemplate(
            name=kind.value,
            components=(
                Component(
                    "proxy", ROLE_PROXY_JUDGE, SMALL_LLM,
                    in_kwargs=("question",), out_kwargs=("draft_answer",),
                    params={"instruction_tokens": 60, "question_tokens": 40,
                            "decode_tokens": 60},
                ),
                Component(
                    "judge", ROLE_PROXY_JUDGE, SMALL_LLM,
                    in_kwargs=("question", "draft_answer"), out_kwargs=("verdict",),
                    params={"instruction_tokens": 40, "question_tokens": 40,
                            "input_tokens": {"draft_answer": 60}, "decode_tokens": 8},
                ),
                Component(
                    "decide", ROLE_CONDITION, "",
                    in_kwargs=("verdict",), out_kwargs=("route",),
                    params={"condition_key": "needs_search", "needs_search": True,
                            "on_true": ["web_search"], "on_false": []},
                ),
                Component(
                    "web_search", ROLE_SEARCH, WEB_SEARCH,
                    in_kwargs=("route", "question"), out_kwargs=("search_results",),
                    params={"query_count": 1, "per_query_top_k": 4,
                            "chunk_token_len": 128},
                ),
                Component(
                    "synthesize", ROLE_SYNTHESIZE, CORE_LLM,
                    in_kwargs=("question", "draft_answer", "search_results"),
                    out_kwargs=("answer",),
                    params={"synthesis_mode": "oneshot", "instruction_tokens": 60,
                            "question_tokens": 40, "final_tokens": 120,
                            "context_segments": [["draft_answer", 60],
                                                 ["search_results", 512]]},
                ),
            ),
            edges=(("proxy", "judge"), ("judge", "decide"), ("decide", "web_search"),
                   ("web_search", "synthesize"), ("decide", "synthesize")),
            source_keys=("question",),
        )

    if kind is AppKind.LLM_AGENT:
        return WorkflowTemplate(
            name=kind.value,
            components=(
                Component(
                    "plan", ROLE_QUERY_EXPANSION, CORE_LLM,
                    in_kwargs=("question",), out_kwargs=("plan_steps",),
                    annotations=frozenset({SPLITTABLE}),
                    params={"expansion_count": 4, "instruction_tokens": 60,
                            "question_tokens": 40, "tokens_per_query": 30},
                ),
                Component(
                    "tools", ROLE_TOOL_CALL, TOOLS,
                    in_kwargs=("plan_steps",), out_kwargs=("tool_results",),
                    annotations=frozenset({BATCHABLE}),
                    params={"call_count": 4, "result_tokens": 100},
                ),
                Component(
                    "synthesize", ROLE_SYNTHESIZE, CORE_LLM,
                    in_kwargs=("question", "tool_results"), out_kwargs=("answer",),
                    params={"synthesis_mode": "oneshot", "instruction_tokens": 60,
                            "question_tokens": 40, "final_tokens": 120,
                            "context_segments": [["tool_results", 400]]},
                ),
            ),
            edges=(("plan", "tools"), ("tools", "synthesize")),
            source_keys=("question",),
        )

    if kind is AppKind.CONTEXTUAL_RETRIEVAL:
        ctx_tokens = CHUNK_TOKENS + 40
        return WorkflowTemplate(
            name=kind.value,
            components=(
                Component(
                    "contextualize", ROLE_CONTEXTUALIZE, CTX_LLM,
                    in_kwargs=("doc_chunks",), out_kwargs=("ctx_chunks",),
                    annotations=frozenset({BATCHABLE}),
                    params={"chunk_count": 48, "chunk_token_len": CHUNK_TOKENS,
                            "neighbor_count": 4, "instruction_tokens": 50,
                            "summary_tokens": 40},
                ),
                Component(
                    "indexing", ROLE_INDEXING,
                    {"embed": EMBED, "ingest": VDB_INGEST},
                    in_kwargs=("ctx_chunks",), out_kwargs=("index",),
                    params={"chunk_count": 48, "chunk_token_len": ctx_tokens},
                ),
                Component(
                    "query_embedding", ROLE_QUERY_EMBEDDING, EMBED,
                    in_kwargs=("question",), out_kwargs=("query_vectors",),
                    params={"query_count": 1, "query_token_len": 40},
                ),
                Component(
                    "search", ROLE_SEARCH, VDB_SEARCH,
                    in_kwargs=("index", "query_vectors"), out_kwargs=("candidate_chunks",),
                    params={"query_count": 1, "per_query_top_k": 32,
                            "chunk_token_len": ctx_tokens},
                ),
                Component(
                    "rerank", ROLE_RERANK, RERANKER,
                    in_kwargs=("question", "candidate_chunks"), out_kwargs=("top_chunks",),
                    params={"candidate_count": 32, "top_k": 3,
                            "chunk_token_len": ctx_tokens},
                ),
                Component(
                    "synthesize", ROLE_SYNTHESIZE, CORE_LLM,
                    in_kwargs=("question", "top_chunks"), out_kwargs=("answer",),
                    params={"synthesis_mode": "oneshot", "chunk_inputs": 3,
                            "chunk_tokens": ctx_tokens, "instruction_tokens": 60,
                            "question_tokens": 40, "final_tokens": 120,
                            "context_key": "top_chunks"},
                ),
            ),
            edges=(("contextualize", "indexing"), ("indexing", "query_embedding"),
                   ("query_embedding", "search"), ("search", "rerank"),
                   ("rerank", "synthesize")),
            source_keys=("question", "doc_chunks"),
        )

    raise UnknownApp(f"no template for {kind}")


# ---------------------------------------------------------------------------
# Workload specs and generation


@dataclass(frozen=True)
class Distribution:
    """Bounded sampling descriptor: constant, integer uniform[a,b], or choice."""

    kind: str
    args: tuple

    def sample(self, rng: random.Random):
        if self.kind == "constant":
            return self.args[0]
        if self.kind == "uniform":
            return rng.randint(int(self.args[0]), int(self.args[1]))
        if self.kind == "choice":
            return rng.choice(self.args)
        raise ConfigParse(f"unknown distribution kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {self.kind: self.args[0] if self.kind == "constant" else list(self.args)}

    @classmethod
    def parse(cls, raw) -> "Distribution":
        if isinstance(raw, Distribution):
            return raw
        if isinstance(raw, Mapping) and len(raw) == 1:
            kind, val = next(iter(raw.items()))
            if kind == "constant":
                return cls("constant", (val,))
            if kind in ("uniform", "choice"):
                return cls(kind, tuple(val))
        if isinstance(raw, (int, float, str, bool)):
            return cls("constant", (raw,))
        raise ConfigParse(f"bad distribution descriptor: {raw!r}")


def constant(v) -> Distribution:
    return Distribution("constant", (v,))


def uniform(a, b) -> Distribution:
    return Distribution("uniform", (a, b))


def choice(*vals) -> Distribution:
    return Distribution("choice", tuple(vals))


# Per-app default parameter distributions, overridable per workload spec.
DEFAULT_DISTRIBUTIONS: dict[AppKind, dict[str, Distribution]] = {
    AppKind.NAIVE_RAG_QA: {
        "indexing.chunk_count": uniform(32, 64),
        "synthesize.final_tokens": uniform(60, 110),
    },
    AppKind.ADVANCED_RAG_QA: {
        "indexing.chunk_count": uniform(32, 64),
        "query_expansion.tokens_per_query": uniform(15, 25),
        "synthesize.final_tokens": uniform(60, 110),
    },
    AppKind.SEARCH_ENGINE_GEN: {
        "decide.needs_search": choice(True, True, False),
        "synthesize.final_tokens": uniform(60, 110),
    },
    AppKind.LLM_AGENT: {
        "plan.expansion_count": choice(3, 4, 5),
        "synthesize.final_tokens": uniform(60, 110),
    },
    AppKind.CONTEXTUAL_RETRIEVAL: {
        "synthesize.final_tokens": uniform(60, 110),
    },
}


def _reconcile(kind: AppKind, params: dict[str, dict[str, Any]]) -> None:
    """Keep cross-component parameters consistent after sampling."""
    if kind is AppKind.SEARCH_ENGINE_GEN:
        needs = params.get("decide", {}).get("needs_search", True)
        segs = [["draft_answer", 60]]
        if needs:
            segs.append(["search_results", 512])
        params.setdefault("synthesize", {})["context_segments"] = segs
    elif kind is AppKind.LLM_AGENT:
        plan_len = params.get("plan", {}).get("expansion_count")
        if plan_len is not None:
            params.setdefault("tools", {})["call_count"] = plan_len
    elif kind is AppKind.CONTEXTUAL_RETRIEVAL:
        count = params.get("contextualize", {}).get("chunk_count")
        if count is not None:
            params.setdefault("indexing", {})["chunk_count"] = count


def default_query_config(kind: AppKind, query_id: str = "q0", app_id: str = "app0") -> QueryConfig:
    """Template defaults only; the fully deterministic canonical query."""
    return QueryConfig(query_id=query_id, app_id=app_id, params={})


@dataclass
class WorkloadSpec:
    app: AppKind
    app_id: str = "app0"
    rate_qps: float = 1.0
    duration_s: float = 10.0
    seed: int = 0
    overrides: dict[str, Distribution] = field(default_factory=dict)

    def __post_init__(self):
        if self.rate_qps <= 0:
            raise ConfigParse(f"arrival rate must be > 0, got {self.rate_qps}")
        if self.duration_s <= 0:
            raise ConfigParse(f"duration must be > 0, got {self.duration_s}")
        self.overrides = {k: Distribution.parse(v) for k, v in self.overrides.items()}

    def distributions(self) -> dict[str, Distribution]:
        dists = dict(DEFAULT_DISTRIBUTIONS.get(self.app, {}))
        dists.update(self.overrides)
        return dists

    def to_dict(self) -> dict:
        return {
            "app": self.app.value,
            "app_id": self.app_id,
            "rate_qps": self.rate_qps,
            "duration_s": self.duration_s,
            "seed": self.seed,
            "overrides": {k: d.to_dict() for k, d in self.overrides.items()},
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "WorkloadSpec":
        try:
            return cls(
                app=AppKind.parse(raw["app"]),
                app_id=raw.get("app_id", "app0"),
                rate_qps=float(raw.get("rate_qps", 1.0)),
                duration_s=float(raw.get("duration_s", 10.0)),
                seed=int(raw.get("seed", 0)),
                overrides={k: Distribution.parse(v)
                           for k, v in raw.get("overrides", {}).items()},
            )
        except KeyError as exc:
            raise ConfigParse(f"workload spec missing field: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


class Query(NamedTuple):
    query_id: str
    app_id: str
    app: AppKind
    arrival_ms: float
    config: QueryConfig


def generate_workload(spec: WorkloadSpec) -> list[Query]:
    """Poisson arrivals with per-query sampled configs; pure in (spec, seed)."""
    rng = random.Random(spec.seed)
    dists = spec.distributions()
    queries: list[Query] = []
    t = 0.0
    horizon_ms = spec.duration_s * 1000.0
    i = 0
    while True:
        t += rng.expovariate(spec.rate_qps) * 1000.0
        if t >= horizon_ms:
            break
        params: dict[str, dict[str, Any]] = {}
        for dotted in sorted(dists):
            comp, param = dotted.split(".", 1)
            params.setdefault(comp, {})[param] = dists[dotted].sample(rng)
        _reconcile(spec.app, params)
        qid = f"{spec.app_id}-q{i:04d}"
        queries.append(
            Query(qid, spec.app_id, spec.app, t,
                  QueryConfig(query_id=qid, app_id=spec.app_id, params=params))
        )
        i += 1
    return queries


def colocate(*streams: list[Query]) -> list[Query]:
    """Timestamp-ordered merge of per-app streams; app identity is kept."""
    ids = [s[0].app_id for s in streams if s]
    if len(set(ids)) != len(ids):
        raise ConfigParse("co-located streams must use distinct app_ids")
    merged = [q for s in streams for q in s]
    merged.sort(key=lambda q: (q.arrival_ms, q.app_id))
    return merged
