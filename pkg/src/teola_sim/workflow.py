"""Workflow templates and per-query configuration.

A template declares the app's components and their execution-order DAG, the
way current orchestration frameworks chain task modules. Per-query parameters
arrive in a QueryConfig and drive the expansion of each component into
primitives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import ConfigParse

# Roles the decomposer understands.
ROLE_INDEXING = "indexing"
ROLE_QUERY_EMBEDDING = "query-embedding"
ROLE_SEARCH = "search"
ROLE_RERANK = "rerank"
ROLE_QUERY_EXPANSION = "query-expansion"
ROLE_SYNTHESIZE = "llm-synthesize"
ROLE_PROXY_JUDGE = "proxy-judge"
ROLE_TOOL_CALL = "tool-call"
ROLE_CONTEXTUALIZE = "contextualize"
ROLE_CONDITION = "condition"

KNOWN_ROLES = {
    ROLE_INDEXING,
    ROLE_QUERY_EMBEDDING,
    ROLE_SEARCH,
    ROLE_RERANK,
    ROLE_QUERY_EXPANSION,
    ROLE_SYNTHESIZE,
    ROLE_PROXY_JUDGE,
    ROLE_TOOL_CALL,
    ROLE_CONTEXTUALIZE,
    ROLE_CONDITION,
}

SYNTHESIS_MODES = ("refine", "tree", "oneshot")


@dataclass
class Component:
    """One template component. ``engines`` binds primitive slots to engine ids.

    Single-engine components may pass a plain string; multi-engine roles
    (indexing) use a mapping such as {"embed": "embed0", "ingest": "vdb0"}.
    """

    name: str
    role: str
    engines: str | Mapping[str, str] = ""
    in_kwargs: tuple[str, ...] = ()
    out_kwargs: tuple[str, ...] = ()
    annotations: frozenset[str] = frozenset()
    params: dict[str, Any] = field(default_factory=dict)

    def engine(self, slot: str = "") -> str:
        if isinstance(self.engines, str):
            return self.engines
        return self.engines.get(slot, "")

    def engine_ids(self) -> list[str]:
        if isinstance(self.engines, str):
            return [self.engines] if self.engines else []
        return [v for v in self.engines.values() if v]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "role": self.role,
            "engines": self.engines if isinstance(self.engines, str) else dict(self.engines),
            "in_kwargs": list(self.in_kwargs),
            "out_kwargs": list(self.out_kwargs),
            "annotations": sorted(self.annotations),
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "Component":
        engines = raw.get("engines", "")
        return cls(
            name=raw["name"],
            role=raw["role"],
            engines=engines if isinstance(engines, str) else dict(engines),
            in_kwargs=tuple(raw.get("in_kwargs", ())),
            out_kwargs=tuple(raw.get("out_kwargs", ())),
            annotations=frozenset(raw.get("annotations", ())),
            params=dict(raw.get("params", {})),
        )


@dataclass
class WorkflowTemplate:
    """Component DAG. ``source_keys`` are provided with the query itself."""

    name: str
    components: tuple[Component, ...]
    edges: tuple[tuple[str, str], ...]
    source_keys: tuple[str, ...] = ()

    def component(self, name: str) -> Component:
        for c in self.components:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "components": [c.to_dict() for c in self.components],
            "edges": [list(e) for e in self.edges],
            "source_keys": list(self.source_keys),
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "WorkflowTemplate":
        return cls(
            name=raw.get("name", ""),
            components=tuple(Component.from_dict(c) for c in raw["components"]),
            edges=tuple((a, b) for a, b in raw.get("edges", ())),
            source_keys=tuple(raw.get("source_keys", ())),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "WorkflowTemplate":
        try:
            return cls.from_dict(json.loads(text))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigParse(f"bad template: {exc}") from exc


@dataclass
class QueryConfig:
    """Per-query parameters, keyed by component name."""

    query_id: str = "q0"
    app_id: str = "app0"
    params: dict[str, dict[str, Any]] = field(default_factory=dict)

    def for_component(self, comp: Component) -> dict[str, Any]:
        merged = dict(comp.params)
        merged.update(self.params.get(comp.name, {}))
        return merged

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "app_id": self.app_id, "params": self.params}

    @classmethod
    def from_dict(cls, raw: Mapping) -> "QueryConfig":
        return cls(
            query_id=raw.get("query_id", "q0"),
            app_id=raw.get("app_id", "app0"),
            params={k: dict(v) for k, v in raw.get("params", {}).items()},
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "QueryConfig":
        try:
            return cls.from_dict(json.loads(text))
        except (TypeError, ValueError) as exc:
            raise ConfigParse(f"bad query config: {exc}") from exc

    def canonical(self, with_query_id: bool = False) -> str:
        d = self.to_dict()
        if not with_query_id:
            d.pop("query_id")
        return json.dumps(d, sort_keys=True, separators=(",", ":"))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    def __bool__(self) -> bool:
        return not self.violations

    def add(self, msg: str) -> None:
        self.violations.append(msg)


def validate_template(t: WorkflowTemplate, profiles: Mapping | None = None) -> ValidationReport:
    """Collect every violation; an empty report means the template is usable.

    Engine bindings are checked only when a profile registry is supplied.
    """
    report = ValidationReport()
    names = [c.name for c in t.components]
    seen = set()
    for n in names:
        if n in seen:
            report.add(f"duplicate component name {n!r}")
        seen.add(n)
    for a, b in t.edges:
        for end in (a, b):
            if end not in seen:
                report.add(f"edge ({a!r}, {b!r}) references unknown component {end!r}")

    # Cycle detection over the component DAG.
    adj: dict[str, list[str]] = {n: [] for n in names}
    for a, b in t.edges:
        if a in adj and b in adj:
            adj[a].append(b)
    state: dict[str, int] = {}

    def walk(n: str, trail: list[str]) -> None:
        state[n] = 1
        for m in adj[n]:
            if state.get(m) == 1:
                cycle = trail[trail.index(m):] + [m] if m in trail else [n, m]
                report.add("cycle through " + " -> ".join(cycle))
            elif state.get(m) is None:
                walk(m, trail + [m])
        state[n] = 2

    for n in names:
        if state.get(n) is None:
            walk(n, [n])

    for c in t.components:
        if c.role not in KNOWN_ROLES:
            report.add(f"component {c.name!r} has unknown role {c.role!r}")
        mode = c.params.get("synthesis_mode")
        if c.role == ROLE_SYNTHESIZE and mode is not None and mode not in SYNTHESIS_MODES:
            report.add(f"component {c.name!r}: unknown synthesis_mode {mode!r}")
        for key, value in c.params.items():
            if key.endswith(("_count", "_tokens", "_len", "_k")) and isinstance(value, int) and value < 0:
                report.add(f"component {c.name!r}: parameter {key}={value} must be >= 0")
        if profiles is not None:
            for eid in c.engine_ids():
                if eid not in profiles:
                    report.add(f"component {c.name!r} references unknown engine {eid!r}")

    # Every consumed key must come from the query or from some ancestor.
    produced_by: dict[str, set[str]] = {}
    for c in t.components:
        for k in c.out_kwargs:
            produced_by.setdefault(k, set()).add(c.name)
    ancestors: dict[str, set[str]] = {n: set() for n in names}
    changed = True
    while changed:
        changed = False
        for a, b in t.edges:
            if a not in ancestors or b not in ancestors:
                continue
            want = ancestors[a] | {a}
            if not want <= ancestors[b]:
                ancestors[b] |= want
                changed = True
    for c in t.components:
        for k in c.in_kwargs:
            if k in t.source_keys:
                continue
            makers = produced_by.get(k, set())
            if not makers & ancestors[c.name]:
                report.add(f"component {c.name!r}: input {k!r} has no upstream producer")
    return report
