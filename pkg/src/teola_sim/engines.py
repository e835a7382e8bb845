"""Deterministic execution-engine models driven by declared latency profiles.

An engine profile declares a piecewise-linear latency curve over a load
measure (total tokens for LLM prefill, per-step cost for LLM decode, items
for everything else), per-batch capacity, and instance count. Engines are
passive: the simulator advances them.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .errors import ConfigParse, EmptyProfile, ProfileMissing
from .graph import DECODE_KINDS, PREFILL_KINDS

LLM_CATEGORY = "llm"
VALID_CATEGORIES = ("llm", "embedding", "rerank", "search", "ingest", "tool")

# Default multiplicative overhead applied to each half of a decomposed
# prefill, sitting mid-band of the calibrated 3.11%-12.12% slowdown range.
DEFAULT_SPLIT_OVERHEAD = 1.08


@dataclass
class EngineProfile:
    engine_id: str
    category: str
    instances: int = 1
    latency_table: tuple[tuple[float, float], ...] = ()
    decode_table: tuple[tuple[float, float], ...] = ((1.0, 10.0),)
    max_slots: float = 16
    kv_slots: float = 8192
    epsilon: float = DEFAULT_SPLIT_OVERHEAD

    def __post_init__(self):
        self.latency_table = tuple((float(a), float(b)) for a, b in self.latency_table)
        self.decode_table = tuple((float(a), float(b)) for a, b in self.decode_table)
        loads = [a for a, _ in self.latency_table]
        if loads != sorted(set(loads)):
            raise ConfigParse(f"{self.engine_id}: latency table loads must strictly increase")
        if any(b <= 0 for _, b in self.latency_table):
            raise ConfigParse(f"{self.engine_id}: latency table durations must be > 0")
        durs = [b for _, b in self.latency_table]
        if durs != sorted(durs):
            raise ConfigParse(f"{self.engine_id}: latency must not decrease with load")
        if self.category not in VALID_CATEGORIES:
            raise ConfigParse(f"{self.engine_id}: unknown category {self.category!r}")
        if self.instances < 1:
            raise ConfigParse(f"{self.engine_id}: instances must be >= 1")

    @property
    def load_unit(self) -> str:
        return "tokens" if self.category == LLM_CATEGORY else "items"

    def to_dict(self) -> dict:
        return {
            "engine_id": self.engine_id,
            "category": self.category,
            "instances": self.instances,
            "latency_table": [list(p) for p in self.latency_table],
            "decode_table": [list(p) for p in self.decode_table],
            "max_slots": self.max_slots,
            "kv_slots": self.kv_slots,
            "epsilon": self.epsilon,
        }

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EngineProfile":
        return cls(
            engine_id=raw["engine_id"],
            category=raw["category"],
            instances=int(raw.get("instances", 1)),
            latency_table=tuple(tuple(p) for p in raw.get("latency_table", ())),
            decode_table=tuple(tuple(p) for p in raw.get("decode_table", ((1.0, 10.0),))),
            max_slots=float(raw.get("max_slots", 16)),
            kv_slots=float(raw.get("kv_slots", 8192)),
            epsilon=float(raw.get("epsilon", DEFAULT_SPLIT_OVERHEAD)),
        )


def _interp(table: tuple[tuple[float, float], ...], load: float) -> float:
    """Piecewise-linear interpolation with linear extrapolation on both ends.

    Below the first breakpoint the first segment's line is extended toward a
    zero-load intercept, floored at 0. A single-point table is a line through
    the origin.
    """
    if not table:
        raise EmptyProfile("latency table is empty")
    if len(table) == 1:
        (l0, d0) = table[0]
        return max(0.0, d0 * load / l0) if l0 > 0 else d0
    lo = 0
    while lo < len(table) - 2 and load > table[lo + 1][0]:
        lo += 1
    (l0, d0), (l1, d1) = table[lo], table[lo + 1]
    slope = (d1 - d0) / (l1 - l0)
    return max(0.0, d0 + (load - l0) * slope)


def latency(profile: EngineProfile, load: float) -> float:
    """Duration in ms for one batch of the given load."""
    if load < 0:
        raise ConfigParse(f"load must be >= 0, got {load}")
    return _interp(profile.latency_table, load)


def decode_step_ms(profile: EngineProfile, batch_load: float) -> float:
    """Per-token decode latency for a batch of the given total context load.

    A single-row decode table declares a constant per-token cost.
    """
    if len(profile.decode_table) == 1:
        return profile.decode_table[0][1]
    return _interp(profile.decode_table, batch_load)


def max_efficient_batch(profile: EngineProfile, theta: float = 0.05) -> float:
    """Load beyond which throughput stops improving.

    Doubles the load from the first breakpoint while the throughput gain per
    doubling stays at or above ``1 + theta``; the result is capped by
    ``max_slots``. A flat curve climbs to max_slots, a proportional curve
    stops at the first breakpoint.
    """
    if not profile.latency_table:
        raise EmptyProfile(f"{profile.engine_id}: no latency table")
    load = profile.latency_table[0][0]
    while load < profile.max_slots:
        cur = load / latency(profile, load)
        doubled = 2 * load
        nxt = doubled / latency(profile, doubled)
        if nxt / cur < 1.0 + theta:
            break
        load = doubled
    return min(load, profile.max_slots)


@dataclass
class EngineInstance:
    """Mutable state of one engine replica; at most one batch in flight."""

    instance_id: int
    busy_until: float = 0.0
    kv_occupied: float = 0.0
    executed_requests: int = 0

    def idle(self, now: float) -> bool:
        return self.busy_until <= now


def select_instance(instances: Iterable[EngineInstance], category: str, now: float) -> EngineInstance | None:
    """Least-loaded idle instance: executed requests for general engines,
    occupied kv slots for LLMs; ties broken by instance id."""
    idle = [i for i in instances if i.idle(now)]
    if not idle:
        return None
    if category == LLM_CATEGORY:
        return min(idle, key=lambda i: (i.kv_occupied, i.instance_id))
    return min(idle, key=lambda i: (i.executed_requests, i.instance_id))


def node_request_loads(node, profile: EngineProfile) -> list[float]:
    """Slot loads of a node's schedulable requests.

    LLM nodes expose one request per batch item carrying its token load
    (prompt tokens for prefill, context tokens for decode); other kinds expose
    one unit-load request per item.
    """
    meta = node.meta
    if node.kind in PREFILL_KINDS:
        per_item = effective_prefill_tokens(node) / meta.batch_items
        return [per_item] * meta.batch_items
    if node.kind in DECODE_KINDS:
        per_item = max(1.0, float(meta.context_tokens))
        return [per_item] * meta.batch_items
    return [1.0] * meta.batch_items


def effective_prefill_tokens(node) -> float:
    """Prompt tokens a prefill actually computes, after any cached prefix."""
    total = node.meta.prompt_tokens * max(1, node.meta.batch_items)
    cached = node.meta.cached_prefix_tokens * max(1, node.meta.batch_items)
    return float(max(1, total - cached))


class EngineSet(dict):
    """engine_id -> EngineProfile with helpers for files and fingerprints."""

    @classmethod
    def from_profiles(cls, profiles: Iterable[EngineProfile]) -> "EngineSet":
        out = cls()
        for p in profiles:
            out[p.engine_id] = p
        return out

    @classmethod
    def from_dict(cls, raw: Mapping) -> "EngineSet":
        try:
            return cls.from_profiles(EngineProfile.from_dict(e) for e in raw["engines"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigParse(f"bad engine profile file: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "EngineSet":
        path = Path(path)
        if not path.exists():
            raise ProfileMissing(f"engine profile file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def to_dict(self) -> dict:
        return {"engines": [self[k].to_dict() for k in sorted(self)]}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def b_eff(self, engine_id: str) -> float:
        return max_efficient_batch(self[engine_id])

    def require(self, engine_id: str) -> EngineProfile:
        if engine_id not in self:
            raise ProfileMissing(f"no profile registered for engine {engine_id!r}")
        return self[engine_id]


def builtin_profile_path(name: str) -> Path:
    return Path(__file__).parent / "profiles" / f"{name}.json"


def load_profiles(spec: str | Path) -> EngineSet:
    """Load an engine set from a bundled name ('default') or a file path."""
    p = Path(spec)
    if p.exists():
        return EngineSet.load(p)
    builtin = builtin_profile_path(str(spec))
    if builtin.exists():
        return EngineSet.load(builtin)
    raise ProfileMissing(f"unknown engine profile set {spec!r}")
