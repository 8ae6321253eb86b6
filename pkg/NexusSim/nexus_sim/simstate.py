# simstate.py — Состояние дискретно-событийной симуляции: дорожки, учёт KV,
# журнал событий и описание движков

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .costmodel import PhaseLatencyBreakdown
from .domain import PartitionState, Request
from .opcost import OperatorWorkload
from .schedulers import BatchPlan


class EngineType(str, Enum):
    NEXUS = "nexus"
    MONOLITHIC = "monolithic"
    STATIC = "static"
    ENGINE_DISAGG = "engine-disagg"


_DEFAULT_POLICY = {
    EngineType.NEXUS: "spf",
    EngineType.STATIC: "spf",
    EngineType.MONOLITHIC: "fcfs",
    EngineType.ENGINE_DISAGG: "fcfs",
}


@dataclass(frozen=True)
class EngineKind:
    """Движок и его вариант.

    Строковая форма: nexus, nexus+fcfs, static:50, static:50+fcfs, monolithic, engine-disagg.
    """

    type: EngineType
    static_r_p: Optional[int] = None
    prefill_policy: str = ""

    def __post_init__(self):
        if not self.prefill_policy:
            object.__setattr__(self, "prefill_policy", _DEFAULT_POLICY[self.type])
        if self.type is EngineType.STATIC:
            if self.static_r_p is None or not 1 <= self.static_r_p <= 99:
                raise ValueError(f"static share must be in [1, 99], got {self.static_r_p}")
        if self.prefill_policy not in ("spf", "fcfs"):
            raise ValueError(f"unknown prefill policy: {self.prefill_policy}")

    @classmethod
    def parse(cls, text: str) -> "EngineKind":
        text = text.strip().lower()
        name, _, policy = text.partition("+")
        name, _, share = name.partition(":")
        try:
            engine_type = EngineType(name)
        except ValueError:
            raise ValueError(f"unknown engine: {text}") from None
        if engine_type is EngineType.STATIC:
            if not share.isdigit():
                raise ValueError(f"static engine needs a share, e.g. static:50 (got {text})")
            return cls(engine_type, int(share), policy)
        if share:
            raise ValueError(f"only the static engine takes a share (got {text})")
        if engine_type is EngineType.MONOLITHIC and policy and policy != "fcfs":
            raise ValueError("the monolithic engine schedules prefill chunks FCFS only")
        return cls(engine_type, None, policy)

    @property
    def label(self) -> str:
        name = self.type.value
        if self.type is EngineType.STATIC:
            name = f"{name}:{self.static_r_p}"
        if self.prefill_policy != _DEFAULT_POLICY[self.type]:
            name = f"{name}+{self.prefill_policy}"
        return name


@dataclass(frozen=True)
class SimulatorConfig:
    max_sim_time_s: float = 3600.0
    max_events: int = 10_000_000
    transfer_base_latency_s: float = 0.05
    transfer_bandwidth_fraction: float = 0.5
    decode_kv_capacity_bytes: Optional[float] = None   # устройство декода у engine-disagg
    contention: bool = True


# --- Учёт KV ----------------------------------------------------------------

@dataclass(frozen=True)
class KvEvent:
    kind: str      # prefill_chunk | token | finish | transfer_out | transfer_in
    tokens: int


def kv_account(kv_used: float, event: KvEvent, kv_bytes_per_token: float) -> float:
    """Чанк префилла и каждый выданный токен добавляют K/V, завершение освобождает всё."""
    delta = event.tokens * kv_bytes_per_token
    if event.kind in ("prefill_chunk", "token", "transfer_in"):
        return kv_used + delta
    if event.kind in ("finish", "transfer_out"):
        updated = kv_used - delta
        if updated < -1e-6:
            raise RuntimeError(f"KV underflow: {kv_used} - {delta}")
        return max(updated, 0.0)
    raise ValueError(f"unknown KV event: {event.kind}")


@dataclass
class KvPool:
    """KV-кэш одного устройства: фактическое заполнение и резерв под принятые запросы."""

    capacity: float
    kv_bytes_per_token: float
    used: float = 0.0
    reserved: float = 0.0
    added: float = 0.0
    freed: float = 0.0
    peak: float = 0.0

    def fits(self, nbytes: float) -> bool:
        return self.reserved + nbytes <= self.capacity

    def reserve(self, nbytes: float) -> None:
        self.reserved += nbytes

    def release(self, nbytes: float) -> None:
        self.reserved = max(self.reserved - nbytes, 0.0)

    def account(self, kind: str, tokens: int) -> None:
        before = self.used
        self.used = kv_account(self.used, KvEvent(kind, tokens), self.kv_bytes_per_token)
        if self.used > before:
            self.added += self.used - before
        else:
            self.freed += before - self.used
        if self.used > self.capacity + 1e-6:
            raise RuntimeError(f"KV overflow: {self.used} > {self.capacity}")
        self.peak = max(self.peak, self.used)


# --- Дорожки и события ------------------------------------------------------

@dataclass
class LaunchedBatch:
    plan: BatchPlan
    ops: List[OperatorWorkload]
    start: float
    latency: float
    share: Optional[int]
    breakdown: Optional[PhaseLatencyBreakdown] = None

    @property
    def end(self) -> float:
        return self.start + self.latency


@dataclass
class Lane:
    name: str
    batch: Optional[LaunchedBatch] = None
    busy_until: float = 0.0

    @property
    def idle(self) -> bool:
        return self.batch is None


@dataclass
class SimState:
    kv: KvPool
    partition: Optional[PartitionState] = None
    seed: int = 0
    kv_decode: Optional[KvPool] = None
    clock: float = 0.0
    requests: Dict[int, Request] = field(default_factory=dict)
    waiting: Dict[int, Request] = field(default_factory=dict)
    decoding: Dict[int, Request] = field(default_factory=dict)
    lanes: Dict[str, Lane] = field(default_factory=dict)
    log: List[dict] = field(default_factory=list)
    rejected: List[int] = field(default_factory=list)
    events_processed: int = 0
    oom_blocks: int = 0
    _heap: List[Tuple[float, int, str, Any]] = field(default_factory=list)
    _seq: int = 0

    def schedule(self, time: float, kind: str, payload: Any) -> None:
        heapq.heappush(self._heap, (time, self._seq, kind, payload))
        self._seq += 1

    def pop_event(self) -> Tuple[float, str, Any]:
        time, _, kind, payload = heapq.heappop(self._heap)
        return time, kind, payload

    def peek_time(self) -> float:
        return self._heap[0][0]

    @property
    def pending(self) -> bool:
        return bool(self._heap)

    def record(self, event_kind: str, lane: str, request_ids: Sequence[int],
               latency: Optional[float] = None, **extra) -> None:
        """Строка журнала: {time, lane, event_kind, request_ids, r_p, kv_used, latency, ...}."""
        entry = {
            "time": self.clock,
            "lane": lane,
            "event_kind": event_kind,
            "request_ids": list(request_ids),
            "r_p": self.partition.r_p if self.partition is not None else None,
            "kv_used": self.kv.used,
            "latency": latency,
        }
        entry.update(extra)
        self.log.append(entry)
