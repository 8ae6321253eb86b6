# schedulers.py — Формирование пакетов: SPF с поправкой на возраст для префилла,
# FCFS для декода и смешанный пакет монолитного движка

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

from .domain import ControllerConfig, Phase, Request


@dataclass(frozen=True)
class PrefillQueueEntry:
    request_id: int
    remaining: int
    arrival_time: float
    age: float = 0.0
    score: float = 0.0

    @classmethod
    def of(cls, request: Request) -> "PrefillQueueEntry":
        return cls(request.id, request.remaining_prompt, request.arrival_time)


@dataclass(frozen=True)
class BatchMember:
    request_id: int
    tokens: int
    phase: Phase


@dataclass(frozen=True)
class BatchPlan:
    phase: Phase
    members: Tuple[BatchMember, ...] = ()

    @property
    def request_ids(self) -> Tuple[int, ...]:
        return tuple(m.request_id for m in self.members)

    @property
    def token_counts(self) -> Tuple[int, ...]:
        return tuple(m.tokens for m in self.members)

    @property
    def total_tokens(self) -> int:
        return sum(m.tokens for m in self.members)

    @property
    def prefill_members(self) -> Tuple[BatchMember, ...]:
        return tuple(m for m in self.members if m.phase is Phase.PREFILL)

    @property
    def decode_members(self) -> Tuple[BatchMember, ...]:
        return tuple(m for m in self.members if m.phase is Phase.DECODE)

    def __bool__(self) -> bool:
        return bool(self.members)

    def take_while(self, admit: Callable[[BatchMember], bool]) -> "BatchPlan":
        """Префикс плана, пока admit разрешает; первый отказ обрывает пакет, как break в SPF."""
        kept = []
        for member in self.members:
            if not admit(member):
                break
            kept.append(member)
        return BatchPlan(self.phase, tuple(kept))


def _greedy_fill(ordered: Iterable[PrefillQueueEntry], budget: int, chunk_size: Optional[int],
                 skip_nonfitting: bool) -> BatchPlan:
    members: List[BatchMember] = []
    total = 0
    for entry in ordered:
        if total + entry.remaining <= budget:
            members.append(BatchMember(entry.request_id, entry.remaining, Phase.PREFILL))
            total += entry.remaining
        elif not members:
            # Длинный промпт, не влезающий целиком, режется на чанк размером с бюджет.
            chunk = min(budget, chunk_size or budget)
            members.append(BatchMember(entry.request_id, chunk, Phase.PREFILL))
            break
        elif not skip_nonfitting:
            break
    return BatchPlan(Phase.PREFILL, tuple(members))


def score_entries(queue: Sequence[PrefillQueueEntry], gamma: float, now: float) -> List[PrefillQueueEntry]:
    scored = []
    for entry in queue:
        age = now - entry.arrival_time
        scored.append(replace(entry, age=age, score=entry.remaining - gamma * age))
    return scored


def spf_schedule(queue: Sequence[PrefillQueueEntry], budget: int, gamma: float, now: float,
                 chunk_size: Optional[int] = None, skip_nonfitting: bool = False) -> BatchPlan:
    """Shortest Prompt First: score = remaining − γ·age, по возрастанию (score, arrival, id)."""
    if budget < 1:
        raise ValueError(f"token budget must be >= 1, got {budget}")
    ordered = sorted(score_entries(queue, gamma, now),
                     key=lambda e: (e.score, e.arrival_time, e.request_id))
    return _greedy_fill(ordered, budget, chunk_size, skip_nonfitting)


def fcfs_prefill_schedule(queue: Sequence[PrefillQueueEntry], budget: int,
                          chunk_size: Optional[int] = None, skip_nonfitting: bool = False) -> BatchPlan:
    if budget < 1:
        raise ValueError(f"token budget must be >= 1, got {budget}")
    ordered = sorted(queue, key=lambda e: (e.arrival_time, e.request_id))
    return _greedy_fill(ordered, budget, chunk_size, skip_nonfitting)


def fcfs_decode_schedule(active: Sequence[Request], max_batch: int) -> BatchPlan:
    ordered = sorted(active, key=lambda r: (r.arrival_time, r.id))[:max_batch]
    return BatchPlan(Phase.DECODE, tuple(BatchMember(r.id, 1, Phase.DECODE) for r in ordered))


def chunked_mixed_schedule(prefill_queue: Sequence[PrefillQueueEntry], active_decodes: Sequence[Request],
                           budget: int, max_batch: int, chunk_size: Optional[int] = None) -> BatchPlan:
    """Слитый пакет: сначала все токены декода (FCFS), затем чанки префилла FCFS в остаток бюджета."""
    decodes = fcfs_decode_schedule(active_decodes, min(max_batch, budget)).members
    members = list(decodes)
    left = budget - len(decodes)
    for entry in sorted(prefill_queue, key=lambda e: (e.arrival_time, e.request_id)):
        if left <= 0:
            break
        take = min(entry.remaining, left, chunk_size or left)
        members.append(BatchMember(entry.request_id, take, Phase.PREFILL))
        left -= take
    return BatchPlan(Phase.MIXED, tuple(members))


class PrefillScheduler(ABC):
    name = ""

    @abstractmethod
    def schedule(self, queue: Sequence[PrefillQueueEntry], now: float) -> BatchPlan:
        pass


class SpfScheduler(PrefillScheduler):
    name = "spf"

    def __init__(self, budget: int, gamma: float, chunk_size: Optional[int] = None,
                 skip_nonfitting: bool = False):
        self.budget = budget
        self.gamma = gamma
        self.chunk_size = chunk_size
        self.skip_nonfitting = skip_nonfitting

    def schedule(self, queue: Sequence[PrefillQueueEntry], now: float) -> BatchPlan:
        return spf_schedule(queue, self.budget, self.gamma, now, self.chunk_size, self.skip_nonfitting)


class FcfsPrefillScheduler(PrefillScheduler):
    name = "fcfs"

    def __init__(self, budget: int, chunk_size: Optional[int] = None, skip_nonfitting: bool = False):
        self.budget = budget
        self.chunk_size = chunk_size
        self.skip_nonfitting = skip_nonfitting

    def schedule(self, queue: Sequence[PrefillQueueEntry], now: float) -> BatchPlan:
        return fcfs_prefill_schedule(queue, self.budget, self.chunk_size, self.skip_nonfitting)


def make_prefill_scheduler(policy: str, ctrl: ControllerConfig) -> PrefillScheduler:
    if policy == "spf":
        return SpfScheduler(ctrl.token_budget, ctrl.gamma, ctrl.chunk_size, ctrl.skip_nonfitting)
    if policy == "fcfs":
        return FcfsPrefillScheduler(ctrl.token_budget, ctrl.chunk_size, ctrl.skip_nonfitting)
    raise ValueError(f"unknown prefill policy: {policy}")
