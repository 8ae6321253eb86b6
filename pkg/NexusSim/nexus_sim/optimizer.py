# optimizer.py — Выбор разбиения SM: режим по заполнению KV, двухфазный
# жадный поиск и буферная зона против частых переключений

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .costmodel import CostModel
from .domain import ControllerConfig, PartitionState, Phase
from .opcost import OperatorWorkload

logger = logging.getLogger(__name__)

MIN_SHARE = 1
MAX_SHARE = 99
# Относительный допуск при сравнении с Slack · T^min.
_TOLERANCE = 1e-12


class ObjectiveMode(str, Enum):
    PREFILL_PRIORITIZED = "prefill_prioritized"
    DECODE_PRIORITIZED = "decode_prioritized"

    @property
    def target(self) -> Phase:
        return Phase.PREFILL if self is ObjectiveMode.PREFILL_PRIORITIZED else Phase.DECODE


@dataclass(frozen=True)
class SearchResult:
    share: int           # доля целевой фазы
    infeasible: bool
    queries: int


@dataclass(frozen=True)
class PartitionDecision:
    r_p: int
    r_d: int
    mode: ObjectiveMode
    switched: bool
    iterations_searched: int
    candidate_r_p: int
    infeasible: bool = False


def select_mode(kv_used_bytes: float, kv_capacity_bytes: float, kv_switch_fraction: float) -> ObjectiveMode:
    if kv_used_bytes / kv_capacity_bytes > kv_switch_fraction:
        return ObjectiveMode.DECODE_PRIORITIZED
    return ObjectiveMode.PREFILL_PRIORITIZED


def greedy_share(cost_other: Callable[[int], float], t_other_min: float, slack: float,
                 r_cur: int) -> SearchResult:
    """Двухфазный обход: уменьшаем долю цели, пока другая фаза не уложится
    в Slack · T^min, затем наращиваем, пока ограничение держится.

    cost_other получает долю ДРУГОЙ фазы (100 − R). Если ограничение не выполняется
    ни при какой доле, цель получает долю с наименьшей латентностью другой фазы.
    """
    limit = slack * t_other_min * (1 + _TOLERANCE)
    costs: Dict[int, float] = {}

    def cost(share: int) -> float:
        if share not in costs:
            costs[share] = cost_other(100 - share)
        return costs[share]

    def feasible(share: int) -> bool:
        return cost(share) <= limit

    share = min(max(r_cur, MIN_SHARE), MAX_SHARE)
    # Фаза 1
    while not feasible(share):
        if share == MIN_SHARE:
            return SearchResult(least_harm_share(cost), True, len(costs))
        share -= 1
    # Фаза 2
    while share < MAX_SHARE and feasible(share + 1):
        share += 1
    return SearchResult(share, False, len(costs))


def least_harm_share(cost_other_by_share: Callable[[int], float]) -> int:
    """Доля цели, при которой другая фаза быстрее всего; при равенстве цель забирает больше."""
    return min(range(MIN_SHARE, MAX_SHARE + 1), key=lambda share: (cost_other_by_share(share), -share))


def exhaustive_share(cost_other: Callable[[int], float], t_other_min: float, slack: float) -> Optional[int]:
    """Наибольшая допустимая доля цели перебором всех 99 разбиений (None — допустимых нет)."""
    limit = slack * t_other_min * (1 + _TOLERANCE)
    feasible = [share for share in range(MIN_SHARE, MAX_SHARE + 1) if cost_other(100 - share) <= limit]
    return max(feasible) if feasible else None


def adjust_partition(target: Phase, cur: PartitionState, prefill_ops: Sequence[OperatorWorkload],
                     decode_ops: Sequence[OperatorWorkload], cfg: ControllerConfig,
                     costmodel: CostModel) -> Tuple[int, int, SearchResult]:
    """AdjustPartition: возвращает (r_p, r_d, результат поиска)."""
    other = target.other
    other_ops = decode_ops if other is Phase.DECODE else prefill_ops
    if not other_ops:
        result = SearchResult(MAX_SHARE, False, 0)
    else:
        slack = cfg.beta if target is Phase.PREFILL else cfg.alpha
        t_min = costmodel.min_latency(other_ops)
        r_cur = cur.r_p if target is Phase.PREFILL else cur.r_d
        result = greedy_share(
            lambda share: costmodel.phase_cost(other, share, prefill_ops, decode_ops),
            t_min, slack, r_cur)
        result = SearchResult(result.share, result.infeasible, result.queries + 1)
    if target is Phase.PREFILL:
        return result.share, 100 - result.share, result
    return 100 - result.share, result.share, result


def apply_hysteresis(candidate_r_p: int, cur: PartitionState, delta: int) -> Tuple[PartitionState, bool]:
    """Буферная зона: кандидат ближе δ к последнему применённому значению отбрасывается."""
    if abs(candidate_r_p - cur.last_applied_r_p) < delta or candidate_r_p == cur.r_p:
        return cur, False
    return cur.applied(candidate_r_p), True


def partition_controller(kv_used: float, kv_capacity: float, cur: PartitionState,
                         prefill_ops: Sequence[OperatorWorkload], decode_ops: Sequence[OperatorWorkload],
                         cfg: ControllerConfig, costmodel: CostModel) -> Tuple[PartitionDecision, PartitionState]:
    mode = select_mode(kv_used, kv_capacity, cfg.kv_switch_fraction)
    target_ops = prefill_ops if mode.target is Phase.PREFILL else decode_ops
    if not target_ops:
        decision = PartitionDecision(cur.r_p, cur.r_d, mode, False, 0, cur.r_p)
        return decision, cur
    r_p, _, result = adjust_partition(mode.target, cur, prefill_ops, decode_ops, cfg, costmodel)
    state, switched = apply_hysteresis(r_p, cur, cfg.delta)
    decision = PartitionDecision(state.r_p, state.r_d, mode, switched, result.queries, r_p, result.infeasible)
    return decision, state


class PartitionController:
    """Держатель состояния разбиения. Единственный владелец — цикл событий симулятора."""

    def __init__(self, cfg: ControllerConfig, costmodel: CostModel, kv_capacity: float):
        self.cfg = cfg
        self.costmodel = costmodel
        self.kv_capacity = kv_capacity
        self.state = PartitionState.split(cfg.initial_r_p)
        self.log: List[dict] = []
        self.switches = 0

    def decide(self, now: float, kv_used: float, prefill_ops: Sequence[OperatorWorkload],
               decode_ops: Sequence[OperatorWorkload]) -> PartitionDecision:
        decision, self.state = partition_controller(
            kv_used, self.kv_capacity, self.state, prefill_ops, decode_ops, self.cfg, self.costmodel)
        if decision.switched:
            self.switches += 1
            logger.debug(f"t={now:.4f}: разбиение {decision.candidate_r_p}/{100 - decision.candidate_r_p} "
                         f"({decision.mode.value}, запросов к модели: {decision.iterations_searched})")
        if decision.infeasible:
            logger.debug(f"t={now:.4f}: ограничение Slack недостижимо, доля отдана ограниченной фазе")
        self.log.append({
            "time": now,
            "kv_frac": kv_used / self.kv_capacity,
            "mode": decision.mode.value,
            "candidate_r_p": decision.candidate_r_p,
            "applied_r_p": decision.r_p,
            "switched": decision.switched,
            "queries": decision.iterations_searched,
            "infeasible": decision.infeasible,
        })
        return decision


class StaticPartition:
    """Постоянное разбиение вместо контроллера (базовая линия и абляции)."""

    def __init__(self, r_p: int):
        self.state = PartitionState.split(r_p)
        self.log: List[dict] = []
        self.switches = 0

    def decide(self, now: float, kv_used: float, prefill_ops: Sequence[OperatorWorkload],
               decode_ops: Sequence[OperatorWorkload]) -> PartitionDecision:
        return PartitionDecision(self.state.r_p, self.state.r_d, ObjectiveMode.PREFILL_PRIORITIZED,
                                 False, 0, self.state.r_p)
