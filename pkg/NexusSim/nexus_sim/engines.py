# engines.py — Движки обслуживания: внутри-GPU дезагрегация (динамическое и
# статическое разбиение SM), монолитный движок с чанками и два устройства

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from collections import deque
from typing import Any, Deque, Dict, List, Optional, Sequence, Tuple

from .costmodel import CostModel
from .domain import Phase, Request, ValidatedConfig
from .opcost import decode_op_workloads, mixed_op_workloads, prefill_batch_workloads
from .optimizer import PartitionController, StaticPartition
from .schedulers import (BatchMember, BatchPlan, PrefillQueueEntry, chunked_mixed_schedule,
                         fcfs_decode_schedule, make_prefill_scheduler)
from .simstate import EngineKind, EngineType, KvPool, Lane, LaunchedBatch, SimState, SimulatorConfig

logger = logging.getLogger(__name__)


class BaseEngine(ABC):
    lanes: Tuple[str, ...] = ()

    def __init__(self, kind: EngineKind, cfg: ValidatedConfig, sim_cfg: SimulatorConfig):
        self.kind = kind
        self.model = cfg.model
        self.gpu = cfg.gpu
        self.ctrl = cfg.controller
        self.sim_cfg = sim_cfg
        self.costmodel = CostModel(cfg.gpu, cfg.profile, contention=sim_cfg.contention)
        self.kv_bytes = cfg.model.kv_bytes_per_token

    # --- жизненный цикл ---

    def setup(self, state: SimState) -> None:
        for name in self.lanes:
            state.lanes[name] = Lane(name)

    def new_state(self, seed: int) -> SimState:
        state = SimState(kv=KvPool(self.gpu.kv_capacity_bytes, self.kv_bytes), seed=seed)
        self.setup(state)
        return state

    def footprint(self, req: Request) -> float:
        return (req.prompt_len + req.output_len) * self.kv_bytes

    def can_ever_admit(self, state: SimState, req: Request) -> bool:
        return self.footprint(req) <= state.kv.capacity

    def on_arrival(self, state: SimState, req: Request) -> None:
        if not self.can_ever_admit(state, req):
            state.rejected.append(req.id)
            state.record("reject", "queue", [req.id], prompt_len=req.prompt_len, output_len=req.output_len)
            logger.warning(f"Запрос {req.id} не помещается в KV-кэш устройства и отклонён")
            return
        state.waiting[req.id] = req
        state.record("arrival", "queue", [req.id], prompt_len=req.prompt_len, output_len=req.output_len,
                     arrival_time=req.arrival_time)

    def handle(self, state: SimState, kind: str, payload: Any) -> None:
        if kind == "complete":
            lane = state.lanes[payload]
            batch = lane.batch
            lane.batch = None
            self.complete(state, lane, batch)
            return
        raise ValueError(f"unexpected event: {kind}")

    @abstractmethod
    def step(self, state: SimState) -> None:
        """Запускает пакеты на простаивающих дорожках."""

    @abstractmethod
    def complete(self, state: SimState, lane: Lane, batch: LaunchedBatch) -> None:
        pass

    # --- общие операции ---

    def queue_entries(self, state: SimState) -> List[PrefillQueueEntry]:
        return [PrefillQueueEntry.of(r) for r in state.waiting.values()]

    def admit(self, state: SimState, pool: KvPool, plan: BatchPlan, footprint=None) -> BatchPlan:
        """Обрезает план по KV: новый запрос принимается, только если его полный след влезает в резерв."""
        footprint = footprint or self.footprint
        pending = 0.0

        def fits(member: BatchMember) -> bool:
            nonlocal pending
            req = state.requests[member.request_id]
            if req.prefilled_len > 0 or member.phase is not Phase.PREFILL:
                return True
            need = footprint(req)
            if not pool.fits(pending + need):
                return False
            pending += need
            return True

        admitted = plan.take_while(fits)
        if plan and not admitted:
            state.oom_blocks += 1
        for member in admitted.members:
            req = state.requests[member.request_id]
            if member.phase is Phase.PREFILL and req.prefilled_len == 0:
                pool.reserve(footprint(req))
        return admitted

    def prefill_chunks(self, state: SimState, members: Sequence[BatchMember]) -> List[Tuple[int, int]]:
        return [(m.tokens, state.requests[m.request_id].prefilled_len + m.tokens) for m in members]

    def decode_contexts(self, state: SimState, members: Sequence[BatchMember]) -> List[int]:
        return [state.requests[m.request_id].context_len for m in members]

    def launch(self, state: SimState, lane: Lane, plan: BatchPlan, ops, latency: float,
               share: Optional[int], breakdown=None) -> None:
        batch = LaunchedBatch(plan, ops, state.clock, latency, share, breakdown)
        lane.batch = batch
        lane.busy_until = batch.end
        prefill_ids = [m.request_id for m in plan.prefill_members]
        chunks = [list(c) for c in self.prefill_chunks(state, plan.prefill_members)]
        for rid in prefill_ids:
            req = state.requests[rid]
            if req.first_scheduled_time is None:
                req.first_scheduled_time = state.clock
        state.record("launch", lane.name, plan.request_ids, latency,
                     prefill_ids=prefill_ids, chunks=chunks,
                     decode_contexts=self.decode_contexts(state, plan.decode_members), share=share)
        state.schedule(batch.end, "complete", lane.name)

    def apply_prefill(self, state: SimState, pool: KvPool, member: BatchMember,
                      emitted: List[int], finished: List[int]) -> Optional[Request]:
        """Продвигает префилл; возвращает запрос, если промпт дочитан и ответ ещё не выдан целиком."""
        req = state.requests[member.request_id]
        req.prefilled_len += member.tokens
        pool.account("prefill_chunk", member.tokens)
        if not req.is_prefilled:
            return None
        del state.waiting[req.id]
        self.emit(state, pool, req, emitted, finished)
        return None if req.is_finished else req

    def emit(self, state: SimState, pool: KvPool, req: Request, emitted: List[int], finished: List[int]) -> None:
        req.emit_token(state.clock)
        pool.account("token", 1)
        emitted.append(req.id)
        if req.is_finished:
            state.decoding.pop(req.id, None)
            pool.account("finish", req.prompt_len + req.decoded_len)
            pool.release(self.footprint(req))
            finished.append(req.id)


class IntraGpuEngine(BaseEngine):
    """Две параллельные дорожки на одном GPU, доля SM от контроллера или постоянная."""

    lanes = ("prefill", "decode")

    def __init__(self, kind: EngineKind, cfg: ValidatedConfig, sim_cfg: SimulatorConfig):
        super().__init__(kind, cfg, sim_cfg)
        self.scheduler = make_prefill_scheduler(kind.prefill_policy, cfg.controller)
        if kind.type is EngineType.STATIC:
            self.partition = StaticPartition(kind.static_r_p)
        else:
            self.partition = PartitionController(cfg.controller, self.costmodel, cfg.gpu.kv_capacity_bytes)

    def setup(self, state: SimState) -> None:
        super().setup(state)
        state.partition = self.partition.state

    def step(self, state: SimState) -> None:
        prefill_lane, decode_lane = state.lanes["prefill"], state.lanes["decode"]
        if not (prefill_lane.idle or decode_lane.idle):
            return
        prefill_plan = BatchPlan(Phase.PREFILL)
        if prefill_lane.idle and state.waiting:
            prefill_plan = self.admit(state, state.kv, self.scheduler.schedule(self.queue_entries(state), state.clock))
        decode_plan = BatchPlan(Phase.DECODE)
        if decode_lane.idle and state.decoding:
            decode_plan = fcfs_decode_schedule(list(state.decoding.values()), self.ctrl.max_decode_batch)
        if not prefill_plan and not decode_plan:
            return

        if prefill_plan:
            prefill_ops = prefill_batch_workloads(self.model, self.prefill_chunks(state, prefill_plan.members))
        else:
            prefill_ops = prefill_lane.batch.ops if prefill_lane.batch else []
        if decode_plan:
            decode_ops = decode_op_workloads(self.model, len(decode_plan.members),
                                             self.decode_contexts(state, decode_plan.members))
        else:
            decode_ops = decode_lane.batch.ops if decode_lane.batch else []

        decision = self.partition.decide(state.clock, state.kv.used, prefill_ops, decode_ops)
        state.partition = self.partition.state

        if prefill_plan:
            breakdown = self.costmodel.prefill(prefill_ops, decision.r_p / 100)
            self.launch(state, prefill_lane, prefill_plan, prefill_ops, breakdown.total_s, decision.r_p, breakdown)
        if decode_plan:
            # Новое разбиение действует только на запускаемые пакеты; пакет в полёте досчитывается как был.
            inflight = prefill_lane.batch
            breakdown = self.costmodel.decode(
                decode_ops, decision.r_d / 100,
                prefill_ops=inflight.ops if inflight else None,
                prefill_breakdown=inflight.breakdown if inflight else None)
            self.launch(state, decode_lane, decode_plan, decode_ops, breakdown.total_s, decision.r_d, breakdown)

    def complete(self, state: SimState, lane: Lane, batch: LaunchedBatch) -> None:
        emitted: List[int] = []
        finished: List[int] = []
        for member in batch.plan.members:
            if member.phase is Phase.PREFILL:
                req = self.apply_prefill(state, state.kv, member, emitted, finished)
                if req is not None:
                    state.decoding[req.id] = req
            else:
                self.emit(state, state.kv, state.requests[member.request_id], emitted, finished)
        state.record("complete", lane.name, batch.plan.request_ids, batch.latency,
                     emitted=emitted, finished=finished)


class MonolithicEngine(BaseEngine):
    """Одна дорожка: чанки префилла и токены декода в одном пакете на всех SM."""

    lanes = ("mixed",)

    def step(self, state: SimState) -> None:
        lane = state.lanes["mixed"]
        if not lane.idle or not (state.waiting or state.decoding):
            return
        plan = chunked_mixed_schedule(self.queue_entries(state), list(state.decoding.values()),
                                      self.ctrl.token_budget, self.ctrl.max_decode_batch, self.ctrl.chunk_size)
        prefill = self.admit(state, state.kv, BatchPlan(Phase.PREFILL, plan.prefill_members))
        plan = BatchPlan(Phase.MIXED, plan.decode_members + prefill.members)
        if not plan:
            return
        ops = mixed_op_workloads(self.model, self.prefill_chunks(state, plan.prefill_members),
                                 self.decode_contexts(state, plan.decode_members))
        breakdown = self.costmodel.isolated(ops, 1.0)
        self.launch(state, lane, plan, ops, breakdown.total_s, 100, breakdown)

    def complete(self, state: SimState, lane: Lane, batch: LaunchedBatch) -> None:
        emitted: List[int] = []
        finished: List[int] = []
        for member in batch.plan.decode_members:
            self.emit(state, state.kv, state.requests[member.request_id], emitted, finished)
        for member in batch.plan.prefill_members:
            req = self.apply_prefill(state, state.kv, member, emitted, finished)
            if req is not None:
                state.decoding[req.id] = req
        state.record("complete", lane.name, batch.plan.request_ids, batch.latency,
                     emitted=emitted, finished=finished)


class EngineDisaggEngine(BaseEngine):
    """Префилл и декод на разных устройствах, KV передаётся через буфер передачи.

    Устройство декода принимает запрос, только если его полный след влезает в его KV;
    иначе запрос ждёт в буфере, продолжая занимать KV устройства префилла.
    """

    lanes = ("prefill", "decode")

    def __init__(self, kind: EngineKind, cfg: ValidatedConfig, sim_cfg: SimulatorConfig):
        super().__init__(kind, cfg, sim_cfg)
        self.scheduler = make_prefill_scheduler(kind.prefill_policy, cfg.controller)
        self.transfer_buffer: Deque[Request] = deque()

    def new_state(self, seed: int) -> SimState:
        state = super().new_state(seed)
        capacity = self.sim_cfg.decode_kv_capacity_bytes or self.gpu.kv_capacity_bytes
        state.kv_decode = KvPool(capacity, self.kv_bytes)
        self.transfer_buffer = deque()
        return state

    def prefill_footprint(self, req: Request) -> float:
        return (req.prompt_len + 1) * self.kv_bytes

    def can_ever_admit(self, state: SimState, req: Request) -> bool:
        return (self.prefill_footprint(req) <= state.kv.capacity
                and self.footprint(req) <= state.kv_decode.capacity)

    def transfer_latency(self, req: Request) -> float:
        nbytes = req.context_len * self.kv_bytes
        return (self.sim_cfg.transfer_base_latency_s
                + nbytes / (self.sim_cfg.transfer_bandwidth_fraction * self.gpu.peak_bandwidth))

    def handle(self, state: SimState, kind: str, payload: Any) -> None:
        if kind != "transfer_done":
            super().handle(state, kind, payload)
            return
        req = state.requests[payload]
        tokens = req.context_len
        state.kv.account("transfer_out", tokens)
        state.kv.release(self.prefill_footprint(req))
        state.kv_decode.account("transfer_in", tokens)
        state.decoding[req.id] = req
        state.record("transfer_done", "transfer", [req.id], kv_decode_used=state.kv_decode.used)

    def start_transfers(self, state: SimState) -> None:
        while self.transfer_buffer and state.kv_decode.fits(self.footprint(self.transfer_buffer[0])):
            req = self.transfer_buffer.popleft()
            state.kv_decode.reserve(self.footprint(req))
            latency = self.transfer_latency(req)
            state.record("transfer_start", "transfer", [req.id], latency)
            state.schedule(state.clock + latency, "transfer_done", req.id)

    def step(self, state: SimState) -> None:
        self.start_transfers(state)
        prefill_lane, decode_lane = state.lanes["prefill"], state.lanes["decode"]
        if prefill_lane.idle and state.waiting:
            plan = self.admit(state, state.kv, self.scheduler.schedule(self.queue_entries(state), state.clock),
                              footprint=self.prefill_footprint)
            if plan:
                ops = prefill_batch_workloads(self.model, self.prefill_chunks(state, plan.members))
                breakdown = self.costmodel.isolated(ops, 1.0)
                self.launch(state, prefill_lane, plan, ops, breakdown.total_s, 100, breakdown)
        if decode_lane.idle and state.decoding:
            plan = fcfs_decode_schedule(list(state.decoding.values()), self.ctrl.max_decode_batch)
            ops = decode_op_workloads(self.model, len(plan.members), self.decode_contexts(state, plan.members))
            breakdown = self.costmodel.isolated(ops, 1.0)
            self.launch(state, decode_lane, plan, ops, breakdown.total_s, 100, breakdown)

    def complete(self, state: SimState, lane: Lane, batch: LaunchedBatch) -> None:
        emitted: List[int] = []
        finished: List[int] = []
        if lane.name == "prefill":
            for member in batch.plan.members:
                req = state.requests[member.request_id]
                req.prefilled_len += member.tokens
                state.kv.account("prefill_chunk", member.tokens)
                if not req.is_prefilled:
                    continue
                del state.waiting[req.id]
                req.emit_token(state.clock)
                state.kv.account("token", 1)
                emitted.append(req.id)
                if req.is_finished:
                    state.kv.account("finish", req.prompt_len + req.decoded_len)
                    state.kv.release(self.prefill_footprint(req))
                    finished.append(req.id)
                else:
                    self.transfer_buffer.append(req)
        else:
            for member in batch.plan.members:
                self.emit(state, state.kv_decode, state.requests[member.request_id], emitted, finished)
        state.record("complete", lane.name, batch.plan.request_ids, batch.latency,
                     emitted=emitted, finished=finished)


ENGINES: Dict[EngineType, type] = {
    EngineType.NEXUS: IntraGpuEngine,
    EngineType.STATIC: IntraGpuEngine,
    EngineType.MONOLITHIC: MonolithicEngine,
    EngineType.ENGINE_DISAGG: EngineDisaggEngine,
}


def make_engine(kind: EngineKind, cfg: ValidatedConfig, sim_cfg: SimulatorConfig) -> BaseEngine:
    return ENGINES[kind.type](kind, cfg, sim_cfg)
