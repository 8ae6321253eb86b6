# simulator.py — Цикл дискретных событий и воспроизведение журнала событий

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .costmodel import CostModel
from .domain import Request, SimulationTimeout, TraceFormatError, ValidatedConfig
from .engines import make_engine
from .metrics import MetricsReport, report_from_requests
from .opcost import decode_op_workloads, mixed_op_workloads, prefill_batch_workloads
from .simstate import EngineKind, EngineType, SimulatorConfig

logger = logging.getLogger(__name__)


@dataclass
class SimResult:
    engine: str
    requests: List[Request]
    rejected: List[int]
    event_log: List[dict]
    decision_log: List[dict]
    report: Optional[MetricsReport]
    timed_out: bool = False
    events: int = 0
    switches: int = 0
    sim_time_s: float = 0.0
    kv_peak: float = 0.0
    kv_added: float = 0.0
    kv_freed: float = 0.0
    kv_final: float = 0.0
    oom_blocks: int = 0

    @property
    def completed(self) -> int:
        return sum(1 for r in self.requests if r.is_finished)

    def raise_for_timeout(self) -> "SimResult":
        if self.timed_out:
            raise SimulationTimeout(
                f"{self.engine}: budget exhausted at t={self.sim_time_s:.3f}s after {self.events} events "
                f"({self.completed}/{len(self.requests)} requests finished)", partial=self)
        return self


def _check_sorted(trace: Sequence[Request]) -> None:
    for prev, cur in zip(trace, trace[1:]):
        if cur.arrival_time < prev.arrival_time:
            raise ValueError(f"trace is not sorted by arrival time (request {cur.id})")


def run(engine_kind: EngineKind, trace: Sequence[Request], cfg: ValidatedConfig,
        sim_cfg: Optional[SimulatorConfig] = None, seed: int = 0) -> SimResult:
    """Прогоняет трассу через движок до опустошения или до исчерпания бюджета.

    Запросы трассы не изменяются: движок работает с их свежими копиями.
    """
    sim_cfg = sim_cfg or SimulatorConfig()
    if isinstance(engine_kind, str):
        engine_kind = EngineKind.parse(engine_kind)
    _check_sorted(trace)
    engine = make_engine(engine_kind, cfg, sim_cfg)
    state = engine.new_state(seed)
    state.record("start", "engine", [], engine=engine_kind.label, seed=seed)
    for req in trace:
        state.schedule(req.arrival_time, "arrival", req.fresh())

    logger.info(f"Старт симуляции {engine_kind.label}: {len(trace)} запросов")
    timed_out = False
    while state.pending:
        if state.peek_time() > sim_cfg.max_sim_time_s or state.events_processed >= sim_cfg.max_events:
            timed_out = True
            break
        state.clock, kind, payload = state.pop_event()
        if kind == "arrival":
            state.requests[payload.id] = payload
            engine.on_arrival(state, payload)
        else:
            engine.handle(state, kind, payload)
        state.events_processed += 1
        # Все события одного момента обрабатываются до формирования новых пакетов.
        if not state.pending or state.peek_time() > state.clock:
            engine.step(state)

    requests = sorted(state.requests.values(), key=lambda r: r.id)
    partition = getattr(engine, "partition", None)
    kv_pools = [state.kv] + ([state.kv_decode] if state.kv_decode is not None else [])
    result = SimResult(
        engine=engine_kind.label,
        requests=requests,
        rejected=list(state.rejected),
        event_log=state.log,
        decision_log=list(partition.log) if partition is not None else [],
        report=report_from_requests(requests),
        timed_out=timed_out,
        events=state.events_processed,
        switches=partition.switches if partition is not None else 0,
        sim_time_s=state.clock,
        kv_peak=max(p.peak for p in kv_pools),
        kv_added=sum(p.added for p in kv_pools),
        kv_freed=sum(p.freed for p in kv_pools),
        kv_final=sum(p.used for p in kv_pools),
        oom_blocks=state.oom_blocks,
    )
    if timed_out:
        logger.warning(f"{engine_kind.label}: бюджет симуляции исчерпан на t={state.clock:.2f} с, "
                       f"завершено {result.completed} из {len(requests)}")
    if state.oom_blocks:
        logger.warning(f"{engine_kind.label}: префилл блокировался по KV {state.oom_blocks} раз")
    if state.rejected:
        logger.warning(f"{engine_kind.label}: отклонено запросов: {len(state.rejected)}")
    logger.info(f"Симуляция {engine_kind.label} завершена: {result.events} событий, "
                f"{result.switches} переключений разбиения, t={state.clock:.2f} с")
    return result


# --- Журнал событий -----------------------------------------------------------

def read_event_log(path: Path) -> List[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise TraceFormatError(line_no, f"invalid JSON: {e.msg}") from e
    return records


def requests_from_event_log(records: Iterable[dict]) -> Dict[int, Request]:
    """Восстанавливает жизненные циклы запросов только по записям журнала."""
    requests: Dict[int, Request] = {}
    for rec in records:
        kind = rec["event_kind"]
        if kind == "arrival":
            rid = rec["request_ids"][0]
            requests[rid] = Request(rid, rec["arrival_time"], rec["prompt_len"], rec["output_len"])
        elif kind == "launch":
            for rid in rec.get("prefill_ids", []):
                if requests[rid].first_scheduled_time is None:
                    requests[rid].first_scheduled_time = rec["time"]
        elif kind == "complete":
            for rid in rec.get("emitted", []):
                requests[rid].emit_token(rec["time"])
    return requests


def replay_event_log(records: Iterable[dict]) -> Optional[MetricsReport]:
    requests = requests_from_event_log(records)
    return report_from_requests(sorted(requests.values(), key=lambda r: r.id))


def replay_latencies(records: Sequence[dict], cfg: ValidatedConfig,
                     contention: bool = True) -> List[Tuple[float, float]]:
    """Пары (латентность из журнала, латентность, пересчитанная моделью) для каждого запуска пакета."""
    start = next((r for r in records if r["event_kind"] == "start"), None)
    if start is None:
        raise TraceFormatError(1, "event log has no start record")
    engine_type = EngineKind.parse(start["engine"]).type
    costmodel = CostModel(cfg.gpu, cfg.profile, contention=contention)
    model = cfg.model
    inflight_prefill = None
    pairs: List[Tuple[float, float]] = []
    for rec in records:
        kind, lane = rec["event_kind"], rec["lane"]
        if kind == "complete" and lane == "prefill":
            inflight_prefill = None
        if kind != "launch":
            continue
        chunks = [tuple(c) for c in rec["chunks"]]
        contexts = rec["decode_contexts"]
        ratio = rec["share"] / 100
        if lane == "mixed":
            latency = costmodel.isolated(mixed_op_workloads(model, chunks, contexts), 1.0).total_s
        elif lane == "prefill":
            ops = prefill_batch_workloads(model, chunks)
            breakdown = costmodel.prefill(ops, ratio)
            inflight_prefill = (ops, breakdown)
            latency = breakdown.total_s
        else:
            ops = decode_op_workloads(model, len(contexts), contexts)
            if engine_type is EngineType.ENGINE_DISAGG or inflight_prefill is None:
                latency = costmodel.decode(ops, ratio).total_s
            else:
                latency = costmodel.decode(ops, ratio, prefill_ops=inflight_prefill[0],
                                           prefill_breakdown=inflight_prefill[1]).total_s
        pairs.append((rec["latency"], latency))
    return pairs
