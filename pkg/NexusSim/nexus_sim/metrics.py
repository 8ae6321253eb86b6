# metrics.py — TTFT, TBT, нормализованная латентность и пропускная способность
# с агрегацией mean/P50/P95/P99 (перцентили по ближайшему рангу)

from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .domain import EmptyInputError, IncompleteRequestError, Request

logger = logging.getLogger(__name__)

PERCENTILES = (50, 95, 99)
METRICS = ("ttft_s", "tbt_s", "tbt_per_request_s", "e2e_s", "normalized_latency_s", "queue_delay_s",
           "execution_s")


@dataclass(frozen=True)
class RequestMetrics:
    request_id: int
    output_len: int
    ttft_s: float
    tbt_s: Tuple[float, ...]
    e2e_s: float
    normalized_latency_s: float
    queue_delay_s: Optional[float] = None
    execution_s: Optional[float] = None     # e2e − queue_delay: от первого запуска до последнего токена


@dataclass(frozen=True)
class Summary:
    count: int
    mean: Optional[float]
    p50: Optional[float]
    p95: Optional[float]
    p99: Optional[float]

    @classmethod
    def empty(cls) -> "Summary":
        return cls(0, None, None, None, None)


@dataclass(frozen=True)
class MetricsReport:
    requests: Tuple[RequestMetrics, ...]
    aggregates: Mapping[str, Summary]
    throughput_rps: float
    makespan_s: float

    def stat(self, metric: str, stat: str = "mean") -> Optional[float]:
        return getattr(self.aggregates[metric], stat)


def percentile_nearest_rank(values: Sequence[float], p: float) -> float:
    """Элемент с рангом ceil(p/100 · N): наименьшее значение, при котором доля выборки не меньше p%."""
    if len(values) == 0:
        raise EmptyInputError("percentile of an empty sample")
    return float(np.percentile(np.asarray(values, dtype=float), p, method="inverted_cdf"))


def summarize(values: Sequence[float]) -> Summary:
    if len(values) == 0:
        return Summary.empty()
    return Summary(
        count=len(values),
        mean=float(np.mean(np.asarray(values, dtype=float))),
        p50=percentile_nearest_rank(values, 50),
        p95=percentile_nearest_rank(values, 95),
        p99=percentile_nearest_rank(values, 99),
    )


def compute_request_metrics(req: Request) -> RequestMetrics:
    if req.finish_time is None or req.first_token_time is None or not req.token_times:
        raise IncompleteRequestError(f"request {req.id} has not completed")
    times = req.token_times
    tbt = tuple(times[i] - times[i - 1] for i in range(1, len(times)))
    e2e = req.finish_time - req.arrival_time
    queue_delay = execution = None
    if req.first_scheduled_time is not None:
        queue_delay = req.first_scheduled_time - req.arrival_time
        execution = req.finish_time - req.first_scheduled_time
    return RequestMetrics(
        request_id=req.id,
        output_len=req.output_len,
        ttft_s=req.first_token_time - req.arrival_time,
        tbt_s=tbt,
        e2e_s=e2e,
        normalized_latency_s=e2e / req.output_len,
        queue_delay_s=queue_delay,
        execution_s=execution,
    )


def aggregate(reports: Sequence[RequestMetrics], makespan_s: Optional[float] = None) -> MetricsReport:
    """TBT пулируется по всем интервалам всех запросов; tbt_per_request_s — по средним запросов."""
    if not reports:
        raise EmptyInputError("no completed requests to aggregate")
    pooled_tbt = [gap for r in reports for gap in r.tbt_s]
    per_request_tbt = [float(np.mean(r.tbt_s)) for r in reports if r.tbt_s]
    aggregates: Dict[str, Summary] = {
        "ttft_s": summarize([r.ttft_s for r in reports]),
        "tbt_s": summarize(pooled_tbt),
        "tbt_per_request_s": summarize(per_request_tbt),
        "e2e_s": summarize([r.e2e_s for r in reports]),
        "normalized_latency_s": summarize([r.normalized_latency_s for r in reports]),
        "queue_delay_s": summarize([r.queue_delay_s for r in reports if r.queue_delay_s is not None]),
        "execution_s": summarize([r.execution_s for r in reports if r.execution_s is not None]),
    }
    if makespan_s is None:
        makespan_s = max(r.e2e_s for r in reports)
    throughput = len(reports) / makespan_s if makespan_s > 0 else 0.0
    return MetricsReport(tuple(reports), aggregates, throughput, makespan_s)


def report_from_requests(requests: Iterable[Request]) -> Optional[MetricsReport]:
    """Отчёт по завершённым запросам; makespan — от первого прихода до последнего завершения."""
    done = sorted((r for r in requests if r.is_finished), key=lambda r: r.id)
    if not done:
        return None
    makespan = max(r.finish_time for r in done) - min(r.arrival_time for r in done)
    return aggregate([compute_request_metrics(r) for r in done], makespan)


def report_to_dict(report: MetricsReport, include_requests: bool = False) -> dict:
    data = {
        "throughput_rps": report.throughput_rps,
        "makespan_s": report.makespan_s,
        "completed": len(report.requests),
        "aggregates": {name: asdict(summary) for name, summary in report.aggregates.items()},
    }
    if include_requests:
        data["requests"] = [asdict(r) for r in report.requests]
    return data


def plot_rows(engine: str, report: MetricsReport, **extra) -> List[dict]:
    """Строки для файла данных графиков: одна на (движок, метрика, статистика)."""
    rows = [dict(engine=engine, metric="throughput_rps", stat="value", value=report.throughput_rps, **extra)]
    for name in METRICS:
        summary = report.aggregates[name]
        for stat in ("mean", "p50", "p95", "p99"):
            value = getattr(summary, stat)
            if value is not None:
                rows.append(dict(engine=engine, metric=name, stat=stat, value=value, **extra))
    return rows


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_summary(path: Path, summary: dict) -> None:
    atomic_write(path, json.dumps(summary, indent=2, sort_keys=True))
    logger.info(f"Сводка записана: {path}")


def write_plot_data(path: Path, rows: Sequence[dict]) -> None:
    atomic_write(path, pd.DataFrame(rows).to_csv(index=False))
    logger.info(f"Данные для графиков записаны: {path}")


def write_jsonl(path: Path, records: Iterable[dict]) -> None:
    atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
