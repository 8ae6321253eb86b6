# main.py — Оркестрация экспериментов: трассы, прогоны движков, развёртки
# по нагрузке, файлы результатов и сводные таблицы

from __future__ import annotations

import logging
import re
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .config import RunConfig, load_kernel_profile, profile_to_dict, read_config_file
from .domain import KernelProfile, Request, SimulationTimeout
from .metrics import (MetricsReport, plot_rows, report_to_dict, write_jsonl, write_plot_data,
                      write_summary)
from .simstate import EngineKind
from .simulator import SimResult, read_event_log, replay_event_log, replay_latencies, run
from .workload import generate_trace, load_trace, preset_workload, save_trace

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TIMEOUT = 3

_TABLE_COLUMNS = (
    ("throughput", "throughput_rps", None),
    ("makespan", "makespan_s", None),
    ("TTFT mean", "ttft_s", "mean"),
    ("TTFT P95", "ttft_s", "p95"),
    ("TBT mean", "tbt_s", "mean"),
    ("TBT P95", "tbt_s", "p95"),
    ("norm mean", "normalized_latency_s", "mean"),
    ("norm P95", "normalized_latency_s", "p95"),
)


def engine_slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


def parse_rates(text: str, step: float = 0.5) -> List[float]:
    """'1..6' с шагом step, либо список через запятую: '1,2.5,4'."""
    if ".." in text:
        lo, hi = (float(x) for x in text.split("..", 1))
        if step <= 0 or hi < lo:
            raise ValueError(f"bad rate range: {text} step {step}")
        count = int(np.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + i * step, 10) for i in range(count)]
    return [float(x) for x in text.split(",") if x.strip()]


def summary_of(result: SimResult, seed: int, workload: Dict) -> dict:
    return {
        "engine": result.engine,
        "seed": seed,
        "workload": {k: (str(v) if isinstance(v, Path) else v) for k, v in workload.items()},
        "timed_out": result.timed_out,
        "events": result.events,
        "partition_switches": result.switches,
        "requests": len(result.requests),
        "completed": result.completed,
        "rejected": len(result.rejected),
        "kv_peak_bytes": result.kv_peak,
        "oom_blocks": result.oom_blocks,
        "metrics": report_to_dict(result.report) if result.report is not None else None,
    }


def _sweep_job(run_cfg: RunConfig, engine: str, rate: float) -> Tuple[List[dict], bool]:
    runner = ExperimentRunner(run_cfg, verbose=False)
    trace = runner.build_trace(rate_rps=rate)
    result = run(EngineKind.parse(engine), trace, run_cfg.config, run_cfg.simulator, runner.seed)
    rows = plot_rows(result.engine, result.report, rate_rps=rate) if result.report is not None else []
    return rows, result.timed_out


class ExperimentRunner:
    """Прогоны экспериментов: трасса, движки, файлы результатов и сводная таблица."""

    def __init__(self, run_cfg: RunConfig, verbose: bool = True):
        self.run_cfg = run_cfg
        self.output_dir = run_cfg.output_dir
        self.workload = dict(run_cfg.workload)
        self.seed = int(self.workload.get("seed", 0))
        if verbose:
            model = run_cfg.config.model
            print("NexusSim initialized with:")
            print(f"  Model: d={model.hidden_dim}, d_ff={model.ffn_dim}, layers={model.num_layers}")
            print(f"  KV capacity: {run_cfg.config.gpu.kv_capacity_bytes / 1e9:.1f} GB")
            print(f"  Output: {self.output_dir}")

    def build_trace(self, rate_rps: Optional[float] = None) -> List[Request]:
        if self.workload.get("trace"):
            return load_trace(Path(self.workload["trace"]))
        spec = preset_workload(
            self.workload.get("preset", "mixed"),
            rate_rps if rate_rps is not None else float(self.workload["rate_rps"]),
            num_requests=self.workload.get("num_requests") if not self.workload.get("duration_s") else None,
            duration_s=self.workload.get("duration_s"),
            seed=self.seed,
            offline=bool(self.workload.get("offline", False)),
        )
        return generate_trace(spec)

    def simulate(self, engine: str, trace: Sequence[Request]) -> SimResult:
        result = run(EngineKind.parse(engine), trace, self.run_cfg.config, self.run_cfg.simulator, self.seed)
        self.write_result(result)
        return result

    def write_result(self, result: SimResult) -> None:
        run_dir = self.output_dir / engine_slug(result.engine)
        write_summary(run_dir / "summary.json", summary_of(result, self.seed, self.workload))
        write_jsonl(run_dir / "events.jsonl", result.event_log)
        write_jsonl(run_dir / "decisions.jsonl", result.decision_log)

    def run_experiment(self, engines: Optional[Sequence[str]] = None) -> int:
        """Все движки получают одну и ту же трассу.

        Если какой-то движок упёрся в бюджет симуляции, после записи всех файлов
        поднимается SimulationTimeout с его частичным результатом.
        """
        engines = list(engines or self.run_cfg.engines)
        trace = self.build_trace()
        save_trace(self.output_dir / "trace.jsonl", trace)
        results = []
        for engine in engines:
            print(f"Симуляция движка {engine}...")
            results.append(self.simulate(engine, trace))

        rows = []
        for result in results:
            if result.report is not None:
                rows += plot_rows(result.engine, result.report)
        if rows:
            write_plot_data(self.output_dir / "plot_data.csv", rows)
        print(format_table([(r.engine, r.report, r.timed_out) for r in results]))
        for result in results:
            result.raise_for_timeout()
        return EXIT_OK

    def sweep(self, rates: Sequence[float], engines: Optional[Sequence[str]] = None, jobs: int = 1) -> int:
        engines = list(engines or self.run_cfg.engines)
        tasks = [(engine, rate) for rate in rates for engine in engines]
        print(f"Развёртка: {len(rates)} нагрузок × {len(engines)} движков, процессов: {jobs}")
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(pool.map(_sweep_job, [self.run_cfg] * len(tasks),
                                         [e for e, _ in tasks], [r for _, r in tasks]))
        else:
            outcomes = [_sweep_job(self.run_cfg, engine, rate) for engine, rate in tasks]

        rows = [row for row_set, _ in outcomes for row in row_set]
        if rows:
            write_plot_data(self.output_dir / "sweep.csv", rows)
        check_queue_delay_monotone(rows)
        timed_out = sum(1 for _, flag in outcomes if flag)
        if timed_out:
            raise SimulationTimeout(f"{timed_out} of {len(tasks)} sweep runs exhausted the simulation budget")
        return EXIT_OK

    def gen_trace(self, path: Path) -> List[Request]:
        trace = self.build_trace()
        save_trace(path, trace)
        return trace

    def replay(self, event_log: Path, check_latencies: bool = False) -> Optional[MetricsReport]:
        records = read_event_log(event_log)
        report = replay_event_log(records)
        if check_latencies:
            pairs = replay_latencies(records, self.run_cfg.config, self.run_cfg.simulator.contention)
            worst = max((abs(a - b) for a, b in pairs), default=0.0)
            print(f"Пересчитано запусков пакетов: {len(pairs)}, макс. расхождение латентности: {worst:.3e} с")
        if report is not None:
            print(format_table([(event_log.parent.name or "replay", report, False)]))
        return report


def check_queue_delay_monotone(rows: Sequence[dict]) -> bool:
    """Средняя задержка в очереди не должна убывать с ростом нагрузки."""
    ok = True
    by_engine: Dict[str, List[Tuple[float, float]]] = {}
    for row in rows:
        if row["metric"] == "queue_delay_s" and row["stat"] == "mean":
            by_engine.setdefault(row["engine"], []).append((row["rate_rps"], row["value"]))
    for engine, points in by_engine.items():
        delays = [d for _, d in sorted(points)]
        if any(b < a for a, b in zip(delays, delays[1:])):
            logger.warning(f"{engine}: средняя задержка в очереди не монотонна по нагрузке: {delays}")
            ok = False
    return ok


def format_table(entries: Sequence[Tuple[str, Optional[MetricsReport], bool]]) -> str:
    header = f"{'engine':<22}" + "".join(f"{name:>12}" for name, _, _ in _TABLE_COLUMNS)
    lines = [header, "-" * len(header)]
    for engine, report, timed_out in entries:
        label = engine + (" (timeout)" if timed_out else "")
        if report is None:
            lines.append(f"{label:<22}" + f"{'no data':>12}")
            continue
        cells = []
        for _, metric, stat in _TABLE_COLUMNS:
            value = getattr(report, metric) if stat is None else report.stat(metric, stat)
            cells.append(f"{value:>12.4f}" if value is not None else f"{'-':>12}")
        lines.append(f"{label:<22}" + "".join(cells))
    return "\n".join(lines)


def calibrate_import(path: Path, config_path: Optional[Path] = None) -> KernelProfile:
    """Проверяет файл калибровки и, если задан config_path, записывает профиль в его секцию kernel_profile."""
    profile = load_kernel_profile(path)
    for op, coeffs in profile_to_dict(profile).items():
        print(f"  {op:<14} r_sat={coeffs['r_sat']:.3f}  lambda={coeffs['lambda']:.3f}")
    if config_path is not None:
        data = read_config_file(config_path) if config_path.exists() else {}
        data["kernel_profile"] = profile_to_dict(profile)
        with open(config_path, "w", encoding="utf-8") as f:
            yaml.safe_dump(data, f, sort_keys=False, allow_unicode=True)
        logger.info(f"Профиль ядер записан в {config_path}")
    return profile
