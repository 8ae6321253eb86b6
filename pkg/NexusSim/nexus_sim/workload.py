# workload.py — Генерация трасс запросов (пуассоновский поток, распределения длин
# по таблице характеристик нагрузок) и чтение/запись файлов трасс

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from . import config
from .domain import ConfigError, InvalidField, Request, SchemaVersionError, TraceFormatError, UnknownPresetError
from .metrics import atomic_write

logger = logging.getLogger(__name__)

TRACE_SCHEMA = "nexus-sim-trace"
TRACE_VERSION = 1
# Хвост подобранного логнормального распределения обрезается на TAIL_CAP · P99.
TAIL_CAP = 2.0

# Порядок дочерних генераторов SeedSequence.spawn
_ARRIVALS, _PROMPTS, _OUTPUTS, _MIXTURE = range(4)


@dataclass(frozen=True)
class LengthDistribution:
    """Распределение длины в токенах: constant | lognormal | empirical.

    empirical задаётся четвёркой (mean, P50, P95, P99) и реализуется подобранным
    логнормальным распределением с обрезкой снизу на 1 и сверху на TAIL_CAP · P99.
    """

    kind: str
    value: int = 0
    mu: float = 0.0
    sigma: float = 0.0
    stats: Optional[Tuple[float, float, float, float]] = None
    max_value: Optional[int] = None

    @classmethod
    def constant(cls, value: int) -> "LengthDistribution":
        return cls("constant", value=value)

    @classmethod
    def lognormal(cls, mu: float, sigma: float, max_value: Optional[int] = None) -> "LengthDistribution":
        return cls("lognormal", mu=mu, sigma=sigma, max_value=max_value)

    @classmethod
    def empirical(cls, mean: float, p50: float, p95: float, p99: float) -> "LengthDistribution":
        mu, sigma = fit_lognormal(mean, p50, p95)
        return cls("empirical", mu=mu, sigma=sigma, stats=(mean, p50, p95, p99),
                   max_value=int(math.ceil(TAIL_CAP * p99)))

    @classmethod
    def from_dict(cls, data: Mapping) -> "LengthDistribution":
        kind = data.get("kind")
        if kind == "constant":
            return cls.constant(int(data["value"]))
        if kind == "lognormal":
            return cls.lognormal(float(data["mu"]), float(data["sigma"]), data.get("max_value"))
        if kind == "empirical":
            return cls.empirical(*[float(x) for x in data["stats"]])
        raise ConfigError([InvalidField("distribution.kind", f"unknown kind: {kind}")])

    def violations(self, prefix: str) -> List[InvalidField]:
        found = []
        if self.kind == "constant" and self.value < 1:
            found.append(InvalidField(f"{prefix}.value", "must be >= 1"))
        if self.kind in ("lognormal", "empirical"):
            if not math.isfinite(self.mu) or not math.isfinite(self.sigma) or self.sigma < 0:
                found.append(InvalidField(f"{prefix}.sigma", "must be finite and >= 0"))
            if self.max_value is not None and self.max_value < 1:
                found.append(InvalidField(f"{prefix}.max_value", "must be >= 1"))
        if self.kind == "empirical":
            mean, p50, p95, p99 = self.stats
            if not 0 < p50 <= p95 <= p99 or mean <= 0:
                found.append(InvalidField(f"{prefix}.stats", "need 0 < P50 <= P95 <= P99 and mean > 0"))
        if self.kind not in ("constant", "lognormal", "empirical"):
            found.append(InvalidField(f"{prefix}.kind", f"unknown kind: {self.kind}"))
        return found

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "constant":
            return np.full(n, self.value, dtype=np.int64)
        values = np.rint(rng.lognormal(self.mu, self.sigma, size=n))
        values = np.clip(values, 1, self.max_value if self.max_value is not None else None)
        return values.astype(np.int64)

    def fitted_quantile(self, p: float) -> float:
        return math.exp(self.mu + float(norm.ppf(p / 100)) * self.sigma)


def fit_lognormal(mean: float, p50: float, p95: float) -> Tuple[float, float]:
    """μ = ln P50, σ из отношения mean/P50; если mean ≤ P50 — из P95."""
    if p50 <= 0 or mean <= 0:
        raise ConfigError([InvalidField("distribution.stats", "mean and P50 must be > 0")])
    mu = math.log(p50)
    if mean > p50:
        sigma = math.sqrt(2 * math.log(mean / p50))
    else:
        sigma = max((math.log(p95) - mu) / float(norm.ppf(0.95)), 0.0)
    return mu, sigma


def fit_report(dist: LengthDistribution) -> Dict[str, Tuple[float, float]]:
    """{статистика: (целевое, подобранное)} для empirical-распределения."""
    if dist.stats is None:
        return {}
    mean, p50, p95, p99 = dist.stats
    fitted_mean = math.exp(dist.mu + dist.sigma ** 2 / 2)
    return {
        "mean": (mean, fitted_mean),
        "p50": (p50, dist.fitted_quantile(50)),
        "p95": (p95, dist.fitted_quantile(95)),
        "p99": (p99, dist.fitted_quantile(99)),
    }


@dataclass(frozen=True)
class WorkloadComponent:
    name: str
    input_len: LengthDistribution
    output_len: LengthDistribution
    weight: float = 1.0


@dataclass(frozen=True)
class WorkloadSpec:
    rate_rps: float
    components: Tuple[WorkloadComponent, ...]
    num_requests: Optional[int] = None
    duration_s: Optional[float] = None
    seed: int = 0
    name: str = ""
    offline: bool = False    # все запросы поданы в момент 0

    def __post_init__(self):
        violations = []
        if self.offline and self.num_requests is None:
            violations.append(InvalidField("workload.offline", "offline mode needs num_requests"))
        if not self.rate_rps > 0:
            violations.append(InvalidField("workload.rate_rps", "must be > 0"))
        if (self.num_requests is None) == (self.duration_s is None):
            violations.append(InvalidField("workload", "set exactly one of num_requests and duration_s"))
        if self.num_requests is not None and self.num_requests < 0:
            violations.append(InvalidField("workload.num_requests", "must be >= 0"))
        if self.duration_s is not None and not self.duration_s > 0:
            violations.append(InvalidField("workload.duration_s", "must be > 0"))
        if not self.components:
            violations.append(InvalidField("workload.components", "at least one component required"))
        weights = [c.weight for c in self.components]
        if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
            violations.append(InvalidField("workload.weights", "must be non-negative and sum to 1"))
        for c in self.components:
            violations += c.input_len.violations(f"{c.name}.input")
            violations += c.output_len.violations(f"{c.name}.output")
        if violations:
            raise ConfigError(violations)

    @property
    def weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.components], dtype=float)


def _arrivals(rng: np.random.Generator, rate: float, num_requests: Optional[int],
              duration_s: Optional[float]) -> np.ndarray:
    if num_requests is not None:
        return np.cumsum(rng.exponential(1.0 / rate, size=num_requests))
    gaps: List[np.ndarray] = []
    total = 0.0
    block = max(int(rate * duration_s * 1.2) + 16, 16)
    while total <= duration_s:
        chunk = rng.exponential(1.0 / rate, size=block)
        gaps.append(chunk)
        total += float(chunk.sum())
    times = np.cumsum(np.concatenate(gaps))
    return times[times <= duration_s]


def generate_trace(spec: WorkloadSpec) -> List[Request]:
    """Пуассоновские приходы, длины по компонентам смеси; детерминировано по spec.seed."""
    children = np.random.SeedSequence(spec.seed).spawn(4)
    if spec.offline:
        # Поток приходов не расходуется: длины совпадают с онлайн-трассой того же seed
        arrivals = np.zeros(spec.num_requests)
    else:
        arrivals = _arrivals(np.random.default_rng(children[_ARRIVALS]), spec.rate_rps,
                             spec.num_requests, spec.duration_s)
    n = len(arrivals)
    if len(spec.components) == 1:
        choice = np.zeros(n, dtype=np.int64)
    else:
        choice = np.random.default_rng(children[_MIXTURE]).choice(len(spec.components), size=n, p=spec.weights)
    prompts = np.zeros(n, dtype=np.int64)
    outputs = np.zeros(n, dtype=np.int64)
    for i, component in enumerate(spec.components):
        # Каждая компонента тянет полный набор длин из одного и того же потока:
        # смесь с весами (1, 0, ...) совпадает с первой компонентой.
        mask = choice == i
        prompts[mask] = component.input_len.sample(np.random.default_rng(children[_PROMPTS]), n)[mask]
        outputs[mask] = component.output_len.sample(np.random.default_rng(children[_OUTPUTS]), n)[mask]
    trace = [Request(i, float(arrivals[i]), int(prompts[i]), int(outputs[i])) for i in range(n)]
    mode = "офлайн, все в момент 0" if spec.offline else f"{spec.rate_rps} rps"
    logger.info(f"Сгенерирована трасса {spec.name or 'workload'}: {n} запросов, {mode}, seed {spec.seed}")
    return trace


def mix_traces(specs: Sequence[WorkloadSpec], weights: Sequence[float], seed: int,
               rate_rps: Optional[float] = None, num_requests: Optional[int] = None,
               duration_s: Optional[float] = None) -> List[Request]:
    """Единый пуассоновский поток, каждый запрос из спецификации i с вероятностью w_i."""
    if len(specs) != len(weights):
        raise ValueError("specs and weights differ in length")
    components = tuple(
        WorkloadComponent(c.name, c.input_len, c.output_len, c.weight * w)
        for spec, w in zip(specs, weights) for c in spec.components)
    first = specs[0]
    if num_requests is None and duration_s is None:
        num_requests, duration_s = first.num_requests, first.duration_s
    mixed = WorkloadSpec(rate_rps or first.rate_rps, components, num_requests, duration_s, seed,
                         "+".join(s.name for s in specs), first.offline)
    return generate_trace(mixed)


# --- Пресеты ------------------------------------------------------------------

def preset_components(name: str) -> Tuple[WorkloadComponent, ...]:
    try:
        preset = config.WORKLOADS[name]
    except KeyError:
        raise UnknownPresetError(f"unknown workload preset: {name} (known: {', '.join(config.WORKLOADS)})") from None
    if "mixture" in preset:
        return tuple(WorkloadComponent(c.name, c.input_len, c.output_len, c.weight * weight)
                     for part, weight in preset["mixture"] for c in preset_components(part))
    return (WorkloadComponent(name, LengthDistribution.from_dict(preset["input"]),
                              LengthDistribution.from_dict(preset["output"])),)


def preset_workload(name: str, rate_rps: float, num_requests: Optional[int] = None,
                    duration_s: Optional[float] = None, seed: int = 0, offline: bool = False) -> WorkloadSpec:
    components = preset_components(name)
    for c in components:
        for stat, (target, fitted) in fit_report(c.input_len).items():
            if stat in ("p95", "p99"):
                logger.info(f"{c.name}: вход {stat} цель {target:.0f}, подобрано {fitted:.0f}")
    return WorkloadSpec(rate_rps, components, num_requests, duration_s, seed, name, offline)


# --- Файлы трасс ----------------------------------------------------------------

def save_trace(path: Path, trace: Sequence[Request]) -> None:
    lines = [json.dumps({"schema": TRACE_SCHEMA, "version": TRACE_VERSION})]
    for r in trace:
        lines.append(json.dumps({"id": r.id, "arrival_s": r.arrival_time,
                                 "prompt_tokens": r.prompt_len, "output_tokens": r.output_len}))
    atomic_write(Path(path), "\n".join(lines) + "\n")
    logger.info(f"Трасса записана: {path} ({len(trace)} запросов)")


def _int_field(record: dict, key: str, line_no: int) -> int:
    value = record.get(key)
    if not isinstance(value, int) or isinstance(value, bool):
        raise TraceFormatError(line_no, f"field '{key}' must be an integer")
    return value


def load_trace(path: Path) -> List[Request]:
    trace: List[Request] = []
    seen = set()
    header = False
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceFormatError(line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise TraceFormatError(line_no, "expected an object")
            if not header:
                header = True
                if record.get("schema") != TRACE_SCHEMA:
                    raise TraceFormatError(line_no, "missing trace header")
                if record.get("version") != TRACE_VERSION:
                    raise SchemaVersionError(
                        f"{path}: trace version {record.get('version')}, supported {TRACE_VERSION}")
                continue
            rid = _int_field(record, "id", line_no)
            arrival = record.get("arrival_s")
            if not isinstance(arrival, (int, float)) or isinstance(arrival, bool) \
                    or not math.isfinite(arrival) or arrival < 0:
                raise TraceFormatError(line_no, "field 'arrival_s' must be a non-negative number")
            prompt = _int_field(record, "prompt_tokens", line_no)
            output = _int_field(record, "output_tokens", line_no)
            if prompt < 1 or output < 1:
                raise TraceFormatError(line_no, "token counts must be >= 1")
            if rid in seen:
                raise TraceFormatError(line_no, f"duplicate request id {rid}")
            seen.add(rid)
            trace.append(Request(rid, float(arrival), prompt, output))
    if not trace:
        logger.warning(f"Трасса {path} пуста")
    return trace
