# domain.py — Общие доменные типы симулятора и проверка конфигурации

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, List, Mapping, Optional


# --- Ошибки ---------------------------------------------------------------

class NexusSimError(Exception):
    """Базовая ошибка пакета nexus_sim."""


@dataclass(frozen=True)
class InvalidField:
    name: str
    reason: str

    def __str__(self) -> str:
        return f"{self.name}: {self.reason}"


class ConfigError(NexusSimError):
    """Конфигурация нарушает инварианты. Содержит ВСЕ нарушения, а не только первое."""

    def __init__(self, violations: List[InvalidField]):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class CalibrationError(NexusSimError):
    pass


class TraceFormatError(NexusSimError):
    def __init__(self, line_no: int, reason: str):
        self.line_no = line_no
        self.reason = reason
        super().__init__(f"line {line_no}: {reason}")


class SchemaVersionError(NexusSimError):
    pass


class IncompleteRequestError(NexusSimError):
    pass


class EmptyInputError(NexusSimError):
    pass


class UnknownPresetError(NexusSimError):
    pass


class SimulationTimeout(NexusSimError):
    """Симуляция упёрлась в бюджет времени или событий; partial — частичный результат."""

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


# --- Модель и устройство ----------------------------------------------------

class OperatorKind(str, Enum):
    QKV_PROJ = "qkv_proj"
    ATTN_PREFILL = "attn_prefill"
    ATTN_DECODE = "attn_decode"
    ATTN_OUT_PROJ = "attn_out_proj"
    FFN = "ffn"

    @property
    def is_attention(self) -> bool:
        return self in (OperatorKind.ATTN_PREFILL, OperatorKind.ATTN_DECODE)


class Phase(str, Enum):
    PREFILL = "prefill"
    DECODE = "decode"
    MIXED = "mixed"

    @property
    def other(self) -> "Phase":
        if self is Phase.PREFILL:
            return Phase.DECODE
        if self is Phase.DECODE:
            return Phase.PREFILL
        raise ValueError("mixed phase has no counterpart")


@dataclass(frozen=True)
class ModelConfig:
    """Размерности трансформера.

    kv_bytes_per_token не задаётся свободно: 2 (K и V) · num_layers · d · element_bytes.
    weight_bytes_per_layer_dense — веса FFN (up + down), weight_bytes_per_layer_attn —
    проекции QKV и выходная проекция внимания.
    """

    hidden_dim: int
    ffn_dim: int
    num_layers: int
    num_heads: int
    kv_bytes_per_token: int
    weight_bytes_per_layer_dense: int
    weight_bytes_per_layer_attn: int
    element_bytes: int = 2

    @classmethod
    def from_dims(cls, hidden_dim: int, ffn_dim: int, num_layers: int, num_heads: int,
                  element_bytes: int = 2) -> "ModelConfig":
        return cls(
            hidden_dim=hidden_dim,
            ffn_dim=ffn_dim,
            num_layers=num_layers,
            num_heads=num_heads,
            kv_bytes_per_token=2 * num_layers * hidden_dim * element_bytes,
            weight_bytes_per_layer_dense=2 * hidden_dim * ffn_dim * element_bytes,
            weight_bytes_per_layer_attn=4 * hidden_dim * hidden_dim * element_bytes,
            element_bytes=element_bytes,
        )

    @property
    def weight_bytes(self) -> int:
        return self.num_layers * (self.weight_bytes_per_layer_dense + self.weight_bytes_per_layer_attn)


@dataclass(frozen=True)
class GpuSpec:
    total_sm: int
    peak_compute: float      # FLOP/s, C
    peak_bandwidth: float    # байт/с, B
    kv_capacity_bytes: float


@dataclass(frozen=True)
class SaturationCoeffs:
    r_sat: float
    lam: float


DENSE_DEFAULT = SaturationCoeffs(r_sat=0.6, lam=0.1)
ATTENTION_DEFAULT = SaturationCoeffs(r_sat=0.4, lam=0.05)


@dataclass(frozen=True)
class KernelProfile:
    entries: Mapping[OperatorKind, SaturationCoeffs]

    @classmethod
    def default(cls) -> "KernelProfile":
        return cls({kind: ATTENTION_DEFAULT if kind.is_attention else DENSE_DEFAULT
                    for kind in OperatorKind})

    def coeffs(self, kind: OperatorKind) -> SaturationCoeffs:
        return self.entries[kind]

    def with_entry(self, kind: OperatorKind, coeffs: SaturationCoeffs) -> "KernelProfile":
        entries: Dict[OperatorKind, SaturationCoeffs] = dict(self.entries)
        entries[kind] = coeffs
        return KernelProfile(entries)


# --- Запросы и разбиение SM -------------------------------------------------

@dataclass
class Request:
    """Жизненный цикл одного запроса.

    decoded_len считает все выданные токены ответа, включая первый, который
    выдаёт последний чанк префилла. Объект мутирует только симулятор, поэтому
    на вход прогона подаются копии (см. fresh()).
    """

    id: int
    arrival_time: float
    prompt_len: int
    output_len: int
    prefilled_len: int = 0
    decoded_len: int = 0
    first_token_time: Optional[float] = None
    finish_time: Optional[float] = None
    token_times: List[float] = field(default_factory=list)
    first_scheduled_time: Optional[float] = None

    @property
    def remaining_prompt(self) -> int:
        return self.prompt_len - self.prefilled_len

    @property
    def is_prefilled(self) -> bool:
        return self.prefilled_len >= self.prompt_len

    @property
    def is_finished(self) -> bool:
        return self.finish_time is not None

    @property
    def context_len(self) -> int:
        """Токены, чьи K/V лежат в кэше."""
        return self.prefilled_len + self.decoded_len

    def fresh(self) -> "Request":
        return Request(self.id, self.arrival_time, self.prompt_len, self.output_len)

    def emit_token(self, now: float) -> None:
        if self.token_times and now <= self.token_times[-1]:
            raise ValueError(f"request {self.id}: token time {now} is not after {self.token_times[-1]}")
        if self.decoded_len >= self.output_len:
            raise ValueError(f"request {self.id}: all {self.output_len} tokens already emitted")
        self.token_times.append(now)
        self.decoded_len += 1
        if self.first_token_time is None:
            self.first_token_time = now
        if self.decoded_len == self.output_len:
            self.finish_time = now


@dataclass(frozen=True)
class PartitionState:
    r_p: int
    r_d: int
    last_applied_r_p: int

    def __post_init__(self):
        violations = []
        for name in ("r_p", "r_d", "last_applied_r_p"):
            value = getattr(self, name)
            if not 1 <= value <= 99:
                violations.append(InvalidField(name, "must be in [1, 99]"))
        if self.r_p + self.r_d != 100:
            violations.append(InvalidField("r_p + r_d", "must equal 100"))
        if violations:
            raise ConfigError(violations)

    @classmethod
    def split(cls, r_p: int) -> "PartitionState":
        return cls(r_p=r_p, r_d=100 - r_p, last_applied_r_p=r_p)

    def applied(self, r_p: int) -> "PartitionState":
        return replace(self, r_p=r_p, r_d=100 - r_p, last_applied_r_p=r_p)


@dataclass(frozen=True)
class ControllerConfig:
    alpha: float = 1.3
    beta: float = 1.1
    kv_switch_fraction: float = 0.7
    delta: int = 5
    gamma: float = 15.0             # токенов в секунду ожидания
    chunk_size: int = 2048
    max_decode_batch: int = 256
    token_budget: int = 2048        # B_tok из SPF
    skip_nonfitting: bool = False
    initial_r_p: int = 50


@dataclass(frozen=True)
class ValidatedConfig:
    model: ModelConfig
    gpu: GpuSpec
    controller: ControllerConfig
    profile: KernelProfile


def _positive(violations: List[InvalidField], prefix: str, obj, names) -> None:
    for name in names:
        value = getattr(obj, name)
        if not isinstance(value, (int, float)) or isinstance(value, bool) \
                or not math.isfinite(value) or value <= 0:
            violations.append(InvalidField(f"{prefix}.{name}", "must be > 0"))


def collect_violations(model: ModelConfig, gpu: GpuSpec, ctrl: ControllerConfig,
                       prof: KernelProfile) -> List[InvalidField]:
    violations: List[InvalidField] = []

    _positive(violations, "model", model, (
        "hidden_dim", "ffn_dim", "num_layers", "num_heads", "kv_bytes_per_token",
        "weight_bytes_per_layer_dense", "weight_bytes_per_layer_attn", "element_bytes"))
    if model.ffn_dim < model.hidden_dim:
        violations.append(InvalidField("model.ffn_dim", "must be >= hidden_dim"))
    expected_kv = 2 * model.num_layers * model.hidden_dim * model.element_bytes
    if model.kv_bytes_per_token != expected_kv:
        violations.append(InvalidField(
            "model.kv_bytes_per_token",
            f"must equal 2 * num_layers * hidden_dim * element_bytes = {expected_kv}"))

    _positive(violations, "gpu", gpu, ("total_sm", "peak_compute", "peak_bandwidth", "kv_capacity_bytes"))
    if gpu.total_sm < 2:
        violations.append(InvalidField("gpu.total_sm", "must be >= 2"))

    if not ctrl.alpha > 1:
        violations.append(InvalidField("alpha", "must exceed 1"))
    if not ctrl.beta > 1:
        violations.append(InvalidField("beta", "must exceed 1"))
    if not 0 < ctrl.kv_switch_fraction < 1:
        violations.append(InvalidField("kv_switch_fraction", "must be in (0, 1)"))
    if ctrl.delta < 0:
        violations.append(InvalidField("delta", "must be >= 0"))
    if ctrl.gamma < 0:
        violations.append(InvalidField("gamma", "must be >= 0"))
    for name in ("chunk_size", "max_decode_batch", "token_budget"):
        if getattr(ctrl, name) < 1:
            violations.append(InvalidField(name, "must be >= 1"))
    if not 1 <= ctrl.initial_r_p <= 99:
        violations.append(InvalidField("initial_r_p", "must be in [1, 99]"))

    for kind in OperatorKind:
        coeffs = prof.entries.get(kind)
        if coeffs is None:
            violations.append(InvalidField(f"kernel_profile.{kind.value}", "missing entry"))
            continue
        if not 0 < coeffs.r_sat <= 1:
            violations.append(InvalidField(f"kernel_profile.{kind.value}.r_sat", "must be in (0, 1]"))
        if not coeffs.lam >= 0:
            violations.append(InvalidField(f"kernel_profile.{kind.value}.lambda", "must be >= 0"))
    return violations


def validate_config(model: ModelConfig, gpu: GpuSpec, ctrl: ControllerConfig,
                    prof: KernelProfile) -> ValidatedConfig:
    violations = collect_violations(model, gpu, ctrl, prof)
    if violations:
        raise ConfigError(violations)
    return ValidatedConfig(model, gpu, ctrl, prof)
