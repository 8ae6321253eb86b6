# costmodel.py — Латентность префилла и декода при заданной доле SM с учётом
# насыщения вычислений и конкуренции за пропускную способность памяти

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence, Tuple

from .domain import GpuSpec, KernelProfile, OperatorKind, Phase, SaturationCoeffs

if TYPE_CHECKING:
    from .opcost import OperatorWorkload

# Доля SM, с которой считается фаза, когда ей по разбиению достался ноль.
MIN_RATIO = 0.01


@dataclass(frozen=True)
class OperatorLatency:
    kind: OperatorKind
    compute_s: float
    mem_s: float
    is_attention: bool

    @property
    def latency_s(self) -> float:
        return max(self.compute_s, self.mem_s)

    @property
    def bound(self) -> str:
        return "memory" if self.mem_s > self.compute_s else "compute"


@dataclass(frozen=True)
class PhaseLatencyBreakdown:
    total_s: float
    ops: Tuple[OperatorLatency, ...]
    attn_mem_time_s: float

    @classmethod
    def empty(cls) -> "PhaseLatencyBreakdown":
        return cls(0.0, (), 0.0)


@dataclass(frozen=True)
class ContentionContext:
    p_attn: float
    m_d: float
    m_p1: float
    m_p2: float
    b_decode: float


def compute_latency(c_o: float, r: float, coeffs: SaturationCoeffs, peak_compute: float) -> float:
    """Двухрежимная кривая: 1/r до насыщения, дальше линейный штраф λ."""
    if r <= 0:
        raise ValueError(f"SM ratio must be positive, got {r}")
    if c_o < 0:
        raise ValueError(f"FLOP count must be non-negative, got {c_o}")
    if r <= coeffs.r_sat:
        return c_o / (r * peak_compute)
    return c_o / (coeffs.r_sat * peak_compute) * (1 + coeffs.lam * (r - coeffs.r_sat))


def _breakdown(per_op: Sequence[OperatorLatency]) -> PhaseLatencyBreakdown:
    total = sum(op.latency_s for op in per_op)
    attn = sum(op.latency_s for op in per_op if op.is_attention and op.bound == "memory")
    return PhaseLatencyBreakdown(total, tuple(per_op), attn)


def _op_latency(w: "OperatorWorkload", r: float, gpu: GpuSpec, prof: KernelProfile,
                mem_s: Optional[float] = None) -> OperatorLatency:
    compute_s = compute_latency(w.flops, r, prof.coeffs(w.kind), gpu.peak_compute)
    if mem_s is None:
        mem_s = w.mem_bytes / gpu.peak_bandwidth
    return OperatorLatency(w.kind, compute_s, mem_s, w.is_attention)


def phase_latency_isolated(ops: Sequence["OperatorWorkload"], r: float, gpu: GpuSpec,
                           prof: KernelProfile) -> PhaseLatencyBreakdown:
    """Оценка при пиковой пропускной способности: Σ max(T_compute, T_mem)."""
    if not ops:
        return PhaseLatencyBreakdown.empty()
    return _breakdown([_op_latency(w, r, gpu, prof) for w in ops])


def p_attn(prefill_breakdown: Optional[PhaseLatencyBreakdown]) -> float:
    if prefill_breakdown is None or prefill_breakdown.total_s <= 0:
        return 0.0
    return prefill_breakdown.attn_mem_time_s / prefill_breakdown.total_s


def effective_decode_bandwidth(m_d: float, m_p1: float, m_p2: float, p_attention: float,
                               bandwidth: float, prefill_active: bool = True) -> float:
    if m_d <= 0:
        raise ValueError("decode attention traffic m_d must be positive")
    if m_p1 < 0 or m_p2 < 0:
        raise ValueError("prefill traffic must be non-negative")
    if not prefill_active:
        return bandwidth
    return (m_d / (m_d + m_p1) * p_attention * bandwidth
            + m_d / (m_d + m_p2) * (1 - p_attention) * bandwidth)


def contention_context(decode_ops: Sequence["OperatorWorkload"],
                       prefill_breakdown: Optional[PhaseLatencyBreakdown],
                       prefill_ops: Optional[Sequence["OperatorWorkload"]],
                       bandwidth: float) -> ContentionContext:
    m_d = sum(w.kv_bytes for w in decode_ops if w.is_attention)
    active = bool(prefill_ops) and prefill_breakdown is not None
    m_p1 = sum(w.kv_bytes for w in prefill_ops if w.is_attention) if active else 0.0
    m_p2 = sum(w.mem_bytes for w in prefill_ops if not w.is_attention) if active else 0.0
    probability = p_attn(prefill_breakdown) if active else 0.0
    b_decode = effective_decode_bandwidth(m_d, m_p1, m_p2, probability, bandwidth, active)
    return ContentionContext(probability, m_d, m_p1, m_p2, b_decode)


def decode_latency_contended(decode_ops: Sequence["OperatorWorkload"], r_d: float,
                             prefill_breakdown: Optional[PhaseLatencyBreakdown],
                             prefill_ops: Optional[Sequence["OperatorWorkload"]],
                             gpu: GpuSpec, prof: KernelProfile) -> PhaseLatencyBreakdown:
    """Как phase_latency_isolated, но чтение KV вниманием декода идёт на B_decode.

    Плотные операторы декода и любой префилл по-прежнему считаются на пиковой B.
    """
    if not decode_ops:
        raise ValueError("decode batch is empty")
    if not prefill_ops or prefill_breakdown is None:
        return phase_latency_isolated(decode_ops, r_d, gpu, prof)
    ctx = contention_context(decode_ops, prefill_breakdown, prefill_ops, gpu.peak_bandwidth)
    per_op = []
    for w in decode_ops:
        mem_s = None
        if w.is_attention:
            # KV читается на B_decode, а веса проекций внимания на пиковой B
            weight_bytes = w.mem_bytes - w.kv_bytes
            mem_s = w.kv_bytes / ctx.b_decode + weight_bytes / gpu.peak_bandwidth
        per_op.append(_op_latency(w, r_d, gpu, prof, mem_s))
    return _breakdown(per_op)


def min_phase_latency(ops: Sequence["OperatorWorkload"], gpu: GpuSpec, prof: KernelProfile) -> float:
    """T^min: фаза получает все SM. Пустая фаза ничего не ограничивает."""
    return phase_latency_isolated(ops, 1.0, gpu, prof).total_s


class CostModel:
    """Неизменяемая обёртка над функциями модели для конкретного устройства и профиля."""

    def __init__(self, gpu: GpuSpec, profile: KernelProfile, contention: bool = True):
        self._gpu = gpu
        self._profile = profile
        self._contention = contention

    @property
    def gpu(self) -> GpuSpec:
        return self._gpu

    @property
    def profile(self) -> KernelProfile:
        return self._profile

    @property
    def contention(self) -> bool:
        return self._contention

    def isolated(self, ops: Sequence["OperatorWorkload"], r: float) -> PhaseLatencyBreakdown:
        return phase_latency_isolated(ops, r, self._gpu, self._profile)

    def min_latency(self, ops: Sequence["OperatorWorkload"]) -> float:
        return min_phase_latency(ops, self._gpu, self._profile)

    def prefill(self, prefill_ops: Sequence["OperatorWorkload"], r_p: float) -> PhaseLatencyBreakdown:
        return self.isolated(prefill_ops, max(r_p, MIN_RATIO))

    def decode(self, decode_ops: Sequence["OperatorWorkload"], r_d: float,
               prefill_ops: Optional[Sequence["OperatorWorkload"]] = None,
               r_p: Optional[float] = None,
               prefill_breakdown: Optional[PhaseLatencyBreakdown] = None) -> PhaseLatencyBreakdown:
        """Декод с конкуренцией против параллельного пакета префилла.

        Разбивка префилла берётся готовой (пакет уже в полёте) или считается при r_p.
        """
        r_d = max(r_d, MIN_RATIO)
        if not self._contention or not prefill_ops:
            return self.isolated(decode_ops, r_d)
        if prefill_breakdown is None:
            prefill_breakdown = self.prefill(prefill_ops, 1.0 if r_p is None else r_p)
        return decode_latency_contended(decode_ops, r_d, prefill_breakdown, prefill_ops,
                                        self._gpu, self._profile)

    def phase_cost(self, phase: Phase, share: int, prefill_ops: Sequence["OperatorWorkload"],
                   decode_ops: Sequence["OperatorWorkload"]) -> float:
        """CostModel(phase, share) для жадного поиска: share в процентах SM этой фазы."""
        if phase is Phase.PREFILL:
            return self.prefill(prefill_ops, share / 100).total_s if prefill_ops else 0.0
        if not decode_ops:
            return 0.0
        return self.decode(decode_ops, share / 100, prefill_ops, r_p=(100 - share) / 100).total_s
