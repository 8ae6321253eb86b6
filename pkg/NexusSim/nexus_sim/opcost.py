# opcost.py — FLOP и трафик памяти операторов одной итерации префилла/декода

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .costmodel import compute_latency
from .domain import GpuSpec, KernelProfile, ModelConfig, OperatorKind

__all__ = [
    "OperatorKind",
    "OperatorWorkload",
    "prefill_op_workloads",
    "prefill_batch_workloads",
    "decode_op_workloads",
    "mixed_op_workloads",
    "classify_memory_bound",
]

# GEMM: flops = 2 * rows * cols * inner (умножение + сложение).
# Трафик плотных операторов: только веса, читаемые один раз за итерацию.
# Трафик внимания: K/V всех токенов контекста плюс веса проекций внимания, активации не считаются.


@dataclass(frozen=True)
class OperatorWorkload:
    kind: OperatorKind
    flops: float
    mem_bytes: float
    kv_bytes: float = 0.0    # часть mem_bytes, приходящаяся на чтение KV-кэша

    @property
    def is_attention(self) -> bool:
        return self.kind.is_attention


def _dense_ops(model: ModelConfig, n: int) -> List[OperatorWorkload]:
    d, d_ff, layers = model.hidden_dim, model.ffn_dim, model.num_layers
    qkv_weights = model.weight_bytes_per_layer_attn * 3 / 4
    out_weights = model.weight_bytes_per_layer_attn / 4
    return [
        OperatorWorkload(OperatorKind.QKV_PROJ, 3 * 2 * n * d * d * layers, qkv_weights * layers),
        OperatorWorkload(OperatorKind.ATTN_OUT_PROJ, 2 * n * d * d * layers, out_weights * layers),
        OperatorWorkload(OperatorKind.FFN, 2 * 2 * n * d * d_ff * layers,
                         model.weight_bytes_per_layer_dense * layers),
    ]


def _attention_weights(model: ModelConfig) -> float:
    return model.weight_bytes_per_layer_attn * model.num_layers


def _prefill_attention(model: ModelConfig, chunks: Sequence[Tuple[int, int]]) -> OperatorWorkload:
    d, layers = model.hidden_dim, model.num_layers
    flops = 0.0
    kv = 0.0
    for n, context in chunks:
        flops += 2 * 2 * n * context * d * layers
        kv += context * model.kv_bytes_per_token
    return OperatorWorkload(OperatorKind.ATTN_PREFILL, flops, kv + _attention_weights(model), kv)


def _decode_attention(model: ModelConfig, context_lens: Sequence[int],
                      with_weights: bool = True) -> OperatorWorkload:
    d, layers = model.hidden_dim, model.num_layers
    total_context = sum(context_lens)
    flops = 2 * 2 * total_context * d * layers
    kv = total_context * model.kv_bytes_per_token
    weights = _attention_weights(model) if with_weights else 0.0
    return OperatorWorkload(OperatorKind.ATTN_DECODE, flops, kv + weights, kv)


def _check_chunk(n: int, context: int) -> None:
    if n < 1:
        raise ValueError(f"chunk must hold at least one token, got {n}")
    if context < n:
        raise ValueError(f"context length {context} is shorter than the chunk {n}")


def prefill_op_workloads(model: ModelConfig, n: int, context_len: int) -> List[OperatorWorkload]:
    """Операторы одного чанка из n токенов, который видит context_len токенов контекста."""
    return prefill_batch_workloads(model, [(n, context_len)])


def prefill_batch_workloads(model: ModelConfig, chunks: Sequence[Tuple[int, int]]) -> List[OperatorWorkload]:
    """Пакет чанков (n_i, L_i): плотные операторы на Σ n_i токенов, внимание — по каждому чанку."""
    if not chunks:
        raise ValueError("prefill batch is empty")
    for n, context in chunks:
        _check_chunk(n, context)
    total = sum(n for n, _ in chunks)
    ops = _dense_ops(model, total)
    ops.insert(1, _prefill_attention(model, chunks))
    return ops


def decode_op_workloads(model: ModelConfig, batch_size: int, context_lens: Sequence[int]) -> List[OperatorWorkload]:
    if batch_size < 1 or batch_size != len(context_lens):
        raise ValueError(f"decode batch of {batch_size} does not match {len(context_lens)} context lengths")
    if any(length < 1 for length in context_lens):
        raise ValueError("every decode request needs a non-empty context")
    ops = _dense_ops(model, batch_size)
    ops.insert(1, _decode_attention(model, context_lens))
    return ops


def mixed_op_workloads(model: ModelConfig, chunks: Sequence[Tuple[int, int]],
                       context_lens: Sequence[int]) -> List[OperatorWorkload]:
    """Слитый пакет монолитного движка: чанки префилла и токены декода в одном проходе."""
    if not chunks and not context_lens:
        raise ValueError("mixed batch is empty")
    for n, context in chunks:
        _check_chunk(n, context)
    total = sum(n for n, _ in chunks) + len(context_lens)
    ops = _dense_ops(model, total)
    attention = []
    if chunks:
        attention.append(_prefill_attention(model, chunks))
    if context_lens:
        # Слитый проход читает веса внимания один раз
        attention.append(_decode_attention(model, context_lens, with_weights=not chunks))
    return ops[:1] + attention + ops[1:]


def classify_memory_bound(w: OperatorWorkload, gpu: GpuSpec, r: float, prof: KernelProfile) -> bool:
    if not 0 < r <= 1:
        raise ValueError(f"SM ratio must be in (0, 1], got {r}")
    mem_s = w.mem_bytes / gpu.peak_bandwidth
    return mem_s > compute_latency(w.flops, r, prof.coeffs(w.kind), gpu.peak_compute)
