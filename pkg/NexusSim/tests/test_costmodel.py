import pytest

from nexus_sim.costmodel import (CostModel, PhaseLatencyBreakdown, compute_latency, decode_latency_contended,
                                 effective_decode_bandwidth, min_phase_latency, p_attn,
                                 phase_latency_isolated)
from nexus_sim.domain import OperatorKind, Phase, SaturationCoeffs
from nexus_sim.opcost import OperatorWorkload, decode_op_workloads, prefill_batch_workloads

COEFFS = SaturationCoeffs(r_sat=0.6, lam=0.2)


@pytest.mark.parametrize("r, expected", [(0.3, 2.0), (0.6, 1.0), (0.8, 1.04)])
def test_compute_latency_branches(r, expected):
    assert compute_latency(6e11, r, COEFFS, 1e12) == pytest.approx(expected)


def test_compute_latency_continuous_at_saturation():
    coeffs = SaturationCoeffs(r_sat=0.5, lam=0.3)
    below = 1e12 / (coeffs.r_sat * 1e14)
    above = 1e12 / (coeffs.r_sat * 1e14) * (1 + coeffs.lam * 0.0)
    assert compute_latency(1e12, 0.5, coeffs, 1e14) == below == above


def test_compute_latency_decreasing_below_saturation(profile):
    for kind in OperatorKind:
        coeffs = profile.coeffs(kind)
        latencies = [compute_latency(1e12, r / 100, coeffs, 1e14) for r in range(1, 100)
                     if r / 100 <= coeffs.r_sat]
        assert all(b < a for a, b in zip(latencies, latencies[1:]))


def test_dense_diminishing_returns(profile):
    coeffs = profile.coeffs(OperatorKind.FFN)

    def reduction(lo, hi):
        before = compute_latency(1e12, lo, coeffs, 1e14)
        return (before - compute_latency(1e12, hi, coeffs, 1e14)) / before

    assert reduction(0.3, 0.4) >= 0.20
    assert reduction(0.7, 0.8) <= 0.15


def test_compute_latency_rejects_zero_ratio():
    with pytest.raises(ValueError):
        compute_latency(1.0, 0.0, COEFFS, 1e12)


def test_isolated_single_op(gpu, profile):
    compute_op = OperatorWorkload(OperatorKind.FFN, 1e13, 1.0)
    total = phase_latency_isolated([compute_op], 1.0, gpu, profile).total_s
    assert total == compute_latency(1e13, 1.0, profile.coeffs(OperatorKind.FFN), gpu.peak_compute)

    memory_op = OperatorWorkload(OperatorKind.FFN, 1.0, 1e9)
    assert phase_latency_isolated([memory_op], 1.0, gpu, profile).total_s == 1e9 / gpu.peak_bandwidth


def test_isolated_sums_independent_ops(model, gpu, profile):
    ops = prefill_batch_workloads(model, [(512, 6000)])
    expected = sum(max(compute_latency(w.flops, 1.0, profile.coeffs(w.kind), gpu.peak_compute),
                       w.mem_bytes / gpu.peak_bandwidth) for w in ops)
    assert phase_latency_isolated(ops, 1.0, gpu, profile).total_s == pytest.approx(expected)


def test_p_attn_bounds(model, gpu, profile):
    assert p_attn(PhaseLatencyBreakdown(1.0, (), 0.0)) == 0.0
    assert p_attn(PhaseLatencyBreakdown(1.0, (), 1.0)) == 1.0
    breakdown = phase_latency_isolated(prefill_batch_workloads(model, [(512, 6000)]), 1.0, gpu, profile)
    expected = sum(op.latency_s for op in breakdown.ops
                   if op.is_attention and op.mem_s > op.compute_s) / breakdown.total_s
    assert p_attn(breakdown) == pytest.approx(expected)
    assert 0.0 <= p_attn(breakdown) < 1.0


def test_effective_decode_bandwidth_formula():
    assert effective_decode_bandwidth(1, 1, 3, 0.5, 100) == pytest.approx(37.5)
    assert effective_decode_bandwidth(5, 0, 0, 0.7, 100) == pytest.approx(100)
    assert effective_decode_bandwidth(4, 9, 4, 0.0, 100) == pytest.approx(50)


def test_contention_doubles_attention_memory_time(gpu, profile):
    m_d = 1e9
    decode_ops = [OperatorWorkload(OperatorKind.ATTN_DECODE, 0.0, m_d, m_d)]
    prefill_ops = [OperatorWorkload(OperatorKind.ATTN_PREFILL, 0.0, m_d, m_d)]
    all_attention = PhaseLatencyBreakdown(1.0, (), 1.0)
    isolated = phase_latency_isolated(decode_ops, 0.5, gpu, profile).total_s
    contended = decode_latency_contended(decode_ops, 0.5, all_attention, prefill_ops, gpu, profile).total_s
    assert contended == pytest.approx(2 * isolated)


def test_no_prefill_means_no_contention(model, gpu, profile):
    decode_ops = decode_op_workloads(model, 4, [1000, 2000, 3000, 4000])
    isolated = phase_latency_isolated(decode_ops, 0.4, gpu, profile)
    assert decode_latency_contended(decode_ops, 0.4, None, None, gpu, profile) == isolated


def contended_decode(model, gpu, profile, prefill_context):
    costmodel = CostModel(gpu, profile)
    decode_ops = decode_op_workloads(model, 8, [1000] * 8)
    prefill_ops = prefill_batch_workloads(model, [(32, prefill_context)] * 8)
    return costmodel.decode(decode_ops, 0.5, prefill_ops, r_p=0.5).total_s


def test_decode_latency_grows_with_prefill_context(model, gpu, profile):
    latencies = [contended_decode(model, gpu, profile, ctx) for ctx in range(2000, 10001, 1000)]
    assert all(b > a for a, b in zip(latencies, latencies[1:]))
    increase = latencies[-1] / latencies[0] - 1
    assert 0.10 <= increase <= 0.80


def test_disabling_contention_never_slows_decode(model, gpu, profile):
    decode_ops = decode_op_workloads(model, 16, [500 * (i + 1) for i in range(16)])
    for ctx in (128, 2048, 8192):
        prefill_ops = prefill_batch_workloads(model, [(128, ctx)])
        for r_d in (0.2, 0.5, 0.8):
            with_contention = CostModel(gpu, profile).decode(decode_ops, r_d, prefill_ops, r_p=1 - r_d)
            without = CostModel(gpu, profile, contention=False).decode(decode_ops, r_d, prefill_ops, r_p=1 - r_d)
            assert without.total_s <= with_contention.total_s


def test_min_phase_latency(model, gpu, profile):
    ops = prefill_batch_workloads(model, [(256, 1024)])
    assert min_phase_latency(ops, gpu, profile) == phase_latency_isolated(ops, 1.0, gpu, profile).total_s
    assert min_phase_latency([], gpu, profile) == 0.0


def test_phase_cost_of_empty_phase_is_zero(model, gpu, profile):
    costmodel = CostModel(gpu, profile)
    decode_ops = decode_op_workloads(model, 2, [10, 20])
    assert costmodel.phase_cost(Phase.PREFILL, 50, [], decode_ops) == 0.0
