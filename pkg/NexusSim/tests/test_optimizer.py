import random

import pytest

from nexus_sim.costmodel import CostModel, min_phase_latency
from nexus_sim.domain import ControllerConfig, PartitionState, Phase
from nexus_sim.opcost import decode_op_workloads, prefill_batch_workloads
from nexus_sim.optimizer import (ObjectiveMode, PartitionController, StaticPartition, adjust_partition,
                                 apply_hysteresis, exhaustive_share, greedy_share, least_harm_share,
                                 partition_controller, select_mode)

PREFILL_OPS = ["prefill-batch"]
DECODE_OPS = ["decode-batch"]


class ThresholdCostModel:
    """Ограничение декода выполняется при r_p <= decode_limit, префилла — при r_d <= prefill_limit."""

    def __init__(self, decode_limit=63, prefill_limit=63):
        self.decode_limit = decode_limit
        self.prefill_limit = prefill_limit
        self.queries = 0

    def phase_cost(self, phase, share, prefill_ops, decode_ops):
        self.queries += 1
        if phase is Phase.DECODE:
            return 1.0 if 100 - share <= self.decode_limit else 2.0
        return 1.0 if 100 - share <= self.prefill_limit else 2.0

    def min_latency(self, ops):
        self.queries += 1
        return 1.0


class FallingCostModel:
    """Латентность другой фазы падает с ростом её доли, но до Slack · T^min не доходит."""

    def phase_cost(self, phase, share, prefill_ops, decode_ops):
        return 10.0 / share

    def min_latency(self, ops):
        return 0.01


def monotone_instance(rng):
    a = rng.uniform(0.1, 10.0)
    k = rng.uniform(0.3, 2.0)
    b = rng.uniform(0.0, 5.0)

    def cost_other(share_other):
        return a / share_other ** k + b

    return cost_other, cost_other(100), rng.uniform(1.0, 3.0)


def test_select_mode_boundaries():
    assert select_mode(80, 100, 0.7) is ObjectiveMode.DECODE_PRIORITIZED
    assert select_mode(0, 100, 0.7) is ObjectiveMode.PREFILL_PRIORITIZED
    assert select_mode(70, 100, 0.7) is ObjectiveMode.PREFILL_PRIORITIZED


def test_adjust_partition_threshold_instance():
    cfg = ControllerConfig()
    r_p, r_d, result = adjust_partition(Phase.PREFILL, PartitionState.split(50), PREFILL_OPS, DECODE_OPS, cfg,
                                        ThresholdCostModel(decode_limit=63))
    assert (r_p, r_d) == (63, 37)
    assert not result.infeasible


def test_adjust_partition_matches_exhaustive_scan():
    costmodel = ThresholdCostModel(decode_limit=63)
    t_min = costmodel.min_latency(DECODE_OPS)
    expected = exhaustive_share(lambda s: costmodel.phase_cost(Phase.DECODE, s, PREFILL_OPS, DECODE_OPS),
                                t_min, ControllerConfig().beta)
    r_p, _, _ = adjust_partition(Phase.PREFILL, PartitionState.split(90), PREFILL_OPS, DECODE_OPS,
                                 ControllerConfig(), costmodel)
    assert r_p == expected == 63


def decode_cost(costmodel, prefill_ops, decode_ops):
    return lambda share_d: costmodel.phase_cost(Phase.DECODE, share_d, prefill_ops, decode_ops)


def test_decode_slack_uses_isolated_minimum(model, gpu, profile, controller):
    costmodel = CostModel(gpu, profile)
    prefill_ops = prefill_batch_workloads(model, [(2048, 8000)])
    decode_ops = decode_op_workloads(model, 64, [6000] * 64)
    cost = decode_cost(costmodel, prefill_ops, decode_ops)
    t_min = min_phase_latency(decode_ops, gpu, profile)
    # Даже на всех SM декод с конкуренцией медленнее изолированного минимума.
    assert cost(100) > t_min

    r_p, r_d, result = adjust_partition(Phase.PREFILL, PartitionState.split(50), prefill_ops, decode_ops,
                                        controller, costmodel)
    assert not result.infeasible
    assert cost(r_d) <= controller.beta * t_min * (1 + 1e-9)
    assert r_p == exhaustive_share(cost, t_min, controller.beta)
    assert r_p != exhaustive_share(cost, cost(100), controller.beta)


def test_contention_beyond_slack_keeps_prefill_running(model, gpu, profile, controller):
    costmodel = CostModel(gpu, profile)
    prefill_ops = prefill_batch_workloads(model, [(2048, 8000)])
    decode_ops = decode_op_workloads(model, 4, [1000] * 4)
    cost = decode_cost(costmodel, prefill_ops, decode_ops)
    assert cost(99) > controller.beta * min_phase_latency(decode_ops, gpu, profile)

    r_p, r_d, result = adjust_partition(Phase.PREFILL, PartitionState.split(1), prefill_ops, decode_ops,
                                        controller, costmodel)
    assert result.infeasible
    assert cost(r_d) == min(cost(share) for share in range(1, 100))
    assert r_p == least_harm_share(lambda share: cost(100 - share))
    assert r_p > 50


def test_other_phase_empty_gives_target_everything():
    r_p, r_d, result = adjust_partition(Phase.PREFILL, PartitionState.split(50), PREFILL_OPS, [],
                                        ControllerConfig(), ThresholdCostModel())
    assert (r_p, r_d) == (99, 1)
    assert result.queries == 0


def test_loose_slack_gives_target_everything():
    result = greedy_share(lambda share_other: 100.0 / share_other, 1.0, 1000.0, 50)
    assert result.share == 99


def test_infeasible_constraint_hands_shares_to_other_phase():
    r_p, r_d, result = adjust_partition(Phase.DECODE, PartitionState.split(50), PREFILL_OPS, DECODE_OPS,
                                        ControllerConfig(), FallingCostModel())
    assert result.infeasible
    assert (r_p, r_d) == (99, 1)


def test_flat_infeasible_cost_leaves_target_its_share():
    # Порог prefill_limit=0 недостижим, а латентность префилла от доли не зависит.
    r_p, r_d, result = adjust_partition(Phase.DECODE, PartitionState.split(50), PREFILL_OPS, DECODE_OPS,
                                        ControllerConfig(), ThresholdCostModel(prefill_limit=0))
    assert result.infeasible
    assert (r_p, r_d) == (1, 99)


@pytest.mark.parametrize("r_cur", [1, 30, 99])
def test_infeasible_search_picks_fastest_split_for_other_phase(r_cur):
    result = greedy_share(lambda share_other: (share_other - 40) ** 2 + 5.0, 1.0, 1.1, r_cur)
    assert result.infeasible
    assert result.share == 60
    assert result.queries == 99


def test_greedy_equals_exhaustive_on_monotone_instances():
    rng = random.Random(2024)
    for _ in range(1000):
        cost_other, t_min, slack = monotone_instance(rng)
        r_cur = rng.randint(1, 99)
        result = greedy_share(cost_other, t_min, slack, r_cur)
        expected = exhaustive_share(cost_other, t_min, slack)
        if expected is None:
            assert result.infeasible and result.share == 1
        else:
            assert not result.infeasible
            assert result.share == expected


def test_greedy_is_feasible_or_flagged_on_arbitrary_instances():
    rng = random.Random(7)
    for _ in range(1000):
        table = {s: rng.uniform(0.5, 2.0) for s in range(1, 100)}
        t_min = rng.uniform(0.5, 1.5)
        slack = rng.uniform(1.01, 1.5)
        result = greedy_share(table.__getitem__, t_min, slack, rng.randint(1, 99))
        if not result.infeasible:
            assert table[100 - result.share] <= slack * t_min * (1 + 1e-9)


def test_hysteresis_buffer_zone():
    cur = PartitionState.split(60)
    state, switched = apply_hysteresis(62, cur, 5)
    assert (state.r_p, switched) == (60, False)
    state, switched = apply_hysteresis(70, cur, 5)
    assert (state.r_p, state.last_applied_r_p, switched) == (70, 70, True)


def test_oscillation_within_buffer_never_switches():
    cur = PartitionState.split(60)
    switches = 0
    for i in range(100):
        cur, switched = apply_hysteresis(63 if i % 2 else 60, cur, 5)
        switches += switched
    assert switches == 0


def scripted_switches(limits, calls=1000):
    costmodel = ThresholdCostModel()
    controller = PartitionController(ControllerConfig(initial_r_p=60, delta=5), costmodel, kv_capacity=100.0)
    for i in range(calls):
        costmodel.decode_limit = limits[i % len(limits)]
        controller.decide(float(i), 10.0, PREFILL_OPS, DECODE_OPS)
    return controller.switches


def test_controller_suppresses_oscillation_within_delta():
    assert scripted_switches([63, 60]) == 0


def test_controller_follows_oscillation_of_two_delta():
    assert scripted_switches([70, 60]) > 0


def test_mode_flips_when_kv_crosses_switch_fraction():
    controller = PartitionController(ControllerConfig(), ThresholdCostModel(), kv_capacity=100.0)
    assert controller.decide(0.0, 70.0, PREFILL_OPS, DECODE_OPS).mode is ObjectiveMode.PREFILL_PRIORITIZED
    assert controller.decide(1.0, 70.5, PREFILL_OPS, DECODE_OPS).mode is ObjectiveMode.DECODE_PRIORITIZED
    assert controller.decide(2.0, 69.0, PREFILL_OPS, DECODE_OPS).mode is ObjectiveMode.PREFILL_PRIORITIZED


def test_empty_target_phase_is_noop():
    cur = PartitionState.split(40)
    decision, state = partition_controller(10.0, 100.0, cur, [], DECODE_OPS, ControllerConfig(),
                                           ThresholdCostModel())
    assert state == cur
    assert not decision.switched and decision.iterations_searched == 0


def test_decision_log_records_every_call():
    controller = PartitionController(ControllerConfig(), ThresholdCostModel(decode_limit=80), kv_capacity=100.0)
    controller.decide(0.5, 20.0, PREFILL_OPS, DECODE_OPS)
    entry = controller.log[-1]
    assert entry["time"] == 0.5
    assert entry["kv_frac"] == pytest.approx(0.2)
    assert entry["candidate_r_p"] == 80 and entry["applied_r_p"] == 80 and entry["switched"]


def test_static_partition_never_moves():
    static = StaticPartition(30)
    for t in range(10):
        decision = static.decide(float(t), 99.0, PREFILL_OPS, DECODE_OPS)
        assert (decision.r_p, decision.r_d, decision.switched) == (30, 70, False)
