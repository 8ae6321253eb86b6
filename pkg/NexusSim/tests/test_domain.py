import random
from dataclasses import replace

import pytest

from nexus_sim.domain import (ConfigError, ControllerConfig, KernelProfile, OperatorKind, PartitionState,
                              Phase, Request, SaturationCoeffs, collect_violations, validate_config)

CONTROLLER_BOUNDARIES = [
    ("alpha", 1.0, lambda v: v > 1),
    ("beta", 1.0, lambda v: v > 1),
    ("kv_switch_fraction", 0.0, lambda v: 0 < v < 1),
    ("kv_switch_fraction", 1.0, lambda v: 0 < v < 1),
    ("delta", 0, lambda v: v >= 0),
    ("gamma", 0.0, lambda v: v >= 0),
    ("chunk_size", 1, lambda v: v >= 1),
    ("max_decode_batch", 1, lambda v: v >= 1),
    ("token_budget", 1, lambda v: v >= 1),
    ("initial_r_p", 1, lambda v: 1 <= v <= 99),
    ("initial_r_p", 99, lambda v: 1 <= v <= 99),
]


def test_default_config_is_valid(model, gpu, profile):
    cfg = validate_config(model, gpu, ControllerConfig(alpha=1.3, beta=1.1, kv_switch_fraction=0.7, gamma=15),
                          profile)
    assert cfg.controller.gamma == 15


def test_alpha_must_exceed_one(model, gpu, profile):
    with pytest.raises(ConfigError) as err:
        validate_config(model, gpu, ControllerConfig(alpha=1.0), profile)
    assert [(v.name, v.reason) for v in err.value.violations] == [("alpha", "must exceed 1")]


def test_zero_r_sat_rejected(model, gpu):
    profile = KernelProfile.default().with_entry(OperatorKind.FFN, SaturationCoeffs(0.0, 0.1))
    with pytest.raises(ConfigError) as err:
        validate_config(model, gpu, ControllerConfig(), profile)
    assert any(v.name == "kernel_profile.ffn.r_sat" for v in err.value.violations)


def test_all_violations_reported_together(model, gpu, profile):
    violations = collect_violations(model, gpu, ControllerConfig(alpha=0.5, beta=0.9, kv_switch_fraction=1.5),
                                    profile)
    assert {v.name for v in violations} == {"alpha", "beta", "kv_switch_fraction"}


def test_kv_bytes_per_token_is_derived(model):
    assert model.kv_bytes_per_token == 2 * model.num_layers * model.hidden_dim * model.element_bytes


def test_partition_state_invariants():
    assert PartitionState.split(60).r_d == 40
    with pytest.raises(ConfigError):
        PartitionState(r_p=0, r_d=100, last_applied_r_p=0)
    with pytest.raises(ConfigError):
        PartitionState(r_p=50, r_d=40, last_applied_r_p=50)


def test_request_token_times_strictly_increase():
    req = Request(1, 0.0, prompt_len=10, output_len=3)
    req.emit_token(0.5)
    with pytest.raises(ValueError):
        req.emit_token(0.5)
    req.emit_token(0.6)
    req.emit_token(0.7)
    assert req.first_token_time == 0.5
    assert req.finish_time == 0.7
    with pytest.raises(ValueError):
        req.emit_token(0.8)


def test_fresh_copy_drops_progress():
    req = Request(7, 1.0, 100, 5, prefilled_len=100, decoded_len=2)
    copy = req.fresh()
    assert (copy.id, copy.arrival_time, copy.prompt_len, copy.output_len) == (7, 1.0, 100, 5)
    assert copy.prefilled_len == 0 and copy.decoded_len == 0


def test_phase_other():
    assert Phase.PREFILL.other is Phase.DECODE
    assert Phase.DECODE.other is Phase.PREFILL


@pytest.mark.parametrize("name, boundary, rule", CONTROLLER_BOUNDARIES)
def test_controller_fields_around_boundaries(model, gpu, profile, name, boundary, rule):
    rng = random.Random(f"{name}:{boundary}")
    for _ in range(200):
        if isinstance(boundary, int):
            value = boundary + rng.randint(-3, 3)
        else:
            value = boundary + rng.choice([-1, 1]) * rng.choice([0.0, 1e-9, 1e-3, 0.5])
        names = {v.name for v in collect_violations(model, gpu, ControllerConfig(**{name: value}), profile)}
        assert (name not in names) == rule(value), value


@pytest.mark.parametrize("r_sat, lam, bad", [
    (1e-9, 0.0, set()),
    (1.0, 0.0, set()),
    (0.0, 0.1, {"kernel_profile.ffn.r_sat"}),
    (1.0 + 1e-9, 0.1, {"kernel_profile.ffn.r_sat"}),
    (0.5, -1e-9, {"kernel_profile.ffn.lambda"}),
])
def test_kernel_profile_boundaries(model, gpu, r_sat, lam, bad):
    profile = KernelProfile.default().with_entry(OperatorKind.FFN, SaturationCoeffs(r_sat, lam))
    assert {v.name for v in collect_violations(model, gpu, ControllerConfig(), profile)} == bad


@pytest.mark.parametrize("total_sm, valid", [(1, False), (2, True), (92, True)])
def test_gpu_needs_two_sms(model, gpu, profile, total_sm, valid):
    names = {v.name for v in collect_violations(model, replace(gpu, total_sm=total_sm), ControllerConfig(), profile)}
    assert ("gpu.total_sm" not in names) == valid
