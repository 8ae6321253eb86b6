import sys
from pathlib import Path

import pytest

# Тесты запускаются без установки пакета, как и main.py в корне
project_root = Path(__file__).resolve().parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from nexus_sim.config import build_gpu, build_model  # noqa: E402
from nexus_sim.domain import ControllerConfig, GpuSpec, KernelProfile, ModelConfig, ValidatedConfig  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: прогоны целых трасс")


@pytest.fixture
def tiny_model() -> ModelConfig:
    return ModelConfig.from_dims(hidden_dim=2, ffn_dim=8, num_layers=1, num_heads=1)


@pytest.fixture
def model() -> ModelConfig:
    return build_model("3b-like")


@pytest.fixture
def gpu(model) -> GpuSpec:
    return build_gpu("l20-like", model)


@pytest.fixture
def profile() -> KernelProfile:
    return KernelProfile.default()


@pytest.fixture
def controller() -> ControllerConfig:
    return ControllerConfig()


@pytest.fixture
def desk_config(model, gpu, profile, controller) -> ValidatedConfig:
    return ValidatedConfig(model, gpu, controller, profile)
