# config.py — Пресеты моделей, GPU и нагрузок; загрузка конфигурации
# (YAML + переменные окружения из .env) и импорт калибровки ядер

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Dict, List, Optional

import pandas as pd
import yaml
from dotenv import load_dotenv

from .domain import (CalibrationError, ConfigError, ControllerConfig, GpuSpec, InvalidField, KernelProfile,
                     ModelConfig, OperatorKind, SaturationCoeffs, ValidatedConfig, collect_violations)
from .simstate import SimulatorConfig

logger = logging.getLogger(__name__)

MODELS = {
    "3b-like": {"hidden_dim": 2048, "ffn_dim": 8192, "num_layers": 36, "num_heads": 16},
    "8b-like": {"hidden_dim": 4096, "ffn_dim": 14336, "num_layers": 32, "num_heads": 32},
    "14b-like": {"hidden_dim": 5120, "ffn_dim": 13824, "num_layers": 48, "num_heads": 40},
}

GPUS = {
    "l20-like": {
        "total_sm": 92,
        "peak_compute": 119.5e12,     # FLOP/s
        "peak_bandwidth": 864e9,      # байт/с
        "memory_bytes": 48e9,
    },
}

# Входные и выходные длины: (mean, P50, P95, P99) из таблицы характеристик нагрузок.
WORKLOADS = {
    "long-data": {
        "input": {"kind": "empirical", "stats": (5905, 5461, 9292, 9817)},
        "output": {"kind": "empirical", "stats": (180, 159, 339, 454)},
    },
    "arxiv": {
        "input": {"kind": "empirical", "stats": (3832, 3575, 6460, 6894)},
        "output": {"kind": "empirical", "stats": (200, 181, 357, 443)},
    },
    "sharegpt": {
        "input": {"kind": "empirical", "stats": (496, 432, 970, 1367)},
        "output": {"kind": "empirical", "stats": (97, 37, 383, 474)},
    },
    "mixed": {"mixture": [("sharegpt", 0.6), ("long-data", 0.4)]},
    # Синтетические нагрузки для качественных проверок
    "kv-pressure": {
        "input": {"kind": "constant", "value": 512},
        "output": {"kind": "constant", "value": 128},
    },
    "long-prompt": {
        "input": {"kind": "constant", "value": 4096},
        "output": {"kind": "constant", "value": 16},
    },
}

DEFAULT_MODEL = "3b-like"
DEFAULT_GPU = "l20-like"
DEFAULT_WORKLOAD = "mixed"
DEFAULT_ENGINES = ["nexus", "monolithic", "static:50", "engine-disagg"]
GPU_MEMORY_UTILIZATION = 0.9

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "model": {"preset": DEFAULT_MODEL},
    "gpu": {"preset": DEFAULT_GPU, "memory_utilization": GPU_MEMORY_UTILIZATION},
    "controller": {},
    "kernel_profile": {},
    "workload": {"preset": DEFAULT_WORKLOAD, "rate_rps": 2.5, "num_requests": 500, "seed": 0},
    "simulator": {"engines": DEFAULT_ENGINES},
    "output": {"dir": "results", "log_level": "INFO", "log_file": None},
}

_MODEL_KEYS = {"preset", "hidden_dim", "ffn_dim", "num_layers", "num_heads", "element_bytes"}
_GPU_KEYS = {"preset", "total_sm", "peak_compute", "peak_bandwidth", "memory_bytes",
             "memory_utilization", "kv_capacity_bytes"}
_WORKLOAD_KEYS = {"preset", "rate_rps", "num_requests", "duration_s", "seed", "trace", "offline"}
_OUTPUT_KEYS = {"dir", "log_level", "log_file"}
_OP_KEYS = {kind.value for kind in OperatorKind}

ENV_VARS = {
    "NEXUS_SIM_LOG_LEVEL": ("output", "log_level"),
    "NEXUS_SIM_LOG_FILE": ("output", "log_file"),
    "NEXUS_SIM_OUTPUT_DIR": ("output", "dir"),
}


@dataclass(frozen=True)
class RunConfig:
    config: ValidatedConfig
    simulator: SimulatorConfig
    workload: Dict[str, Any]
    engines: List[str]
    output_dir: Path
    log_level: str = "INFO"
    log_file: Optional[Path] = None


def build_model(name: str, **dims) -> ModelConfig:
    if name not in MODELS:
        raise ConfigError([InvalidField("model.preset", f"unknown preset: {name}")])
    return ModelConfig.from_dims(**{**MODELS[name], **dims})


def build_gpu(name: str, model: ModelConfig, memory_utilization: float = GPU_MEMORY_UTILIZATION,
              **overrides) -> GpuSpec:
    """KV-ёмкость = память · utilization − веса модели, если не задана явно."""
    if name not in GPUS:
        raise ConfigError([InvalidField("gpu.preset", f"unknown preset: {name}")])
    spec = {**GPUS[name], **overrides}
    kv_capacity = spec.get("kv_capacity_bytes")
    if kv_capacity is None:
        kv_capacity = spec["memory_bytes"] * memory_utilization - model.weight_bytes
    return GpuSpec(
        total_sm=spec["total_sm"],
        peak_compute=float(spec["peak_compute"]),
        peak_bandwidth=float(spec["peak_bandwidth"]),
        kv_capacity_bytes=float(kv_capacity),
    )


def default_config(model: str = DEFAULT_MODEL, gpu: str = DEFAULT_GPU, **controller) -> ValidatedConfig:
    model_cfg = build_model(model)
    return ValidatedConfig(model_cfg, build_gpu(gpu, model_cfg), ControllerConfig(**controller),
                           KernelProfile.default())


# --- Калибровка ----------------------------------------------------------------

def load_kernel_profile(path: Path, base: Optional[KernelProfile] = None) -> KernelProfile:
    """Читает таблицу op,r_sat,lambda (строки с '#' пропускаются). Отсутствующие операторы берутся по умолчанию."""
    try:
        table = pd.read_csv(path, comment="#", skipinitialspace=True)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise CalibrationError(f"{path}: {e}") from e
    table.columns = [str(c).strip().lower() for c in table.columns]
    missing_cols = {"op", "r_sat", "lambda"} - set(table.columns)
    if missing_cols:
        raise CalibrationError(f"{path}: missing columns {sorted(missing_cols)}")

    profile = base or KernelProfile.default()
    seen = set()
    for row in table.to_dict("records"):
        op = str(row["op"]).strip().lower()
        if op not in _OP_KEYS:
            raise CalibrationError(f"{path}: unknown operator '{op}'")
        if op in seen:
            raise CalibrationError(f"{path}: duplicate operator '{op}'")
        seen.add(op)
        try:
            r_sat, lam = float(row["r_sat"]), float(row["lambda"])
        except (TypeError, ValueError) as e:
            raise CalibrationError(f"{path}: {op}: {e}") from e
        if not 0 < r_sat <= 1:
            raise CalibrationError(f"{path}: {op}.r_sat = {r_sat} must be in (0, 1]")
        if not lam >= 0:
            raise CalibrationError(f"{path}: {op}.lambda = {lam} must be >= 0")
        profile = profile.with_entry(OperatorKind(op), SaturationCoeffs(r_sat, lam))

    for op in sorted(_OP_KEYS - seen):
        logger.warning(f"Калибровка {path}: нет записи для '{op}', используется значение по умолчанию")
    return profile


def profile_to_dict(profile: KernelProfile) -> Dict[str, Dict[str, float]]:
    return {kind.value: {"r_sat": c.r_sat, "lambda": c.lam} for kind, c in profile.entries.items()}


# --- Загрузка конфигурации ------------------------------------------------------

def _env_layer() -> Dict[str, Dict[str, Any]]:
    load_dotenv()
    layer: Dict[str, Dict[str, Any]] = {}
    for var, (section, key) in ENV_VARS.items():
        value = os.getenv(var)
        if value:
            layer.setdefault(section, {})[key] = value
    return layer


def _merge(*layers: Dict[str, Dict[str, Any]]) -> Dict[str, Dict[str, Any]]:
    merged: Dict[str, Dict[str, Any]] = {}
    for layer in layers:
        for section, values in (layer or {}).items():
            merged.setdefault(section, {})
            if isinstance(values, dict):
                merged[section].update(values)
            else:
                merged[section] = values
    return merged


def read_config_file(path: Path) -> Dict[str, Dict[str, Any]]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError([InvalidField("config", f"cannot read {path}: {e.strerror}")]) from e
    except yaml.YAMLError as e:
        raise ConfigError([InvalidField("config", f"invalid YAML in {path}: {e}")]) from e
    if not isinstance(data, dict):
        raise ConfigError([InvalidField("config", "top level must be a mapping of sections")])
    return data


def _unknown_keys(raw: Dict[str, Any]) -> List[InvalidField]:
    allowed = {
        "model": _MODEL_KEYS,
        "gpu": _GPU_KEYS,
        "controller": {f.name for f in fields(ControllerConfig)},
        "kernel_profile": _OP_KEYS | {"path"},
        "workload": _WORKLOAD_KEYS,
        "simulator": {f.name for f in fields(SimulatorConfig)} | {"engines"},
        "output": _OUTPUT_KEYS,
    }
    found = []
    for section, values in raw.items():
        if section not in allowed:
            found.append(InvalidField(section, "unknown section"))
        elif not isinstance(values, dict):
            found.append(InvalidField(section, "must be a mapping"))
        else:
            found += [InvalidField(f"{section}.{key}", "unknown key") for key in values if key not in allowed[section]]
    return found


def _kernel_profile(section: Dict[str, Any]) -> KernelProfile:
    profile = KernelProfile.default()
    if section.get("path"):
        profile = load_kernel_profile(Path(section["path"]), profile)
    for op, coeffs in section.items():
        if op == "path":
            continue
        profile = profile.with_entry(OperatorKind(op), SaturationCoeffs(float(coeffs["r_sat"]),
                                                                        float(coeffs["lambda"])))
    return profile


def build_run_config(raw: Dict[str, Dict[str, Any]]) -> RunConfig:
    """Строит и проверяет конфигурацию; все нарушения собираются в одну ConfigError."""
    violations = _unknown_keys(raw)
    if violations:
        raise ConfigError(violations)
    try:
        model_section = dict(raw["model"])
        model = build_model(model_section.pop("preset", DEFAULT_MODEL), **model_section)
        gpu_section = dict(raw["gpu"])
        gpu = build_gpu(gpu_section.pop("preset", DEFAULT_GPU), model, **gpu_section)
        controller = ControllerConfig(**raw["controller"])
        simulator_section = dict(raw["simulator"])
        engines = list(simulator_section.pop("engines", DEFAULT_ENGINES))
        simulator = SimulatorConfig(**simulator_section)
        profile = _kernel_profile(raw["kernel_profile"])
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError([InvalidField("config", str(e))]) from e

    violations = collect_violations(model, gpu, controller, profile)
    if violations:
        raise ConfigError(violations)
    output = raw["output"]
    return RunConfig(
        config=ValidatedConfig(model, gpu, controller, profile),
        simulator=simulator,
        workload=dict(raw["workload"]),
        engines=engines,
        output_dir=Path(output["dir"]),
        log_level=str(output.get("log_level") or "INFO").upper(),
        log_file=Path(output["log_file"]) if output.get("log_file") else None,
    )


def load_config(path: Optional[Path] = None, overrides: Optional[Dict[str, Dict[str, Any]]] = None) -> RunConfig:
    """Порядок приоритета: умолчания < окружение (.env) < файл < флаги командной строки."""
    layers = [DEFAULTS, _env_layer()]
    if path is not None:
        layers.append(read_config_file(path))
    layers.append(overrides or {})
    return build_run_config(_merge(*layers))
