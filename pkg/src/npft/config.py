"""Experiment configuration: one JSON file, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .bench import BenchConfig
from .finetune import NpftConfig
from .model import ModelConfig
from .noise import NoiseSpec
from .quant import QuantConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    corpus: str | None = None            # None: packaged default corpus
    split_fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
    calib_corpus: str | None = None      # None: calibration split of ``corpus``
    calib_n: int = 32
    calib_len: int = 128
    eval_corpora: tuple[str, ...] = ("valid",)  # "valid", "test" or file paths
    eval_max_tokens: int | None = 20000


@dataclass
class SweepConfig:
    gamma: tuple[float, ...] = (0.0005, 0.005, 0.01, 0.02)
    beta: tuple[float, ...] = (0.0, 0.5)
    layers: tuple[str, ...] = ("attn_only", "mlp_only", "all")
    noise: tuple[NoiseSpec, ...] = (
        NoiseSpec("uniform", "output_channel"),
        NoiseSpec("gaussian", "output_channel"),
        NoiseSpec("laplace", "output_channel"),
        NoiseSpec("uniform", "input_channel"),
    )


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    npft: NpftConfig = field(default_factory=NpftConfig)
    quant_arms: tuple[QuantConfig, ...] = (QuantConfig(bits=4), QuantConfig(bits=3))
    bench: BenchConfig = field(default_factory=BenchConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs/default"
    seed: int = 0


def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if isinstance(value, tp):
            return value
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
        return from_dict(tp, value, where)
    if origin is typing.Union or (origin is not None and str(origin) == "<class 'types.UnionType'>"):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _convert(inner[0], value, where)
    if origin in (tuple, list):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {type(value).__name__}")
        if origin is tuple and len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
        if origin is tuple:
            if len(value) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} entries, got {len(value)}")
            return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        return [_convert(args[0], v, f"{where}[{i}]") for i, v in enumerate(value)]
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data: dict, where: str = "config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys and ill-typed values."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def to_dict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(ExperimentConfig, raw)


def save_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(to_dict(cfg), indent=2))
    return path
