"""Experiment configuration.

Values are resolved in this order, later winning: built-in defaults, the YAML
config file, ``NPU_PREFILL_*`` environment variables, command-line flags.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, replace

import yaml

from .model import QUANT_MODES, ModelConfig

ENV_PREFIX = "NPU_PREFILL_"


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class OutlierConfig:
    channels: tuple[int, ...] = (3, 17, 101)
    token_fraction: float = 0.05
    magnitude: float = 30.0


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    model: ModelConfig = field(default_factory=ModelConfig)
    prompt_lengths: tuple[int, ...] = (256, 1024)
    chunk_len: int = 256
    quant_mode: str = "all"
    percentile: float = 99.9
    prune_rate: float = 0.85
    hot_coverage: float = 0.8
    importance_granularity: str = "layer"
    calibration_prompts: int = 4
    calibration_len: int = 256
    outliers: OutlierConfig = field(default_factory=OutlierConfig)
    cost_mode: str = "synthetic"
    npu_speedup: float = 5.0
    npu_cpu_ratio: float = 2.0
    optimal: str = "auto"
    optimal_limit: int = 12
    decode_tokens: int = 8
    out: str = "runs/default"

    def __post_init__(self):
        if self.quant_mode != "all" and self.quant_mode not in QUANT_MODES:
            raise UsageError(f"quant_mode must be 'all' or one of {QUANT_MODES}, got {self.quant_mode!r}")
        if self.importance_granularity not in ("layer", "site"):
            raise UsageError("importance_granularity must be 'layer' or 'site'")
        if self.cost_mode not in ("synthetic", "measured"):
            raise UsageError("cost_mode must be 'synthetic' or 'measured'")
        if self.optimal not in ("auto", "always", "never"):
            raise UsageError("optimal must be 'auto', 'always' or 'never'")
        if not 0 <= self.prune_rate <= 1:
            raise UsageError("prune_rate must be within [0, 1]")
        if self.chunk_len < 1 or any(p < 1 for p in self.prompt_lengths):
            raise UsageError("chunk_len and prompt lengths must be positive")

    @property
    def model_config(self) -> ModelConfig:
        return replace(self.model, chunk_len=self.chunk_len, seed=self.seed)

    @property
    def quant_modes(self) -> tuple[str, ...]:
        # float32 always runs: it is the oracle for the quantized modes
        if self.quant_mode == "all":
            return QUANT_MODES
        return tuple(dict.fromkeys(("float32", self.quant_mode)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        d["model"] = asdict(self.model_config)
        d["prompt_lengths"] = list(self.prompt_lengths)
        d["outliers"]["channels"] = list(self.outliers.channels)
        return d


_FLAT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"model", "outliers"}


def _coerce(name: str, value):
    typ = {f.name: f.type for f in fields(ExperimentConfig)}[name]
    if name == "prompt_lengths":
        if isinstance(value, str):
            value = [v for v in value.replace(",", " ").split()]
        return tuple(int(v) for v in value)
    if typ in ("int",):
        return int(value)
    if typ in ("float",):
        return float(value)
    return str(value)


def load_config(path=None, env=None, overrides=None) -> ExperimentConfig:
    """Merge defaults, an optional YAML file, environment and explicit overrides."""
    raw: dict = {}
    if path is not None:
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise UsageError(f"{path}: config must be a mapping")
    env = os.environ if env is None else env
    for key in _FLAT_KEYS:
        var = ENV_PREFIX + key.upper()
        if var in env:
            raw[key] = env[var]
    for key, val in (overrides or {}).items():
        if val is not None:
            raw[key] = val
    unknown = set(raw) - _FLAT_KEYS - {"model", "outliers"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    if "seed" not in raw:
        raise UsageError("a seed is required (config file, NPU_PREFILL_SEED or --seed)")
    kwargs = {k: _coerce(k, v) for k, v in raw.items() if k in _FLAT_KEYS}
    try:
        if "model" in raw:
            kwargs["model"] = ModelConfig(**raw["model"])
        if "outliers" in raw:
            o = dict(raw["outliers"])
            if "channels" in o:
                o["channels"] = tuple(int(c) for c in o["channels"])
            kwargs["outliers"] = OutlierConfig(**o)
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e
