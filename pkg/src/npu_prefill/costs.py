"""Per-subgraph duration tables for the scheduler.

``synthetic`` mode charges FLOP-proportional time: the NPU runs its stages
``npu_speedup`` times faster than the CPU would, and the CPU's float
efficiency is then set so that, for one reference-length chunk, the total NPU
time is ``npu_cpu_ratio`` times the total CPU time. ``measured`` mode times
the toy numpy kernels instead (wall clock, not reproducible bit for bit).
"""

from __future__ import annotations

import json
import math
import statistics
import time
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .graph import FIVE_STAGE
from .scheduler import CPU, NPU, DependencyGraph, SubgraphNode, build_dependencies

SCHEMA_VERSION = 1
DEFAULT_NPU_SPEEDUP = 5.0
DEFAULT_NPU_CPU_RATIO = 2.0
DEFAULT_REFERENCE_LEN = 256
# simulated time unit is 1 us; the CPU baseline sustains 1e4 flop per unit (10 GFLOP/s)
BASE_FLOPS_PER_UNIT = 1e4


def op_flops(op: str, cfg, rows: int, kv_rows: int = 0) -> float:
    h, f = cfg.hidden, cfg.ffn_dim
    table = {
        "attn_norm": 4 * rows * h,
        "ffn_norm": 4 * rows * h,
        "quantize_qkv": 2 * rows * h,
        "quantize_o": 2 * rows * h,
        "quantize_gate_up": 2 * rows * h,
        "quantize_down": 2 * rows * f,
        "qkv_linear": 2 * rows * h * 3 * h,
        "o_linear": 2 * rows * h * h,
        "gate_up_linear": 2 * rows * h * 2 * f,
        "down_linear": 2 * rows * f * h,
        "rope": 6 * rows * h,
        "attention": 4 * rows * kv_rows * h + 5 * rows * kv_rows * cfg.heads,
        "attn_residual": rows * h,
        "ffn_residual": rows * h,
        "silu_mul": 5 * rows * f,
    }
    return float(table[op])


def stage_flops(stage, cfg, rows: int, kv_rows: int = 0) -> float:
    return sum(op_flops(op, cfg, rows, kv_rows) for op in stage.ops)


def _key(stage: str, chunk: int, processor: str, shape_key: str) -> str:
    return f"{stage}|{chunk}|{processor}|{shape_key}"


@dataclass
class CostModel:
    """Duration lookup keyed by (stage name, chunk index, processor, shape key)."""

    mode: str
    entries: dict[str, int]
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, d in self.entries.items():
            if not isinstance(d, (int, np.integer)) or d <= 0:
                raise ValueError(f"cost entry {k} must be a positive integer duration, got {d!r}")

    def duration(self, stage: str, chunk: int, processor: str, shape_key: str) -> int:
        return self.entries[_key(stage, chunk, processor, shape_key)]

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "mode": self.mode,
            "params": self.params,
            "entries": {k: int(self.entries[k]) for k in sorted(self.entries)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CostModel":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported cost-model schema_version {d.get('schema_version')!r}")
        return cls(d["mode"], {k: int(v) for k, v in d["entries"].items()}, dict(d.get("params", {})))

    def write_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def read_json(cls, path) -> "CostModel":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def _stage_by_name(layout) -> dict:
    return {st.name: st for st in layout}


def cpu_float_scale(cfg, layout=FIVE_STAGE, npu_speedup=DEFAULT_NPU_SPEEDUP,
                    npu_cpu_ratio=DEFAULT_NPU_CPU_RATIO, reference_len=DEFAULT_REFERENCE_LEN) -> float:
    """CPU slowdown factor that makes NPU total = ``npu_cpu_ratio`` x CPU total for one reference chunk."""
    npu = sum(stage_flops(st, cfg, reference_len, reference_len) for st in layout if st.processor == NPU)
    cpu = sum(stage_flops(st, cfg, reference_len, reference_len) for st in layout if st.processor == CPU)
    if cpu == 0 or npu == 0:
        return 1.0
    return (npu / npu_speedup) / (npu_cpu_ratio * cpu)


def derive_costs(
    trace: Iterable,
    cfg,
    mode: str = "synthetic",
    layout=FIVE_STAGE,
    npu_speedup: float = DEFAULT_NPU_SPEEDUP,
    npu_cpu_ratio: float = DEFAULT_NPU_CPU_RATIO,
    reference_len: int = DEFAULT_REFERENCE_LEN,
    repeats: int = 5,
    seed: int = 0,
) -> CostModel:
    """Build a cost table covering every (stage, chunk, processor, shape) in ``trace``."""
    stages = _stage_by_name(layout)
    entries: dict[str, int] = {}
    if mode == "synthetic":
        scale = cpu_float_scale(cfg, layout, npu_speedup, npu_cpu_ratio, reference_len)
        params = {
            "npu_speedup": npu_speedup,
            "npu_cpu_ratio": npu_cpu_ratio,
            "reference_len": reference_len,
            "cpu_float_scale": scale,
            "flops_per_unit": BASE_FLOPS_PER_UNIT,
        }
        for e in trace:
            fl = stage_flops(stages[e.name], cfg, e.rows, e.kv_rows)
            if e.processor == NPU:
                t = fl / (BASE_FLOPS_PER_UNIT * npu_speedup)
            else:
                t = fl * scale / BASE_FLOPS_PER_UNIT
            entries[_key(e.name, e.chunk, e.processor, e.shape_key)] = max(1, math.ceil(t))
    elif mode == "measured":
        params = {"npu_speedup": npu_speedup, "repeats": repeats}
        timed: dict[tuple, int] = {}
        rng = np.random.default_rng(seed)
        for e in trace:
            sk = (e.name, e.shape_key, e.processor)
            if sk not in timed:
                us = _time_stage(stages[e.name], cfg, e.rows, e.kv_rows, repeats, rng)
                if e.processor == NPU:
                    us /= npu_speedup
                timed[sk] = max(1, math.ceil(us))
            entries[_key(e.name, e.chunk, e.processor, e.shape_key)] = timed[sk]
    else:
        raise ValueError(f"unknown cost mode {mode!r}")
    return CostModel(mode, entries, params)


def _time_stage(stage, cfg, rows, kv_rows, repeats, rng) -> float:
    from . import tensor as T

    h, f = cfg.hidden, cfg.ffn_dim
    in_dim = {"qkv_linear": h, "o_linear": h, "gate_up_linear": h, "down_linear": f}
    out_dim = {"qkv_linear": 3 * h, "o_linear": h, "gate_up_linear": 2 * f, "down_linear": h}
    weights = {op: T.quantize_weight(rng.standard_normal((in_dim[op], out_dim[op]))) for op in in_dim}
    acts = {op: rng.standard_normal((rows, in_dim[op])).astype(np.float32) for op in in_dim}
    x = rng.standard_normal((rows, h)).astype(np.float32)
    gu = rng.standard_normal((rows, 2 * f)).astype(np.float32)
    heads = x.reshape(rows, cfg.heads, cfg.head_dim).transpose(1, 0, 2)
    kv = rng.standard_normal((cfg.heads, max(kv_rows, rows), cfg.head_dim)).astype(np.float32)
    gamma = np.ones(h, np.float32)

    def run():
        for op in stage.ops:
            if op in ("attn_norm", "ffn_norm"):
                T.rmsnorm(x, gamma)
            elif op in weights:
                T.matmul_i8(T.quantize_clamp(acts[op], 0.05), weights[op])
            elif op.startswith("quantize_"):
                T.quantize_clamp(x, 0.05)
            elif op == "rope":
                T.rope(heads, kv.shape[1] - rows)
            elif op == "attention":
                T.causal_attention(heads, kv, kv, kv.shape[1] - rows)
            elif op == "silu_mul":
                T.silu(gu[:, :f]) * gu[:, f:]
            else:
                x + x

    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        samples.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(samples)


def problem_from_trace(trace: Sequence, costs: CostModel) -> tuple[DependencyGraph, dict]:
    """Dependency graph and per-node costs for the (chunk, stage) executions in ``trace``."""
    n_chunks = max(e.chunk for e in trace) + 1
    n_stages = max(e.stage for e in trace) + 1
    kinds = ["linear"] * n_stages
    nodes = {}
    for e in trace:
        kinds[e.stage] = "dynamic" if e.kind == "dynamic" else "linear"
        d = costs.duration(e.name, e.chunk, e.processor, e.shape_key)
        nodes[(e.chunk, e.stage)] = SubgraphNode(e.chunk, e.stage, e.processor, d)
    return build_dependencies(n_chunks, n_stages, kinds), nodes
