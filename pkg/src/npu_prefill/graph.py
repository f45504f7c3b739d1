"""Chunk plans and the chunk-sharing subgraph partition.

Every decoder layer is cut into a fixed sequence of stages. A stage is
*static* when all its operators only depend on the chunk length (norms,
linears, quantize ops); those are built once and shared by every chunk. A
stage is *dynamic* when an operator depends on the chunk's position in the
prompt (RoPE angles, attention over the growing KV); those need one
activation-buffer set per chunk.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

NPU = "NPU"
CPU = "CPU"
STATIC = "static"
DYNAMIC = "dynamic"

F32 = 4
I8 = 1

# every operator of one decoder layer, in program order
LAYER_OPS = (
    "attn_norm",
    "quantize_qkv",
    "qkv_linear",
    "rope",
    "attention",
    "quantize_o",
    "o_linear",
    "attn_residual",
    "ffn_norm",
    "quantize_gate_up",
    "gate_up_linear",
    "silu_mul",
    "quantize_down",
    "down_linear",
    "ffn_residual",
)

POSITION_DEPENDENT_OPS = frozenset({"rope", "attention"})


@dataclass(frozen=True)
class StageDef:
    name: str
    kind: str
    processor: str
    ops: tuple[str, ...]


FIVE_STAGE = (
    StageDef("norm_qkv", STATIC, NPU, ("attn_norm", "quantize_qkv", "qkv_linear")),
    StageDef("attention", DYNAMIC, CPU, ("rope", "attention")),
    StageDef("o_proj", STATIC, NPU, ("quantize_o", "o_linear", "attn_residual")),
    StageDef("ffn_norm", STATIC, CPU, ("ffn_norm",)),
    StageDef(
        "ffn",
        STATIC,
        NPU,
        ("quantize_gate_up", "gate_up_linear", "silu_mul", "quantize_down", "down_linear", "ffn_residual"),
    ),
)

SIX_STAGE = (
    StageDef("attn_norm", STATIC, CPU, ("attn_norm",)),
    StageDef("qkv", STATIC, NPU, ("quantize_qkv", "qkv_linear")),
    *FIVE_STAGE[1:],
)

LAYOUTS = {"five_stage": FIVE_STAGE, "six_stage": SIX_STAGE}


@dataclass(frozen=True)
class ChunkPlan:
    prompt_len: int
    chunk_len: int
    num_chunks: int
    pad: int

    def bounds(self, i: int) -> tuple[int, int]:
        """Real-token span ``[start, end)`` covered by chunk ``i``."""
        start = i * self.chunk_len
        return start, min(start + self.chunk_len, self.prompt_len)


def plan_chunks(prompt_len: int, chunk_len: int) -> ChunkPlan:
    if prompt_len < 1:
        raise ValueError(f"prompt_len must be >= 1, got {prompt_len}")
    if chunk_len < 1:
        raise ValueError(f"chunk_len must be >= 1, got {chunk_len}")
    n = math.ceil(prompt_len / chunk_len)
    return ChunkPlan(prompt_len, chunk_len, n, n * chunk_len - prompt_len)


def validate_layout(layout) -> None:
    seen = [op for st in layout for op in st.ops]
    if sorted(seen) != sorted(LAYER_OPS) or len(seen) != len(set(seen)):
        raise ValueError("stage layout must cover every layer operator exactly once")
    for st in layout:
        dyn = [op in POSITION_DEPENDENT_OPS for op in st.ops]
        if st.kind == DYNAMIC and not all(dyn):
            raise ValueError(f"dynamic stage {st.name} holds a position-independent op")
        if st.kind == STATIC and any(dyn):
            raise ValueError(f"static stage {st.name} holds a position-dependent op")


def op_weight_bytes(op: str, cfg) -> int:
    h, f = cfg.hidden, cfg.ffn_dim
    return {
        "attn_norm": h * F32,
        "ffn_norm": h * F32,
        "qkv_linear": h * 3 * h * I8,
        "o_linear": h * h * I8,
        "gate_up_linear": h * 2 * f * I8,
        "down_linear": f * h * I8,
    }.get(op, 0)


def op_buffer_bytes(op: str, cfg, rows: int, kv_rows: int = 0) -> int:
    """Output activation bytes an operator owns for a ``rows``-token chunk.

    Attention owns one ``rows x kv_rows`` score buffer reused head by head plus
    its output; the K/V history itself lives in the KV cache, not the graph.
    """
    h, f = cfg.hidden, cfg.ffn_dim
    sizes = {
        "attn_norm": rows * h * F32,
        "quantize_qkv": rows * h * I8,
        "qkv_linear": rows * 3 * h * F32,
        "rope": rows * 2 * h * F32,
        "attention": (rows * kv_rows + rows * h) * F32,
        "quantize_o": rows * h * I8,
        "o_linear": rows * h * F32,
        "attn_residual": rows * h * F32,
        "ffn_norm": rows * h * F32,
        "quantize_gate_up": rows * h * I8,
        "gate_up_linear": rows * 2 * f * F32,
        "silu_mul": rows * f * F32,
        "quantize_down": rows * f * I8,
        "down_linear": rows * h * F32,
        "ffn_residual": rows * h * F32,
    }
    return sizes[op]


@dataclass
class SubgraphSpec:
    layer: int
    stage: int
    name: str
    kind: str
    processor: str
    ops: tuple[str, ...]
    activation_bytes: list[int]
    weight_bytes: int

    @property
    def shared(self) -> bool:
        return self.kind == STATIC


@dataclass
class SharingReport:
    num_layers: int
    stages_per_layer: int
    num_chunks: int
    chunk_len: int
    shared_subgraphs: int
    total_subgraphs: int
    static_weight_bytes: int
    static_activation_bytes: int
    dynamic_bytes_per_chunk: list[int]
    kv_cache_bytes: int
    # per-chunk dynamic bytes for every layer, summed over layers
    per_layer_dynamic: list[list[int]] = field(default_factory=list, repr=False)

    @property
    def static_bytes(self) -> int:
        return self.static_weight_bytes + self.static_activation_bytes

    @property
    def dynamic_bytes(self) -> int:
        return sum(self.dynamic_bytes_per_chunk)

    @property
    def shared_total_bytes(self) -> int:
        return self.static_bytes + self.dynamic_bytes

    @property
    def naive_total_bytes(self) -> int:
        """One complete graph per chunk: every chunk carries its own static copy."""
        return self.num_chunks * self.static_bytes + self.dynamic_bytes

    @property
    def naive_over_shared(self) -> float:
        return self.naive_total_bytes / self.shared_total_bytes

    @property
    def reduction(self) -> float:
        return 1.0 - self.shared_total_bytes / self.naive_total_bytes

    def summary(self) -> str:
        return (
            f"{self.shared_subgraphs} out of {self.total_subgraphs} subgraphs can be shared; "
            f"{self.num_chunks} chunks: naive {self.naive_total_bytes} B vs shared "
            f"{self.shared_total_bytes} B ({100 * self.reduction:.1f}% less)"
        )

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "stages_per_layer": self.stages_per_layer,
            "num_chunks": self.num_chunks,
            "chunk_len": self.chunk_len,
            "shared_subgraphs": self.shared_subgraphs,
            "total_subgraphs": self.total_subgraphs,
            "static_weight_bytes": self.static_weight_bytes,
            "static_activation_bytes": self.static_activation_bytes,
            "static_bytes": self.static_bytes,
            "dynamic_bytes_per_chunk": list(self.dynamic_bytes_per_chunk),
            "dynamic_bytes": self.dynamic_bytes,
            "shared_total_bytes": self.shared_total_bytes,
            "naive_total_bytes": self.naive_total_bytes,
            "naive_over_shared": self.naive_over_shared,
            "kv_cache_bytes": self.kv_cache_bytes,
        }


def partition_sharing_graph(model, plan: ChunkPlan, layout=FIVE_STAGE) -> tuple[list[SubgraphSpec], SharingReport]:
    """Cut every layer into ``layout`` stages and account graph memory.

    ``model`` may be a model or a bare config; only its dimensions are used.
    """
    cfg = getattr(model, "cfg", model)
    validate_layout(layout)
    c = plan.chunk_len
    specs = []
    static_w = static_a = 0
    dyn_per_chunk = [0] * plan.num_chunks
    per_layer_dyn = []
    for layer in range(cfg.layers):
        layer_dyn = [0] * plan.num_chunks
        for j, st in enumerate(layout):
            wbytes = sum(op_weight_bytes(op, cfg) for op in st.ops)
            if st.kind == STATIC:
                act = [sum(op_buffer_bytes(op, cfg, c) for op in st.ops)]
                static_w += wbytes
                static_a += act[0]
            else:
                act = [
                    sum(op_buffer_bytes(op, cfg, c, (i + 1) * c) for op in st.ops)
                    for i in range(plan.num_chunks)
                ]
                for i, b in enumerate(act):
                    dyn_per_chunk[i] += b
                    layer_dyn[i] += b
            specs.append(SubgraphSpec(layer, j, st.name, st.kind, st.processor, st.ops, act, wbytes))
        per_layer_dyn.append(layer_dyn)
    n_static = sum(st.kind == STATIC for st in layout)
    report = SharingReport(
        num_layers=cfg.layers,
        stages_per_layer=len(layout),
        num_chunks=plan.num_chunks,
        chunk_len=c,
        shared_subgraphs=n_static * cfg.layers,
        total_subgraphs=len(layout) * cfg.layers,
        static_weight_bytes=static_w,
        static_activation_bytes=static_a,
        dynamic_bytes_per_chunk=dyn_per_chunk,
        kv_cache_bytes=2 * cfg.layers * plan.prompt_len * cfg.hidden * F32,
        per_layer_dynamic=per_layer_dyn,
    )
    return specs, report
