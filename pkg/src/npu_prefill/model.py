"""Toy decoder-only transformer with chunked prefill.

Layer structure: RMSNorm -> QKV linear -> RoPE -> causal attention -> O linear
-> residual -> RMSNorm -> gated SiLU FFN -> residual. The four linears are the
quantization sites; their ids are the weight names (``layers.{l}.wqkv`` etc).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import weightfile
from .graph import FIVE_STAGE, ChunkPlan, plan_chunks
from .quant import CalibrationProfile, HotChannelTable
from .rng import stream
from .shadow import FetchLog, ShadowLinear, build_shadow_layers, shadow_matmul
from .tensor import (
    QTensor,
    causal_attention,
    matmul_f32,
    matmul_i8,
    quantize_clamp,
    quantize_weight,
    rmsnorm,
    rope,
    silu,
)

QUANT_MODES = ("float32", "w8a8-naive", "w8a8-shadow")
SITE_WEIGHTS = ("wqkv", "wo", "w_gate_up", "w_down")
SITE_OPS = {"wqkv": "qkv_linear", "wo": "o_linear", "w_gate_up": "gate_up_linear", "w_down": "down_linear"}
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    hidden: int = 256
    heads: int = 8
    ffn_mult: int = 4
    vocab: int = 1024
    chunk_len: int = 256
    seed: int = 0
    rope_theta: float = 10000.0

    def __post_init__(self):
        for name in ("layers", "hidden", "heads", "ffn_mult", "vocab", "chunk_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.head_dim % 2:
            raise ValueError(f"head_dim ({self.head_dim}) must be even for RoPE")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def ffn_dim(self) -> int:
        return self.hidden * self.ffn_mult


def parameter_count(cfg: ModelConfig) -> int:
    h, f, v = cfg.hidden, cfg.ffn_dim, cfg.vocab
    per_layer = 2 * h + 3 * h * h + h * h + 2 * h * f + f * h
    return v * h + cfg.layers * per_layer + h + h * v


class Model:
    def __init__(self, cfg: ModelConfig, weights: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.weights = {k: np.asarray(v, dtype=np.float32) for k, v in weights.items()}

    def w(self, layer: int, name: str) -> np.ndarray:
        return self.weights[f"layers.{layer}.{name}"]

    def site_names(self) -> list[str]:
        return [f"layers.{l}.{n}" for l in range(self.cfg.layers) for n in SITE_WEIGHTS]

    def num_parameters(self) -> int:
        return int(sum(w.size for w in self.weights.values()))


def build_model(cfg: ModelConfig) -> Model:
    rng = stream(cfg.seed, "model_weights")
    h, f, v = cfg.hidden, cfg.ffn_dim, cfg.vocab

    def normal(shape, fan_in):
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)

    weights = {"embed": rng.standard_normal((v, h)).astype(np.float32)}
    for l in range(cfg.layers):
        weights[f"layers.{l}.attn_norm"] = np.ones(h, np.float32)
        weights[f"layers.{l}.wqkv"] = normal((h, 3 * h), h)
        weights[f"layers.{l}.wo"] = normal((h, h), h)
        weights[f"layers.{l}.ffn_norm"] = np.ones(h, np.float32)
        weights[f"layers.{l}.w_gate_up"] = normal((h, 2 * f), h)
        weights[f"layers.{l}.w_down"] = normal((f, h), f)
    weights["final_norm"] = np.ones(h, np.float32)
    weights["lm_head"] = normal((h, v), h)
    return Model(cfg, weights)


def inject_outliers(
    model: Model,
    channels: Sequence[int],
    token_fraction: float = 0.05,
    magnitude: float = 30.0,
    seed: int = 0,
) -> tuple[Model, np.ndarray]:
    """Copy of ``model`` whose embeddings spike on ``channels`` for a random token subset.

    Returns the new model and the sorted ids of the spiking tokens.
    """
    rng = stream(seed, "outlier_tokens")
    v = model.cfg.vocab
    n_tok = max(1, int(round(token_fraction * v)))
    toks = np.sort(rng.choice(v, size=n_tok, replace=False))
    emb = model.weights["embed"].copy()
    for t in toks:
        c = channels[int(rng.integers(len(channels)))]
        emb[t, c] = np.float32(magnitude * rng.choice([-1.0, 1.0]))
    weights = dict(model.weights)
    weights["embed"] = emb
    return Model(model.cfg, weights), toks


@dataclass
class KVCache:
    keys: list[np.ndarray]
    values: list[np.ndarray]

    @classmethod
    def empty(cls, cfg: ModelConfig) -> "KVCache":
        z = np.zeros((cfg.heads, 0, cfg.head_dim), np.float32)
        return cls([z] * cfg.layers, [z] * cfg.layers)

    @property
    def length(self) -> int:
        return self.keys[0].shape[1]

    def copy(self) -> "KVCache":
        return KVCache(list(self.keys), list(self.values))


@dataclass
class QuantState:
    """Everything a quantized prefill needs: per-site scales, int8 weights and,
    for shadow mode, the per-site shadow layers."""

    mode: str
    scales: dict[str, float]
    weights_q: dict[str, QTensor]
    shadow: dict[str, ShadowLinear] = field(default_factory=dict)
    residual_mode: str = "exact"


def prepare_quant(
    model: Model,
    profiles: Mapping[str, CalibrationProfile] | Sequence[CalibrationProfile],
    mode: str,
    hot: HotChannelTable | None = None,
    pruned: set[str] = frozenset(),
    cold_path=None,
    residual_mode: str = "exact",
) -> QuantState:
    if mode not in ("w8a8-naive", "w8a8-shadow"):
        raise ValueError(f"not a quantized mode: {mode!r}")
    if not isinstance(profiles, Mapping):
        profiles = {p.layer: p for p in profiles}
    sites = model.site_names()
    missing = [s for s in sites if s not in profiles]
    if missing:
        raise KeyError(f"no calibration profile for sites {missing[:3]}...")
    wq = {s: quantize_weight(model.weights[s]) for s in sites}
    state = QuantState(mode, {s: profiles[s].scale for s in sites}, wq, residual_mode=residual_mode)
    if mode == "w8a8-shadow":
        if cold_path is None:
            raise ValueError("shadow mode needs a cold weight file path")
        hot = hot or HotChannelTable({})
        state.shadow = build_shadow_layers(
            {s: model.weights[s] for s in sites}, hot, cold_path, set(pruned), quantized=wq
        )
    return state


@dataclass
class TraceEntry:
    chunk: int
    layer: int
    stage: int
    name: str
    kind: str
    processor: str
    rows: int
    kv_rows: int
    outlier_channels: int = 0

    @property
    def shape_key(self) -> str:
        if self.kind == "dynamic":
            return f"{self.name}:q{self.rows}:kv{self.kv_rows}"
        return f"{self.name}:q{self.rows}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["shape_key"] = self.shape_key
        return d


@dataclass
class PrefillResult:
    logits: np.ndarray
    kv: KVCache
    trace: list[TraceEntry]
    fetch_log: FetchLog
    all_logits: np.ndarray | None = None


class _Linear:
    """Dispatches the four projection sites to the float, naive or shadow path."""

    def __init__(self, model: Model, quant: QuantState | None, record=None):
        self.model = model
        self.quant = quant
        self.record = record
        self.log = FetchLog()
        self.outliers: dict[str, int] = {}

    def __call__(self, site: str, x: np.ndarray) -> np.ndarray:
        if self.record is not None:
            self.record.setdefault(site, []).append(x.copy())
        q = self.quant
        if q is None:
            return matmul_f32(x, self.model.weights[site])
        s = q.scales[site]
        if q.mode == "w8a8-naive":
            return matmul_i8(quantize_clamp(x, s), q.weights_q[site])
        y, log = shadow_matmul(x, q.shadow[site], s, q.residual_mode)
        self.log.extend(log)
        self.outliers[site] = len({c for l, c, _ in log.entries})
        return y


def _layer(model: Model, l: int, x: np.ndarray, kv: KVCache, offset: int, real: int, linear: _Linear):
    cfg = model.cfg
    rows, hd = x.shape[0], cfg.head_dim
    h = rmsnorm(x, model.w(l, "attn_norm"))
    qkv = linear(f"layers.{l}.wqkv", h)
    q, k, v = (
        qkv[:, i * cfg.hidden : (i + 1) * cfg.hidden].reshape(rows, cfg.heads, hd).transpose(1, 0, 2)
        for i in range(3)
    )
    q = rope(q, offset, cfg.rope_theta)
    k = rope(k, offset, cfg.rope_theta)
    keys = np.concatenate([kv.keys[l], k], axis=1)
    vals = np.concatenate([kv.values[l], v], axis=1)
    attn = causal_attention(q, keys, vals, offset)
    attn = attn.transpose(1, 0, 2).reshape(rows, cfg.hidden)
    x = x + linear(f"layers.{l}.wo", attn)
    h = rmsnorm(x, model.w(l, "ffn_norm"))
    gu = linear(f"layers.{l}.w_gate_up", h)
    act = silu(gu[:, : cfg.ffn_dim]) * gu[:, cfg.ffn_dim :]
    x = x + linear(f"layers.{l}.w_down", act)
    # padded tail rows never enter the cache
    kv.keys[l] = keys[:, : offset + real]
    kv.values[l] = vals[:, : offset + real]
    return x


def _site_stage(layout) -> dict[str, int]:
    out = {}
    for j, st in enumerate(layout):
        for site, op in SITE_OPS.items():
            if op in st.ops:
                out[site] = j
    return out


def planned_trace(cfg: ModelConfig, plan: ChunkPlan, layout=FIVE_STAGE) -> list[TraceEntry]:
    """The (chunk, stage) executions a prefill over ``plan`` performs, without running it."""
    out = []
    for i in range(plan.num_chunks):
        start = i * plan.chunk_len
        for l in range(cfg.layers):
            for j, st in enumerate(layout):
                out.append(
                    TraceEntry(
                        chunk=i,
                        layer=l,
                        stage=l * len(layout) + j,
                        name=st.name,
                        kind=st.kind,
                        processor=st.processor,
                        rows=plan.chunk_len,
                        kv_rows=start + plan.chunk_len if st.kind == "dynamic" else 0,
                    )
                )
    return out


def _check_tokens(model: Model, tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("tokens must be a non-empty 1-D sequence")
    bad = (tokens < 0) | (tokens >= model.cfg.vocab)
    if bad.any():
        raise ValueError(f"token id {int(tokens[bad][0])} outside vocab of {model.cfg.vocab}")
    return tokens


def chunked_prefill(
    model: Model,
    tokens,
    plan: ChunkPlan | None = None,
    quant: QuantState | None = None,
    layout=FIVE_STAGE,
    return_all_logits: bool = False,
    record=None,
) -> PrefillResult:
    """Run the prompt chunk by chunk, each chunk attending to the KV of earlier ones.

    ``quant=None`` is float32 mode. The final chunk is padded at its end with
    token 0; padded rows are causally invisible to real rows and are dropped
    from the outputs and from the KV cache.
    """
    tokens = _check_tokens(model, tokens)
    cfg = model.cfg
    if plan is None:
        plan = plan_chunks(tokens.size, cfg.chunk_len)
    if tokens.size != plan.prompt_len:
        raise ValueError(f"plan expects {plan.prompt_len} tokens, got {tokens.size}")
    kv = KVCache.empty(cfg)
    linear = _Linear(model, quant, record)
    site_stage = _site_stage(layout)
    trace = []
    outs = []
    c = plan.chunk_len
    for i in range(plan.num_chunks):
        start, end = plan.bounds(i)
        real = end - start
        ids = np.zeros(c, dtype=np.int64)
        ids[:real] = tokens[start:end]
        x = model.weights["embed"][ids]
        for l in range(cfg.layers):
            linear.outliers = {}
            x = _layer(model, l, x, kv, start, real, linear)
            extracted = [0] * len(layout)
            for name, n in linear.outliers.items():
                extracted[site_stage[name.rsplit(".", 1)[1]]] += n
            for j, st in enumerate(layout):
                trace.append(
                    TraceEntry(i, l, l * len(layout) + j, st.name, st.kind, st.processor, c,
                               start + c if st.kind == "dynamic" else 0, extracted[j])
                )
        outs.append(x[:real])
    hidden = rmsnorm(np.concatenate(outs, axis=0), model.weights["final_norm"])
    if return_all_logits:
        all_logits = matmul_f32(hidden, model.weights["lm_head"])
        last = all_logits[-1].copy()
    else:
        all_logits = None
        last = matmul_f32(hidden[-1:], model.weights["lm_head"])[0]
    return PrefillResult(last, kv, trace, linear.log, all_logits)


def forward_full(model: Model, tokens, quant: QuantState | None = None, return_all_logits: bool = True) -> PrefillResult:
    """Single-shot prefill over the whole prompt (one chunk, no padding)."""
    tokens = _check_tokens(model, tokens)
    return chunked_prefill(model, tokens, plan_chunks(tokens.size, tokens.size), quant, return_all_logits=return_all_logits)


def collect_site_activations(model: Model, prompts) -> dict[str, list[np.ndarray]]:
    """Float-mode inputs seen by every quantization site over ``prompts``."""
    record: dict[str, list[np.ndarray]] = {}
    for p in prompts:
        chunked_prefill(model, p, plan_chunks(len(p), len(p)), record=record)
    return record


def greedy_decode(model: Model, kv: KVCache, max_new: int, logits: np.ndarray) -> list[int]:
    """Argmax decoding in float32, starting from the prefill's last-token ``logits``."""
    out: list[int] = []
    if max_new <= 0:
        return out
    kv = kv.copy()
    linear = _Linear(model, None)
    for _ in range(max_new):
        tok = int(np.argmax(logits))
        out.append(tok)
        if len(out) == max_new:
            break
        pos = kv.length
        x = model.weights["embed"][[tok]]
        for l in range(model.cfg.layers):
            x = _layer(model, l, x, kv, pos, 1, linear)
        hidden = rmsnorm(x, model.weights["final_norm"])
        logits = matmul_f32(hidden, model.weights["lm_head"])[0]
    return out


def save_model(model: Model, directory) -> None:
    """Write ``weights.bin`` (little-endian float32 records) and ``manifest.json``."""
    os.makedirs(directory, exist_ok=True)
    names = sorted(model.weights)
    offsets = weightfile.write_records(
        os.path.join(directory, "weights.bin"), [(i, model.weights[n]) for i, n in enumerate(names)]
    )
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "config": asdict(model.cfg),
        "tensors": {
            n: {"id": i, "offset": offsets[i], "shape": list(model.weights[n].shape)}
            for i, n in enumerate(names)
        },
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_model(directory) -> Model:
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    if manifest.get("schema_version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {manifest.get('schema_version')!r}")
    cfg = ModelConfig(**manifest["config"])
    path = os.path.join(directory, "weights.bin")
    weights = {}
    for name, meta in manifest["tensors"].items():
        arr = weightfile.read_record(path, meta["offset"], expect_id=meta["id"])
        weights[name] = arr.reshape(meta["shape"])
    return Model(cfg, weights)
