"""Split MatMul: clamped int8 part on the NPU, compact float outlier part on the CPU.

Float weight rows for hot channels stay resident; all other rows live in a
cold file on disk and are read only when an outlier shows up in that channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import weightfile
from .quant import HotChannelTable, split_outliers
from .tensor import QTensor, matmul_f32, matmul_i8, quantize_weight

FLOAT_BYTES = 4
INDEX_BYTES = 4


@dataclass
class ShadowLinear:
    layer: str
    layer_id: int
    weight_q: QTensor
    hot_channels: np.ndarray
    weight_f_hot: np.ndarray
    cold_path: str
    cold_offset: int
    pruned: bool = False

    @property
    def in_features(self) -> int:
        return self.weight_q.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight_q.shape[1]

    def hot_row(self, channel: int):
        pos = np.searchsorted(self.hot_channels, channel)
        if pos < self.hot_channels.size and self.hot_channels[pos] == channel:
            return self.weight_f_hot[pos]
        return None


@dataclass
class FetchLog:
    entries: list[tuple[str, int, str]] = field(default_factory=list)
    resident_bytes: int = 0
    fetched_bytes: int = 0

    def fetched_channels(self, layer: str | None = None) -> list[int]:
        return [c for l, c, src in self.entries if src == "fetched" and (layer is None or l == layer)]

    def extend(self, other: "FetchLog") -> None:
        self.entries.extend(other.entries)
        self.resident_bytes += other.resident_bytes
        self.fetched_bytes += other.fetched_bytes

    def to_dict(self) -> dict:
        return {
            "entries": [{"layer": l, "channel": c, "source": src} for l, c, src in self.entries],
            "resident_bytes": self.resident_bytes,
            "fetched_bytes": self.fetched_bytes,
        }

    def dump(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


def build_shadow_layers(
    weights: Mapping[str, np.ndarray],
    hot: HotChannelTable,
    cold_path,
    pruned: set[str] = frozenset(),
    quantized: Mapping[str, QTensor] | None = None,
) -> dict[str, ShadowLinear]:
    """Quantize each weight, write its dequantized float copy to ``cold_path``
    and keep only the hot rows in memory.

    Layer ids in the cold file follow the iteration order of ``weights``.
    """
    quantized = dict(quantized or {})
    for name, w in weights.items():
        if name not in quantized:
            quantized[name] = quantize_weight(w)
    names = list(weights)
    offsets = weightfile.write_records(
        cold_path, [(i, quantized[n].dequantize()) for i, n in enumerate(names)]
    )
    layers = {}
    for i, name in enumerate(names):
        wq = quantized[name]
        hot_idx = np.asarray(sorted(hot.get(name)), dtype=np.int64)
        layers[name] = ShadowLinear(
            layer=name,
            layer_id=i,
            weight_q=wq,
            hot_channels=hot_idx,
            weight_f_hot=wq.dequantize()[hot_idx].copy(),
            cold_path=str(cold_path),
            cold_offset=offsets[i],
            pruned=name in pruned,
        )
    return layers


def gather_rows(layer: ShadowLinear, channels: Sequence[int], log: FetchLog) -> np.ndarray:
    """Float weight rows for ``channels``: hot ones from memory, the rest from the cold file."""
    rows = np.empty((len(channels), layer.out_features), dtype=np.float32)
    cold = []
    row_bytes = layer.out_features * FLOAT_BYTES
    for i, c in enumerate(channels):
        r = layer.hot_row(int(c))
        if r is not None:
            rows[i] = r
            log.entries.append((layer.layer, int(c), "resident"))
            log.resident_bytes += row_bytes
        else:
            cold.append((i, int(c)))
    if cold:
        # IOError propagates; a missing cold row must never turn into zeros
        fetched = weightfile.read_rows(
            layer.cold_path, layer.cold_offset, [c for _, c in cold], expect_id=layer.layer_id
        )
        for (i, c), r in zip(cold, fetched):
            rows[i] = r
            log.entries.append((layer.layer, c, "fetched"))
            log.fetched_bytes += row_bytes
    return rows


def shadow_matmul(x: np.ndarray, layer: ShadowLinear, s: float, mode: str = "exact") -> tuple[np.ndarray, FetchLog]:
    """``x @ w`` as an int8 MatMul plus a float correction over the outlier channels.

    The int8 partial result is formed first and the float residual product is
    added to it second. Pruned layers return the clamped-only result.
    """
    log = FetchLog()
    q, outliers = split_outliers(x, s, mode)
    y = matmul_i8(q, layer.weight_q)
    if layer.pruned or outliers.empty:
        return y, log
    rows = gather_rows(layer, outliers.channels, log)
    return y + matmul_f32(outliers.values, rows), log


@dataclass
class FootprintReport:
    int8_bytes: int
    hot_float_bytes: int
    index_bytes: int
    full_copy_float_bytes: int

    @property
    def resident_bytes(self) -> int:
        """int8 weights plus hot float rows; the hot-index table is reported separately."""
        return self.int8_bytes + self.hot_float_bytes

    @property
    def shadow_savings(self) -> float:
        """Fraction of the full float shadow copy that is not kept resident."""
        if self.full_copy_float_bytes == 0:
            return 0.0
        return 1.0 - self.hot_float_bytes / self.full_copy_float_bytes

    def to_dict(self) -> dict:
        return {
            "int8_bytes": self.int8_bytes,
            "hot_float_bytes": self.hot_float_bytes,
            "index_bytes": self.index_bytes,
            "resident_bytes": self.resident_bytes,
            "full_copy_float_bytes": self.full_copy_float_bytes,
            "full_copy_resident_bytes": self.int8_bytes + self.full_copy_float_bytes,
        }


def memory_footprint(layers: Sequence[ShadowLinear]) -> FootprintReport:
    int8 = hot = idx = full = 0
    for l in layers:
        k, n = l.weight_q.shape
        int8 += k * n
        hot += l.hot_channels.size * n * FLOAT_BYTES
        idx += l.hot_channels.size * INDEX_BYTES
        full += k * n * FLOAT_BYTES
    return FootprintReport(int8, hot, idx, full)
