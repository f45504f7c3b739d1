"""Per-tensor activation calibration and outlier bookkeeping.

A "layer" here is one quantized MatMul site: the activation feeding a linear
projection. Each site gets one calibrated scale ``s``; elements with
``|x| / s > 127`` are outliers and their whole channel is routed to the
float shadow path.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .tensor import QMAX, QTensor, quantize_clamp

SCHEMA_VERSION = 1
DEFAULT_PERCENTILE = 99.9
DEFAULT_COVERAGE = 0.8
DEFAULT_PRUNE_RATE = 0.85


@dataclass
class CalibrationProfile:
    layer: str
    scale: float
    channel_counts: np.ndarray
    sample_count: int
    token_count: int
    max_abs: float
    percentile: float = DEFAULT_PERCENTILE

    def __post_init__(self):
        self.channel_counts = np.asarray(self.channel_counts, dtype=np.int64)
        if not self.scale > 0:
            raise ValueError(f"calibrated scale must be positive, got {self.scale}")
        if self.channel_counts.size and int(self.channel_counts.max()) > self.token_count:
            raise ValueError("a channel cannot hold more outliers than there are tokens")

    @property
    def total_outliers(self) -> int:
        return int(self.channel_counts.sum())

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "scale": self.scale,
            "channel_counts": [int(c) for c in self.channel_counts],
            "sample_count": self.sample_count,
            "token_count": self.token_count,
            "max_abs": self.max_abs,
            "percentile": self.percentile,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CalibrationProfile":
        return cls(
            layer=d["layer"],
            scale=float(d["scale"]),
            channel_counts=np.asarray(d["channel_counts"], dtype=np.int64),
            sample_count=int(d["sample_count"]),
            token_count=int(d["token_count"]),
            max_abs=float(d["max_abs"]),
            percentile=float(d.get("percentile", DEFAULT_PERCENTILE)),
        )


@dataclass
class HotChannelTable:
    channels: dict[str, list[int]]
    coverage: float = DEFAULT_COVERAGE

    def get(self, layer: str) -> list[int]:
        return self.channels.get(layer, [])

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "hot_channels": {k: list(v) for k, v in self.channels.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "HotChannelTable":
        return cls({k: [int(c) for c in v] for k, v in d["hot_channels"].items()}, float(d["coverage"]))


@dataclass
class LayerImportance:
    layer: str
    index: int
    ratio: float
    pruned: bool = False

    def to_dict(self) -> dict:
        return {"layer": self.layer, "index": self.index, "ratio": self.ratio, "pruned": self.pruned}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerImportance":
        return cls(d["layer"], int(d["index"]), float(d["ratio"]), bool(d["pruned"]))


@dataclass
class OutlierSlice:
    """Compact float tensor holding the residuals of extracted channels."""

    channels: np.ndarray
    values: np.ndarray
    origin_shape: tuple[int, ...]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.int64)
        if self.channels.size > 1 and np.any(np.diff(self.channels) <= 0):
            raise ValueError("outlier channel indices must be strictly increasing")

    @property
    def empty(self) -> bool:
        return self.channels.size == 0

    def scatter(self) -> np.ndarray:
        """Dense tensor of ``origin_shape`` with the residuals placed back in their channels."""
        out = np.zeros(self.origin_shape, dtype=np.float32)
        if not self.empty:
            out[:, self.channels] = self.values
        return out


def _rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x.reshape(-1, x.shape[-1])


def calibrate(
    layer_activations: Sequence[np.ndarray],
    percentile: float = DEFAULT_PERCENTILE,
    layer: str = "layer",
) -> CalibrationProfile:
    """Pick a per-tensor scale from the ``percentile``-th activation magnitude.

    Args:
        layer_activations: Activation samples of shape ``(..., channels)``.
        percentile: Magnitude percentile in (0, 100] mapped to the int8 edge.
        layer: Identifier recorded in the profile.

    Returns:
        Profile with the scale and, at that scale, per-channel outlier counts.
    """
    if len(layer_activations) == 0:
        raise ValueError("calibration needs at least one activation sample")
    if not 0 < percentile <= 100:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    mats = [_rows(a) for a in layer_activations]
    mags = np.abs(np.concatenate([m.ravel() for m in mats]))
    edge = float(np.percentile(mags, percentile))
    max_abs = float(mags.max())
    if edge <= 0:
        edge = max_abs if max_abs > 0 else 1.0
    scale = edge / QMAX
    counts = np.zeros(mats[0].shape[1], dtype=np.int64)
    for m in mats:
        counts += (np.abs(m.astype(np.float64)) / scale > QMAX).sum(axis=0)
    return CalibrationProfile(
        layer=layer,
        scale=scale,
        channel_counts=counts,
        sample_count=len(mats),
        token_count=sum(m.shape[0] for m in mats),
        max_abs=max_abs,
        percentile=percentile,
    )


def detect_outlier_channels(x: np.ndarray, s: float) -> list[int]:
    """Channels holding at least one element with ``|x| / s > 127``."""
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    hit = (np.abs(_rows(x).astype(np.float64)) / float(s) > QMAX).any(axis=0)
    return [int(c) for c in np.flatnonzero(hit)]


def split_outliers(x: np.ndarray, s: float, mode: str = "exact") -> tuple[QTensor, OutlierSlice]:
    """Split ``x`` into a clamped int8 part and a compact float residual.

    In ``"exact"`` mode the residual of each extracted channel is
    ``x - s * dequant(q)``, so ``s * q + scatter(residual)`` reproduces those
    channels exactly. ``"floor"`` mode applies the literal
    ``floor(x / s / 128) * 128 * s`` residual instead; it is kept for
    comparison and does not reconstruct negative outliers.
    """
    if mode not in ("exact", "floor"):
        raise ValueError(f"unknown residual mode {mode!r}")
    x2 = _rows(x)
    q = quantize_clamp(x2, s)
    chans = np.asarray(detect_outlier_channels(x2, s), dtype=np.int64)
    if chans.size == 0:
        return q, OutlierSlice(chans, np.zeros((x2.shape[0], 0), np.float32), x2.shape)
    sub = x2[:, chans]
    if mode == "exact":
        resid = sub - q.data[:, chans].astype(np.float32) * np.float32(s)
    else:
        resid = (np.floor(sub.astype(np.float64) / s / 128.0) * 128.0 * s).astype(np.float32)
    return q, OutlierSlice(chans, resid.astype(np.float32), x2.shape)


def _hot_prefix(counts: np.ndarray, coverage: float) -> list[int]:
    total = int(counts.sum())
    if total == 0:
        return []
    # stable sort on -count keeps lower channel index first among ties
    order = np.argsort(-counts, kind="stable")
    need = coverage * total
    acc = 0
    picked = []
    for c in order:
        picked.append(int(c))
        acc += int(counts[c])
        if acc >= need - 1e-9 * total:
            break
    return sorted(picked)


def build_hot_channels(
    profiles: CalibrationProfile | Iterable[CalibrationProfile],
    coverage: float = DEFAULT_COVERAGE,
) -> HotChannelTable:
    """Smallest set of channels per layer covering ``coverage`` of its outliers."""
    if not 0 < coverage <= 1:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    if isinstance(profiles, CalibrationProfile):
        profiles = [profiles]
    return HotChannelTable({p.layer: _hot_prefix(p.channel_counts, coverage) for p in profiles}, coverage)


def hot_coverage(counts: np.ndarray, channels: Sequence[int]) -> float:
    total = int(np.sum(counts))
    if total == 0:
        return 1.0
    return float(np.sum(np.asarray(counts)[list(channels)])) / total


def importance_ratio(profile: CalibrationProfile) -> float:
    """Largest observed magnitude relative to the int8 clip edge, floored at 1."""
    return max(1.0, profile.max_abs / (QMAX * profile.scale))


def rank_layer_importance(
    profiles: Sequence[CalibrationProfile],
    group: Callable[[str], str] | None = None,
) -> list[LayerImportance]:
    """Importance per layer, most important first.

    With ``group`` the profiles are pooled (for example every MatMul site of
    one decoder layer) and a group's ratio is the largest ratio among its
    members. Indices follow first appearance.
    """
    if len(profiles) == 0:
        raise ValueError("need at least one layer profile")
    ratios: dict[str, float] = {}
    for p in profiles:
        key = group(p.layer) if group else p.layer
        ratios[key] = max(ratios.get(key, 1.0), importance_ratio(p))
    out = [LayerImportance(k, i, r) for i, (k, r) in enumerate(ratios.items())]
    out.sort(key=lambda li: (-li.ratio, li.index))
    return out


def prune_unimportant(importances: Sequence[LayerImportance], prune_rate: float = DEFAULT_PRUNE_RATE) -> set[str]:
    """Mark the ``floor(prune_rate * n)`` lowest-ratio layers as pruned.

    Ties go to the lower layer index. The ``pruned`` flag on each entry is
    updated in place and the set of pruned layer ids is returned.
    """
    if not 0 <= prune_rate <= 1:
        raise ValueError(f"prune_rate must be in [0, 1], got {prune_rate}")
    n = len(importances)
    k = math.floor(round(prune_rate * n, 9))
    order = sorted(importances, key=lambda li: (li.ratio, li.index))
    pruned = {li.layer for li in order[:k]}
    for li in importances:
        li.pruned = li.layer in pruned
    return pruned


def _dump(path, payload: dict) -> None:
    with open(path, "w") as f:
        json.dump({"schema_version": SCHEMA_VERSION, **payload}, f, indent=2, sort_keys=True)
        f.write("\n")


def _load(path) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported schema_version {doc.get('schema_version')!r}")
    return doc


def save_profiles(path, profiles: Sequence[CalibrationProfile]) -> None:
    _dump(path, {"profiles": [p.to_dict() for p in profiles]})


def load_profiles(path) -> list[CalibrationProfile]:
    return [CalibrationProfile.from_dict(d) for d in _load(path)["profiles"]]


def save_hot_channels(path, table: HotChannelTable) -> None:
    _dump(path, table.to_dict())


def load_hot_channels(path) -> HotChannelTable:
    return HotChannelTable.from_dict(_load(path))


def save_importance(path, importances: Sequence[LayerImportance]) -> None:
    _dump(path, {"importance": [li.to_dict() for li in importances]})


def load_importance(path) -> list[LayerImportance]:
    return [LayerImportance.from_dict(d) for d in _load(path)["importance"]]
