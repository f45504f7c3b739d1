"""Dense float32 and int8 kernels shared by every other module.

Float tensors are plain ``numpy.ndarray`` objects of dtype float32. Quantized
tensors carry their int8 payload together with one per-tensor scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMAX = 127
# int8 x int8 products summed over k terms stay below 2**31 for k <= 2**15
MAX_INNER_DIM = 2**15


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


@dataclass(frozen=True)
class QTensor:
    """Signed 8-bit payload with a single positive scale."""

    data: np.ndarray
    scale: float

    def __post_init__(self):
        if self.data.dtype != np.int8:
            raise TypeError(f"QTensor payload must be int8, got {self.data.dtype}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.data.size and int(np.abs(self.data.astype(np.int16)).max()) > QMAX:
            raise ValueError("QTensor payload outside [-127, 127]")

    @property
    def shape(self):
        return self.data.shape

    def dequantize(self) -> np.ndarray:
        return (self.data.astype(np.float32) * np.float32(self.scale)).astype(np.float32)


def as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


def quantize_clamp(x: np.ndarray, s: float) -> QTensor:
    """Round ``x / s`` half-to-even and saturate to [-127, 127]."""
    if not s > 0:
        raise ValueError(f"quantization scale must be positive, got {s}")
    q = np.rint(np.asarray(x, dtype=np.float64) / float(s))
    q = np.clip(q, -QMAX, QMAX).astype(np.int8)
    return QTensor(q, float(s))


def quantize_weight(w: np.ndarray) -> QTensor:
    """Max-abs symmetric per-tensor quantization."""
    amax = float(np.abs(w).max()) if w.size else 0.0
    return quantize_clamp(w, amax / QMAX if amax > 0 else 1.0)


def matmul_f32(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = as_f32(a)
    b = as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul_f32 expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def matmul_i8(a: QTensor, b: QTensor) -> np.ndarray:
    """Integer matmul with exact 32-bit accumulation, dequantized by ``a.scale * b.scale``.

    The accumulation runs through float64 BLAS: every partial sum is an
    integer below 2**53, so the result is bit-identical to an int32 loop.
    """
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul_i8 expects 2-D operands, got {a.shape} and {b.shape}")
    k = a.shape[1]
    if k != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    if k > MAX_INNER_DIM:
        raise ShapeError(f"inner dimension {k} could overflow int32 accumulation")
    acc = np.matmul(a.data.astype(np.float64), b.data.astype(np.float64)).astype(np.int32)
    return acc.astype(np.float32) * np.float32(a.scale * b.scale)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    x = as_f32(x)
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def rmsnorm(x: np.ndarray, gamma: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = as_f32(x)
    gamma = as_f32(gamma)
    if gamma.shape != x.shape[-1:]:
        raise ShapeError(f"gamma shape {gamma.shape} does not match hidden size {x.shape[-1]}")
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return (x / np.sqrt(ms + np.float32(eps))) * gamma


def silu(x: np.ndarray) -> np.ndarray:
    x = as_f32(x)
    return x / (np.float32(1.0) + np.exp(-x))


def rope(x: np.ndarray, position_offset: int, theta: float = 10000.0) -> np.ndarray:
    """Rotate adjacent (even, odd) feature pairs by the absolute token position.

    ``x`` has shape ``(..., seq, head_dim)``; row ``r`` sits at position
    ``position_offset + r``.
    """
    x = as_f32(x)
    seq, d = x.shape[-2], x.shape[-1]
    if d % 2:
        raise ShapeError(f"rope needs an even head dimension, got {d}")
    pos = np.arange(position_offset, position_offset + seq, dtype=np.float64)
    inv_freq = theta ** (-np.arange(0, d, 2, dtype=np.float64) / d)
    ang = np.outer(pos, inv_freq)
    cos = np.cos(ang).astype(np.float32)
    sin = np.sin(ang).astype(np.float32)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def causal_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, mask_offset: int) -> np.ndarray:
    """Scaled dot-product attention with a causal mask shifted by ``mask_offset``.

    Shapes are ``(..., s, d)`` for ``q`` and ``(..., T, d)`` for ``k``/``v``
    with ``T >= mask_offset + s``. Query row ``r`` sees keys ``0..mask_offset + r``.
    """
    q, k, v = as_f32(q), as_f32(k), as_f32(v)
    s, d = q.shape[-2], q.shape[-1]
    total = k.shape[-2]
    if mask_offset < 0 or total < mask_offset + s:
        raise ShapeError(
            f"KV holds {total} rows, need at least mask_offset + seq = {mask_offset + s}"
        )
    if v.shape[-2] != total or k.shape[-1] != d:
        raise ShapeError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * np.float32(1.0 / np.sqrt(d))
    rows = np.arange(s)[:, None] + mask_offset
    cols = np.arange(total)[None, :]
    scores = np.where(cols <= rows, scores, np.float32(-np.inf))
    return np.matmul(softmax_rows(scores), v)
