"""Desk-scale simulation of NPU-offloaded LLM prefill.

Chunked prefill with shape-static shared graphs, W8A8 quantization with a
float "shadow" path for activation outliers, and out-of-order scheduling of
per-chunk subgraphs across an NPU and a CPU.
"""

from .model import ModelConfig, build_model, chunked_prefill, forward_full
from .quant import build_hot_channels, calibrate, prune_unimportant, rank_layer_importance
from .scheduler import schedule_greedy, schedule_inorder, schedule_optimal, validate_schedule
from .shadow import shadow_matmul

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "build_model",
    "chunked_prefill",
    "forward_full",
    "calibrate",
    "build_hot_channels",
    "rank_layer_importance",
    "prune_unimportant",
    "shadow_matmul",
    "schedule_greedy",
    "schedule_inorder",
    "schedule_optimal",
    "validate_schedule",
]
