"""
Chunked prefill on a toy decoder
================================

A prompt is cut into fixed-length chunks. Each chunk attends to the KV cache
of the chunks before it, so the final logits match a single full-length pass.
The last chunk is padded with token 0, and its pad rows never reach the cache.
"""

import numpy as np

from npu_prefill.graph import plan_chunks
from npu_prefill.model import ModelConfig, build_model, chunked_prefill, forward_full, greedy_decode

cfg = ModelConfig(layers=4, hidden=256, heads=8, vocab=1024, seed=0)
model = build_model(cfg)
print(f"{model.num_parameters():,} parameters")

tokens = np.random.default_rng(0).integers(0, cfg.vocab, 300)
full = forward_full(model, tokens)

###############################################################################
# Same prompt, three chunkings.

for chunk in (7, 64, 256):
    plan = plan_chunks(tokens.size, chunk)
    res = chunked_prefill(model, tokens, plan, return_all_logits=True)
    err = np.abs(res.all_logits - full.all_logits).max()
    print(f"chunk {chunk:3d}: {plan.num_chunks:2d} chunks, pad {plan.pad:3d}, "
          f"kv length {res.kv.length}, max |diff| {err:.1e}")

###############################################################################
# Decoding from either cache gives the same continuation.

chunked = chunked_prefill(model, tokens, plan_chunks(tokens.size, 64))
print("decode after chunked prefill:", greedy_decode(model, chunked.kv, 8, chunked.logits))
print("decode after full prefill:   ", greedy_decode(model, full.kv, 8, full.logits))
