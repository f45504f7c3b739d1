"""
Chunk-sharing graph memory
==========================

Norms, projections and FFNs only see the chunk length, so one copy of their
graphs serves every chunk. RoPE and attention depend on where the chunk sits
in the prompt and get per-chunk buffers. The KV cache is common to both
designs and is left out of the comparison.
"""

from npu_prefill.graph import SIX_STAGE, partition_sharing_graph, plan_chunks
from npu_prefill.model import ModelConfig

cfg = ModelConfig()
for n in (1, 2, 4, 8):
    _, report = partition_sharing_graph(cfg, plan_chunks(n * cfg.chunk_len, cfg.chunk_len))
    print(f"N={n}: static {report.static_bytes / 2**20:6.2f} MiB, "
          f"naive {report.naive_total_bytes / 2**20:7.2f} MiB, shared {report.shared_total_bytes / 2**20:6.2f} MiB "
          f"({report.naive_over_shared:.2f}x)")

###############################################################################
# A deeper model, with attention norm split off as its own CPU stage.

_, report = partition_sharing_graph(ModelConfig(layers=24), plan_chunks(1024, 256), SIX_STAGE)
print(report.summary())
