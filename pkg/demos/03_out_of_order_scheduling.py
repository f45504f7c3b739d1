"""
Out-of-order subgraph scheduling
================================

Each decoder layer becomes NPU stages (projections, FFN) and CPU stages
(attention, FFN norm). Attention of chunk i needs the projections of chunks
0..i. Everything else only needs the previous stage of its own chunk. Running
strictly in order leaves the NPU waiting on the CPU. The greedy scheduler
instead lets an idle processor pick the ready subgraph that most reduces NPU
stalls.
"""

from npu_prefill.costs import derive_costs, problem_from_trace
from npu_prefill.graph import plan_chunks
from npu_prefill.model import ModelConfig, planned_trace
from npu_prefill.scheduler import NPU, schedule_greedy, schedule_inorder, validate_schedule

cfg = ModelConfig()

for length in (256, 512, 1024):
    trace = planned_trace(cfg, plan_chunks(length, cfg.chunk_len))
    graph, nodes = problem_from_trace(trace, derive_costs(trace, cfg))
    inorder = schedule_inorder(graph, nodes)
    greedy = schedule_greedy(graph, nodes)
    assert not validate_schedule(graph, nodes, greedy)
    gain = 100 * (1 - greedy.makespan / inorder.makespan)
    print(f"{length:5d} tokens: in-order {inorder.makespan:7d} us, greedy {greedy.makespan:7d} us "
          f"({gain:4.1f}% shorter), NPU bubble {inorder.bubble_rate:.2f} -> {greedy.bubble_rate:.2f}")

###############################################################################
# The first few NPU decisions of the greedy schedule at 1024 tokens.

for e in [e for e in greedy.events if e.processor == NPU][:8]:
    print(f"  t={e.start:6d}  chunk {e.chunk} stage {e.stage}")
