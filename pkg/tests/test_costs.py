import math

import pytest

from npu_prefill.costs import CostModel, cpu_float_scale, derive_costs, problem_from_trace
from npu_prefill.graph import FIVE_STAGE, plan_chunks
from npu_prefill.model import ModelConfig, planned_trace
from npu_prefill.scheduler import CPU, NPU


def stage_totals(costs, trace):
    tot = {NPU: 0, CPU: 0}
    for e in trace:
        tot[e.processor] += costs.duration(e.name, e.chunk, e.processor, e.shape_key)
    return tot


def test_synthetic_costs_hit_the_npu_cpu_ratio():
    cfg = ModelConfig()
    trace = planned_trace(cfg, plan_chunks(256, 256))
    tot = stage_totals(derive_costs(trace, cfg), trace)
    assert tot[NPU] / tot[CPU] == pytest.approx(2.0, rel=0.01)


def test_cpu_scale_closed_form():
    cfg = ModelConfig()
    s = cpu_float_scale(cfg, npu_cpu_ratio=4.0)
    assert s == pytest.approx(cpu_float_scale(cfg) / 2)


def test_attention_cost_grows_with_chunk_index():
    cfg = ModelConfig()
    trace = planned_trace(cfg, plan_chunks(1024, 256))
    costs = derive_costs(trace, cfg)
    att = [costs.duration(e.name, e.chunk, e.processor, e.shape_key) for e in trace if e.name == "attention" and e.layer == 0]
    assert att == sorted(att) and att[0] < att[-1]
    lin = {costs.duration(e.name, e.chunk, e.processor, e.shape_key) for e in trace if e.name == "ffn"}
    assert len(lin) == 1


def test_cost_model_rejects_non_positive():
    with pytest.raises(ValueError):
        CostModel("synthetic", {"a|0|NPU|x": 0})


def test_cost_model_json_round_trip(tmp_path):
    cfg = ModelConfig(layers=1)
    costs = derive_costs(planned_trace(cfg, plan_chunks(512, 256)), cfg)
    costs.write_json(tmp_path / "c.json")
    back = CostModel.read_json(tmp_path / "c.json")
    assert back.entries == costs.entries and back.mode == "synthetic"


def test_measured_mode_gives_positive_durations():
    cfg = ModelConfig(layers=1, hidden=32, heads=4, vocab=64)
    trace = planned_trace(cfg, plan_chunks(16, 8))
    costs = derive_costs(trace, cfg, mode="measured", repeats=1)
    assert all(isinstance(v, int) and v >= 1 for v in costs.entries.values())
    with pytest.raises(ValueError):
        derive_costs(trace, cfg, mode="guess")


def test_problem_from_trace_marks_attention_cross_chunk():
    cfg = ModelConfig(layers=2)
    trace = planned_trace(cfg, plan_chunks(768, 256))
    graph, nodes = problem_from_trace(trace, derive_costs(trace, cfg))
    assert (graph.num_chunks, graph.num_stages) == (3, 2 * len(FIVE_STAGE))
    assert graph.preds[(2, 1)] == ((0, 0), (1, 0), (2, 0))
    assert graph.preds[(2, 6)] == ((0, 5), (1, 5), (2, 5))
    assert graph.preds[(2, 2)] == ((2, 1),)
    assert nodes[(0, 1)].processor == CPU and nodes[(0, 0)].processor == NPU
