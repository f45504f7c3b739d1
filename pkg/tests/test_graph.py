import pytest

from npu_prefill.graph import (
    DYNAMIC,
    FIVE_STAGE,
    LAYER_OPS,
    SIX_STAGE,
    STATIC,
    StageDef,
    partition_sharing_graph,
    plan_chunks,
    validate_layout,
)
from npu_prefill.model import ModelConfig


@pytest.mark.parametrize("length, chunk, n, pad", [(1024, 256, 4, 0), (257, 256, 2, 255), (1, 7, 1, 6), (255, 256, 1, 1)])
def test_plan_chunks(length, chunk, n, pad):
    plan = plan_chunks(length, chunk)
    assert (plan.num_chunks, plan.pad) == (n, pad)
    assert plan.bounds(n - 1)[1] == length


def test_plan_chunks_rejects_non_positive():
    with pytest.raises(ValueError):
        plan_chunks(0, 4)
    with pytest.raises(ValueError):
        plan_chunks(4, 0)


@pytest.mark.parametrize("layout", [FIVE_STAGE, SIX_STAGE])
def test_layouts_cover_every_op_once(layout):
    validate_layout(layout)
    assert sorted(op for st in layout for op in st.ops) == sorted(LAYER_OPS)


def test_layout_with_rope_in_static_stage_is_rejected():
    bad = (StageDef("all", STATIC, "NPU", LAYER_OPS),)
    with pytest.raises(ValueError):
        validate_layout(bad)
    missing = FIVE_STAGE[:-1]
    with pytest.raises(ValueError):
        validate_layout(missing)


def test_only_attention_stage_is_dynamic():
    assert [st.name for st in FIVE_STAGE if st.kind == DYNAMIC] == ["attention"]


def test_six_stage_layout_on_24_layers_shares_120_of_144():
    cfg = ModelConfig(layers=24, hidden=64, heads=4)
    _, report = partition_sharing_graph(cfg, plan_chunks(1024, 256), SIX_STAGE)
    assert (report.shared_subgraphs, report.total_subgraphs) == (120, 144)


def test_static_bytes_do_not_depend_on_chunk_count():
    cfg = ModelConfig()
    reports = [partition_sharing_graph(cfg, plan_chunks(256 * n, 256))[1] for n in (1, 2, 4, 8)]
    assert len({r.static_bytes for r in reports}) == 1
    assert [len(r.dynamic_bytes_per_chunk) for r in reports] == [1, 2, 4, 8]
    # later chunks attend over more keys, so their dynamic buffers grow
    per = reports[-1].dynamic_bytes_per_chunk
    assert per == sorted(per) and per[0] < per[-1]


def test_sharing_report_arithmetic():
    cfg = ModelConfig()
    specs, r = partition_sharing_graph(cfg, plan_chunks(1024, 256))
    assert len(specs) == cfg.layers * len(FIVE_STAGE)
    assert r.naive_total_bytes == 4 * r.static_bytes + r.dynamic_bytes
    assert r.naive_over_shared >= 2
    assert r.kv_cache_bytes == 2 * cfg.layers * 1024 * cfg.hidden * 4
    assert "16 out of 20" in r.summary()


def test_one_chunk_gains_nothing():
    _, r = partition_sharing_graph(ModelConfig(), plan_chunks(100, 256))
    assert r.naive_over_shared == 1.0
