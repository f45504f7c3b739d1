import numpy as np
import pytest

from npu_prefill.experiment import calibrate_model
from npu_prefill.graph import plan_chunks
from npu_prefill.model import (
    ModelConfig,
    build_model,
    chunked_prefill,
    forward_full,
    greedy_decode,
    inject_outliers,
    load_model,
    parameter_count,
    planned_trace,
    prepare_quant,
    save_model,
)

GOLDEN_DECODE = [9, 30, 53, 62, 29, 28]


def test_parameter_count_matches_weights(tiny_cfg, tiny_model):
    assert tiny_model.num_parameters() == parameter_count(tiny_cfg)
    assert parameter_count(ModelConfig()) == 1024 * 256 * 2 + 4 * (2 * 256 + 4 * 256**2 + 3 * 256 * 1024) + 256


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(layers=0)


def test_build_is_deterministic_per_seed(tiny_cfg):
    a, b = build_model(tiny_cfg), build_model(tiny_cfg)
    assert all(np.array_equal(a.weights[k], b.weights[k]) for k in a.weights)
    c = build_model(ModelConfig(**{**tiny_cfg.__dict__, "seed": 4}))
    assert not np.array_equal(a.weights["embed"], c.weights["embed"])


@pytest.mark.parametrize("length", [1, 8, 9, 21])
@pytest.mark.parametrize("chunk", [1, 3, 8])
def test_chunked_matches_full_prefill(tiny_model, length, chunk):
    toks = np.random.default_rng(length).integers(0, 64, length)
    full = forward_full(tiny_model, toks)
    res = chunked_prefill(tiny_model, toks, plan_chunks(length, chunk), return_all_logits=True)
    assert res.all_logits.shape == (length, 64)
    np.testing.assert_allclose(res.all_logits, full.all_logits, atol=1e-4)


def test_kv_cache_excludes_padding(tiny_model):
    toks = np.arange(13)
    full = forward_full(tiny_model, toks)
    res = chunked_prefill(tiny_model, toks, plan_chunks(13, 8))
    assert res.kv.length == 13
    for a, b in zip(res.kv.keys, full.kv.keys):
        np.testing.assert_allclose(a, b, atol=1e-5)


def test_trace_shape(tiny_cfg, tiny_model):
    res = chunked_prefill(tiny_model, np.arange(20), plan_chunks(20, 8))
    assert {e.chunk for e in res.trace} == {0, 1, 2}
    assert len(res.trace) == 3 * tiny_cfg.layers * 5
    assert [(e.chunk, e.stage) for e in res.trace] == [
        (e.chunk, e.stage) for e in planned_trace(tiny_cfg, plan_chunks(20, 8))
    ]
    attn = [e for e in res.trace if e.name == "attention"]
    assert sorted({e.kv_rows for e in attn}) == [8, 16, 24]


def test_greedy_decode_golden_and_chunk_invariant(tiny_model):
    toks = np.arange(20) % 64
    chunked = chunked_prefill(tiny_model, toks)
    full = forward_full(tiny_model, toks)
    assert greedy_decode(tiny_model, chunked.kv, 6, chunked.logits) == GOLDEN_DECODE
    assert greedy_decode(tiny_model, full.kv, 6, full.logits) == GOLDEN_DECODE
    assert greedy_decode(tiny_model, chunked.kv, 0, chunked.logits) == []


def test_invalid_tokens(tiny_model):
    with pytest.raises(ValueError):
        chunked_prefill(tiny_model, [])
    with pytest.raises(ValueError):
        chunked_prefill(tiny_model, [64])
    with pytest.raises(ValueError):
        chunked_prefill(tiny_model, [1, 2], plan_chunks(3, 2))


def test_save_load_round_trip(tmp_path, tiny_model):
    save_model(tiny_model, tmp_path / "m")
    back = load_model(tmp_path / "m")
    assert back.cfg == tiny_model.cfg
    assert set(back.weights) == set(tiny_model.weights)
    for k, v in tiny_model.weights.items():
        np.testing.assert_array_equal(back.weights[k], v)


def test_inject_outliers_only_touches_embeddings(tiny_model):
    spiky, toks = inject_outliers(tiny_model, [5], token_fraction=0.25, magnitude=40.0, seed=3)
    assert len(toks) == 16
    assert np.all(np.abs(spiky.weights["embed"][toks, 5]) == 40.0)
    for k in tiny_model.weights:
        if k != "embed":
            assert spiky.weights[k] is tiny_model.weights[k] or np.array_equal(spiky.weights[k], tiny_model.weights[k])


def test_shadow_mode_beats_naive_on_outlier_prompt(tmp_path, spiky_model):
    prompts = np.random.default_rng(0).integers(0, 64, (4, 32))
    cal = calibrate_model(spiky_model, prompts, prune_rate=0.0)
    toks = np.random.default_rng(1).integers(0, 64, 24)
    full = forward_full(spiky_model, toks).all_logits
    errs = {}
    for mode in ("w8a8-naive", "w8a8-shadow"):
        st = prepare_quant(spiky_model, cal.profiles, mode, cal.hot, cal.pruned_sites, tmp_path / "c.bin")
        res = chunked_prefill(spiky_model, toks, quant=st, return_all_logits=True)
        errs[mode] = np.sqrt(np.mean((res.all_logits - full) ** 2))
    assert errs["w8a8-shadow"] < errs["w8a8-naive"]


def test_fully_pruned_shadow_equals_naive(tmp_path, spiky_model):
    prompts = np.random.default_rng(0).integers(0, 64, (2, 16))
    cal = calibrate_model(spiky_model, prompts, prune_rate=1.0)
    toks = np.arange(10)
    naive = prepare_quant(spiky_model, cal.profiles, "w8a8-naive")
    shadow = prepare_quant(spiky_model, cal.profiles, "w8a8-shadow", cal.hot, cal.pruned_sites, tmp_path / "c.bin")
    a = chunked_prefill(spiky_model, toks, quant=naive, return_all_logits=True).all_logits
    b = chunked_prefill(spiky_model, toks, quant=shadow, return_all_logits=True).all_logits
    np.testing.assert_array_equal(a, b)


def test_prepare_quant_requires_profiles(tiny_model):
    with pytest.raises(KeyError):
        prepare_quant(tiny_model, [], "w8a8-naive")
    with pytest.raises(ValueError):
        prepare_quant(tiny_model, [], "float32")
