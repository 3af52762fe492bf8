import dataclasses

import numpy as np
import pytest
import torch

from chorus.data import REPRESENT_IMAGE, VisionGrid, gen_image
from chorus.inference import (CacheStats, GenerationConfig, InferenceError, cache_ratio, encode, generate_compressed,
                              generate_native, prefill)
from chorus.layout import PromptLayout, Sample, SegmentKind, Task, assemble
from chorus.model import ModelConfig, init_params

from oracles import full_forward_logits, step_logits

NO_STOP = GenerationConfig(max_new_tokens=6, stop_token=-1)


def qa_sample(seed=0):
    return Sample(REPRESENT_IMAGE, gen_image(seed), "how many circle ?", "2", Task.GENERATION)


@pytest.mark.parametrize("dtype,tol", [(torch.float32, 1e-5), (torch.float64, 1e-10)])
def test_compressed_matches_masked_full_forward(tiny_config, dtype, tol):
    for seed in range(3):
        params = init_params(tiny_config, seed, dtype)
        sample = qa_sample(seed)
        res = generate_compressed(params, sample, NO_STOP)
        assert len(res.tokens) == 6
        ref = full_forward_logits(params, sample, res, compressed=True)
        assert (step_logits(res) - ref.to(torch.float64)).abs().max().item() < tol


def test_native_incremental_matches_full_forward(tiny_params):
    sample = qa_sample(1)
    res = generate_native(tiny_params, sample, NO_STOP)
    ref = full_forward_logits(tiny_params, sample, res, compressed=False)
    assert (step_logits(res) - ref).abs().max().item() < 1e-10


def test_greedy_deterministic_and_stop(tiny_params):
    s = qa_sample(2)
    a, b = generate_native(tiny_params, s, NO_STOP), generate_native(tiny_params, s, NO_STOP)
    assert a.tokens == b.tokens
    first = a.tokens[0]
    stopped = generate_native(tiny_params, s, GenerationConfig(max_new_tokens=6, stop_token=first))
    assert stopped.tokens == [first]
    c1 = generate_compressed(tiny_params, s, GenerationConfig(max_new_tokens=4, temperature=1.0, seed=3))
    c2 = generate_compressed(tiny_params, s, GenerationConfig(max_new_tokens=4, temperature=1.0, seed=3))
    assert c1.tokens == c2.tokens


def test_cache_pruning_bookkeeping(tiny_params):
    s = qa_sample(3)
    layout = assemble(s, "joint", tiny_params.config, with_answer=False)
    u = layout.span(SegmentKind.U)
    prefix = PromptLayout(layout.tokens[:u.end], tuple(x for x in layout.spans if x.end <= u.end))
    _, cache = prefill(tiny_params, prefix, compressed=True)
    before = {int(p): k.clone() for p, k in zip(cache.positions, cache.keys[0].unbind(1))}
    removed = cache.prune()
    n_sys = sum(len(x) for x in prefix.spans if x.kind == SegmentKind.SYS)
    assert removed == len(prefix.span(SegmentKind.V)) + len(prefix.span(SegmentKind.T))
    assert len(cache) == n_sys + tiny_params.config.k_chorus
    assert cache.count(SegmentKind.V) == cache.count(SegmentKind.T) == 0
    # survivors keep their rotated keys, hence their rotary phase
    for p, k in zip(cache.positions, cache.keys[0].unbind(1)):
        assert torch.equal(before[int(p)], k)
    res = generate_compressed(tiny_params, s, NO_STOP)
    assert res.stats.retained == n_sys + tiny_params.config.k_chorus
    assert res.stats.n_full == len(prefix)
    assert res.stats.chorus == tiny_params.config.k_chorus


def _pruned_cache(params, sample):
    layout = assemble(sample, "joint", params.config, with_answer=False)
    u = layout.span(SegmentKind.U)
    prefix = PromptLayout(layout.tokens[:u.end], tuple(x for x in layout.spans if x.end <= u.end))
    _, cache = prefill(params, prefix, compressed=True)
    cache.prune()
    return layout, u, cache


def test_vision_reaches_answer_only_through_chorus(tiny_params):
    s = qa_sample(4)
    other = dataclasses.replace(s, image=gen_image(99))
    a = generate_compressed(tiny_params, s, NO_STOP)
    b = generate_compressed(tiny_params, other, NO_STOP)
    assert not np.allclose(a.step_logits[0], b.step_logits[0])
    # other's pruned cache with s's chorus entries transplanted decodes exactly like s
    layout, u, cache_a = _pruned_cache(tiny_params, s)
    _, _, cache_b = _pruned_cache(tiny_params, other)
    assert np.array_equal(cache_a.positions, cache_b.positions)
    cache_b.keys = [k.clone() for k in cache_a.keys]
    cache_b.values = [v.clone() for v in cache_a.values]
    logits, _ = prefill(tiny_params, layout, compressed=True, cache=cache_b, start=u.end)
    assert np.array_equal(logits.numpy(), a.step_logits[0])


def test_cache_ratio_examples():
    assert cache_ratio(1429, 1429) == 100.0
    assert round(cache_ratio(16, 1429), 2) == 1.12
    assert round(cache_ratio(1, 1429), 2) == 0.07
    with pytest.raises(InferenceError):
        cache_ratio(1, 0)
    with pytest.raises(InferenceError):
        cache_ratio(0, 10)


def test_cache_ratio_consistency_solve():
    table = {1: 0.07, 4: 0.28, 8: 0.56, 16: 1.12, 32: 2.24, 64: 4.48}
    consistent = [n for n in range(1000, 2000)
                  if all(round(100 * k / n, 2) == v for k, v in table.items())]
    assert consistent and all(1423 <= n <= 1433 for n in consistent)
    assert 1429 in consistent


def test_encode_sanity(tiny_params, small_dataset):
    q = small_dataset.train[0].query
    a, b = encode(tiny_params, q), encode(tiny_params, q)
    assert np.array_equal(a, b) and np.isfinite(a).all() and np.linalg.norm(a) > 0
    with pytest.raises(InferenceError):
        generate_compressed(init_params(ModelConfig(num_layers=1, num_heads=2, d_model=16, d_ff=32, k_chorus=4,
                                                    max_seq=40), 0), qa_sample())


def test_context_overflow(tiny_config):
    cfg = dataclasses.replace(tiny_config, max_seq=50)
    params = init_params(cfg, 0)
    s = qa_sample()
    n = len(assemble(s, "joint", cfg, with_answer=False))
    assert n < 50
    with pytest.raises(InferenceError):
        generate_compressed(params, s, GenerationConfig(max_new_tokens=50 - n + 5, stop_token=-1))
