import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from chorus.layout import Sample, Task, assemble
from chorus.masks import build_mask, causal_mask
from chorus.model import ModelConfig, forward, init_params
from chorus.objectives import (GateConfig, LossWeights, ObjectiveError, PoolingMethod, ScoringConfig,
                               embed_batch, info_nce, lm_loss, lm_loss_batch, log_score_phi,
                               pool_chorus, pool_states, sample_gate, score_phi, total_loss)


def nce_oracle(q, t, tau):
    """Direct transcription: -log(phi(q, t+) / sum_j phi(q, t_j)), averaged."""
    q = np.asarray(q, float)
    t = np.asarray(t, float)
    total = 0.0
    for i in range(len(q)):
        phis = [math.exp(float(q[i] @ t[j]) / (np.linalg.norm(q[i]) * np.linalg.norm(t[j])) / tau)
                for j in range(len(t))]
        total += -math.log(phis[i] / sum(phis))
    return total / len(q)


def test_pool_mean_examples():
    states = torch.tensor([[1.0, 3.0], [3.0, 1.0]])
    assert torch.equal(pool_states(states, PoolingMethod.MEAN), torch.tensor([2.0, 2.0]))
    single = torch.tensor([[0.5, -1.5]])
    assert torch.equal(pool_states(single, PoolingMethod.MEAN), single[0])


def test_pool_mean_permutation_invariant():
    states = torch.tensor([[1.0, 2.0, 4.0], [0.5, 0.25, 8.0], [16.0, 1.0, 2.0], [4.0, 8.0, 0.5]])
    base = pool_states(states, PoolingMethod.MEAN)
    for perm in ([3, 2, 1, 0], [1, 0, 3, 2], [2, 3, 0, 1]):
        assert torch.equal(pool_states(states[perm], PoolingMethod.MEAN), base)


@pytest.mark.parametrize("method", list(PoolingMethod))
def test_pool_variants_shape(method, tiny_params):
    states = torch.randn(3, 4, 16, dtype=torch.float64)
    out = pool_states(states, method, tiny_params)
    assert out.shape == (3, 16) and torch.isfinite(out).all()


def test_pool_chorus_uses_chorus_rows(tiny_params, small_dataset):
    s = small_dataset.train[0].query
    lay = assemble(s, "embed", tiny_params.config)
    out = forward(tiny_params, lay.tokens, range(len(lay)), build_mask(lay))
    u = lay.span(lay.spans[0].kind.U)
    torch.testing.assert_close(pool_chorus(out, lay), out.hidden[u.start:u.end].mean(0), rtol=0, atol=1e-14)
    native = assemble(Sample("represent the given image .", s.image, "how many star ?", "1"), "native",
                      tiny_params.config)
    with pytest.raises(ObjectiveError):
        pool_chorus(out.hidden, native)


def test_score_phi():
    v = np.array([0.3, -1.2, 2.0])
    assert score_phi(v, v, 1.0) == pytest.approx(math.e, rel=1e-12)
    assert score_phi([1.0, 0.0], [0.0, 2.0], 1.0) == pytest.approx(1.0, abs=1e-15)
    assert log_score_phi([2.0, 0.0], [5.0, 0.0], 0.02) == 50.0
    assert score_phi([2.0, 0.0], [5.0, 0.0], 0.02) == pytest.approx(math.exp(50), rel=1e-12)
    with pytest.raises(ObjectiveError):
        score_phi([0.0, 0.0], [1.0, 0.0], 1.0)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_info_nce_identical_is_log_n(n):
    e = torch.ones(n, 5, dtype=torch.float64)
    assert info_nce(e, e, 0.02).item() == pytest.approx(math.log(n), abs=1e-6)


def test_info_nce_hand_case():
    q = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    expected = nce_oracle(q.numpy(), q.numpy(), 1.0)
    assert expected == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert info_nce(q, q, 1.0).item() == pytest.approx(0.313262, abs=1e-6)


def test_info_nce_matches_oracle():
    rng = np.random.default_rng(0)
    q, t = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    got = info_nce(torch.from_numpy(q), torch.from_numpy(t), 0.3).item()
    assert got == pytest.approx(nce_oracle(q, t, 0.3), rel=1e-10)


def test_info_nce_errors():
    with pytest.raises(ObjectiveError):
        info_nce(torch.ones(1, 3), torch.ones(1, 3), 0.1)
    z = torch.ones(3, 2)
    z[1] = 0
    with pytest.raises(ObjectiveError):
        info_nce(z, torch.ones(3, 2), 0.1)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10.0))
def test_info_nce_scale_invariant_and_nonnegative(seed, scale):
    rng = np.random.default_rng(seed)
    q = torch.from_numpy(rng.normal(size=(5, 3)))
    t = torch.from_numpy(rng.normal(size=(5, 3)))
    base = info_nce(q, t, 0.5)
    assert base.item() >= 0
    q2 = q.clone()
    q2[2] *= scale
    assert info_nce(q2, t, 0.5).item() == pytest.approx(base.item(), rel=1e-10)


def test_info_nce_decreases_with_temperature():
    q = torch.eye(4, dtype=torch.float64) + 0.1
    losses = [info_nce(q, q, tau).item() for tau in (2.0, 1.0, 0.5, 0.2, 0.1, 0.05)]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-4


def test_gate_extremes_and_rate():
    rng = np.random.default_rng(1)
    assert all(sample_gate(GateConfig(p=0.0), rng) == 0 for _ in range(500))
    assert all(sample_gate(GateConfig(p=1.0), rng) == 1 for _ in range(500))
    rng = np.random.default_rng(42)
    draws = [sample_gate(GateConfig(p=0.5), rng) for _ in range(10_000)]
    assert 0.48 <= np.mean(draws) <= 0.52
    with pytest.raises(ObjectiveError):
        GateConfig(p=1.5)


def gen_sample(dataset, i=0):
    return dataset.train[2 * i].generation_sample()


def test_lm_loss_uniform_logits(small_dataset):
    cfg = ModelConfig(num_layers=2, num_heads=2, d_model=16, d_ff=32, k_chorus=4, max_seq=160)
    p = init_params(cfg, 0)
    p.tensors["tok_emb"].zero_()
    for z in (0, 1):
        assert lm_loss(p, gen_sample(small_dataset), z).item() == pytest.approx(math.log(cfg.vocab_size), abs=1e-12)


def test_lm_loss_z0_equals_causal_reference(tiny_params, small_dataset):
    s = gen_sample(small_dataset)
    lay = assemble(s, "joint", tiny_params.config)
    out = forward(tiny_params, lay.tokens, range(len(lay)), causal_mask(len(lay)))
    a = lay.span(lay.spans[0].kind.A)
    ref = torch.nn.functional.cross_entropy(out.logits[a.start - 1:a.end - 1], torch.tensor(lay.tokens[a.start:a.end]))
    assert lm_loss(tiny_params, s, 0).item() == ref.item()
    assert lm_loss(tiny_params, s, 1).item() != ref.item()


def test_batched_helpers_match_single(tiny_params, small_dataset):
    samples = [gen_sample(small_dataset, i) for i in range(6)]
    zs = [0, 1, 1, 0, 1, 0]
    layouts = [assemble(s, "joint", tiny_params.config) for s in samples]
    batched = lm_loss_batch(tiny_params, layouts, zs).item()
    single = np.mean([lm_loss(tiny_params, s, z).item() for s, z in zip(samples, zs)])
    assert batched == pytest.approx(single, abs=1e-12)
    queries = [p.query for p in small_dataset.train[:6]]
    emb = embed_batch(tiny_params, queries)
    for s, row in zip(queries, emb):
        lay = assemble(s, "embed", tiny_params.config)
        ref = pool_chorus(forward(tiny_params, lay.tokens, range(len(lay)), build_mask(lay)), lay)
        assert torch.allclose(row, ref, atol=1e-12, rtol=0)


def test_total_loss_weighting(tiny_params, small_dataset):
    pairs = [(p.query, p.target) for p in small_dataset.train[:4]]
    gens = [gen_sample(small_dataset, i) for i in range(3)]
    zs = [1, 0, 1]
    r_only, parts = total_loss(tiny_params, pairs, gens, LossWeights(1.0, 0.0), zs=zs)
    q = embed_batch(tiny_params, [a for a, _ in pairs])
    t = embed_batch(tiny_params, [b for _, b in pairs])
    assert r_only.item() == info_nce(q, t, ScoringConfig().temperature).item()
    g_only, _ = total_loss(tiny_params, pairs, gens, LossWeights(0.0, 1.0), zs=zs)
    assert g_only.item() == pytest.approx(np.mean([lm_loss(tiny_params, s, z).item() for s, z in zip(gens, zs)]), abs=1e-12)
    both, parts = total_loss(tiny_params, pairs, gens, LossWeights(1.0, 0.5), zs=zs)
    assert both.item() == pytest.approx(parts["retrieval"] + 0.5 * parts["generation"], abs=1e-12)
    assert parts["zs"] == zs
    with pytest.raises(ObjectiveError):
        total_loss(tiny_params, [], [])
    with pytest.raises(ObjectiveError):
        LossWeights(0.0, 0.0)


def test_total_loss_arithmetic():
    w = LossWeights(1.0, 0.5)
    assert w.retrieval * 1.0 + w.generation * 2.0 == 2.0
