"""Chorus pooling, similarity scoring and the training losses.

The retrieval loss is InfoNCE over in-batch negatives on cosine
similarity divided by a temperature.  The generation loss is next-token
cross-entropy over the answer, where a Bernoulli gate decides per sample
whether the answer may read the raw vision/text tokens (z=0) or only the
chorus tokens (z=1).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .layout import PromptLayout, Sample, SegmentKind, VOCAB, answer_positions, assemble
from .masks import build_mask
from .model import ForwardOutput, Parameters, forward, forward_batch

__all__ = [
    "PoolingMethod", "ScoringConfig", "LossWeights", "GateConfig", "ObjectiveError",
    "pool_states", "pool_chorus", "score_phi", "log_score_phi", "info_nce", "sample_gate",
    "lm_loss", "lm_loss_batch", "embed_batch", "collate", "total_loss",
]


class ObjectiveError(ValueError):
    pass


class PoolingMethod(str, enum.Enum):
    MEAN = "mean"
    MLP = "mlp"
    ATTN = "attn"


@dataclass(frozen=True)
class ScoringConfig:
    temperature: float = 0.02

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise ObjectiveError("temperature must be positive")


@dataclass(frozen=True)
class LossWeights:
    retrieval: float = 1.0
    generation: float = 0.5

    def __post_init__(self) -> None:
        if self.retrieval < 0 or self.generation < 0:
            raise ObjectiveError("loss weights must be non-negative")
        if self.retrieval == 0 and self.generation == 0:
            raise ObjectiveError("at least one loss weight must be positive")


@dataclass(frozen=True)
class GateConfig:
    p: float = 0.5
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ObjectiveError("gate probability must lie in [0, 1]")


def sample_gate(gate: GateConfig, rng: Optional[np.random.Generator] = None) -> int:
    """Draw z: 1 (answer sees only chorus tokens) with probability p, else 0."""
    if rng is None:
        rng = np.random.default_rng(gate.seed)
    return int(rng.random() < gate.p)


def pool_states(states: torch.Tensor, method: PoolingMethod, params: Optional[Parameters] = None) -> torch.Tensor:
    """Reduce chorus states [..., k, d] to [..., d]."""
    method = PoolingMethod(method)
    if method == PoolingMethod.MEAN:
        # summing in sorted order makes the result bitwise permutation-invariant
        return states.sort(dim=-2).values.mean(dim=-2)
    if params is None:
        raise ObjectiveError(f"{method.value} pooling needs parameters")
    t = params.tensors
    if method == PoolingMethod.MLP:
        h = F.gelu(states @ t["pool.mlp.w1"] + t["pool.mlp.b1"]) @ t["pool.mlp.w2"] + t["pool.mlp.b2"]
        return h.mean(dim=-2)
    keys = states @ t["pool.attn.wk"]
    weights = torch.softmax(keys @ t["pool.attn.query"] / math.sqrt(states.shape[-1]), dim=-1)
    return (weights[..., None] * states).sum(dim=-2)


def pool_chorus(hidden, layout: PromptLayout, method: PoolingMethod = PoolingMethod.MEAN,
                params: Optional[Parameters] = None) -> torch.Tensor:
    if isinstance(hidden, ForwardOutput):
        hidden = hidden.hidden
    u = layout.span(SegmentKind.U)
    if u is None or len(u) == 0:
        raise ObjectiveError("layout has no chorus span")
    return pool_states(hidden[u.start:u.end], method, params)


def _cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ObjectiveError("zero-norm embedding")
    return float(a @ b / (na * nb))


def log_score_phi(h_q, h_t, tau: float) -> float:
    return _cosine(h_q, h_t) / tau


def score_phi(h_q, h_t, tau: float) -> float:
    """exp(cos / tau).  Losses use :func:`log_score_phi` instead to avoid overflow."""
    return math.exp(log_score_phi(h_q, h_t, tau))


def info_nce(queries: torch.Tensor, targets: torch.Tensor, tau: float) -> torch.Tensor:
    """Mean over rows of -log softmax(cos(q_i, t_j) / tau)[i]; row i of targets is the positive."""
    if queries.shape[0] < 2 or queries.shape != targets.shape:
        raise ObjectiveError("info_nce needs N >= 2 aligned query/target rows")
    if (queries.norm(dim=-1) == 0).any() or (targets.norm(dim=-1) == 0).any():
        raise ObjectiveError("zero-norm embedding")
    q = queries / queries.norm(dim=-1, keepdim=True)
    t = targets / targets.norm(dim=-1, keepdim=True)
    logits = q @ t.T / tau
    labels = torch.arange(q.shape[0])
    # cross_entropy is log-sum-exp stabilised
    return F.cross_entropy(logits, labels)


def collate(layouts: Sequence[PromptLayout], compressed: Sequence[bool]):
    """Right-pad layouts into (tokens, positions, allowed) batch tensors."""
    n = max(len(lay) for lay in layouts)
    tokens = np.full((len(layouts), n), VOCAB.pad, dtype=np.int64)
    allowed = np.broadcast_to(np.tril(np.ones((n, n), dtype=bool)), (len(layouts), n, n)).copy()
    for b, (lay, comp) in enumerate(zip(layouts, compressed)):
        m = len(lay)
        tokens[b, :m] = lay.tokens
        allowed[b, :m, :m] = build_mask(lay, comp).allowed
    positions = np.broadcast_to(np.arange(n), (len(layouts), n))
    return torch.from_numpy(tokens), torch.from_numpy(positions.copy()), torch.from_numpy(allowed)


def _length_groups(layouts: Sequence[PromptLayout]) -> list[list[int]]:
    """Indices grouped by sequence length so batches carry no padding."""
    groups: dict[int, list[int]] = {}
    for i, lay in enumerate(layouts):
        groups.setdefault(len(lay), []).append(i)
    return [groups[n] for n in sorted(groups)]


def embed_batch(params: Parameters, samples: Sequence[Sample],
                method: PoolingMethod = PoolingMethod.MEAN,
                layouts: Optional[Sequence[PromptLayout]] = None) -> torch.Tensor:
    """Pooled chorus embeddings [N, d] for embed-mode prompts."""
    if layouts is None:
        layouts = [assemble(s, "embed", params.config) for s in samples]
    k = params.config.k_chorus
    order, pooled = [], []
    for group in _length_groups(layouts):
        lays = [layouts[i] for i in group]
        tokens, positions, allowed = collate(lays, [True] * len(lays))
        hidden, _ = forward_batch(params, tokens, positions, allowed)
        starts = torch.tensor([lay.span(SegmentKind.U).start for lay in lays])
        idx = starts[:, None] + torch.arange(k)
        pooled.append(pool_states(hidden[torch.arange(len(lays))[:, None], idx], method, params))
        order += group
    out = torch.cat(pooled)
    return out[torch.from_numpy(np.argsort(order))]


def lm_loss_batch(params: Parameters, layouts: Sequence[PromptLayout], zs: Sequence[int]) -> torch.Tensor:
    """Mean over samples of each sample's mean answer-token cross-entropy."""
    per_sample = []
    for group in _length_groups(layouts):
        lays = [layouts[i] for i in group]
        tokens, positions, allowed = collate(lays, [zs[i] == 1 for i in group])
        _, logits = forward_batch(params, tokens, positions, allowed)
        logp = torch.log_softmax(logits, dim=-1)
        for b, lay in enumerate(lays):
            pos = answer_positions(lay)
            targets = torch.tensor([lay.tokens[p + 1] for p in pos])
            per_sample.append(-logp[b, pos, targets].mean())
    return torch.stack(per_sample).mean()


def lm_loss(params: Parameters, sample: Sample, z: int) -> torch.Tensor:
    """Answer cross-entropy for one joint-mode prompt; z=1 hides vision/text from the answer."""
    layout = assemble(sample, "joint", params.config)
    out = forward(params, layout.tokens, range(len(layout)), build_mask(layout, compressed=z == 1))
    pos = answer_positions(layout)
    targets = torch.tensor([layout.tokens[p + 1] for p in pos])
    return F.cross_entropy(out.logits[pos], targets)


def total_loss(params: Parameters, retrieval_batch: Sequence[tuple[Sample, Sample]],
               generation_samples: Sequence[Sample], weights: LossWeights = LossWeights(),
               gate: GateConfig = GateConfig(), scoring: ScoringConfig = ScoringConfig(), *,
               zs: Optional[Sequence[int]] = None, rng: Optional[np.random.Generator] = None,
               pooling: PoolingMethod = PoolingMethod.MEAN) -> tuple[torch.Tensor, dict]:
    """alpha_r * L_r + alpha_g * L_g; an absent component contributes 0.

    ``zs`` forces the gate per generation sample; otherwise each sample
    draws its own z from ``rng``.
    """
    if not retrieval_batch and not generation_samples:
        raise ObjectiveError("both loss components are empty")
    parts: dict = {"retrieval": 0.0, "generation": 0.0, "zs": []}
    loss = None
    if retrieval_batch:
        queries = embed_batch(params, [q for q, _ in retrieval_batch], pooling)
        targets = embed_batch(params, [t for _, t in retrieval_batch], pooling)
        l_r = info_nce(queries, targets, scoring.temperature)
        parts["retrieval"] = l_r.item()
        loss = weights.retrieval * l_r
    if generation_samples:
        if zs is None:
            rng = rng if rng is not None else np.random.default_rng(gate.seed)
            zs = [sample_gate(gate, rng) for _ in generation_samples]
        layouts = [assemble(s, "joint", params.config) for s in generation_samples]
        l_g = lm_loss_batch(params, layouts, zs)
        parts["generation"] = l_g.item()
        parts["zs"] = list(zs)
        loss = weights.generation * l_g if loss is None else loss + weights.generation * l_g
    return loss, parts
