"""Embedding, native generation and chorus-compressed generation.

Compressed generation prefills ``SYS V T U``, drops every vision/text
entry from the KV cache and decodes with only the system prefix and the
chorus entries left.  Surviving entries keep their original rotary
positions, so the decode is numerically the masked full forward.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import torch

from .layout import VOCAB, PromptLayout, Sample, SegmentKind, assemble
from .model import ModelError, Parameters, forward_cached
from .objectives import PoolingMethod, embed_batch

__all__ = [
    "SegmentedKVCache", "GenerationConfig", "GenerationResult", "CacheStats", "InferenceError",
    "encode", "encode_batch", "generate_native", "generate_compressed", "cache_ratio", "prefill",
    "write_embeddings", "read_embeddings", "write_embeddings_csv",
]


class InferenceError(ValueError):
    pass


@dataclass
class SegmentedKVCache:
    """Per-layer rotated keys/values [H, n, hd] plus per-entry segment tag and position."""

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    kinds: np.ndarray
    positions: np.ndarray

    @classmethod
    def empty(cls) -> "SegmentedKVCache":
        return cls([], [], np.zeros(0, dtype=np.int8), np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.kinds)

    def past(self) -> Optional[list[tuple[torch.Tensor, torch.Tensor]]]:
        return list(zip(self.keys, self.values)) if len(self) else None

    def append(self, new_kv: list[tuple[torch.Tensor, torch.Tensor]], kinds: Sequence[int],
               positions: Sequence[int]) -> None:
        if not len(self):
            self.keys = [k for k, _ in new_kv]
            self.values = [v for _, v in new_kv]
        else:
            self.keys = [torch.cat([a, k], dim=1) for a, (k, _) in zip(self.keys, new_kv)]
            self.values = [torch.cat([a, v], dim=1) for a, (_, v) in zip(self.values, new_kv)]
        self.kinds = np.concatenate([self.kinds, np.asarray(kinds, dtype=np.int8)])
        self.positions = np.concatenate([self.positions, np.asarray(positions, dtype=np.int64)])

    def prune(self, kinds: Sequence[SegmentKind] = (SegmentKind.V, SegmentKind.T)) -> int:
        """Drop entries tagged with ``kinds``; returns how many were removed."""
        keep = ~np.isin(self.kinds, [int(k) for k in kinds])
        idx = torch.from_numpy(np.flatnonzero(keep))
        removed = int((~keep).sum())
        self.keys = [k.index_select(1, idx) for k in self.keys]
        self.values = [v.index_select(1, idx) for v in self.values]
        self.kinds = self.kinds[keep]
        self.positions = self.positions[keep]
        return removed

    def count(self, kind: SegmentKind) -> int:
        return int((self.kinds == int(kind)).sum())


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 8
    temperature: float = 0.0
    seed: int = 0
    stop_token: int = VOCAB.eos

    def __post_init__(self) -> None:
        if self.max_new_tokens < 1:
            raise InferenceError("max_new_tokens must be >= 1")
        if self.temperature < 0:
            raise InferenceError("temperature must be >= 0 (0 means greedy)")


@dataclass
class CacheStats:
    n_full: int
    retained: int
    chorus: int

    @property
    def ratio(self) -> float:
        return cache_ratio(self.chorus, self.n_full) if self.chorus else 100.0

    def record(self) -> dict:
        return {"n_full": self.n_full, "retained": self.retained, "chorus": self.chorus,
                "cache_ratio": self.ratio}


@dataclass
class GenerationResult:
    tokens: list[int]
    step_logits: list[np.ndarray] = field(repr=False)
    positions: list[int]
    stats: CacheStats

    def text(self) -> str:
        return VOCAB.decode(self.tokens)


def cache_ratio(k_kept: int, n_full: int) -> float:
    """Retained prefill entries as a percentage of the unpruned prefill."""
    if n_full <= 0:
        raise InferenceError("n_full must be positive")
    if not 0 < k_kept <= n_full:
        raise InferenceError(f"k_kept={k_kept} must lie in (0, {n_full}]")
    return 100.0 * k_kept / n_full


def encode(params: Parameters, sample: Sample, method: PoolingMethod = PoolingMethod.MEAN) -> np.ndarray:
    return encode_batch(params, [sample], method)[0]


@torch.no_grad()
def encode_batch(params: Parameters, samples: Sequence[Sample],
                 method: PoolingMethod = PoolingMethod.MEAN, batch_size: int = 128) -> np.ndarray:
    out = []
    for s in range(0, len(samples), batch_size):
        layouts = [assemble(x, "embed", params.config) for x in samples[s:s + batch_size]]
        for lay in layouts:
            if lay.span(SegmentKind.U) is None:
                raise InferenceError("embedding prompt lacks a chorus span")
        out.append(embed_batch(params, None, method, layouts).to(torch.float64).numpy())
    return np.concatenate(out)


def _visible(cache: SegmentedKVCache, new_kinds: np.ndarray, compressed: bool) -> np.ndarray:
    """Mask rows for new tokens appended after ``cache``: causal, plus the Q/A -> V/T block."""
    n_new = len(new_kinds)
    allowed = np.concatenate([np.ones((n_new, len(cache)), dtype=bool),
                              np.tril(np.ones((n_new, n_new), dtype=bool))], axis=1)
    if compressed:
        key_kinds = np.concatenate([cache.kinds, new_kinds])
        readers = np.isin(new_kinds, [int(SegmentKind.Q), int(SegmentKind.A)])
        sources = np.isin(key_kinds, [int(SegmentKind.V), int(SegmentKind.T)])
        allowed &= ~(readers[:, None] & sources[None, :])
    return allowed


@torch.no_grad()
def prefill(params: Parameters, layout: PromptLayout, compressed: bool,
            cache: Optional[SegmentedKVCache] = None, start: int = 0):
    """Run ``layout.tokens[start:]`` through the model, extending ``cache``.

    Rotary positions are the layout indices.  Returns (logits of the last
    token, cache).
    """
    cache = cache if cache is not None else SegmentedKVCache.empty()
    kinds = layout.kinds()[start:]
    positions = np.arange(start, len(layout))
    allowed = _visible(cache, kinds, compressed)
    out, new_kv = forward_cached(params, layout.tokens[start:], positions, allowed, cache.past())
    cache.append(new_kv, kinds, positions)
    return out.logits[-1], cache


def _pick(logits: torch.Tensor, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.temperature == 0:
        return int(torch.argmax(logits))
    p = torch.softmax(logits.to(torch.float64) / cfg.temperature, dim=-1).numpy()
    return int(rng.choice(len(p), p=p / p.sum()))


@torch.no_grad()
def _decode(params: Parameters, cache: SegmentedKVCache, logits: torch.Tensor, next_pos: int,
            cfg: GenerationConfig, compressed: bool, stats: CacheStats) -> GenerationResult:
    rng = np.random.default_rng(cfg.seed)
    tokens, step_logits, positions = [], [], []
    answer_kind = np.array([int(SegmentKind.A)], dtype=np.int8)
    for i in range(cfg.max_new_tokens):
        step_logits.append(logits.to(torch.float64).numpy().copy())
        positions.append(next_pos - 1)
        tok = _pick(logits, cfg, rng)
        tokens.append(tok)
        if tok == cfg.stop_token or i == cfg.max_new_tokens - 1:
            break
        if next_pos + 1 > params.config.max_seq:
            raise InferenceError(f"context overflow at position {next_pos}")
        out, new_kv = forward_cached(params, [tok], [next_pos], _visible(cache, answer_kind, compressed),
                                     cache.past())
        cache.append(new_kv, answer_kind, [next_pos])
        logits = out.logits[-1]
        next_pos += 1
    return GenerationResult(tokens, step_logits, positions, stats)


def generate_native(params: Parameters, sample: Sample,
                    gen_cfg: GenerationConfig = GenerationConfig(), *,
                    native_keeps_einst: bool = True) -> GenerationResult:
    """Plain causal decoding of the chorus-free prompt with a full KV cache."""
    try:
        layout = assemble(sample, "native", params.config, with_answer=False,
                          native_keeps_einst=native_keeps_einst)
    except ValueError as exc:
        raise InferenceError(str(exc)) from exc
    if layout.span(SegmentKind.U) is not None:
        raise InferenceError("native prompts carry no chorus span")
    logits, cache = prefill(params, layout, compressed=False)
    stats = CacheStats(len(cache), len(cache), 0)
    return _decode(params, cache, logits, len(layout), gen_cfg, False, stats)


def generate_compressed(params: Parameters, sample: Sample,
                        gen_cfg: GenerationConfig = GenerationConfig()) -> GenerationResult:
    """Prefill up to the chorus, prune vision/text entries, then decode.

    Phase 1 runs ``SYS V T U`` once.  Phase 2 deletes the V/T cache entries.
    Phase 3 appends the generation instruction and assistant marker at
    their original positions and decodes the answer against the survivors.
    """
    try:
        layout = assemble(sample, "joint", params.config, with_answer=False)
    except ValueError as exc:
        raise InferenceError(str(exc)) from exc
    u = layout.span(SegmentKind.U)
    if u is None or len(u) == 0:
        raise InferenceError("compressed generation needs chorus tokens")
    prefix = PromptLayout(layout.tokens[:u.end], tuple(s for s in layout.spans if s.end <= u.end))
    _, cache = prefill(params, prefix, compressed=True)
    n_full = len(cache)
    cache.prune()
    stats = CacheStats(n_full, len(cache), cache.count(SegmentKind.U))
    logits, cache = prefill(params, layout, compressed=True, cache=cache, start=u.end)
    return _decode(params, cache, logits, len(layout), gen_cfg, True, stats)


# -- embedding export ------------------------------------------------------
#
# Binary layout: little-endian uint32 count, uint32 dim, then count*dim
# float32 values row-major.  The CSV alternative has one row per vector.

def write_embeddings(path: Union[str, os.PathLike], embeddings: np.ndarray) -> None:
    emb = np.ascontiguousarray(embeddings, dtype="<f4")
    if emb.ndim != 2:
        raise InferenceError("embeddings must be a [count, dim] matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *emb.shape))
        fh.write(emb.tobytes())


def read_embeddings(path: Union[str, os.PathLike]) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise InferenceError(f"{path}: truncated header")
        count, dim = struct.unpack("<II", head)
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != count * dim:
        raise InferenceError(f"{path}: expected {count}x{dim} floats, found {data.size}")
    return data.reshape(count, dim)


def write_embeddings_csv(path: Union[str, os.PathLike], embeddings: np.ndarray) -> None:
    np.savetxt(path, np.asarray(embeddings, dtype=np.float32), delimiter=",", fmt="%.8g")
