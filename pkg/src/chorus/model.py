"""Tiny decoder-only transformer with explicit masks and rotary positions.

Parameters live in a flat ``name -> tensor`` dict so that optimizer,
gradient checker and checkpoint code can treat them uniformly.  The
forward pass is a plain function of ``(params, tokens, positions, mask)``.

Checkpoint layout (little endian)::

    b"CHRS" | u32 version
    u32 n_fields, then per field: u16 len, utf-8 name, u8 type ('i' or 'f'), i64 or f64 value
    u32 n_tensors, then per tensor: u16 len, utf-8 name, u32 ndim, u32 dims[ndim],
        float32 data in row-major order
"""
from __future__ import annotations

import dataclasses
import io
import math
import os
import struct
from dataclasses import dataclass
from typing import Callable, Mapping, MutableMapping, Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .layout import VOCAB
from .masks import AttentionMask

__all__ = [
    "ModelConfig", "Parameters", "ForwardOutput", "ModelError",
    "init_params", "forward", "forward_batch", "forward_cached", "output_head",
    "check_gradients", "save_checkpoint", "load_checkpoint", "checkpoint_bytes",
]

CHECKPOINT_MAGIC = b"CHRS"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = len(VOCAB)
    k_chorus: int = 16
    max_seq: int = 256
    rope_base: float = 10000.0

    def __post_init__(self) -> None:
        if self.num_layers < 0 or self.num_heads < 1 or self.d_model < 1 or self.d_ff < 1:
            raise ModelError("model dimensions must be positive")
        if self.d_model % self.num_heads:
            raise ModelError(f"d_model={self.d_model} not divisible by num_heads={self.num_heads}")
        if (self.d_model // self.num_heads) % 2:
            raise ModelError("rotary encoding needs an even head dimension")
        if self.k_chorus < 1:
            raise ModelError("k_chorus must be >= 1")
        if self.vocab_size < len(VOCAB):
            raise ModelError(f"vocab_size={self.vocab_size} smaller than vocabulary ({len(VOCAB)})")
        if self.max_seq < 1 or self.rope_base <= 0:
            raise ModelError("max_seq and rope_base must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.num_heads


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, torch.Tensor]

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def to(self, dtype: torch.dtype) -> "Parameters":
        return Parameters(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    def clone(self) -> "Parameters":
        return Parameters(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def num_params(self) -> int:
        return sum(v.numel() for v in self.tensors.values())

    def equal(self, other: "Parameters") -> bool:
        return (self.config == other.config and self.tensors.keys() == other.tensors.keys()
                and all(torch.equal(v, other.tensors[k]) for k, v in self.tensors.items()))


@dataclass
class ForwardOutput:
    hidden: torch.Tensor
    logits: torch.Tensor
    attentions: Optional[list[torch.Tensor]] = None


def init_params(config: ModelConfig, seed: int, dtype: torch.dtype = torch.float64) -> Parameters:
    """Scaled-normal weights, unit norm gains, zero biases."""
    g = torch.Generator().manual_seed(seed)
    d, f = config.d_model, config.d_ff
    resid_scale = 1.0 / math.sqrt(2 * max(config.num_layers, 1))

    def normal(*shape: int, std: float) -> torch.Tensor:
        return torch.randn(*shape, generator=g, dtype=torch.float64).mul_(std).to(dtype)

    t: dict[str, torch.Tensor] = {"tok_emb": normal(config.vocab_size, d, std=1 / math.sqrt(d))}
    for layer in range(config.num_layers):
        p = f"layers.{layer}."
        t[p + "attn_norm.g"] = torch.ones(d, dtype=dtype)
        t[p + "attn_norm.b"] = torch.zeros(d, dtype=dtype)
        for name in ("q", "k", "v"):
            t[p + "w" + name] = normal(d, d, std=1 / math.sqrt(d))
            t[p + "b" + name] = torch.zeros(d, dtype=dtype)
        t[p + "wo"] = normal(d, d, std=resid_scale / math.sqrt(d))
        t[p + "mlp_norm.g"] = torch.ones(d, dtype=dtype)
        t[p + "mlp_norm.b"] = torch.zeros(d, dtype=dtype)
        t[p + "w1"] = normal(d, f, std=1 / math.sqrt(d))
        t[p + "b1"] = torch.zeros(f, dtype=dtype)
        t[p + "w2"] = normal(f, d, std=resid_scale / math.sqrt(f))
        t[p + "b2"] = torch.zeros(d, dtype=dtype)
    t["final_norm.g"] = torch.ones(d, dtype=dtype)
    t["final_norm.b"] = torch.zeros(d, dtype=dtype)
    # pooling heads, used only by the non-mean pooling variants
    t["pool.mlp.w1"] = normal(d, d, std=1 / math.sqrt(d))
    t["pool.mlp.b1"] = torch.zeros(d, dtype=dtype)
    t["pool.mlp.w2"] = normal(d, d, std=1 / math.sqrt(d))
    t["pool.mlp.b2"] = torch.zeros(d, dtype=dtype)
    t["pool.attn.query"] = normal(d, std=1 / math.sqrt(d))
    t["pool.attn.wk"] = normal(d, d, std=1 / math.sqrt(d))
    return Parameters(config, t)


def _rotate(x: torch.Tensor, positions: torch.Tensor, base: float) -> torch.Tensor:
    """Rotary encoding; ``x`` is [B, H, L, hd], ``positions`` is [B, L]."""
    half = x.shape[-1] // 2
    inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
    angles = positions.to(torch.float64)[..., None] * inv_freq
    cos = torch.cos(angles).to(x.dtype)[:, None]
    sin = torch.sin(angles).to(x.dtype)[:, None]
    x1, x2 = x[..., :half], x[..., half:]
    return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


def _norm(x: torch.Tensor, t: Mapping[str, torch.Tensor], name: str) -> torch.Tensor:
    return F.layer_norm(x, (x.shape[-1],), t[name + ".g"], t[name + ".b"], eps=1e-5)


def output_head(params: Parameters, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Final norm then the tied projection; returns (normed states, logits)."""
    h = _norm(x, params.tensors, "final_norm")
    return h, h @ params.tensors["tok_emb"].T


def _run(params: Parameters, tokens: torch.Tensor, positions: torch.Tensor, allowed: torch.Tensor,
         past: Optional[list[tuple[torch.Tensor, torch.Tensor]]] = None, need_attn: bool = False):
    cfg, t = params.config, params.tensors
    B, L = tokens.shape
    H, hd = cfg.num_heads, cfg.head_dim
    x = t["tok_emb"][tokens]
    visible = allowed[:, None]
    blocked = ~visible
    present, attns = [], []
    for layer in range(cfg.num_layers):
        p = f"layers.{layer}."
        h = _norm(x, t, p + "attn_norm")
        q = (h @ t[p + "wq"] + t[p + "bq"]).view(B, L, H, hd).transpose(1, 2)
        k = (h @ t[p + "wk"] + t[p + "bk"]).view(B, L, H, hd).transpose(1, 2)
        v = (h @ t[p + "wv"] + t[p + "bv"]).view(B, L, H, hd).transpose(1, 2)
        q = _rotate(q, positions, cfg.rope_base)
        k = _rotate(k, positions, cfg.rope_base)
        if past is not None:
            k = torch.cat([past[layer][0], k], dim=2)
            v = torch.cat([past[layer][1], v], dim=2)
        present.append((k, v))
        if need_attn:
            scores = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
            scores = scores.masked_fill(blocked, float("-inf"))
            # softmax subtracts the row max before exponentiating
            attn = torch.softmax(scores, dim=-1)
            attns.append(attn)
            out = attn @ v
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=visible)
        out = out.transpose(1, 2).reshape(B, L, cfg.d_model)
        x = x + out @ t[p + "wo"]
        h = _norm(x, t, p + "mlp_norm")
        x = x + F.gelu(h @ t[p + "w1"] + t[p + "b1"]) @ t[p + "w2"] + t[p + "b2"]
    hidden, logits = output_head(params, x)
    return hidden, logits, present, attns


def _check_inputs(params: Parameters, tokens, n_keys: int, allowed: np.ndarray) -> None:
    cfg = params.config
    if n_keys > cfg.max_seq:
        raise ModelError(f"length {n_keys} exceeds max_seq {cfg.max_seq}")
    tok = np.asarray(tokens)
    if tok.size and (tok.min() < 0 or tok.max() >= cfg.vocab_size):
        raise ModelError("token id out of vocabulary")
    if not allowed.any(axis=-1).all():
        raise ModelError("attention mask has a fully blocked row")


def forward(params: Parameters, tokens, positions, mask: AttentionMask, *,
            need_attn: bool = False) -> ForwardOutput:
    """Single-sequence forward pass.  Positions are rotary indices, not offsets."""
    allowed = mask.allowed
    n = len(tokens)
    if len(positions) != n or allowed.shape != (n, n):
        raise ModelError(f"tokens ({n}), positions ({len(positions)}) and mask {allowed.shape} disagree")
    _check_inputs(params, tokens, n, allowed)
    tok = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
    pos = torch.as_tensor(np.asarray(positions, dtype=np.int64))[None]
    hidden, logits, _, attns = _run(params, tok, pos, torch.as_tensor(allowed)[None], need_attn=need_attn)
    return ForwardOutput(hidden[0], logits[0], [a[0] for a in attns] if need_attn else None)


def forward_batch(params: Parameters, tokens: torch.Tensor, positions: torch.Tensor,
                  allowed: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Batched forward over padded [B, L] inputs and a [B, L, L] mask; returns (hidden, logits)."""
    hidden, logits, _, _ = _run(params, tokens, positions, allowed)
    return hidden, logits


def forward_cached(params: Parameters, tokens, positions, allowed: np.ndarray,
                   past: Optional[list[tuple[torch.Tensor, torch.Tensor]]] = None):
    """Incremental forward.

    ``past`` holds per-layer (keys, values) of shape [H, n_past, hd] with keys
    already rotated; ``allowed`` is [L_new, n_past + L_new].  Returns the
    output for the new tokens and the per-layer (keys, values) of only the
    new tokens.
    """
    n_past = 0 if past is None else past[0][0].shape[1]
    n = len(tokens)
    if allowed.shape != (n, n_past + n):
        raise ModelError(f"mask shape {allowed.shape} != ({n}, {n_past + n})")
    _check_inputs(params, tokens, n_past + n, allowed)
    tok = torch.as_tensor(np.asarray(tokens, dtype=np.int64))[None]
    pos = torch.as_tensor(np.asarray(positions, dtype=np.int64))[None]
    batched_past = None if past is None else [(k[None], v[None]) for k, v in past]
    hidden, logits, present, _ = _run(params, tok, pos, torch.as_tensor(allowed)[None], batched_past)
    new_kv = [(k[0, :, n_past:], v[0, :, n_past:]) for k, v in present]
    return ForwardOutput(hidden[0], logits[0]), new_kv


TensorMap = Union[Parameters, MutableMapping[str, torch.Tensor]]


def check_gradients(params: TensorMap, loss_fn: Callable[[TensorMap], torch.Tensor],
                    epsilon: float = 1e-5, per_tensor: int = 4, seed: int = 0) -> float:
    """Max relative error between autograd and central differences.

    Samples ``per_tensor`` entries from every tensor and returns
    ``max |g - cd| / max(|g|, |cd|, 1e-8)``.
    """
    source = params.tensors if isinstance(params, Parameters) else params
    leaves = {k: v.detach().to(torch.float64).clone().requires_grad_(True) for k, v in source.items()}
    wrapped = Parameters(params.config, leaves) if isinstance(params, Parameters) else leaves

    loss = loss_fn(wrapped)
    if not torch.isfinite(loss):
        raise ModelError(f"non-finite loss {loss.item()}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for name, grad in zip(names, grads):
            flat = leaves[name].view(-1)
            gflat = torch.zeros_like(flat) if grad is None else grad.reshape(-1)
            idx = rng.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + epsilon
                up = loss_fn(wrapped).item()
                flat[i] = orig - epsilon
                down = loss_fn(wrapped).item()
                flat[i] = orig
                cd = (up - down) / (2 * epsilon)
                a = gflat[i].item()
                worst = max(worst, abs(a - cd) / max(abs(a), abs(cd), 1e-8))
    return worst


def _write_checkpoint(fh, params: Parameters) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<I", CHECKPOINT_VERSION))
    fields = dataclasses.fields(params.config)
    fh.write(struct.pack("<I", len(fields)))
    for fld in fields:
        name = fld.name.encode()
        value = getattr(params.config, fld.name)
        fh.write(struct.pack("<H", len(name)) + name)
        if isinstance(value, float):
            fh.write(b"f" + struct.pack("<d", value))
        else:
            fh.write(b"i" + struct.pack("<q", value))
    fh.write(struct.pack("<I", len(params.tensors)))
    for name, tensor in params.tensors.items():
        raw = name.encode()
        arr = tensor.detach().cpu().numpy().astype("<f4", order="C")
        fh.write(struct.pack("<H", len(raw)) + raw)
        fh.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def checkpoint_bytes(params: Parameters) -> bytes:
    buf = io.BytesIO()
    _write_checkpoint(buf, params)
    return buf.getvalue()


def save_checkpoint(path: Union[str, os.PathLike], params: Parameters) -> None:
    with open(path, "wb") as fh:
        _write_checkpoint(fh, params)


def load_checkpoint(path: Union[str, os.PathLike], dtype: torch.dtype = torch.float64) -> Parameters:
    with open(path, "rb") as fh:
        data = fh.read()
    view = memoryview(data)
    off = 0

    def take(fmt: str):
        nonlocal off
        vals = struct.unpack_from(fmt, view, off)
        off += struct.calcsize(fmt)
        return vals

    if bytes(view[:4]) != CHECKPOINT_MAGIC:
        raise ModelError(f"{path}: not a checkpoint (bad magic)")
    off = 4
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise ModelError(f"{path}: unsupported checkpoint version {version}")
    (n_fields,) = take("<I")
    cfg = {}
    for _ in range(n_fields):
        (n,) = take("<H")
        name = bytes(view[off:off + n]).decode()
        off += n
        kind = bytes(view[off:off + 1])
        off += 1
        (cfg[name],) = take("<d" if kind == b"f" else "<q")
    (n_tensors,) = take("<I")
    tensors = {}
    for _ in range(n_tensors):
        (n,) = take("<H")
        name = bytes(view[off:off + n]).decode()
        off += n
        (ndim,) = take("<I")
        dims = take(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims)
        off += 4 * count
        tensors[name] = torch.from_numpy(arr.astype(np.float64)).to(dtype)
    return Parameters(ModelConfig(**cfg), tensors)
