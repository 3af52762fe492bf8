"""Joint retrieval + generation training loop.

Each step takes one interleaved retrieval batch (n single-source
sub-batches), the homogeneous generation samples attached to those pairs
and a handful of heterogeneous generation samples.  Both losses are
backpropagated into the same gradient buffers before one AdamW update.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from typing import Iterator, Optional, Sequence, TypeVar, Union

import numpy as np
import torch

from .data import Dataset, TrainPair, gen_qa
from .layout import Sample, assemble
from .model import ModelConfig, Parameters, init_params, save_checkpoint
from .objectives import (GateConfig, LossWeights, PoolingMethod, ScoringConfig, embed_batch,
                         info_nce, lm_loss_batch, sample_gate)

__all__ = [
    "TrainConfig", "OptimizerState", "TrainError", "interleaved_batches", "batch_stream",
    "lr_schedule", "optimizer_step", "init_optimizer", "train_step", "train", "StepMetrics",
]

log = logging.getLogger(__name__)
T = TypeVar("T")

_DTYPES = {"float32": torch.float32, "float64": torch.float64}


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = ModelConfig()
    steps: int = 2000
    warmup_steps: int = 100
    lr_max: float = 3e-3
    lr_min: float = 0.0
    retrieval_batch: int = 64
    gen_batch: int = 8
    n_subbatches: int = 2
    weights: LossWeights = LossWeights()
    gate: GateConfig = GateConfig()
    scoring: ScoringConfig = ScoringConfig()
    pooling: PoolingMethod = PoolingMethod.MEAN
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    gen_microbatches: int = 1
    native_batch: int = 8
    resample_qa: bool = True
    text_reconstruction: bool = False
    dtype: str = "float32"
    checkpoint_every: int = 0
    log_every: int = 50

    def __post_init__(self) -> None:
        if self.steps < 0 or self.warmup_steps < 0:
            raise TrainError("steps must be non-negative")
        if self.steps and self.warmup_steps >= self.steps:
            raise TrainError("warmup_steps must be smaller than steps")
        if self.retrieval_batch < 2:
            raise TrainError("retrieval batch needs at least 2 pairs for in-batch negatives")
        if self.n_subbatches < 1 or self.retrieval_batch % self.n_subbatches:
            raise TrainError("n_subbatches must divide retrieval_batch")
        if self.native_batch < 0 or self.gen_batch < 0:
            raise TrainError("gen_batch and native_batch must be non-negative")
        if self.gen_microbatches < 1:
            raise TrainError("gen_microbatches must be >= 1")
        if self.dtype not in _DTYPES:
            raise TrainError(f"dtype must be one of {sorted(_DTYPES)}")

    @property
    def torch_dtype(self) -> torch.dtype:
        return _DTYPES[self.dtype]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class OptimizerState:
    step: int
    m: dict[str, torch.Tensor]
    v: dict[str, torch.Tensor]


def init_optimizer(params: Parameters) -> OptimizerState:
    return OptimizerState(0, {k: torch.zeros_like(t) for k, t in params.tensors.items()},
                          {k: torch.zeros_like(t) for k, t in params.tensors.items()})


# -- data order ----------------------------------------------------------------

def interleaved_batches(datasets: Sequence[Sequence[T]], batch_size: int, n: int,
                        seed: int) -> Iterator[list[T]]:
    """One epoch of batches, each the concatenation of ``n`` single-source sub-batches.

    Every item of every dataset appears exactly once per epoch; the final
    sub-batch of a dataset may be short.
    """
    if n < 1 or batch_size % n:
        raise TrainError("n must divide batch_size")
    sub = batch_size // n
    rng = np.random.default_rng(seed)
    chunks = []
    for d, data in enumerate(datasets):
        if len(data) < sub:
            raise TrainError(f"dataset {d} has {len(data)} items, fewer than a sub-batch of {sub}")
        order = rng.permutation(len(data))
        chunks += [[data[i] for i in order[s:s + sub]] for s in range(0, len(data), sub)]
    perm = rng.permutation(len(chunks))
    for s in range(0, len(perm), n):
        yield [item for c in perm[s:s + n] for item in chunks[c]]


def batch_stream(datasets: Sequence[Sequence[T]], batch_size: int, n: int, seed: int) -> Iterator[list[T]]:
    """Endless stream of epochs; batches too small for in-batch negatives are skipped."""
    epoch = 0
    while True:
        for batch in interleaved_batches(datasets, batch_size, n, seed + 1000003 * epoch):
            if len(batch) >= 2:
                yield batch
        epoch += 1


def _cycle(items: Sequence[T], seed: int) -> Iterator[T]:
    epoch = 0
    while True:
        for i in np.random.default_rng(seed + 7919 * epoch).permutation(len(items)):
            yield items[i]
        epoch += 1


# -- schedule / optimizer ------------------------------------------------------

def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_min at ``config.steps``."""
    if not 0 <= step <= config.steps:
        raise TrainError(f"step {step} outside [0, {config.steps}]")
    if step < config.warmup_steps:
        return config.lr_max * step / config.warmup_steps
    span = config.steps - config.warmup_steps
    progress = (step - config.warmup_steps) / span if span else 1.0
    return config.lr_min + 0.5 * (config.lr_max - config.lr_min) * (1 + math.cos(math.pi * progress))


@torch.no_grad()
def optimizer_step(params: Parameters, grads: dict[str, torch.Tensor], state: OptimizerState,
                   lr: float, config: TrainConfig) -> None:
    """AdamW update in place: decay ``p *= 1 - lr*wd`` then the bias-corrected Adam step."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainError(f"non-finite gradient in {name!r} at step {state.step + 1}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, p in params.tensors.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        if config.weight_decay:
            p.mul_(1 - lr * config.weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + config.eps))


# -- steps ---------------------------------------------------------------------

@dataclass
class StepMetrics:
    step: int
    lr: float
    retrieval: float
    generation: float
    total: float
    z_rate: float
    n_gen: int
    seconds: float = 0.0

    def record(self) -> dict:
        return {"step": self.step, "lr": self.lr, "L_r": self.retrieval, "L_g": self.generation,
                "total": self.total, "z_rate": self.z_rate, "n_gen": self.n_gen,
                "seconds": round(self.seconds, 4)}


def _fresh_qa(sample: Sample, rng: Optional[np.random.Generator]) -> Sample:
    """Same image, newly drawn question; identity when ``rng`` is None."""
    if rng is None:
        return sample
    q, a = gen_qa(sample.image, int(rng.integers(2**62)))
    return dataclasses.replace(sample, g_inst=q, answer=a)


def _generation_samples(batch: Sequence[TrainPair], config: TrainConfig,
                        qa_rng: Optional[np.random.Generator] = None) -> list[Sample]:
    out = []
    for pair in batch:
        if pair.qa is None or (pair.source != "i2t" and not config.text_reconstruction):
            continue
        sample = pair.generation_sample()
        out.append(_fresh_qa(sample, qa_rng) if pair.source == "i2t" else sample)
    return out


def train_step(params: Parameters, state: OptimizerState, retrieval_batch: Sequence[TrainPair],
               gen_samples: Sequence[Sample], config: TrainConfig, step: int,
               rng: np.random.Generator, native_samples: Sequence[Sample] = ()) -> StepMetrics:
    """One accumulated update; ``gen_samples`` holds homogeneous + heterogeneous samples.

    ``native_samples`` are trained in the chorus-free layout under a plain
    causal mask and share L_g with the gated samples.  Gradients of
    alpha_r * L_r and alpha_g * L_g are accumulated separately (generation
    optionally over several micro-batches) before the update.
    """
    t0 = time.perf_counter()
    w = config.weights
    tensors = params.tensors
    for t in tensors.values():
        t.requires_grad_(True)
        t.grad = None
    try:
        l_r = 0.0
        if retrieval_batch and w.retrieval > 0:
            q = embed_batch(params, [p.query for p in retrieval_batch], config.pooling)
            tg = embed_batch(params, [p.target for p in retrieval_batch], config.pooling)
            loss_r = info_nce(q, tg, config.scoring.temperature)
            if not torch.isfinite(loss_r):
                raise TrainError(f"non-finite retrieval loss at step {step}")
            (w.retrieval * loss_r).backward()
            l_r = loss_r.item()

        zs = [sample_gate(config.gate, rng) for _ in gen_samples]
        l_g = 0.0
        if (gen_samples or native_samples) and w.generation > 0:
            layouts = [assemble(s, "joint", params.config) for s in gen_samples]
            layouts += [assemble(s, "native", params.config) for s in native_samples]
            all_zs = zs + [0] * len(native_samples)
            n = len(layouts)
            bounds = np.linspace(0, n, min(config.gen_microbatches, n) + 1).astype(int)
            for a, b in zip(bounds[:-1], bounds[1:]):
                part = lm_loss_batch(params, layouts[a:b], all_zs[a:b])
                if not torch.isfinite(part):
                    raise TrainError(f"non-finite generation loss at step {step}")
                (w.generation * part * ((b - a) / n)).backward()
                l_g += part.item() * (b - a) / n

        grads = {k: (t.grad if t.grad is not None else torch.zeros_like(t)) for k, t in tensors.items()}
    finally:
        for t in tensors.values():
            t.requires_grad_(False)
    lr = lr_schedule(step, config)
    optimizer_step(params, grads, state, lr, config)
    for t in tensors.values():
        t.grad = None
    return StepMetrics(step, lr, l_r, l_g, w.retrieval * l_r + w.generation * l_g,
                       float(np.mean(zs)) if zs else 0.0, len(gen_samples) + len(native_samples),
                       time.perf_counter() - t0)


def train(config: TrainConfig, dataset: Dataset, seed: int,
          out_dir: Optional[Union[str, os.PathLike]] = None,
          params: Optional[Parameters] = None) -> tuple[Parameters, list[StepMetrics]]:
    """Full run; deterministic given (config, dataset, seed).

    Writes ``metrics.jsonl``, periodic ``step_XXXXXX.ckpt`` files and
    ``final.ckpt`` into ``out_dir`` when given.
    """
    torch.manual_seed(seed)
    if params is None:
        params = init_params(config.model, seed, config.torch_dtype)
    else:
        params = params.to(config.torch_dtype)
    state = init_optimizer(params)
    rng = np.random.default_rng(seed)
    sources = dataset.sources()
    batches = batch_stream(sources, config.retrieval_batch, config.n_subbatches, seed)
    hetero = _cycle(dataset.hetero, seed + 1) if dataset.hetero else None
    native = _cycle(dataset.hetero, seed + 2) if dataset.hetero and config.native_batch else None
    qa_rng = np.random.default_rng(seed + 3) if config.resample_qa else None

    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.jsonl"), "w", encoding="utf-8")
    history = []
    try:
        for step in range(1, config.steps + 1):
            batch = next(batches)
            gens = _generation_samples(batch, config, qa_rng)
            if hetero is not None:
                gens += [_fresh_qa(next(hetero), qa_rng) for _ in range(config.gen_batch)]
            natives = []
            if native is not None:
                natives = [_fresh_qa(next(native), qa_rng) for _ in range(config.native_batch)]
            m = train_step(params, state, batch, gens, config, step, rng, natives)
            history.append(m)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(m.record()) + "\n")
            if config.log_every and step % config.log_every == 0:
                log.info("step %d lr %.2e L_r %.4f L_g %.4f total %.4f", step, m.lr,
                         m.retrieval, m.generation, m.total)
            if out_dir is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                _save(os.path.join(out_dir, f"step_{step:06d}.ckpt"), params, step)
        if out_dir is not None:
            _save(os.path.join(out_dir, "final.ckpt"), params, config.steps)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return params, history


def _save(path: str, params: Parameters, step: int) -> None:
    try:
        save_checkpoint(path, params)
    except OSError as exc:
        raise TrainError(f"step {step}: could not write checkpoint {path}: {exc}") from exc
