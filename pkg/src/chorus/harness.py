"""Evaluation metrics, report assembly and chorus attention heatmaps."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .data import Dataset, EvalItem
from .layout import Sample
from .inference import GenerationConfig, encode_batch, generate_compressed, generate_native
from .layout import SegmentKind, Task, assemble
from .masks import build_mask
from .model import Parameters, forward
from .objectives import PoolingMethod

__all__ = [
    "EvalReport", "HarnessError", "precision_at_1", "answer_accuracy", "attention_heatmap",
    "heatmap_assignment", "heatmap_coverage", "evaluate", "heatmap_svg",
]


class HarnessError(ValueError):
    pass


def _unit(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def precision_at_1(query_embs: np.ndarray, pools: Sequence[tuple[np.ndarray, int]]) -> float:
    """Fraction of queries whose cosine-nearest candidate is the positive.

    ``pools[i]`` is ``(candidates [P, d], positive_index)``.  Ties go to the
    lowest candidate index.
    """
    if len(query_embs) != len(pools):
        raise HarnessError("one pool per query required")
    hits = 0
    for q, (cands, pos) in zip(query_embs, pools):
        if len(cands) == 0:
            raise HarnessError("empty candidate pool")
        scores = _unit(cands) @ _unit(q)
        hits += int(np.argmax(scores) == pos)
    return hits / len(pools)


def _normalize(text: str) -> str:
    return " ".join(text.split())


def answer_accuracy(model_outputs: Sequence[str], gold_answers: Sequence[str]) -> float:
    if len(model_outputs) != len(gold_answers):
        raise HarnessError(f"{len(model_outputs)} outputs vs {len(gold_answers)} answers")
    if not gold_answers:
        return 0.0
    return sum(_normalize(a) == _normalize(b) for a, b in zip(model_outputs, gold_answers)) / len(gold_answers)


@torch.no_grad()
def attention_heatmap(params: Parameters, sample: Sample, layer: Optional[int] = None) -> np.ndarray:
    """Head-averaged chorus -> vision attention at ``layer``, rows renormalised over vision keys.

    Returns a [k, |V|] matrix.  ``layer`` defaults to the middle layer.
    """
    cfg = params.config
    if layer is None:
        layer = cfg.num_layers // 2
    if not 0 <= layer < cfg.num_layers:
        raise HarnessError(f"layer {layer} outside [0, {cfg.num_layers})")
    layout = assemble(sample, "embed", cfg)
    v, u = layout.span(SegmentKind.V), layout.span(SegmentKind.U)
    if v is None or len(v) == 0:
        raise HarnessError("sample has no vision tokens")
    out = forward(params, layout.tokens, range(len(layout)), build_mask(layout, True), need_attn=True)
    attn = out.attentions[layer].mean(dim=0)[u.start:u.end, v.start:v.end].to(torch.float64).numpy()
    return attn / attn.sum(axis=1, keepdims=True)


def heatmap_assignment(heatmap: np.ndarray) -> np.ndarray:
    """Per vision token, the chorus row attending to it most."""
    return np.argmax(heatmap, axis=0)


def heatmap_coverage(heatmap: np.ndarray) -> float:
    """Fraction of vision tokens that some chorus row gives more than uniform mass."""
    return float((heatmap.max(axis=0) > 1.0 / heatmap.shape[1]).mean())


def heatmap_svg(heatmap: np.ndarray, cell: int = 18) -> str:
    """Plain SVG grid: one row per chorus token, one column per vision token, darker = more mass."""
    k, n = heatmap.shape
    peak = heatmap.max() or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{n * cell}" height="{k * cell}">']
    for i in range(k):
        for j in range(n):
            shade = int(255 * (1 - heatmap[i, j] / peak))
            parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" '
                         f'fill="rgb({shade},{shade},255)"/>')
    parts.append("</svg>")
    return "\n".join(parts)


@dataclass
class EvalReport:
    precision_at_1: float
    native_accuracy: float
    compressed_accuracy: float
    retention: Optional[float]
    per_task: dict = field(default_factory=dict)
    n_queries: int = 0
    n_qa: int = 0
    cache: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _question_kind(question: str) -> str:
    return "count" if question.startswith("how many") else "color"


def evaluate(params: Parameters, dataset: Dataset, *, pooling: PoolingMethod = PoolingMethod.MEAN,
             n_queries: Optional[int] = None, n_qa: Optional[int] = None,
             gen_cfg: GenerationConfig = GenerationConfig(max_new_tokens=4)) -> EvalReport:
    """Retrieval Precision@1 over the eval pools plus native / compressed QA accuracy."""
    items: list[EvalItem] = dataset.eval
    params = params.to(torch.float32) if params.dtype != torch.float32 else params
    queries = items[:n_queries] if n_queries else items
    q_emb = encode_batch(params, [e.query for e in queries], pooling)
    c_emb = encode_batch(params, [Sample(e.caption, task=Task.RETRIEVAL_TARGET) for e in items], pooling)
    p1 = precision_at_1(q_emb, [(c_emb[e.pool], e.positive) for e in queries])

    qa_items = items[:n_qa] if n_qa else items
    gold = [e.qa[1] for e in qa_items]
    native = [generate_native(params, e.qa_sample(), gen_cfg).text() for e in qa_items]
    comp_results = [generate_compressed(params, e.qa_sample(), gen_cfg) for e in qa_items]
    compressed = [r.text() for r in comp_results]
    nat_acc = answer_accuracy(native, gold)
    comp_acc = answer_accuracy(compressed, gold)

    per_task = {}
    for kind in ("color", "count"):
        idx = [i for i, e in enumerate(qa_items) if _question_kind(e.qa[0]) == kind]
        if idx:
            per_task[kind] = {
                "n": len(idx),
                "native_accuracy": answer_accuracy([native[i] for i in idx], [gold[i] for i in idx]),
                "compressed_accuracy": answer_accuracy([compressed[i] for i in idx], [gold[i] for i in idx]),
            }
    cache = comp_results[0].stats.record() if comp_results else {}
    return EvalReport(p1, nat_acc, comp_acc, comp_acc / nat_acc if nat_acc > 0 else None,
                      per_task, len(queries), len(qa_items), cache)
