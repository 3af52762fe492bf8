"""Compression-aware attention masks derived from a :class:`PromptLayout`.

Question and answer rows never see vision or embedding-text keys; every
other pair follows plain causality.  Chorus rows are therefore the only
route from the raw inputs to the answer.
"""
from __future__ import annotations

import random
from dataclasses import dataclass

import numpy as np

from .layout import PromptLayout, SegmentKind, Span, validate

__all__ = ["AttentionMask", "build_mask", "causal_mask", "visible_keys",
           "bruteforce_allowed", "mask_equals_bruteforce", "random_layout", "render"]

_SOURCE = (int(SegmentKind.V), int(SegmentKind.T))
_READER = (int(SegmentKind.Q), int(SegmentKind.A))


@dataclass(frozen=True)
class AttentionMask:
    """Dense visibility matrix: ``allowed[i, j]`` is True when query ``i`` may read key ``j``."""

    allowed: np.ndarray

    @property
    def side(self) -> int:
        return self.allowed.shape[0]

    @property
    def blocked(self) -> np.ndarray:
        return ~self.allowed

    def __eq__(self, other: object) -> bool:
        return isinstance(other, AttentionMask) and np.array_equal(self.allowed, other.allowed)

    def __hash__(self) -> int:
        return hash(self.allowed.tobytes())


def causal_mask(n: int) -> AttentionMask:
    return AttentionMask(np.tril(np.ones((n, n), dtype=bool)))


def build_mask(layout: PromptLayout, compressed: bool = True) -> AttentionMask:
    problems = validate(layout)
    if problems:
        raise ValueError("invalid layout: " + "; ".join(problems))
    mask = causal_mask(len(layout)).allowed
    if compressed:
        kinds = layout.kinds()
        mask &= ~(np.isin(kinds, _READER)[:, None] & np.isin(kinds, _SOURCE)[None, :])
    return AttentionMask(mask)


def visible_keys(mask: AttentionMask, i: int) -> set[int]:
    if not 0 <= i < mask.side:
        raise IndexError(f"row {i} outside mask of side {mask.side}")
    return set(np.flatnonzero(mask.allowed[i]).tolist())


def bruteforce_allowed(layout: PromptLayout, compressed: bool = True) -> list[list[bool]]:
    """Element-by-element evaluation of the mask rule, kept free of numpy."""
    kind_at = {}
    for span in layout.spans:
        for p in range(span.start, span.end):
            kind_at[p] = span.kind
    n = len(layout.tokens)
    rows = []
    for i in range(n):
        row = []
        for j in range(n):
            if compressed and kind_at[i] in (SegmentKind.Q, SegmentKind.A) \
                    and kind_at[j] in (SegmentKind.V, SegmentKind.T):
                row.append(False)
            else:
                row.append(j <= i)
        rows.append(row)
    return rows


def mask_equals_bruteforce(layout: PromptLayout, compressed: bool = True) -> bool:
    fast = build_mask(layout, compressed).allowed.tolist()
    return fast == bruteforce_allowed(layout, compressed)


def random_layout(rng: random.Random, k_chorus: int | None = None, *,
                  allow_qa: bool = True) -> PromptLayout:
    """Random well-formed layout with random (possibly empty) span lengths.

    Token ids are placeholders apart from the chorus span; only structure
    matters to the mask.
    """
    from .layout import VOCAB

    k = k_chorus if k_chorus is not None else rng.randint(1, 6)
    lengths = [
        (SegmentKind.SYS, rng.randint(1, 4)),
        (SegmentKind.V, rng.randint(0, 6)),
        (SegmentKind.T, rng.randint(0, 4)),
        (SegmentKind.U, k),
    ]
    if allow_qa and rng.random() < 0.75:
        lengths += [(SegmentKind.Q, rng.randint(0, 4)), (SegmentKind.SYS, rng.randint(0, 1)),
                    (SegmentKind.A, rng.randint(0, 4))]
    tokens: list[int] = []
    spans = []
    for kind, n in lengths:
        start = len(tokens)
        if kind == SegmentKind.U:
            tokens += VOCAB.chorus_ids(n)
        else:
            tokens += [VOCAB.pad] * n
        spans.append(Span(kind, start, len(tokens)))
    return PromptLayout(tuple(tokens), tuple(spans))


def render(mask: AttentionMask, layout: PromptLayout | None = None) -> str:
    """Text grid, ``+`` visible and ``-`` blocked; optional segment labels per row."""
    labels = None
    if layout is not None:
        labels = [SegmentKind(k).name for k in layout.kinds()]
    lines = []
    for i, row in enumerate(mask.allowed):
        cells = "".join("+" if a else "-" for a in row)
        lines.append(f"{labels[i]:>3} {cells}" if labels else cells)
    return "\n".join(lines)
