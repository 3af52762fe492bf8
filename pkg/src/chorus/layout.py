"""Prompt template assembly: vocabulary, samples and segment-tagged layouts.

Every prompt follows one template::

    <bos> <system> helpful assistant . <user> [image] [eInst] [chorus] [gInst] <assistant> [answer] <eos>

and is returned as a :class:`PromptLayout`, i.e. a token sequence plus
half-open spans tagged with a :class:`SegmentKind`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

if TYPE_CHECKING:
    from .data import VisionGrid
    from .model import ModelConfig

__all__ = [
    "SegmentKind", "Span", "PromptLayout", "Sample", "Task", "Vocab", "VOCAB",
    "LayoutError", "assemble", "answer_positions", "validate",
]


class LayoutError(ValueError):
    pass


class SegmentKind(enum.IntEnum):
    SYS = 0
    V = 1
    T = 2
    U = 3
    Q = 4
    A = 5


class Task(str, enum.Enum):
    RETRIEVAL_QUERY = "retrieval_query"
    RETRIEVAL_TARGET = "retrieval_target"
    GENERATION = "generation"


MAX_CHORUS = 64
MAX_GRID_SIDE = 8
COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black")
SHAPES = ("circle", "square", "triangle", "star", "cross", "diamond", "heart", "ring")

_SPECIALS = ("<pad>", "<bos>", "<eos>", "<system>", "<user>", "<assistant>")
_WORDS = (
    "helpful", "assistant", ".", ";", "?", "at",
    "represent", "the", "given", "image", "text", "find", "matching", "caption",
    "reconstruct", "represented", "what", "color", "is", "shape", "how", "many",
)


class Vocab:
    """Closed word-level vocabulary.

    Layout of ids: specials, ``MAX_CHORUS`` chorus ids, vision ids
    (``v_base + shape * n_colors + color``), then plain words.
    """

    def __init__(self) -> None:
        self.itos: list[str] = list(_SPECIALS)
        self.chorus_base = len(self.itos)
        self.itos += [f"<chorus{i}>" for i in range(MAX_CHORUS)]
        self.v_base = len(self.itos)
        self.n_vision = len(SHAPES) * len(COLORS)
        self.itos += [f"<v{i}>" for i in range(self.n_vision)]
        self.word_base = len(self.itos)
        words = list(_WORDS) + list(COLORS) + list(SHAPES)
        words += [f"r{i}c{j}" for i in range(MAX_GRID_SIDE) for j in range(MAX_GRID_SIDE)]
        words += [str(n) for n in range(MAX_GRID_SIDE * MAX_GRID_SIDE + 1)]
        self.itos += words
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad, self.bos, self.eos, self.system, self.user, self.assistant = range(6)

    def __len__(self) -> int:
        return len(self.itos)

    def chorus_ids(self, k: int) -> list[int]:
        if not 1 <= k <= MAX_CHORUS:
            raise LayoutError(f"chorus count must be in [1, {MAX_CHORUS}], got {k}")
        return list(range(self.chorus_base, self.chorus_base + k))

    def vision_id(self, shape: int, color: int, n_colors: int = len(COLORS)) -> int:
        return self.v_base + shape * n_colors + color

    def encode(self, text: str) -> list[int]:
        try:
            return [self.stoi[w] for w in text.split()]
        except KeyError as exc:
            raise LayoutError(f"unknown word {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int], strip_eos: bool = True) -> str:
        out = []
        for i in ids:
            if strip_eos and i == self.eos:
                break
            out.append(self.itos[i])
        return " ".join(out)


VOCAB = Vocab()

SYSTEM_PREFIX = (VOCAB.bos, VOCAB.system, *VOCAB.encode("helpful assistant ."), VOCAB.user)


@dataclass(frozen=True)
class Span:
    kind: SegmentKind
    start: int
    end: int

    def __len__(self) -> int:
        return self.end - self.start

    def range(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class PromptLayout:
    tokens: tuple[int, ...]
    spans: tuple[Span, ...]

    def __len__(self) -> int:
        return len(self.tokens)

    def span(self, kind: SegmentKind) -> Optional[Span]:
        """First span of ``kind`` (the only one for non-SYS kinds)."""
        for s in self.spans:
            if s.kind == kind:
                return s
        return None

    def kinds(self) -> np.ndarray:
        out = np.zeros(len(self.tokens), dtype=np.int8)
        for s in self.spans:
            out[s.start:s.end] = int(s.kind)
        return out


@dataclass
class Sample:
    """One prompt's content.  ``e_inst`` fills the text segment: an instruction
    for image queries, the caption itself for text-only samples."""

    e_inst: str
    image: Optional["VisionGrid"] = None
    g_inst: Optional[str] = None
    answer: Optional[str] = None
    task: Task = Task.RETRIEVAL_QUERY

    def __post_init__(self) -> None:
        if self.task == Task.GENERATION and (self.g_inst is None or self.answer is None):
            raise LayoutError("generation samples need g_inst and answer")


MODES = ("embed", "joint", "native")


def assemble(sample: Sample, mode: str, config: "ModelConfig", *,
             with_answer: bool = True, native_keeps_einst: bool = True,
             vocab: Vocab = VOCAB) -> PromptLayout:
    """Build the token sequence and segment spans for ``sample``.

    ``embed`` stops after the chorus span, ``joint`` appends the generation
    instruction and answer, ``native`` is ``joint`` without chorus tokens.
    With ``with_answer=False`` the prompt ends at the assistant marker and the
    answer span is empty (generation prompts).
    """
    if mode not in MODES:
        raise LayoutError(f"unknown mode {mode!r}")
    tokens: list[int] = []
    spans: list[Span] = []

    def put(kind: SegmentKind, ids: Sequence[int]) -> None:
        start = len(tokens)
        tokens.extend(ids)
        spans.append(Span(kind, start, len(tokens)))

    put(SegmentKind.SYS, SYSTEM_PREFIX)
    put(SegmentKind.V, sample.image.tokens(vocab) if sample.image is not None else [])
    if mode != "native" or native_keeps_einst:
        put(SegmentKind.T, vocab.encode(sample.e_inst))
    if mode != "native":
        put(SegmentKind.U, vocab.chorus_ids(config.k_chorus))
    if mode != "embed":
        if sample.g_inst is None:
            raise LayoutError(f"{mode} mode needs a generation instruction")
        answer: list[int] = []
        if with_answer:
            if sample.answer is None:
                raise LayoutError(f"{mode} mode needs an answer")
            answer = vocab.encode(sample.answer)
            if not answer:
                raise LayoutError("empty answer")
            answer.append(vocab.eos)
        # the assistant marker belongs to Q: a SYS-tagged marker could read V/T
        # and smuggle them past the mask to the answer
        put(SegmentKind.Q, vocab.encode(sample.g_inst) + [vocab.assistant])
        put(SegmentKind.A, answer)
    if len(tokens) > config.max_seq:
        raise LayoutError(f"sequence length {len(tokens)} exceeds max_seq {config.max_seq}")
    return PromptLayout(tuple(tokens), tuple(spans))


def answer_positions(layout: PromptLayout) -> list[int]:
    """Positions whose next-token prediction is supervised by the answer."""
    a = layout.span(SegmentKind.A)
    if a is None or len(a) == 0:
        raise LayoutError("layout has no answer span")
    if a.start == 0:
        raise LayoutError("answer span cannot start at position 0")
    return list(range(a.start - 1, a.end - 1))


_ORDER = (SegmentKind.V, SegmentKind.T, SegmentKind.U, SegmentKind.Q, SegmentKind.A)


def validate(layout: PromptLayout, k_chorus: Optional[int] = None,
             vocab: Vocab = VOCAB) -> list[str]:
    """Return a list of invariant violations; empty means the layout is sound.

    SYS spans may sit anywhere (role markers); every other kind appears at
    most once and in the order V, T, U, Q, A.
    """
    problems: list[str] = []
    pos = 0
    for s in layout.spans:
        if s.start != pos or s.end < s.start:
            problems.append(f"partition: span {s.kind.name}[{s.start},{s.end}) does not start at {pos}")
            break
        pos = s.end
    else:
        if pos != len(layout.tokens):
            problems.append(f"partition: spans cover [0,{pos}) but sequence has {len(layout.tokens)} tokens")

    seen = [s.kind for s in layout.spans if s.kind != SegmentKind.SYS]
    ranks = [_ORDER.index(k) for k in seen]
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        problems.append("order: segments out of order or repeated: " + ",".join(k.name for k in seen))
    if layout.spans and layout.spans[0].kind != SegmentKind.SYS:
        problems.append("order: layout must open with a SYS span")

    u = layout.span(SegmentKind.U)
    if u is not None:
        k = len(u) if k_chorus is None else k_chorus
        if len(u) != k:
            problems.append(f"chorus length: expected {k}, got {len(u)}")
        elif k >= 1 and tuple(layout.tokens[u.start:u.end]) != tuple(vocab.chorus_ids(k)):
            problems.append("chorus ids: chorus span must hold the reserved ids in order")
    return problems
