"""Deterministic toy multimodal corpus.

Images are grids of (shape, color) cells, each cell one vision token.
Captions, question/answer pairs and retrieval pools are all derived from
the grid by rule, so every label can be recomputed independently.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .layout import COLORS, MAX_GRID_SIDE, SHAPES, VOCAB, Sample, Task, Vocab

__all__ = [
    "VisionGrid", "DatasetSpec", "TrainPair", "EvalItem", "Dataset", "DataError",
    "gen_image", "gen_caption", "parse_caption", "gen_qa", "answer_question",
    "gen_text_reconstruction", "build_dataset", "write_dataset", "read_dataset",
    "REPRESENT_IMAGE", "RECONSTRUCT_TEXT", "DATASET_FORMAT_VERSION",
]

REPRESENT_IMAGE = "represent the given image ."
RECONSTRUCT_TEXT = "reconstruct the represented text"
FIND_CAPTION = "find the matching caption ."
DATASET_FORMAT_VERSION = 1


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class VisionGrid:
    shapes: tuple[tuple[int, ...], ...]
    colors: tuple[tuple[int, ...], ...]
    n_shapes: int = 4
    n_colors: int = 4

    @property
    def rows(self) -> int:
        return len(self.shapes)

    @property
    def cols(self) -> int:
        return len(self.shapes[0]) if self.shapes else 0

    def tokens(self, vocab: Vocab = VOCAB) -> list[int]:
        return [vocab.vision_id(s, c, self.n_colors) for srow, crow in zip(self.shapes, self.colors)
                for s, c in zip(srow, crow)]

    def key(self) -> tuple:
        return (self.shapes, self.colors)


def gen_image(seed: int, rows: int = 4, cols: int = 4, n_shapes: int = 4, n_colors: int = 4) -> VisionGrid:
    if not (1 <= n_shapes <= len(SHAPES) and 1 <= n_colors <= len(COLORS)):
        raise DataError("shape/color counts exceed the vocabulary")
    rng = np.random.default_rng(seed)
    shapes = rng.integers(0, n_shapes, size=(rows, cols))
    colors = rng.integers(0, n_colors, size=(rows, cols))
    return VisionGrid(tuple(map(tuple, shapes.tolist())), tuple(map(tuple, colors.tolist())),
                      n_shapes, n_colors)


def gen_caption(grid: VisionGrid) -> str:
    if grid.rows > MAX_GRID_SIDE or grid.cols > MAX_GRID_SIDE:
        raise DataError(f"captions support grids up to {MAX_GRID_SIDE}x{MAX_GRID_SIDE}")
    clauses = []
    for i in range(grid.rows):
        for j in range(grid.cols):
            clauses.append(f"{COLORS[grid.colors[i][j]]} {SHAPES[grid.shapes[i][j]]} at r{i}c{j} ;")
    return " ".join(clauses)


def parse_caption(caption: str, n_shapes: int = 4, n_colors: int = 4) -> VisionGrid:
    words = caption.split()
    if len(words) % 5:
        raise DataError("caption is not a sequence of 5-word clauses")
    cells = {}
    for n in range(0, len(words), 5):
        color, shape, at, where, semi = words[n:n + 5]
        if at != "at" or semi != ";" or not where.startswith("r") or "c" not in where:
            raise DataError(f"malformed clause {' '.join(words[n:n + 5])!r}")
        i, j = map(int, where[1:].split("c"))
        cells[i, j] = (SHAPES.index(shape), COLORS.index(color))
    rows = 1 + max(i for i, _ in cells)
    cols = 1 + max(j for _, j in cells)
    shapes = tuple(tuple(cells[i, j][0] for j in range(cols)) for i in range(rows))
    colors = tuple(tuple(cells[i, j][1] for j in range(cols)) for i in range(rows))
    return VisionGrid(shapes, colors, n_shapes, n_colors)


def answer_question(grid: VisionGrid, question: str) -> str:
    """Rule evaluator for the two question templates."""
    w = question.split()
    if w[:6] == ["what", "color", "is", "the", "shape", "at"]:
        i, j = map(int, w[6][1:].split("c"))
        return COLORS[grid.colors[i][j]]
    if w[:2] == ["how", "many"]:
        target = SHAPES.index(w[2])
        return str(sum(s == target for row in grid.shapes for s in row))
    raise DataError(f"unrecognised question {question!r}")


def gen_qa(grid: VisionGrid, seed: int) -> tuple[str, str]:
    """Color-at-cell or count-of-shape question with its exact answer."""
    rng = np.random.default_rng(seed)
    if rng.random() < 0.5:
        i, j = int(rng.integers(grid.rows)), int(rng.integers(grid.cols))
        question = f"what color is the shape at r{i}c{j} ?"
        answer = COLORS[grid.colors[i][j]]
    else:
        s = int(rng.integers(grid.n_shapes))
        question = f"how many {SHAPES[s]} ?"
        answer = str(sum(v == s for row in grid.shapes for v in row))
    return question, answer


def gen_text_reconstruction(caption: str) -> tuple[str, str]:
    if not caption.split():
        raise DataError("cannot reconstruct an empty caption")
    return RECONSTRUCT_TEXT, caption


@dataclass(frozen=True)
class DatasetSpec:
    n_train: int = 4000
    n_eval: int = 200
    n_hetero: int = 1000
    rows: int = 4
    cols: int = 4
    n_shapes: int = 4
    n_colors: int = 4
    seed: int = 0
    candidate_pool_size: int = 100
    text_to_image: bool = True

    def __post_init__(self) -> None:
        if min(self.n_train, self.n_eval, self.rows, self.cols) < 1 or self.n_hetero < 0:
            raise DataError("dataset sizes and grid dims must be positive")
        if not 1 <= self.candidate_pool_size <= self.n_eval:
            raise DataError("candidate pool must fit inside the eval split")


@dataclass
class TrainPair:
    query: Sample
    target: Sample
    grid: VisionGrid
    qa: Optional[tuple[str, str]] = None
    source: str = "i2t"

    def generation_sample(self) -> Optional[Sample]:
        """Homogeneous generation sample: the pair's query prompt with its QA."""
        if self.qa is None:
            return None
        return Sample(self.query.e_inst, self.query.image, self.qa[0], self.qa[1], Task.GENERATION)


@dataclass
class EvalItem:
    query: Sample
    caption: str
    grid: VisionGrid
    qa: tuple[str, str]
    pool: list[int]
    positive: int

    def qa_sample(self) -> Sample:
        return Sample(REPRESENT_IMAGE, self.grid, self.qa[0], self.qa[1], Task.GENERATION)


@dataclass
class Dataset:
    spec: DatasetSpec
    train: list[TrainPair]
    hetero: list[Sample]
    eval: list[EvalItem]

    def sources(self) -> list[list[TrainPair]]:
        """Training pairs split by retrieval source, one list per sub-batch dataset."""
        names = sorted({p.source for p in self.train})
        return [[p for p in self.train if p.source == n] for n in names]


def _pair(grid: VisionGrid, caption: str, qa_seed: int, source: str) -> TrainPair:
    image_side = Sample(FIND_CAPTION if source == "i2t" else REPRESENT_IMAGE, grid,
                        task=Task.RETRIEVAL_QUERY if source == "i2t" else Task.RETRIEVAL_TARGET)
    text_side = Sample(caption, None,
                       task=Task.RETRIEVAL_TARGET if source == "i2t" else Task.RETRIEVAL_QUERY)
    if source == "i2t":
        return TrainPair(image_side, text_side, grid, gen_qa(grid, qa_seed), source)
    return TrainPair(text_side, image_side, grid, gen_text_reconstruction(caption), source)


def build_dataset(spec: DatasetSpec) -> Dataset:
    total = spec.n_train + spec.n_eval + spec.n_hetero
    distinct = (spec.n_shapes * spec.n_colors) ** (spec.rows * spec.cols)
    if distinct < 2 * total:
        raise DataError(f"only {distinct} distinct grids for {total} images; enlarge the vocabulary")
    rng = np.random.default_rng(spec.seed)
    seen: set[tuple] = set()

    def fresh() -> VisionGrid:
        for _ in range(1000):
            grid = gen_image(int(rng.integers(2**62)), spec.rows, spec.cols, spec.n_shapes, spec.n_colors)
            if grid.key() not in seen:
                seen.add(grid.key())
                return grid
        raise DataError("could not draw a fresh grid; vocabulary too small")

    # eval first so its grids are excluded from everything drawn later
    eval_grids = [fresh() for _ in range(spec.n_eval)]
    train_grids = [fresh() for _ in range(spec.n_train)]
    hetero_grids = [fresh() for _ in range(spec.n_hetero)]

    train = []
    for n, grid in enumerate(train_grids):
        source = "t2i" if spec.text_to_image and n % 2 else "i2t"
        train.append(_pair(grid, gen_caption(grid), int(rng.integers(2**62)), source))

    hetero = []
    for grid in hetero_grids:
        q, a = gen_qa(grid, int(rng.integers(2**62)))
        hetero.append(Sample(REPRESENT_IMAGE, grid, q, a, Task.GENERATION))

    evals = []
    for i, grid in enumerate(eval_grids):
        others = [j for j in range(spec.n_eval) if j != i]
        pool = [i] + rng.choice(others, size=spec.candidate_pool_size - 1, replace=False).tolist()
        rng.shuffle(pool)
        evals.append(EvalItem(Sample(FIND_CAPTION, grid), gen_caption(grid), grid,
                              gen_qa(grid, int(rng.integers(2**62))), pool, pool.index(i)))
    return Dataset(spec, train, hetero, evals)


# -- dataset file ----------------------------------------------------------
#
# Line-delimited JSON.  Line 1 is a header
#   {"format": "chorus-dataset", "version": 1, "spec": {...DatasetSpec fields...}}
# followed by one record per image:
#   {"split": "train"|"hetero"|"eval", "source": "i2t"|"t2i"|null,
#    "shapes": [[...]], "colors": [[...]], "caption": str,
#    "qa": {"g_inst": str, "answer": str} | null,
#    "pool": [eval indices] | null, "positive": int | null}
# Eval records are numbered by their order in the file; pools refer to them.

def _grid_record(grid: VisionGrid) -> dict:
    return {"shapes": [list(r) for r in grid.shapes], "colors": [list(r) for r in grid.colors]}


def write_dataset(dataset: Dataset, path: Union[str, os.PathLike]) -> None:
    lines = [{"format": "chorus-dataset", "version": DATASET_FORMAT_VERSION, "spec": asdict(dataset.spec)}]
    for p in dataset.train:
        lines.append({"split": "train", "source": p.source, **_grid_record(p.grid),
                      "caption": gen_caption(p.grid),
                      "qa": None if p.qa is None else {"g_inst": p.qa[0], "answer": p.qa[1]},
                      "pool": None, "positive": None})
    for s in dataset.hetero:
        lines.append({"split": "hetero", "source": None, **_grid_record(s.image),
                      "caption": gen_caption(s.image), "qa": {"g_inst": s.g_inst, "answer": s.answer},
                      "pool": None, "positive": None})
    for e in dataset.eval:
        lines.append({"split": "eval", "source": "i2t", **_grid_record(e.grid), "caption": e.caption,
                      "qa": {"g_inst": e.qa[0], "answer": e.qa[1]}, "pool": e.pool, "positive": e.positive})
    with open(path, "w", encoding="utf-8") as fh:
        for rec in lines:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_dataset(path: Union[str, os.PathLike]) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != "chorus-dataset" or header.get("version") != DATASET_FORMAT_VERSION:
            raise DataError(f"{path}: unsupported dataset header {header!r}")
        spec = DatasetSpec(**header["spec"])
        train, hetero, evals = [], [], []
        for line in fh:
            rec = json.loads(line)
            grid = VisionGrid(tuple(map(tuple, rec["shapes"])), tuple(map(tuple, rec["colors"])),
                              spec.n_shapes, spec.n_colors)
            qa = None if rec["qa"] is None else (rec["qa"]["g_inst"], rec["qa"]["answer"])
            if rec["split"] == "train":
                pair = _pair(grid, rec["caption"], 0, rec["source"])
                pair.qa = qa
                train.append(pair)
            elif rec["split"] == "hetero":
                hetero.append(Sample(REPRESENT_IMAGE, grid, qa[0], qa[1], Task.GENERATION))
            elif rec["split"] == "eval":
                evals.append(EvalItem(Sample(FIND_CAPTION, grid), rec["caption"], grid, qa,
                                      rec["pool"], rec["positive"]))
            else:
                raise DataError(f"unknown split {rec['split']!r}")
    return Dataset(spec, train, hetero, evals)
