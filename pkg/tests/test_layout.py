import pytest

from chorus.data import gen_image
from chorus.layout import (VOCAB, LayoutError, PromptLayout, Sample, SegmentKind, Span, Task,
                           answer_positions, assemble, validate)
from chorus.model import ModelConfig

CFG = ModelConfig(k_chorus=16)


def four_words():
    return "represent the given image"


def spans_of(layout):
    return [(s.kind, s.start, s.end) for s in layout.spans if len(s) or s.kind != SegmentKind.SYS]


def test_embed_mode_spans():
    sample = Sample(four_words(), gen_image(0))
    lay = assemble(sample, "embed", CFG)
    assert spans_of(lay) == [(SegmentKind.SYS, 0, 6), (SegmentKind.V, 6, 22),
                             (SegmentKind.T, 22, 26), (SegmentKind.U, 26, 42)]
    assert len(lay) == 42


def test_native_drops_exactly_k_tokens():
    sample = Sample(four_words(), gen_image(0), "how many circle ?", "3", Task.GENERATION)
    joint = assemble(sample, "joint", CFG)
    native = assemble(sample, "native", CFG)
    assert native.span(SegmentKind.U) is None
    assert len(joint) - len(native) == CFG.k_chorus


def test_native_can_drop_einst():
    sample = Sample(four_words(), gen_image(0), "how many circle ?", "3", Task.GENERATION)
    native = assemble(sample, "native", CFG, native_keeps_einst=False)
    assert native.span(SegmentKind.T) is None
    assert validate(native) == []


def test_text_only_target():
    caption = "red circle at r0c0 ; blue star at r0c1"  # 9 words
    lay = assemble(Sample(caption, task=Task.RETRIEVAL_TARGET), "embed", CFG)
    assert lay.span(SegmentKind.V) == Span(SegmentKind.V, 6, 6)
    assert lay.span(SegmentKind.T) == Span(SegmentKind.T, 6, 15)
    assert lay.span(SegmentKind.U) == Span(SegmentKind.U, 15, 31)


def test_joint_mode_layout():
    sample = Sample(four_words(), gen_image(1), "what color is the shape at r1c2 ?", "blue", Task.GENERATION)
    lay = assemble(sample, "joint", CFG)
    assert validate(lay, CFG.k_chorus) == []
    a = lay.span(SegmentKind.A)
    assert [lay.tokens[i] for i in a.range()] == [VOCAB.stoi["blue"], VOCAB.eos]
    assert lay.tokens[a.start - 1] == VOCAB.assistant
    # the marker is part of Q so the mask keeps it away from V/T
    assert lay.span(SegmentKind.Q).end == a.start


def test_embed_is_strict_prefix_of_joint():
    sample = Sample(four_words(), gen_image(2), "how many star ?", "2", Task.GENERATION)
    emb = assemble(sample, "embed", CFG)
    joint = assemble(sample, "joint", CFG)
    assert len(emb) < len(joint)
    assert joint.tokens[:len(emb)] == emb.tokens
    assert joint.spans[:len(emb.spans)] == emb.spans


def test_round_trip_and_chorus_ids():
    sample = Sample(four_words(), gen_image(3), "how many star ?", "2", Task.GENERATION)
    lay = assemble(sample, "joint", CFG)
    joined = tuple(t for s in lay.spans for t in lay.tokens[s.start:s.end])
    assert joined == lay.tokens
    u = lay.span(SegmentKind.U)
    assert list(lay.tokens[u.start:u.end]) == VOCAB.chorus_ids(16)
    assert len(set(lay.tokens[u.start:u.end])) == 16


def test_assemble_errors():
    with pytest.raises(LayoutError):
        assemble(Sample(four_words(), gen_image(0)), "joint", CFG)
    with pytest.raises(LayoutError):
        assemble(Sample(four_words(), gen_image(0), "how many star ?", "2"), "joint",
                 ModelConfig(max_seq=20))
    with pytest.raises(LayoutError):
        Sample(four_words(), task=Task.GENERATION)


@pytest.mark.parametrize("a_span, expected", [((8, 10), [7, 8]), ((8, 9), [7])])
def test_answer_positions(a_span, expected):
    spans = (Span(SegmentKind.SYS, 0, 2), Span(SegmentKind.V, 2, 4), Span(SegmentKind.T, 4, 5),
             Span(SegmentKind.U, 5, 7), Span(SegmentKind.Q, 7, 8), Span(SegmentKind.A, *a_span))
    lay = PromptLayout(tuple(range(a_span[1])), spans)
    assert answer_positions(lay) == expected


def test_answer_positions_requires_answer():
    lay = assemble(Sample(four_words(), gen_image(0)), "embed", CFG)
    with pytest.raises(LayoutError):
        answer_positions(lay)


def _manual(spans, k=2):
    n = spans[-1][2]
    tokens = [0] * n
    for kind, s, e in spans:
        if kind == SegmentKind.U:
            tokens[s:e] = VOCAB.chorus_ids(e - s)
    return PromptLayout(tuple(tokens), tuple(Span(*x) for x in spans))


def test_validate_ok_and_violations():
    good = _manual([(SegmentKind.SYS, 0, 2), (SegmentKind.V, 2, 4), (SegmentKind.U, 4, 6)])
    assert validate(good, 2) == []
    short = _manual([(SegmentKind.SYS, 0, 2), (SegmentKind.V, 2, 4), (SegmentKind.U, 4, 5)])
    assert any(v.startswith("chorus length") for v in validate(short, 2))
    overlap = PromptLayout((0,) * 6, (Span(SegmentKind.SYS, 0, 3), Span(SegmentKind.V, 2, 6)))
    assert any(v.startswith("partition") for v in validate(overlap))
    disorder = _manual([(SegmentKind.SYS, 0, 2), (SegmentKind.U, 2, 4), (SegmentKind.V, 4, 6)])
    assert any(v.startswith("order") for v in validate(disorder, 2))


def test_vocab_encode_decode():
    ids = VOCAB.encode("what color is the shape at r1c2 ?")
    assert VOCAB.decode(ids) == "what color is the shape at r1c2 ?"
    with pytest.raises(LayoutError):
        VOCAB.encode("nonsense-word")
