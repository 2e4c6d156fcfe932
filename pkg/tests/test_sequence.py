import pytest
import torch

from mixgen import vocab as V
from mixgen.errors import DimensionNotDivisible
from mixgen.scenes import SceneSpec
from mixgen.sequence import (
    DiscreteToken,
    Image,
    ImageRef,
    Layout,
    Text,
    build_sequence,
    make_edit_triple,
    make_pair_sequence,
    ppm_bytes,
    read_ppm,
    sample_layout,
    sequence_text,
    validate_sequence,
    write_ppm,
)
from conftest import rand_image


def ids(seq):
    return [e.id if isinstance(e, DiscreteToken) else f"p{e.index}" for e in seq.elements]


def test_text_plus_image_layout(vocab):
    img = rand_image((3, 8, 8))
    seq = build_sequence([Text("a"), Image(img)], vocab, k=4)
    a = vocab.char_to_id["a"]
    assert ids(seq) == [V.BOS, a, V.BOI, "p0", "p0", "p0", "p0", V.EOI, V.EOS]
    assert seq.spans == ((3, 4),)
    assert seq.layouts == (Layout.CAPTION_FIRST,)


def test_empty_text_only(vocab):
    seq = build_sequence([Text("")], vocab, k=4)
    assert ids(seq) == [V.BOS, V.EOS]
    assert seq.images == ()


def test_two_images_disjoint_spans(vocab):
    seq = build_sequence(
        [Image(rand_image((3, 8, 8), 1)), Text("x"), Image(rand_image((3, 8, 8), 2))],
        vocab,
        k=4,
    )
    (s1, n1), (s2, n2) = seq.spans
    assert s1 + n1 < s2
    assert seq.layouts == (Layout.IMAGE_FIRST, Layout.CAPTION_FIRST)
    validate_sequence(seq, vocab, k=4)


def test_indivisible_image_raises(vocab):
    with pytest.raises(DimensionNotDivisible):
        build_sequence([Image(rand_image((3, 9, 9)))], vocab, k=4)


def test_sample_layout_extremes():
    g = torch.Generator().manual_seed(0)
    assert all(sample_layout(g, 1.0) is Layout.CAPTION_FIRST for _ in range(50))
    assert all(sample_layout(g, 0.0) is Layout.IMAGE_FIRST for _ in range(50))


def test_sample_layout_concentration():
    g = torch.Generator().manual_seed(7)
    n = 100_000
    hits = sum(sample_layout(g, 0.8) is Layout.CAPTION_FIRST for _ in range(n))
    assert 0.79 <= hits / n <= 0.81


def test_edit_triple_structure(vocab):
    a = SceneSpec("square", "red", "center", "small")
    b = SceneSpec("square", "blue", "center", "small")
    seq = make_edit_triple(a, "make it blue", b, vocab, k=4)
    assert len(seq.spans) == 2
    validate_sequence(seq, vocab, k=4)
    (s1, n1), (s2, n2) = seq.spans
    # instruction text sits strictly between the two image spans
    between = seq.elements[s1 + n1 + 1 : s2 - 1]
    assert all(isinstance(e, DiscreteToken) and e.id not in V.RESERVED for e in between)
    assert len(between) == len("make it blue")
    assert seq.layouts == (Layout.IMAGE_FIRST, Layout.CAPTION_FIRST)


def test_edit_triple_identity(vocab):
    a = SceneSpec("circle", "green", "top", "large")
    seq = make_edit_triple(a, "keep it", a, vocab, k=4)
    assert torch.equal(seq.images[0], seq.images[1])


def test_edit_triple_rejects_mismatch(vocab):
    a = SceneSpec("square", "red", "center", "small")
    b = SceneSpec("square", "blue", "center", "small")
    with pytest.raises(ValueError):
        make_edit_triple(a, "make it green", b, vocab, k=4)


def test_pair_sequence_orders(vocab):
    spec = SceneSpec("triangle", "yellow", "bottom", "small")
    cap_first = make_pair_sequence(spec, Layout.CAPTION_FIRST, vocab, k=4)
    img_first = make_pair_sequence(spec, Layout.IMAGE_FIRST, vocab, k=4)
    assert cap_first.spans[0][0] > img_first.spans[0][0]
    validate_sequence(cap_first, vocab, k=4)
    validate_sequence(img_first, vocab, k=4)


def test_sequence_text(vocab):
    seq = build_sequence([Text("hi"), Image(rand_image((3, 8, 8)))], vocab, k=4)
    assert sequence_text(seq, vocab) == "hi<image>"


def test_ppm_round_trip(tmp_path):
    img = rand_image((3, 16, 16), seed=3)
    path = tmp_path / "img.ppm"
    write_ppm(path, img)
    data = ppm_bytes(img)
    assert data.startswith(b"P6\n16 16\n255\n")
    back = read_ppm(path)
    # 8-bit quantization: worst error is half a step of 2/255
    assert (back - img).abs().max() <= 1.0 / 127.5
