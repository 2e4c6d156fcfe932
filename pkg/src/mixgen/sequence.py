"""Mixed-modal sequences: interleaved discrete tokens and image patch spans."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Union

import torch

from . import vocab as V
from .errors import DimensionNotDivisible
from .scenes import SceneSpec, apply_instruction, render_scene
from .vocab import Vocab


class Layout(enum.Enum):
    CAPTION_FIRST = "caption_first"
    IMAGE_FIRST = "image_first"


@dataclass(frozen=True)
class DiscreteToken:
    id: int


@dataclass(frozen=True)
class ImageRef:
    index: int  # position in the sequence-local image table


Element = Union[DiscreteToken, ImageRef]


@dataclass(frozen=True)
class Text:
    value: str


@dataclass(frozen=True)
class Image:
    pixels: torch.Tensor  # (C, H, W) in [-1, 1]


Segment = Union[Text, Image]


@dataclass(frozen=True)
class MixedSequence:
    """One training/inference record: elements plus the image table.

    spans[i] = (start, length) of image i's ImageRef run; the element at
    start-1 is BOI and the element at start+length is EOI.
    """

    elements: tuple[Element, ...]
    images: tuple[torch.Tensor, ...] = ()
    spans: tuple[tuple[int, int], ...] = ()
    layouts: tuple[Layout, ...] = ()

    def __len__(self) -> int:
        return len(self.elements)


def patches_per_image(h: int, w: int, k: int) -> int:
    if h % k != 0 or w % k != 0:
        raise DimensionNotDivisible(f"image {h}x{w} not divisible by patch size {k}")
    return (h // k) * (w // k)


def build_sequence(
    segments: list[Segment],
    vocab: Vocab,
    k: int,
    layouts: list[Layout] | None = None,
) -> MixedSequence:
    """Assemble [BOS] + segments + [EOS], bracketing each image with BOI/EOI.

    Each image contributes BOI + (H/k)(W/k) ImageRef elements + EOI. When
    layouts is omitted, an image is tagged CAPTION_FIRST if any text token
    precedes it and IMAGE_FIRST otherwise.
    """
    elements: list[Element] = [DiscreteToken(V.BOS)]
    images: list[torch.Tensor] = []
    spans: list[tuple[int, int]] = []
    auto_layouts: list[Layout] = []
    text_seen = False
    for seg in segments:
        if isinstance(seg, Text):
            ids = V.tokenize(seg.value, vocab)
            elements.extend(DiscreteToken(i) for i in ids)
            text_seen = text_seen or bool(ids)
        elif isinstance(seg, Image):
            c, h, w = seg.pixels.shape
            n = patches_per_image(h, w, k)
            idx = len(images)
            elements.append(DiscreteToken(V.BOI))
            start = len(elements)
            elements.extend(ImageRef(idx) for _ in range(n))
            elements.append(DiscreteToken(V.EOI))
            images.append(seg.pixels)
            spans.append((start, n))
            auto_layouts.append(Layout.CAPTION_FIRST if text_seen else Layout.IMAGE_FIRST)
        else:
            raise TypeError(f"unknown segment type: {type(seg)!r}")
    elements.append(DiscreteToken(V.EOS))
    if layouts is None:
        layouts = auto_layouts
    elif len(layouts) != len(images):
        raise ValueError("one layout tag required per image")
    return MixedSequence(
        elements=tuple(elements),
        images=tuple(images),
        spans=tuple(spans),
        layouts=tuple(layouts),
    )


def sample_layout(rng: torch.Generator, p_caption_first: float = 0.8) -> Layout:
    """Draw the caption/image ordering; CAPTION_FIRST with probability p."""
    if not 0.0 <= p_caption_first <= 1.0:
        raise ValueError(f"p_caption_first must be in [0, 1]: {p_caption_first}")
    u = torch.rand((), generator=rng).item()
    return Layout.CAPTION_FIRST if u < p_caption_first else Layout.IMAGE_FIRST


def make_pair_sequence(
    spec: SceneSpec,
    layout: Layout,
    vocab: Vocab,
    k: int,
    h: int = 16,
    w: int = 16,
) -> MixedSequence:
    """Caption/image pair in the requested order."""
    img = Image(render_scene(spec, h, w))
    cap = Text(spec.caption())
    segments = [cap, img] if layout is Layout.CAPTION_FIRST else [img, cap]
    return build_sequence(segments, vocab, k, layouts=[layout])


def make_edit_triple(
    spec_in: SceneSpec,
    instruction: str,
    spec_out: SceneSpec,
    vocab: Vocab,
    k: int,
    h: int = 16,
    w: int = 16,
) -> MixedSequence:
    """Editing record: input image, instruction text, output image."""
    if apply_instruction(spec_in, instruction) != spec_out:
        raise ValueError(
            f"instruction {instruction!r} does not map {spec_in} to {spec_out}"
        )
    segments = [
        Image(render_scene(spec_in, h, w)),
        Text(instruction),
        Image(render_scene(spec_out, h, w)),
    ]
    return build_sequence(segments, vocab, k)


def validate_sequence(seq: MixedSequence, vocab: Vocab, k: int) -> None:
    """Check the structural invariants; raises AssertionError on violation."""
    assert len(seq.images) == len(seq.spans) == len(seq.layouts)
    ref_positions = []
    for pos, el in enumerate(seq.elements):
        if isinstance(el, DiscreteToken):
            assert 0 <= el.id < vocab.size, f"token id out of range at {pos}"
        else:
            ref_positions.append((pos, el.index))
    expected_refs = []
    for idx, (start, length) in enumerate(seq.spans):
        c, h, w = seq.images[idx].shape
        assert length == patches_per_image(h, w, k), "span length mismatch"
        prev = seq.elements[start - 1]
        nxt = seq.elements[start + length]
        assert isinstance(prev, DiscreteToken) and prev.id == V.BOI, "missing BOI"
        assert isinstance(nxt, DiscreteToken) and nxt.id == V.EOI, "missing EOI"
        assert seq.images[idx].min() >= -1.0 and seq.images[idx].max() <= 1.0
        expected_refs.extend((start + j, idx) for j in range(length))
    assert ref_positions == expected_refs, "ImageRef elements must be dense and in order"


def sequence_text(seq: MixedSequence, vocab: Vocab) -> str:
    """Human-readable rendering: characters plus an <image> marker per span."""
    out = []
    for el in seq.elements:
        if isinstance(el, ImageRef):
            continue
        if el.id == V.BOI:
            out.append("<image>")
        elif el.id in (V.PAD, V.BOS, V.EOS, V.EOI):
            continue
        else:
            out.append(vocab.id_to_char[el.id])
    return "".join(out)


# --- PPM image dumps -------------------------------------------------------


def ppm_bytes(image: torch.Tensor) -> bytes:
    """Binary PPM (P6) with [-1, 1] mapped to 0..255 by round((v+1)*127.5)."""
    c, h, w = image.shape
    if c != 3:
        raise ValueError(f"PPM dump requires 3 channels, got {c}")
    scaled = torch.round((image.float() + 1.0) * 127.5).clamp(0, 255).to(torch.uint8)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    return header + scaled.permute(1, 2, 0).contiguous().numpy().tobytes()


def write_ppm(path, image: torch.Tensor) -> None:
    with open(path, "wb") as f:
        f.write(ppm_bytes(image))


def read_ppm(path) -> torch.Tensor:
    """Inverse of write_ppm up to the 8-bit quantization."""
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM file")
    w, h = (int(x) for x in parts[1].split())
    raw = parts[3][: w * h * 3]
    arr = torch.frombuffer(bytearray(raw), dtype=torch.uint8).reshape(h, w, 3)
    return arr.permute(2, 0, 1).float() / 127.5 - 1.0
