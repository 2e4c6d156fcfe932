"""Procedural scene grammar: captions fully determine rendered images.

Every scene is a single colored shape on a gray background. The caption is a
deterministic function of the spec and vice versa, so generated images can be
scored programmatically.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import torch

from .errors import UnparseableCaption

SHAPES = ("square", "circle", "triangle")
COLORS = ("red", "green", "blue", "yellow")
POSITIONS = ("left", "right", "top", "bottom", "center")
SIZES = ("small", "large")

# RGB in the [-1, 1] pixel convention.
COLOR_VALUES = {
    "red": (1.0, -1.0, -1.0),
    "green": (-1.0, 1.0, -1.0),
    "blue": (-1.0, -1.0, 1.0),
    "yellow": (1.0, 1.0, -1.0),
}
BACKGROUND = 0.0

# Shape center as (row, col) fractions of the image.
POSITION_FRACTIONS = {
    "left": (0.5, 0.25),
    "right": (0.5, 0.75),
    "top": (0.25, 0.5),
    "bottom": (0.75, 0.5),
    "center": (0.5, 0.5),
}

# Shape half-extent as a fraction of min(H, W).
SIZE_FRACTIONS = {"small": 0.125, "large": 0.1875}


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    position: str
    size: str

    def __post_init__(self):
        if (
            self.shape not in SHAPES
            or self.color not in COLORS
            or self.position not in POSITIONS
            or self.size not in SIZES
        ):
            raise ValueError(f"invalid scene spec: {self}")

    def caption(self) -> str:
        return f"{self.size} {self.color} {self.shape} {self.position}"


def all_specs() -> tuple[SceneSpec, ...]:
    """Enumerate the full grammar in a canonical order (120 specs)."""
    return tuple(
        SceneSpec(shape=sh, color=co, position=po, size=si)
        for si, co, sh, po in itertools.product(SIZES, COLORS, SHAPES, POSITIONS)
    )


def parse_caption(text: str) -> SceneSpec:
    words = text.strip().split()
    if len(words) != 4:
        raise UnparseableCaption(f"expected 4 words, got {len(words)}: {text!r}")
    size, color, shape, position = words
    try:
        return SceneSpec(shape=shape, color=color, position=position, size=size)
    except ValueError as e:
        raise UnparseableCaption(str(e)) from e


def shape_mask(spec: SceneSpec, h: int, w: int) -> torch.Tensor:
    """Boolean (h, w) mask of the pixels belonging to the shape."""
    fr, fc = POSITION_FRACTIONS[spec.position]
    cr, cc = round(fr * h - 0.5), round(fc * w - 0.5)
    a = max(1, round(SIZE_FRACTIONS[spec.size] * min(h, w)))
    rows = torch.arange(h).view(h, 1).expand(h, w)
    cols = torch.arange(w).view(1, w).expand(h, w)
    dr, dc = rows - cr, cols - cc
    if spec.shape == "square":
        return (dr.abs() <= a) & (dc.abs() <= a)
    if spec.shape == "circle":
        return dr * dr + dc * dc <= a * a
    # Upward-pointing triangle: width grows from apex (dr = -a) to base (dr = a).
    return (dr.abs() <= a) & (dc.abs() <= (dr + a) // 2)


def render_scene(spec: SceneSpec, h: int = 16, w: int = 16) -> torch.Tensor:
    """Render the spec to a (3, h, w) tensor with values in [-1, 1]."""
    if h < 8 or w < 8:
        raise ValueError(f"image too small to render a scene: {h}x{w}")
    img = torch.full((3, h, w), BACKGROUND, dtype=torch.float32)
    mask = shape_mask(spec, h, w)
    for ch, val in enumerate(COLOR_VALUES[spec.color]):
        img[ch][mask] = val
    return img


# --- synthetic editing grammar -------------------------------------------

IDENTITY_INSTRUCTION = "keep it"


def edit_instructions(spec: SceneSpec) -> tuple[str, ...]:
    """All instructions applicable to a spec (attribute changes + identity)."""
    out = [IDENTITY_INSTRUCTION]
    out += [f"make it {c}" for c in COLORS if c != spec.color]
    out += [f"make it {s}" for s in SIZES if s != spec.size]
    out += [f"turn it into a {s}" for s in SHAPES if s != spec.shape]
    out += [f"move it to the {p}" for p in POSITIONS if p != spec.position]
    return tuple(out)


def apply_instruction(spec: SceneSpec, instruction: str) -> SceneSpec:
    """Deterministically map an instruction to the edited spec."""
    text = instruction.strip()
    if text == IDENTITY_INSTRUCTION:
        return spec
    if text.startswith("make it "):
        attr = text[len("make it ") :]
        if attr in COLORS:
            return SceneSpec(spec.shape, attr, spec.position, spec.size)
        if attr in SIZES:
            return SceneSpec(spec.shape, spec.color, spec.position, attr)
        raise ValueError(f"unknown attribute in instruction: {instruction!r}")
    if text.startswith("turn it into a "):
        shape = text[len("turn it into a ") :]
        if shape in SHAPES:
            return SceneSpec(shape, spec.color, spec.position, spec.size)
        raise ValueError(f"unknown shape in instruction: {instruction!r}")
    if text.startswith("move it to the "):
        pos = text[len("move it to the ") :]
        if pos in POSITIONS:
            return SceneSpec(spec.shape, spec.color, pos, spec.size)
        raise ValueError(f"unknown position in instruction: {instruction!r}")
    raise ValueError(f"unparseable instruction: {instruction!r}")
