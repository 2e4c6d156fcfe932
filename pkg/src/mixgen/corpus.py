"""Deterministic synthetic corpus: captioned scenes plus optional edit triples.

Row i is a pure function of (seed, i), so corpus generation can be data-parallel
and the same spec file always yields byte-identical data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch

from .scenes import SceneSpec, all_specs, apply_instruction, edit_instructions
from .sequence import (
    DiscreteToken,
    Layout,
    MixedSequence,
    make_edit_triple,
    make_pair_sequence,
    sample_layout,
)
from .vocab import Vocab


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    count: int = 64
    image_hw: int = 16
    p_caption_first: float = 0.8
    edit_fraction: float = 0.0

    @staticmethod
    def from_json(path) -> "CorpusSpec":
        with open(path) as f:
            raw = json.load(f)
        known = set(CorpusSpec.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown corpus spec keys: {sorted(unknown)}")
        return CorpusSpec(**raw)

    def to_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def derive_seed(seed: int, label: str) -> int:
    """Stable 63-bit stream seed for a (seed, label) pair."""
    digest = hashlib.sha256(f"{seed}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def row_generator(spec: CorpusSpec, index: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(spec.seed, f"row/{index}"))
    return g


def _uniform_choice(items, rng: torch.Generator):
    i = int(torch.randint(len(items), (), generator=rng).item())
    return items[i]


def make_row(spec: CorpusSpec, index: int, vocab: Vocab, k: int) -> MixedSequence:
    """Generate corpus row `index`; pure in (spec.seed, index)."""
    rng = row_generator(spec, index)
    grammar = all_specs()
    is_edit = torch.rand((), generator=rng).item() < spec.edit_fraction
    if is_edit:
        scene_in = _uniform_choice(grammar, rng)
        instruction = _uniform_choice(edit_instructions(scene_in), rng)
        scene_out = apply_instruction(scene_in, instruction)
        return make_edit_triple(
            scene_in, instruction, scene_out, vocab, k, spec.image_hw, spec.image_hw
        )
    scene = _uniform_choice(grammar, rng)
    layout = sample_layout(rng, spec.p_caption_first)
    return make_pair_sequence(scene, layout, vocab, k, spec.image_hw, spec.image_hw)


def build_corpus(spec: CorpusSpec, vocab: Vocab, k: int) -> list[MixedSequence]:
    return [make_row(spec, i, vocab, k) for i in range(spec.count)]


def row_scene(spec: CorpusSpec, index: int) -> SceneSpec | None:
    """The caption scene of a pair row (None for edit rows)."""
    rng = row_generator(spec, index)
    grammar = all_specs()
    if torch.rand((), generator=rng).item() < spec.edit_fraction:
        return None
    return _uniform_choice(grammar, rng)


def make_text_rows(scenes: list[SceneSpec], vocab: Vocab) -> list[MixedSequence]:
    """Caption-only rows for held-out perplexity measurement."""
    from .sequence import Text, build_sequence

    return [build_sequence([Text(s.caption())], vocab, k=1) for s in scenes]


def corpus_digest(rows: list[MixedSequence]) -> str:
    """SHA-256 over a canonical byte encoding of the corpus."""
    h = hashlib.sha256()
    for row in rows:
        for el in row.elements:
            if isinstance(el, DiscreteToken):
                h.update(b"T" + el.id.to_bytes(4, "little"))
            else:
                h.update(b"I" + el.index.to_bytes(4, "little"))
        for img in row.images:
            h.update(img.numpy().astype("<f4").tobytes())
        for span in row.spans:
            h.update(span[0].to_bytes(4, "little") + span[1].to_bytes(4, "little"))
        for layout in row.layouts:
            h.update(layout.value.encode())
        h.update(b"\x00")
    return h.hexdigest()
