"""Character-level vocabulary with reserved control tokens."""

from __future__ import annotations

import string
from dataclasses import dataclass, field

from .errors import UnmappableCharacter

# The full printable ASCII set (100 characters, including whitespace).
CHARSET = string.printable

PAD = 0
BOS = 1
EOS = 2
BOI = 3
EOI = 4

RESERVED = (PAD, BOS, EOS, BOI, EOI)
RESERVED_NAMES = {PAD: "<pad>", BOS: "<bos>", EOS: "<eos>", BOI: "<boi>", EOI: "<eoi>"}


@dataclass(frozen=True)
class Vocab:
    """Maps characters to ids; ids 0..4 are reserved control tokens."""

    charset: str = CHARSET
    char_to_id: dict[str, int] = field(init=False, repr=False)
    id_to_char: dict[int, str] = field(init=False, repr=False)

    def __post_init__(self):
        c2i = {c: len(RESERVED) + i for i, c in enumerate(self.charset)}
        if len(c2i) != len(self.charset):
            raise ValueError("charset contains duplicate characters")
        object.__setattr__(self, "char_to_id", c2i)
        object.__setattr__(self, "id_to_char", {i: c for c, i in c2i.items()})

    @property
    def size(self) -> int:
        return len(RESERVED) + len(self.charset)

    def is_reserved(self, token_id: int) -> bool:
        return token_id in RESERVED


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Map text to character token ids; reserved ids are never emitted."""
    ids = []
    for pos, ch in enumerate(text):
        tid = vocab.char_to_id.get(ch)
        if tid is None:
            raise UnmappableCharacter(ch, pos)
        ids.append(tid)
    return ids


def decode(ids: list[int], vocab: Vocab) -> str:
    """Inverse of tokenize; rejects reserved or unknown ids."""
    chars = []
    for pos, tid in enumerate(ids):
        ch = vocab.id_to_char.get(tid)
        if ch is None:
            raise ValueError(f"id {tid} at position {pos} is not a character token")
        chars.append(ch)
    return "".join(chars)
