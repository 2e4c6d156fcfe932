import random

import pytest

from mixgen import vocab as V
from mixgen.errors import UnmappableCharacter
from mixgen.vocab import Vocab, decode, tokenize


def test_reserved_ids_distinct_and_below_size(vocab):
    assert len(set(V.RESERVED)) == len(V.RESERVED)
    assert all(0 <= r < vocab.size for r in V.RESERVED)


def test_every_character_round_trips(vocab):
    for ch, tid in vocab.char_to_id.items():
        assert vocab.id_to_char[tid] == ch
        assert tid not in V.RESERVED


def test_tokenize_empty(vocab):
    assert tokenize("", vocab) == []


def test_tokenize_definitional(vocab):
    assert tokenize("ab", vocab) == [vocab.char_to_id["a"], vocab.char_to_id["b"]]


def test_tokenize_emits_no_reserved_ids(vocab):
    ids = tokenize("hello world 123!", vocab)
    assert all(i not in V.RESERVED for i in ids)


def test_round_trip_random_strings(vocab):
    rng = random.Random(1234)
    chars = vocab.charset
    for _ in range(1000):
        s = "".join(rng.choice(chars) for _ in range(rng.randrange(0, 40)))
        assert decode(tokenize(s, vocab), vocab) == s


def test_unmappable_character_position(vocab):
    with pytest.raises(UnmappableCharacter) as exc:
        tokenize("oké", vocab)
    assert exc.value.position == 2


def test_decode_rejects_reserved(vocab):
    with pytest.raises(ValueError):
        decode([V.BOS], vocab)
