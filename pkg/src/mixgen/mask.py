"""Attention mask: global causal attention plus bidirectional intra-image blocks."""

from __future__ import annotations

import torch

from .errors import OverlappingSpans, SpanOutOfBounds

KIND_PAD = 0
KIND_TEXT = 1
KIND_PATCH = 2


def build_mask(
    kinds: torch.Tensor,
    spans: list[tuple[int, int]],
    causal_only: bool = False,
) -> torch.Tensor:
    """(L, L) boolean allow matrix: allow[i][j] means query i may attend to key j.

    allow[i][j] = (j <= i) or (not causal_only and i, j lie in the same image
    span). PAD rows and columns are fully masked. BOI/EOI are ordinary discrete
    positions and stay purely causal.
    """
    kinds = torch.as_tensor(kinds, dtype=torch.long)
    length = kinds.shape[0]
    covered = torch.zeros(length, dtype=torch.bool)
    for start, n in spans:
        if n < 1 or start < 0 or start + n > length:
            raise SpanOutOfBounds(f"span ({start}, {n}) outside sequence of length {length}")
        if covered[start : start + n].any():
            raise OverlappingSpans(f"span ({start}, {n}) overlaps another span")
        if (kinds[start : start + n] != KIND_PATCH).any():
            raise SpanOutOfBounds(f"span ({start}, {n}) covers non-patch positions")
        covered[start : start + n] = True

    allow = torch.tril(torch.ones(length, length, dtype=torch.bool))
    if not causal_only:
        for start, n in spans:
            allow[start : start + n, start : start + n] = True
    non_pad = kinds != KIND_PAD
    allow &= non_pad.view(length, 1) & non_pad.view(1, length)
    return allow


def mask_to_text(allow: torch.Tensor) -> str:
    """Debug rendering: one row per query, 0/1 per key."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in allow.tolist())
