"""Patchification and sinusoidal timestep embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import CountMismatch, DimensionNotDivisible, OddDim


@dataclass(frozen=True)
class PatchConfig:
    k: int = 4
    channels: int = 3
    height: int = 16
    width: int = 16
    dim: int = 128  # transformer width the codec maps to/from

    def __post_init__(self):
        if self.height % self.k != 0 or self.width % self.k != 0:
            raise DimensionNotDivisible(
                f"{self.height}x{self.width} not divisible by k={self.k}"
            )

    @property
    def n_patches(self) -> int:
        return (self.height // self.k) * (self.width // self.k)

    @property
    def patch_dim(self) -> int:
        return self.k * self.k * self.channels


def patchify(x: torch.Tensor, k: int) -> torch.Tensor:
    """(..., C, H, W) -> (..., n, k*k*C), patches in row-major grid order."""
    *lead, c, h, w = x.shape
    if h % k != 0 or w % k != 0:
        raise DimensionNotDivisible(f"{h}x{w} not divisible by k={k}")
    gh, gw = h // k, w // k
    ln = len(lead)
    x = x.reshape(*lead, c, gh, k, gw, k)
    # (..., c, gh, ki, gw, kj) -> (..., gh, gw, c, ki, kj)
    x = x.permute(*range(ln), ln + 1, ln + 3, ln, ln + 2, ln + 4)
    return x.reshape(*lead, gh * gw, c * k * k)


def unpatchify(p: torch.Tensor, k: int, channels: int, height: int, width: int) -> torch.Tensor:
    """Inverse of patchify."""
    *lead, n, d = p.shape
    gh, gw = height // k, width // k
    if n != gh * gw or d != channels * k * k:
        raise CountMismatch(
            f"got {n} patches of dim {d}, expected {gh * gw} of dim {channels * k * k}"
        )
    ln = len(lead)
    p = p.reshape(*lead, gh, gw, channels, k, k)
    # (..., gh, gw, c, ki, kj) -> (..., c, gh, ki, gw, kj)
    p = p.permute(*range(ln), ln + 2, ln, ln + 3, ln + 1, ln + 4)
    return p.reshape(*lead, channels, height, width)


def timestep_embedding(
    t: torch.Tensor | int, dim: int, dtype: torch.dtype = torch.float32
) -> torch.Tensor:
    """Sinusoidal embedding with frequencies geometric from 1 down to 1/10000.

    Scalar t gives a (dim,) vector; a (M,) tensor gives (M, dim).
    """
    if dim % 2 != 0:
        raise OddDim(f"embedding dim must be even, got {dim}")
    scalar = not isinstance(t, torch.Tensor)
    tt = torch.as_tensor(t, dtype=dtype).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=dtype)
    else:
        i = torch.arange(half, dtype=dtype)
        freqs = torch.pow(torch.tensor(10000.0, dtype=dtype), -i / (half - 1))
    angles = tt[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    return emb[0] if scalar else emb
