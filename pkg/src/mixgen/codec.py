"""Patch codecs: map noised images to transformer vectors and back to noise
predictions, via a plain linear projection or U-Net style down/up blocks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import CountMismatch, MissingSkips, ShapeMismatch
from .patches import PatchConfig, patchify, timestep_embedding, unpatchify


@dataclass
class UNetState:
    """Per-image activations captured by encode and consumed once by decode."""

    skips: list[torch.Tensor]
    temb: torch.Tensor


class LinearCodec(nn.Module):
    """Single linear layer per direction; the timestep embedding is projected
    and added to each flattened patch before the encode projection."""

    is_unet = False

    def __init__(self, cfg: PatchConfig, time_dim: int = 32):
        super().__init__()
        self.cfg = cfg
        self.time_dim = time_dim
        self.time_proj = nn.Linear(time_dim, cfg.patch_dim)
        self.enc = nn.Linear(cfg.patch_dim, cfg.dim, bias=False)
        self.dec = nn.Linear(cfg.dim, cfg.patch_dim, bias=False)

    def encode(self, x_t: torch.Tensor, t: torch.Tensor):
        if x_t.shape[1:] != (self.cfg.channels, self.cfg.height, self.cfg.width):
            raise ShapeMismatch(f"image shape {tuple(x_t.shape[1:])} does not match config")
        p = patchify(x_t, self.cfg.k)  # (M, n, patch_dim)
        te = timestep_embedding(t, self.time_dim, dtype=x_t.dtype)
        p = p + self.time_proj(te)[:, None, :]
        return self.enc(p), None

    def decode(self, vecs: torch.Tensor, state=None) -> torch.Tensor:
        if vecs.shape[-2] != self.cfg.n_patches:
            raise CountMismatch(f"expected {self.cfg.n_patches} vectors, got {vecs.shape[-2]}")
        p = self.dec(vecs)
        return unpatchify(p, self.cfg.k, self.cfg.channels, self.cfg.height, self.cfg.width)


class ChannelLayerNorm(nn.Module):
    """Plain layer norm over the channel axis of (M, C, H, W) feature maps."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class ResBlock(nn.Module):
    """Conv residual block; the projected timestep embedding is added to the
    block input. The second conv starts small so the block is near-identity."""

    def __init__(self, ch_in: int, ch_out: int, time_dim: int):
        super().__init__()
        self.tproj = nn.Linear(time_dim, ch_in)
        self.norm1 = ChannelLayerNorm(ch_in)
        self.conv1 = nn.Conv2d(ch_in, ch_out, 3, padding=1)
        self.norm2 = ChannelLayerNorm(ch_out)
        self.conv2 = nn.Conv2d(ch_out, ch_out, 3, padding=1)
        self.conv2.weight.data.mul_(0.1)
        nn.init.zeros_(self.conv2.bias)
        self.shortcut = nn.Conv2d(ch_in, ch_out, 1) if ch_in != ch_out else nn.Identity()

    def forward(self, x, temb):
        h0 = x + self.tproj(temb)[:, :, None, None]
        h = self.conv1(F.silu(self.norm1(h0)))
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.shortcut(h0)


class GridAttention(nn.Module):
    """Single-head self-attention over the spatial grid (always bidirectional,
    independent of the transformer's sequence mask)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)
        self.proj.weight.data.mul_(0.1)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x):
        m, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(m, 3, c, h * w).unbind(1)
        att = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (att @ v.transpose(1, 2)).transpose(1, 2).reshape(m, c, h, w)
        return x + self.proj(out)


class UNetCodec(nn.Module):
    """Down blocks reduce the grid by k, a mid block applies grid
    self-attention, and mirrored up blocks with skip concatenation restore the
    input resolution. log2(k) stages of 2 residual blocks + 2x resampling."""

    is_unet = True

    def __init__(self, cfg: PatchConfig, base_channels: int = 32, time_dim: int = 64):
        super().__init__()
        if cfg.k & (cfg.k - 1) != 0:
            raise ValueError(f"U-Net codec needs a power-of-two patch size, got k={cfg.k}")
        self.cfg = cfg
        self.time_dim = time_dim
        self.stages = int(math.log2(cfg.k))
        widths = [base_channels * 2**i for i in range(max(self.stages, 1))]
        self.widths = widths[: self.stages] if self.stages else [base_channels]
        mid = self.widths[-1] if self.stages else base_channels

        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.lift = nn.Conv2d(cfg.channels, self.widths[0] if self.stages else mid, 3, padding=1)
        self.down_res = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(self.stages):
            w = self.widths[i]
            w_next = self.widths[i + 1] if i + 1 < self.stages else w
            self.down_res.append(
                nn.ModuleList([ResBlock(w, w, time_dim), ResBlock(w, w, time_dim)])
            )
            self.downs.append(nn.Conv2d(w, w_next, 3, stride=2, padding=1))
        self.mid_res1 = ResBlock(mid, mid, time_dim)
        self.mid_attn = GridAttention(mid)
        self.mid_res2 = ResBlock(mid, mid, time_dim)
        self.proj = nn.Conv2d(mid, cfg.dim, 1)

        self.unproj = nn.Conv2d(cfg.dim, mid, 1)
        self.up_convs = nn.ModuleList()
        self.up_res = nn.ModuleList()
        for i in range(self.stages):
            w = self.widths[i]
            ch_in = mid if i == self.stages - 1 else self.widths[i + 1]
            self.up_convs.append(nn.Conv2d(ch_in, w, 3, padding=1))
            self.up_res.append(
                nn.ModuleList([ResBlock(2 * w, w, time_dim), ResBlock(w, w, time_dim)])
            )
        self.out_conv = nn.Conv2d(self.widths[0] if self.stages else mid, cfg.channels, 3, padding=1)
        self.out_conv.weight.data.mul_(0.1)
        nn.init.zeros_(self.out_conv.bias)

    def encode(self, x_t: torch.Tensor, t: torch.Tensor):
        cfg = self.cfg
        if x_t.shape[1:] != (cfg.channels, cfg.height, cfg.width):
            raise ShapeMismatch(f"image shape {tuple(x_t.shape[1:])} does not match config")
        temb = self.time_mlp(timestep_embedding(t, self.time_dim, dtype=x_t.dtype))
        h = self.lift(x_t)
        skips = []
        for i in range(self.stages):
            h = self.down_res[i][0](h, temb)
            h = self.down_res[i][1](h, temb)
            skips.append(h)
            h = self.downs[i](h)
        h = self.mid_res1(h, temb)
        h = self.mid_attn(h)
        h = self.mid_res2(h, temb)
        vecs = self.proj(h)  # (M, d, H/k, W/k)
        m, d = vecs.shape[:2]
        vecs = vecs.permute(0, 2, 3, 1).reshape(m, cfg.n_patches, d)  # row-major
        return vecs, UNetState(skips=skips, temb=temb)

    def decode(self, vecs: torch.Tensor, state: UNetState | None = None) -> torch.Tensor:
        cfg = self.cfg
        if vecs.shape[-2] != cfg.n_patches:
            raise CountMismatch(f"expected {cfg.n_patches} vectors, got {vecs.shape[-2]}")
        if state is None:
            raise MissingSkips("U-Net decode requires the skips captured by encode")
        gh, gw = cfg.height // cfg.k, cfg.width // cfg.k
        m = vecs.shape[0]
        h = vecs.reshape(m, gh, gw, cfg.dim).permute(0, 3, 1, 2)
        h = self.unproj(h)
        for i in reversed(range(self.stages)):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = self.up_convs[i](h)
            h = torch.cat([h, state.skips[i]], dim=1)
            h = self.up_res[i][0](h, state.temb)
            h = self.up_res[i][1](h, state.temb)
        return self.out_conv(h)


def build_codec(cfg: PatchConfig, kind: str, unet_base_channels: int = 32, time_dim: int = 32):
    if kind == "linear":
        return LinearCodec(cfg, time_dim=time_dim)
    if kind == "unet":
        return UNetCodec(cfg, base_channels=unet_base_channels, time_dim=max(time_dim, 16))
    raise ValueError(f"unknown codec kind: {kind!r}")
