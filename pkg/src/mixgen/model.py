"""Single transformer over mixed sequences: token logits at every position,
noise predictions at patch positions, and the joint loss."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from . import vocab as V
from .codec import build_codec
from .errors import LayoutMaskMismatch, ShapeMismatch
from .mask import KIND_PAD, KIND_PATCH, KIND_TEXT, build_mask
from .patches import PatchConfig
from .schedule import DiffusionDraw
from .sequence import DiscreteToken, Layout, MixedSequence


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 105
    dim: int = 128
    n_layers: int = 4
    n_heads: int = 4
    context_len: int = 64
    patch_k: int = 4
    image_hw: int = 16
    channels: int = 3
    codec: str = "linear"  # "linear" | "unet"
    unet_base_channels: int = 32
    time_dim: int = 32
    causal_only: bool = False
    mlp_hidden: int = 0  # 0 = auto (~8d/3, rounded up to a multiple of 8)

    def __post_init__(self):
        if self.dim % self.n_heads != 0:
            raise ValueError("dim must be divisible by n_heads")
        if (self.dim // self.n_heads) % 2 != 0:
            raise ValueError("head dim must be even for rotary embeddings")

    @property
    def patch_config(self) -> PatchConfig:
        return PatchConfig(
            k=self.patch_k,
            channels=self.channels,
            height=self.image_hw,
            width=self.image_hw,
            dim=self.dim,
        )

    @property
    def hidden_dim(self) -> int:
        if self.mlp_hidden:
            return self.mlp_hidden
        return ((8 * self.dim // 3) + 7) // 8 * 8

    def to_dict(self) -> dict:
        return asdict(self)


# --- batching ---------------------------------------------------------------


@dataclass(frozen=True)
class FlatSpan:
    row: int
    start: int
    length: int
    layout: Layout


@dataclass
class Batch:
    tokens: torch.Tensor  # (B, L) long; PAD at patch and padding positions
    kinds: torch.Tensor  # (B, L) long; KIND_* constants
    images: list[torch.Tensor]  # x0 tensors, flat across rows, in order
    spans: list[FlatSpan]

    @property
    def size(self) -> tuple[int, int]:
        return self.tokens.shape[0], self.tokens.shape[1]


def collate(rows: list[MixedSequence], context_len: int) -> Batch:
    b = len(rows)
    tokens = torch.full((b, context_len), V.PAD, dtype=torch.long)
    kinds = torch.full((b, context_len), KIND_PAD, dtype=torch.long)
    images: list[torch.Tensor] = []
    spans: list[FlatSpan] = []
    for r, row in enumerate(rows):
        if len(row) > context_len:
            raise ValueError(f"row of length {len(row)} exceeds context {context_len}")
        for pos, el in enumerate(row.elements):
            if isinstance(el, DiscreteToken):
                tokens[r, pos] = el.id
                kinds[r, pos] = KIND_TEXT
            else:
                kinds[r, pos] = KIND_PATCH
        for idx, (start, length) in enumerate(row.spans):
            spans.append(FlatSpan(row=r, start=start, length=length, layout=row.layouts[idx]))
            images.append(row.images[idx])
    return Batch(tokens=tokens, kinds=kinds, images=images, spans=spans)


def build_batch_mask(batch: Batch, causal_only: bool = False) -> torch.Tensor:
    b, length = batch.size
    out = torch.zeros(b, length, length, dtype=torch.bool)
    per_row: list[list[tuple[int, int]]] = [[] for _ in range(b)]
    for s in batch.spans:
        per_row[s.row].append((s.start, s.length))
    for r in range(b):
        out[r] = build_mask(batch.kinds[r], per_row[r], causal_only=causal_only)
    return out


# --- transformer ------------------------------------------------------------


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        rms = torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps)
        return x * rms * self.weight


class Rotary(nn.Module):
    """Rotary position encoding applied to query/key head vectors."""

    def __init__(self, head_dim: int, max_len: int, base: float = 10000.0):
        super().__init__()
        half = head_dim // 2
        inv_freq = base ** (-torch.arange(half, dtype=torch.float64) / half)
        pos = torch.arange(max_len, dtype=torch.float64)
        angles = pos[:, None] * inv_freq[None, :]
        self.register_buffer("cos", torch.cos(angles), persistent=False)
        self.register_buffer("sin", torch.sin(angles), persistent=False)

    def forward(self, x):
        # x: (B, heads, L, head_dim)
        length = x.shape[-2]
        cos = self.cos[:length].to(x.dtype)
        sin = self.sin[:length].to(x.dtype)
        x1, x2 = x.chunk(2, dim=-1)
        return torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.dim // cfg.n_heads
        self.wq = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wk = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wv = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.wo = nn.Linear(cfg.dim, cfg.dim, bias=False)
        self.rotary = Rotary(self.head_dim, cfg.context_len)

    def forward(self, x, allow):
        b, length, dim = x.shape
        shape = (b, length, self.n_heads, self.head_dim)
        q = self.rotary(self.wq(x).view(shape).transpose(1, 2))
        k = self.rotary(self.wk(x).view(shape).transpose(1, 2))
        v = self.wv(x).view(shape).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~allow[:, None, :, :], float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.wo(out.transpose(1, 2).reshape(b, length, dim))


class GatedMLP(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.gate = nn.Linear(cfg.dim, cfg.hidden_dim, bias=False)
        self.up = nn.Linear(cfg.dim, cfg.hidden_dim, bias=False)
        self.down = nn.Linear(cfg.hidden_dim, cfg.dim, bias=False)

    def forward(self, x):
        return self.down(F.silu(self.gate(x)) * self.up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.dim)
        self.attn = Attention(cfg)
        self.mlp_norm = RMSNorm(cfg.dim)
        self.mlp = GatedMLP(cfg)

    def forward(self, x, allow):
        x = x + self.attn(self.attn_norm(x), allow)
        return x + self.mlp(self.mlp_norm(x))


@dataclass
class ForwardOutput:
    logits: torch.Tensor  # (B, L, vocab)
    eps_hat: list[torch.Tensor]  # one (C, H, W) prediction per image, flat order


class MixedModalTransformer(nn.Module):
    """Pre-norm transformer with rotary attention and gated MLPs; discrete
    positions go through the token embedding / LM head, patch positions go
    through the codec."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.out_norm = RMSNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size, bias=False)
        self.codec = build_codec(
            cfg.patch_config,
            cfg.codec,
            unet_base_channels=cfg.unet_base_channels,
            time_dim=cfg.time_dim,
        )
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.lm_head.weight, std=0.02)

    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, batch: Batch, draws: list[DiffusionDraw], allow: torch.Tensor) -> ForwardOutput:
        b, length = batch.size
        if allow.shape != (b, length, length):
            raise LayoutMaskMismatch(
                f"mask shape {tuple(allow.shape)} does not match batch {b}x{length}"
            )
        if len(draws) != len(batch.spans):
            raise LayoutMaskMismatch(
                f"{len(draws)} draws for {len(batch.spans)} image spans"
            )
        dtype = self.tok_emb.weight.dtype
        h = self.tok_emb(batch.tokens).clone()
        state = None
        if draws:
            x_t = torch.stack([d.x_t for d in draws]).to(dtype)
            t = torch.tensor([float(d.t) for d in draws])
            vecs, state = self.codec.encode(x_t, t)
            for i, s in enumerate(batch.spans):
                if s.length != vecs.shape[1]:
                    raise LayoutMaskMismatch(
                        f"span length {s.length} != codec patch count {vecs.shape[1]}"
                    )
                h[s.row, s.start : s.start + s.length] = vecs[i]
        # Give attention-starved rows (all-PAD) a self-connection so softmax
        # stays finite; those outputs are never read by any loss.
        eye = torch.eye(length, dtype=torch.bool).expand(b, length, length)
        exec_allow = allow | (eye & ~allow.any(-1, keepdim=True))
        for block in self.blocks:
            h = block(h, exec_allow)
        h = self.out_norm(h)
        logits = self.lm_head(h)
        eps_hat: list[torch.Tensor] = []
        if draws:
            outs = torch.stack(
                [h[s.row, s.start : s.start + s.length] for s in batch.spans]
            )
            decoded = self.codec.decode(outs, state)
            eps_hat = list(decoded.unbind(0))
        return ForwardOutput(logits=logits, eps_hat=eps_hat)


def build_model(cfg: ModelConfig, seed: int = 0) -> MixedModalTransformer:
    torch.manual_seed(seed)
    return MixedModalTransformer(cfg)


# --- losses ------------------------------------------------------------------


@dataclass(frozen=True)
class LossReport:
    lm_loss: float
    ddpm_loss: float
    lam: float
    total: float
    n_text_tokens: int
    n_images: int
    n_patches: int


def lm_loss_mask(tokens: torch.Tensor, kinds: torch.Tensor) -> torch.Tensor:
    """(B, L-1) mask of positions contributing LM loss: the target (next
    element) is a discrete non-PAD token, and the input is neither PAD nor BOI."""
    tgt_kind = kinds[:, 1:]
    in_kind = kinds[:, :-1]
    in_tok = tokens[:, :-1]
    boi_input = (in_kind == KIND_TEXT) & (in_tok == V.BOI)
    return (tgt_kind == KIND_TEXT) & (in_kind != KIND_PAD) & ~boi_input


def lm_loss(
    logits: torch.Tensor, tokens: torch.Tensor, kinds: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """Mean next-token negative log-likelihood (nats) over masked positions.

    Returns (loss, count); an empty mask yields (0, 0) so callers can flag it.
    """
    mask = lm_loss_mask(tokens, kinds)
    count = int(mask.sum().item())
    if count == 0:
        return logits.sum() * 0.0, 0
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    nll = -logp.gather(-1, tokens[:, 1:, None]).squeeze(-1)
    return (nll * mask).sum() / count, count


def ddpm_loss(eps_hat: list[torch.Tensor], eps: list[torch.Tensor]) -> torch.Tensor:
    """Mean squared error per image, averaged over images."""
    if len(eps_hat) != len(eps):
        raise ShapeMismatch(f"{len(eps_hat)} predictions for {len(eps)} noise tensors")
    per_image = []
    for eh, e in zip(eps_hat, eps):
        if eh.shape != e.shape:
            raise ShapeMismatch(f"{tuple(eh.shape)} vs {tuple(e.shape)}")
        per_image.append(((eh - e.to(eh.dtype)) ** 2).mean())
    return torch.stack(per_image).mean()


def joint_loss(lm: torch.Tensor | float, ddpm: torch.Tensor | float, lam: float):
    """Combined objective: lm + lam * ddpm."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    return lm + lam * ddpm


def compute_losses(
    model: MixedModalTransformer,
    batch: Batch,
    draws: list[DiffusionDraw],
    allow: torch.Tensor,
    lam: float,
) -> tuple[torch.Tensor, LossReport]:
    out = model(batch, draws, allow)
    lm, count = lm_loss(out.logits, batch.tokens, batch.kinds)
    if draws:
        dd = ddpm_loss(out.eps_hat, [d.epsilon for d in draws])
    else:
        dd = lm.new_zeros(())
    total = joint_loss(lm, dd, lam)
    lm_f, dd_f = float(lm.item()), float(dd.item())
    report = LossReport(
        lm_loss=lm_f,
        ddpm_loss=dd_f,
        lam=lam,
        total=lm_f + lam * dd_f,
        n_text_tokens=count,
        n_images=len(draws),
        n_patches=sum(s.length for s in batch.spans),
    )
    return total, report
