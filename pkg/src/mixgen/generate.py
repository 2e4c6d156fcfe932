"""Mixed-mode decoding: token-by-token LM sampling that switches into an
iterative denoising loop when BOI is emitted, and back out after EOI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import vocab as V
from .errors import PrefixNotAtBOI
from .model import MixedModalTransformer, build_batch_mask, collate
from .schedule import (
    DiffusionDraw,
    NoiseSchedule,
    cfg_combine,
    ddpm_step,
    strided_timesteps,
)
from .sequence import DiscreteToken, ImageRef, Layout, MixedSequence


@dataclass(frozen=True)
class GenerationParams:
    max_new_elements: int = 128
    temperature: float = 0.0
    top_p: float = 1.0
    diffusion_steps: int = 250
    cfg_weight: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be nonnegative, got {self.temperature}")
        if self.max_new_elements < 1:
            raise ValueError("element budget must be positive")


@dataclass
class GenerationResult:
    sequence: MixedSequence
    stop_reason: str  # "eos" | "budget"
    new_elements: int


class SequenceBuilder:
    """Mutable sequence under construction; snapshots to MixedSequence."""

    def __init__(self):
        self.elements: list = []
        self.images: list[torch.Tensor] = []
        self.spans: list[tuple[int, int]] = []
        self.layouts: list[Layout] = []
        self.text_seen = False

    @classmethod
    def start(cls) -> "SequenceBuilder":
        b = cls()
        b.elements.append(DiscreteToken(V.BOS))
        return b

    @classmethod
    def from_sequence(cls, seq: MixedSequence) -> "SequenceBuilder":
        b = cls()
        b.elements = list(seq.elements)
        b.images = list(seq.images)
        b.spans = list(seq.spans)
        b.layouts = list(seq.layouts)
        b.text_seen = any(
            isinstance(el, DiscreteToken) and el.id not in V.RESERVED
            for el in seq.elements
        )
        return b

    def __len__(self) -> int:
        return len(self.elements)

    def append_token(self, token_id: int) -> None:
        self.elements.append(DiscreteToken(token_id))
        if token_id not in V.RESERVED:
            self.text_seen = True

    def open_image(self, x: torch.Tensor, n: int) -> None:
        """Register a new image occupying the next n positions (BOI must
        already be in place)."""
        idx = len(self.images)
        start = len(self.elements)
        self.elements.extend(ImageRef(idx) for _ in range(n))
        self.images.append(x)
        self.spans.append((start, n))
        self.layouts.append(
            Layout.CAPTION_FIRST if self.text_seen else Layout.IMAGE_FIRST
        )

    def set_last_image(self, x: torch.Tensor) -> None:
        self.images[-1] = x

    def sequence(self) -> MixedSequence:
        return MixedSequence(
            elements=tuple(self.elements),
            images=tuple(self.images),
            spans=tuple(self.spans),
            layouts=tuple(self.layouts),
        )


def sample_token(
    logits: torch.Tensor,
    temperature: float,
    top_p: float,
    rng: torch.Generator,
) -> int:
    """Temperature + nucleus sampling; greedy when temperature is 0. PAD and
    BOS are never sampled."""
    logits = logits.detach().float().clone()
    logits[V.PAD] = float("-inf")
    logits[V.BOS] = float("-inf")
    if temperature == 0.0:
        return int(np.argmax(logits.numpy()))
    probs = torch.softmax(logits / temperature, dim=-1)
    if top_p < 1.0:
        sorted_probs, order = torch.sort(probs, descending=True)
        cum = torch.cumsum(sorted_probs, dim=-1)
        cutoff = int(torch.searchsorted(cum, torch.tensor(top_p)).item())
        keep = order[: cutoff + 1]
        trimmed = torch.zeros_like(probs)
        trimmed[keep] = probs[keep]
        probs = trimmed / trimmed.sum()
    return int(torch.multinomial(probs, 1, generator=rng).item())


def _forward_builder(
    model: MixedModalTransformer,
    builder: SequenceBuilder,
    active: tuple[torch.Tensor, int] | None,
):
    """Run the model on the in-progress sequence. Completed images condition
    as clean pixels at t=0; `active` supplies (x_t, t) for the image currently
    being denoised (always the last one)."""
    seq = builder.sequence()
    batch = collate([seq], context_len=len(seq))
    draws = []
    for i, img in enumerate(batch.images):
        if active is not None and i == len(batch.images) - 1:
            draws.append(DiffusionDraw(t=active[1], epsilon=None, x_t=active[0]))
        else:
            draws.append(DiffusionDraw(t=0, epsilon=None, x_t=img))
    allow = build_batch_mask(batch, causal_only=model.cfg.causal_only)
    with torch.no_grad():
        return model(batch, draws, allow)


def _run_diffusion(
    model: MixedModalTransformer,
    builder: SequenceBuilder,
    params: GenerationParams,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> torch.Tensor:
    """Denoise a fresh image right after a BOI; appends the patch span and EOI.

    Each step overwrites the noised image in the sequence, so the model only
    ever conditions on the latest timestep. The classifier-free guidance
    branch contrasts the full prefix with a minimal [BOS, BOI] prefix.
    """
    pc = model.cfg.patch_config
    x = torch.randn((pc.channels, pc.height, pc.width), generator=rng)
    builder.open_image(x, pc.n_patches)
    uncond = None
    if params.cfg_weight != 1.0:
        uncond = SequenceBuilder.start()
        uncond.append_token(V.BOI)
        uncond.open_image(x, pc.n_patches)
    ts = strided_timesteps(schedule.timesteps, params.diffusion_steps)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = _forward_builder(model, builder, active=(x, t)).eps_hat[-1]
        if uncond is not None:
            eps_u = _forward_builder(model, uncond, active=(x, t)).eps_hat[-1]
            eps = cfg_combine(eps, eps_u, params.cfg_weight)
        x = ddpm_step(x, eps, t, t_prev, schedule, rng, last_step=(t_prev == 0))
        builder.set_last_image(x)
        if uncond is not None:
            uncond.set_last_image(x)
    builder.append_token(V.EOI)
    return x


def diffuse_image(
    model: MixedModalTransformer,
    prefix: MixedSequence,
    params: GenerationParams,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
) -> torch.Tensor:
    """Generate one image conditioned on a prefix whose last element is BOI."""
    last = prefix.elements[-1] if prefix.elements else None
    if not (isinstance(last, DiscreteToken) and last.id == V.BOI):
        raise PrefixNotAtBOI("prefix must end with a BOI token")
    if params.diffusion_steps > schedule.timesteps:
        raise ValueError("diffusion steps cannot exceed the training timesteps")
    if rng is None:
        rng = torch.Generator().manual_seed(params.seed)
    builder = SequenceBuilder.from_sequence(prefix)
    return _run_diffusion(model, builder, params, schedule, rng)


def generate(
    model: MixedModalTransformer,
    prompt: MixedSequence,
    params: GenerationParams,
    schedule: NoiseSchedule,
) -> GenerationResult:
    """LM-mode sampling with diffusion-mode interludes on BOI. Stops at EOS or
    when the element budget (or the model context) is exhausted; a truncated
    result is returned with stop_reason="budget"."""
    if params.diffusion_steps > schedule.timesteps:
        raise ValueError("diffusion steps cannot exceed the training timesteps")
    rng = torch.Generator().manual_seed(params.seed)
    builder = SequenceBuilder.from_sequence(prompt)
    pc = model.cfg.patch_config
    image_cost = pc.n_patches + 2  # BOI + patches + EOI
    new_elements = 0
    stop_reason = "budget"
    while True:
        if new_elements >= params.max_new_elements or len(builder) >= model.cfg.context_len:
            break
        logits = _forward_builder(model, builder, active=None).logits[0, len(builder) - 1]
        token = sample_token(logits, params.temperature, params.top_p, rng)
        if token == V.BOI:
            if (
                new_elements + image_cost > params.max_new_elements
                or len(builder) + image_cost > model.cfg.context_len
            ):
                break
            builder.append_token(V.BOI)
            _run_diffusion(model, builder, params, schedule, rng)
            new_elements += image_cost
            continue
        builder.append_token(token)
        new_elements += 1
        if token == V.EOS:
            stop_reason = "eos"
            break
    return GenerationResult(
        sequence=builder.sequence(), stop_reason=stop_reason, new_elements=new_elements
    )
