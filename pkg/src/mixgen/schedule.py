"""Noise schedule, forward noising, ancestral sampling step, and CFG."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import torch

from .errors import (
    InvalidT,
    ShapeMismatch,
    TimestepOrder,
    TimestepOutOfRange,
)
from .sequence import Layout


@dataclass(frozen=True)
class NoiseSchedule:
    """Precomputed tables, float64, indexed by timestep (index 0 unused for
    beta/sigma; alpha_bar[0] = 1)."""

    timesteps: int
    offset: float
    beta: torch.Tensor
    alpha_bar: torch.Tensor
    sigma: torch.Tensor


@dataclass(frozen=True)
class DiffusionDraw:
    """One noising event for one image; epsilon is None at inference time."""

    t: int
    epsilon: torch.Tensor | None
    x_t: torch.Tensor


def make_cosine_schedule(timesteps: int, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0) with
    f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2), betas clipped at 0.999.

    After a clip, subsequent alpha_bar values continue from the clipped beta so
    the identity beta_t = 1 - alpha_bar_t / alpha_bar_{t-1} always holds.
    """
    if timesteps < 1:
        raise InvalidT(f"need at least 1 timestep, got {timesteps}")
    if s < 0:
        raise InvalidT(f"schedule offset must be nonnegative, got {s}")
    T = timesteps

    def f(t: int) -> float:
        return math.cos(((t / T + s) / (1 + s)) * math.pi / 2.0) ** 2

    f0 = f(0)
    alpha_bar = torch.empty(T + 1, dtype=torch.float64)
    beta = torch.zeros(T + 1, dtype=torch.float64)
    alpha_bar[0] = 1.0
    for t in range(1, T + 1):
        raw = f(t) / f0
        b = min(1.0 - raw / alpha_bar[t - 1].item(), 0.999)
        beta[t] = b
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - b)
    sigma = torch.sqrt(beta)
    return NoiseSchedule(timesteps=T, offset=s, beta=beta, alpha_bar=alpha_bar, sigma=sigma)


def add_noise(
    x0: torch.Tensor, t: int, epsilon: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * epsilon."""
    if x0.shape != epsilon.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs epsilon {tuple(epsilon.shape)}")
    if not 1 <= t <= schedule.timesteps:
        raise TimestepOutOfRange(f"t={t} outside 1..{schedule.timesteps}")
    ab = schedule.alpha_bar[t].item()
    a = x0.new_tensor(math.sqrt(ab))
    b = x0.new_tensor(math.sqrt(1.0 - ab))
    return a * x0 + b * epsilon


def make_draw(
    x0: torch.Tensor, t: int, rng: torch.Generator, schedule: NoiseSchedule
) -> DiffusionDraw:
    epsilon = torch.randn(x0.shape, generator=rng, dtype=x0.dtype)
    return DiffusionDraw(t=t, epsilon=epsilon, x_t=add_noise(x0, t, epsilon, schedule))


def ddpm_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t: int,
    t_prev: int,
    schedule: NoiseSchedule,
    rng: torch.Generator | None = None,
    last_step: bool = False,
) -> torch.Tensor:
    """One ancestral denoising step t -> t_prev (supports strided pairs).

    The predicted clean image is clipped to [-1, 1]; the added-noise scale is
    the DDPM posterior std for the (t, t_prev) pair, forced to 0 on the final
    step so the last update is deterministic.
    """
    if not 0 <= t_prev < t <= schedule.timesteps:
        raise TimestepOrder(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    if x_t.shape != eps_hat.shape:
        raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    ab_t = schedule.alpha_bar[t].item()
    ab_p = schedule.alpha_bar[t_prev].item()
    x0_hat = (x_t - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    x0_hat = x0_hat.clamp(-1.0, 1.0)
    if last_step:
        var = 0.0
    else:
        var = max((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p), 0.0)
    dir_coef = math.sqrt(max(1.0 - ab_p - var, 0.0))
    out = math.sqrt(ab_p) * x0_hat + dir_coef * eps_hat
    if var > 0.0:
        if rng is None:
            raise ValueError("rng required when the step adds noise")
        z = torch.randn(x_t.shape, generator=rng, dtype=x_t.dtype)
        out = out + math.sqrt(var) * z
    return out


def cfg_combine(
    eps_cond: torch.Tensor, eps_uncond: torch.Tensor, w: float
) -> torch.Tensor:
    """eps_uncond + w * (eps_cond - eps_uncond); exact at w in {0, 1}."""
    if eps_cond.shape != eps_uncond.shape:
        raise ShapeMismatch(
            f"cond {tuple(eps_cond.shape)} vs uncond {tuple(eps_uncond.shape)}"
        )
    if w == 1.0:
        return eps_cond.clone()
    if w == 0.0:
        return eps_uncond.clone()
    return eps_uncond + w * (eps_cond - eps_uncond)


def sample_timestep(
    rng: torch.Generator,
    layout: Layout,
    schedule: NoiseSchedule,
    noise_limit_enabled: bool,
) -> int:
    """Uniform t in 1..T, capped at T/2 for images that precede their captions."""
    hi = schedule.timesteps
    if noise_limit_enabled and layout is Layout.IMAGE_FIRST:
        hi = schedule.timesteps // 2
    return int(torch.randint(1, hi + 1, (), generator=rng).item())


def strided_timesteps(timesteps: int, steps: int) -> list[int]:
    """Evenly spaced descending inference timesteps, always including T."""
    if not 1 <= steps <= timesteps:
        raise ValueError(f"steps must be in 1..{timesteps}, got {steps}")
    ts = sorted({max(1, round(timesteps * j / steps)) for j in range(1, steps + 1)})
    return list(reversed(ts))


def schedule_to_csv(schedule: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["t", "beta", "alpha_bar", "sigma"])
        for t in range(schedule.timesteps + 1):
            writer.writerow(
                [
                    t,
                    repr(schedule.beta[t].item()),
                    repr(schedule.alpha_bar[t].item()),
                    repr(schedule.sigma[t].item()),
                ]
            )
