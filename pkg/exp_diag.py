"""Diagnose the denoising path: teacher-forced reconstruction vs sampled chains."""

import sys
import time

import torch

from mixgen import *
from mixgen.corpus import CorpusSpec, build_corpus, row_scene
from mixgen.evalsuite import scene_match, generation_accuracy
from mixgen.generate import GenerationParams, diffuse_image
from mixgen.evalsuite import caption_prefix
from mixgen.model import ModelConfig, build_model, collate, build_batch_mask
from mixgen.schedule import DiffusionDraw, add_noise, make_cosine_schedule
from mixgen.trainer import TrainConfig, run_training
from mixgen.vocab import Vocab
from mixgen.scenes import render_scene

dim, layers, steps, k = 64, 3, int(sys.argv[1]) if len(sys.argv) > 1 else 2000, 4

vocab = Vocab()
data = CorpusSpec(seed=7, count=64, image_hw=16, p_caption_first=1.0)
rows = build_corpus(data, vocab, k)
scenes = [row_scene(data, i) for i in range(data.count)]

mcfg = ModelConfig(vocab_size=vocab.size, dim=dim, n_layers=layers, n_heads=4,
                   context_len=64, patch_k=k, image_hw=16, codec="linear")
tcfg = TrainConfig(total_steps=steps, warmup_steps=100, batch_tokens=1024,
                   lam=5.0, timesteps=1000, seed=7)
model = build_model(mcfg, seed=7)
t0 = time.time()
hist = run_training(model, rows, tcfg)
print(f"train {time.time()-t0:.0f}s lm={sum(h.report.lm_loss for h in hist[-32:])/32:.4f} "
      f"ddpm={sum(h.report.ddpm_loss for h in hist[-32:])/32:.4f}")
model.eval()
schedule = make_cosine_schedule(1000)

# Teacher-forced: noise a training image to t, predict eps, invert to x0_hat.
row, scene = rows[0], scenes[0]
x0 = row.images[0]
g = torch.Generator().manual_seed(99)
print(f"scene: {scene.caption()}")
for t in (50, 200, 500, 800, 1000):
    eps = torch.randn(x0.shape, generator=g)
    x_t = add_noise(x0, t, eps, schedule)
    batch = collate([row], context_len=len(row))
    draws = [DiffusionDraw(t=t, epsilon=eps, x_t=x_t)]
    allow = build_batch_mask(batch)
    with torch.no_grad():
        out = model(batch, draws, allow)
    eh = out.eps_hat[0]
    ab = schedule.alpha_bar[t].item()
    x0_hat = ((x_t - (1 - ab) ** 0.5 * eh) / ab**0.5).clamp(-1, 1)
    print(f"  t={t:4d}: eps_mse={(eh - eps).pow(2).mean():.4f} "
          f"x0_mse={(x0_hat - x0).pow(2).mean():.4f}")

# Sampled chains at various step counts (w=1).
for nsteps in (50, 250):
    prefix = caption_prefix(scene.caption(), vocab).sequence()
    img = diffuse_image(model, prefix, GenerationParams(diffusion_steps=nsteps, cfg_weight=1.0, seed=3), schedule)
    best, iou = scene_match(img)
    tmpl_mse = (img - render_scene(scene)).pow(2).mean().item()
    print(f"sampled {nsteps} steps: match={best == scene} iou={iou:.3f} mse_vs_template={tmpl_mse:.4f} "
          f"px_range=({img.min():.2f},{img.max():.2f}) px_std={img.std():.3f}")

acc = generation_accuracy(model, [s.caption() for s in scenes[:16]], GenerationParams(diffusion_steps=50, cfg_weight=1.0, seed=3), schedule, vocab)
print("16-prompt accuracy w=1:", acc.fraction)
