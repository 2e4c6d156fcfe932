"""Staged overfit run: evaluate conditioning and accuracy at checkpoints."""

import math
import sys
import time

import torch

from mixgen.corpus import CorpusSpec, build_corpus, row_scene
from mixgen.evalsuite import generation_accuracy
from mixgen.generate import GenerationParams
from mixgen.model import ModelConfig, build_model, collate, build_batch_mask
from mixgen.schedule import DiffusionDraw, add_noise, make_cosine_schedule
from mixgen.trainer import (
    RngStreams,
    TrainConfig,
    make_optimizer,
    run_training,
    save_checkpoint,
)
from mixgen.vocab import Vocab

lam = float(sys.argv[1]) if len(sys.argv) > 1 else 20.0
total = int(sys.argv[2]) if len(sys.argv) > 2 else 6000
segs = [2500, 4000, total]

vocab = Vocab()
data = CorpusSpec(seed=7, count=64, image_hw=16, p_caption_first=1.0)
rows = build_corpus(data, vocab, 4)
scenes = [row_scene(data, i) for i in range(data.count)]
mcfg = ModelConfig(vocab_size=vocab.size, dim=64, n_layers=3, n_heads=4,
                   context_len=48, patch_k=4, image_hw=16, codec="unet",
                   unet_base_channels=32, time_dim=32)
tcfg = TrainConfig(total_steps=total, warmup_steps=100, batch_tokens=1536,
                   lam=lam, timesteps=1000, seed=7)
model = build_model(mcfg, seed=7)
streams = RngStreams.from_seed(tcfg.seed)
opt = make_optimizer(model, tcfg)
schedule = make_cosine_schedule(1000)

def probe(tag):
    model.eval()
    row = rows[0]
    x0 = row.images[0]
    g = torch.Generator().manual_seed(99)
    msgs = []
    for t in (600, 800, 900):
        eps = torch.randn(x0.shape, generator=g)
        x_t = add_noise(x0, t, eps, schedule)
        batch = collate([row], context_len=len(row))
        with torch.no_grad():
            out = model(batch, [DiffusionDraw(t=t, epsilon=eps, x_t=x_t)], build_batch_mask(batch))
        ab = schedule.alpha_bar[t].item()
        x0h = ((x_t - (1 - ab) ** 0.5 * out.eps_hat[0]) / ab ** 0.5).clamp(-1, 1)
        msgs.append(f"t{t}={((x0h - x0) ** 2).mean():.4f}")
    caps = [s.caption() for s in scenes[:16]]
    t0 = time.time()
    acc = generation_accuracy(model, caps, GenerationParams(diffusion_steps=50, cfg_weight=1.0, seed=3), schedule, vocab)
    msgs.append(f"acc16(w=1)={acc.fraction:.3f} [{time.time()-t0:.0f}s]")
    print(f"{tag}: " + " ".join(msgs), flush=True)
    model.train()

start = 0
t_begin = time.time()
for seg_end in segs:
    hist = run_training(model, rows, tcfg, streams=streams, optimizer=opt,
                        start_step=start, steps=seg_end - start)
    lm = sum(h.report.lm_loss for h in hist[-32:]) / 32
    dd = sum(h.report.ddpm_loss for h in hist[-32:]) / 32
    print(f"step {seg_end}: lm={lm:.4f} ddpm={dd:.4f} elapsed={time.time()-t_begin:.0f}s", flush=True)
    save_checkpoint(f"/tmp/stage_ck_{seg_end}", model, opt, streams, tcfg, seg_end)
    probe(f"  probe@{seg_end}")
    start = seg_end

# final full-set accuracy at both guidance weights
model.eval()
caps = [s.caption() for s in scenes]
for w in (1.0, 3.0):
    t0 = time.time()
    acc = generation_accuracy(model, caps, GenerationParams(diffusion_steps=50, cfg_weight=w, seed=11), schedule, vocab)
    print(f"final acc64 w={w}: {acc.fraction:.3f} [{time.time()-t0:.0f}s]", flush=True)
