"""Tuning run for the overfit-and-regenerate acceptance experiment."""

import sys
import time

import torch

from mixgen import *
from mixgen.corpus import CorpusSpec, build_corpus, row_scene
from mixgen.evalsuite import generation_accuracy
from mixgen.generate import GenerationParams
from mixgen.model import ModelConfig, build_model
from mixgen.trainer import TrainConfig, run_training
from mixgen.vocab import Vocab

dim = int(sys.argv[1]) if len(sys.argv) > 1 else 128
layers = int(sys.argv[2]) if len(sys.argv) > 2 else 4
steps = int(sys.argv[3]) if len(sys.argv) > 3 else 3000
k = int(sys.argv[4]) if len(sys.argv) > 4 else 4

vocab = Vocab()
data = CorpusSpec(seed=7, count=64, image_hw=16, p_caption_first=1.0)
rows = build_corpus(data, vocab, k)
scenes = [row_scene(data, i) for i in range(data.count)]
captions = [s.caption() for s in scenes]
print(f"corpus: {len(rows)} rows, {len(set(captions))} unique captions")

mcfg = ModelConfig(vocab_size=vocab.size, dim=dim, n_layers=layers, n_heads=4,
                   context_len=64, patch_k=k, image_hw=16, codec="linear")
tcfg = TrainConfig(total_steps=steps, warmup_steps=100, batch_tokens=1024,
                   lam=5.0, timesteps=1000, seed=7)
model = build_model(mcfg, seed=7)
print(f"model params: {model.param_count()}")

t0 = time.time()
history = run_training(model, rows, tcfg)
train_t = time.time() - t0
w = 32
lm_avg = sum(h.report.lm_loss for h in history[-w:]) / w
dd_avg = sum(h.report.ddpm_loss for h in history[-w:]) / w
print(f"train {train_t:.0f}s; last-{w} avg lm={lm_avg:.4f} ddpm={dd_avg:.4f}")

model.eval()
schedule = make_cosine_schedule(tcfg.timesteps)
for wgt in (1.0, 3.0):
    t0 = time.time()
    params = GenerationParams(diffusion_steps=50, cfg_weight=wgt, seed=11)
    res = generation_accuracy(model, captions, params, schedule, vocab)
    print(f"w={wgt}: accuracy {res.fraction:.3f} [{time.time()-t0:.0f}s]")
    fails = [o.prompt for o in res.outcomes if not o.passed]
    if fails:
        print("  failed:", fails[:8])
