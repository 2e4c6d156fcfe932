"""Operator entry point: data generation, training, sampling, evaluation,
gradient checking, baseline runs, and mask inspection."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from . import vocab as V
from .baseline import (
    collect_patches,
    fit_codebook,
    sample_baseline_image,
    save_codebook,
    to_discrete_row,
)
from .configio import RunConfig, load_run_config, write_resolved_config
from .corpus import CorpusSpec, build_corpus, corpus_digest, derive_seed, make_row, make_text_rows, row_scene
from .evalsuite import (
    EvalReport,
    chance_bound,
    estimate_flops,
    generation_accuracy,
    heldout_ddpm_loss,
    outcomes_to_csv,
    perplexity,
)
from .generate import GenerationParams, SequenceBuilder, _run_diffusion, generate
from .mask import build_mask, mask_to_text
from .model import ModelConfig, build_batch_mask, build_model, collate
from .schedule import make_cosine_schedule
from .sequence import sequence_text, write_ppm
from .trainer import (
    RngStreams,
    TrainConfig,
    draw_for_batch,
    grad_check,
    load_model,
    parity_hash,
    run_training,
)
from .vocab import Vocab, tokenize

log = logging.getLogger("mixgen")


class UsageError(ValueError):
    pass


class CliParser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_help(sys.stderr)
        sys.stderr.write(f"\nerror: {message}\n")
        raise SystemExit(1)


def _setup_logging() -> None:
    level = os.environ.get("TRANSFUSION_LOG_LEVEL", "info").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise ValueError(f"TRANSFUSION_LOG_LEVEL must be one of {sorted(levels)}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(message)s")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override a config value, e.g. train.total_steps=100",
    )


def _config(args) -> RunConfig:
    try:
        return load_run_config(args.config, args.overrides)
    except (ValueError, TypeError, FileNotFoundError) as e:
        raise UsageError(str(e)) from e


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    rows = build_corpus(cfg.data, vocab, cfg.model.patch_k)
    os.makedirs(args.out, exist_ok=True)
    write_resolved_config(os.path.join(args.out, "config.json"), cfg)
    digest = corpus_digest(rows)
    with open(os.path.join(args.out, "corpus_digest.txt"), "w") as f:
        f.write(digest + "\n")
    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    with open(os.path.join(args.out, "rows.jsonl"), "w") as f:
        for i, row in enumerate(rows):
            paths = []
            for j, img in enumerate(row.images):
                p = os.path.join(img_dir, f"row{i:04d}_img{j}.ppm")
                write_ppm(p, img)
                paths.append(os.path.relpath(p, args.out))
            f.write(
                json.dumps(
                    {
                        "index": i,
                        "text": sequence_text(row, vocab),
                        "layouts": [l.value for l in row.layouts],
                        "images": paths,
                    }
                )
                + "\n"
            )
    log.info("wrote %d rows to %s (digest %s)", len(rows), args.out, digest[:12])
    print(digest)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    rows = build_corpus(cfg.data, vocab, cfg.model.patch_k)
    model = build_model(cfg.model, seed=cfg.train.seed)
    payload = {**cfg.to_dict(), "parity_hash": parity_hash(cfg.model, cfg.train, cfg.data.seed)}
    history = run_training(
        model, rows, cfg.train, out_dir=args.out, run_config=payload, steps=args.steps
    )
    last = history[-1]
    log.info(
        "finished step %d: lm=%.4f ddpm=%.4f total=%.4f",
        last.step,
        last.report.lm_loss,
        last.report.ddpm_loss,
        last.report.total,
    )
    print(f"final lm_loss {last.report.lm_loss:.6f} ddpm_loss {last.report.ddpm_loss:.6f}")
    return 0


def cmd_train_baseline(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    rows = build_corpus(cfg.data, vocab, cfg.model.patch_k)
    patches = collect_patches(rows, cfg.model.patch_k)
    codebook = fit_codebook(
        patches,
        cfg.baseline.codebook_size,
        iters=cfg.baseline.kmeans_iters,
        seed=cfg.baseline.kmeans_seed,
    )
    os.makedirs(args.out, exist_ok=True)
    save_codebook(os.path.join(args.out, "codebook.bin"), codebook)
    discrete_rows = [to_discrete_row(r, codebook, vocab, cfg.model.patch_k) for r in rows]
    model_cfg = ModelConfig(
        **{
            **cfg.model.to_dict(),
            "vocab_size": vocab.size + codebook.size,
            "causal_only": True,
        }
    )
    model = build_model(model_cfg, seed=cfg.train.seed)
    payload = {
        **cfg.to_dict(),
        "model": model_cfg.to_dict(),
        "parity_hash": parity_hash(cfg.model, cfg.train, cfg.data.seed),
    }
    history = run_training(
        model, discrete_rows, cfg.train, out_dir=args.out, run_config=payload, steps=args.steps
    )
    print(f"final lm_loss {history[-1].report.lm_loss:.6f}")
    return 0


def _prompt_sequence(model, text: str, vocab: Vocab, params: GenerationParams, schedule):
    """Build the prompt, generating an image at each <image> placeholder."""
    builder = SequenceBuilder.start()
    rng = torch.Generator().manual_seed(derive_seed(params.seed, "prompt"))
    parts = text.split("<image>")
    for i, part in enumerate(parts):
        for tid in tokenize(part, vocab):
            builder.append_token(tid)
        if i + 1 < len(parts):
            builder.append_token(V.BOI)
            _run_diffusion(model, builder, params, schedule, rng)
    return builder.sequence()


def cmd_sample(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    model, manifest = load_model(args.checkpoint)
    train_cfg = TrainConfig(**manifest["config"]["train"])
    schedule = make_cosine_schedule(train_cfg.timesteps)
    params = cfg.generate
    prompt = _prompt_sequence(model, args.prompt, vocab, params, schedule)
    result = generate(model, prompt, params, schedule)
    out_prefix = args.out
    os.makedirs(os.path.dirname(out_prefix) or ".", exist_ok=True)
    with open(out_prefix + ".txt", "w") as f:
        f.write(sequence_text(result.sequence, vocab) + "\n")
        f.write(f"# stop_reason: {result.stop_reason}\n")
    for i, img in enumerate(result.sequence.images):
        write_ppm(f"{out_prefix}_{i:03d}.ppm", img)
    print(
        f"wrote {out_prefix}.txt and {len(result.sequence.images)} image(s); "
        f"stop: {result.stop_reason}"
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    model, manifest = load_model(args.checkpoint)
    train_cfg = TrainConfig(**manifest["config"]["train"])
    schedule = make_cosine_schedule(train_cfg.timesteps)

    heldout = CorpusSpec(
        seed=cfg.eval.heldout_seed,
        count=cfg.eval.heldout_count,
        image_hw=cfg.data.image_hw,
        p_caption_first=1.0,
    )
    mixed_rows = build_corpus(heldout, vocab, model.cfg.patch_k)
    scenes = [row_scene(heldout, i) for i in range(heldout.count)]
    text_rows = make_text_rows([s for s in scenes if s is not None], vocab)
    captions = [s.caption() for s in scenes if s is not None][: cfg.eval.gen_prompts]

    ppl = perplexity(model, text_rows)
    ddpm = heldout_ddpm_loss(model, mixed_rows, schedule, seed=cfg.eval.heldout_seed)
    images: list[torch.Tensor] = []
    gen = generation_accuracy(model, captions, cfg.generate, schedule, vocab, images_out=images)
    tokens_seen = manifest["step"] * train_cfg.batch_tokens
    report = EvalReport(
        text_ppl=ppl,
        heldout_ddpm_loss=ddpm,
        generation_accuracy=gen.fraction,
        edit_accuracy=None,
        flops_estimate=estimate_flops(model.param_count(), max(tokens_seen, 1)),
        chance_bound=chance_bound(),
        n_gen_prompts=len(captions),
        n_edit_prompts=0,
        config_hash=manifest["config_hash"],
    )
    os.makedirs(args.out, exist_ok=True)
    img_dir = os.path.join(args.out, "images")
    os.makedirs(img_dir, exist_ok=True)
    for i, img in enumerate(images):
        path = os.path.join(img_dir, f"gen{i:03d}.ppm")
        write_ppm(path, img)
        gen.outcomes[i].image_path = os.path.relpath(path, args.out)
    report.to_json(os.path.join(args.out, "eval_report.json"))
    outcomes_to_csv(os.path.join(args.out, "outcomes.csv"), gen.outcomes)
    print(
        f"ppl {ppl:.4f} heldout_ddpm {ddpm:.4f} gen_acc {gen.fraction:.3f} "
        f"(chance {report.chance_bound:.4f})"
    )
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    model = build_model(cfg.model, seed=cfg.train.seed)
    schedule = make_cosine_schedule(cfg.train.timesteps)
    row = make_row(cfg.data, 0, vocab, cfg.model.patch_k)
    batch = collate([row], context_len=min(cfg.model.context_len, len(row)))
    streams = RngStreams.from_seed(cfg.train.seed)
    draws = draw_for_batch(batch, schedule, streams, cfg.train.noise_limit)
    allow = build_batch_mask(batch, causal_only=cfg.model.causal_only)
    report = grad_check(
        model, batch, draws, allow, cfg.train.lam, max_per_tensor=args.max_per_tensor
    )
    print(
        f"max relative error {report.max_rel_err:.3e} "
        f"(worst: {report.worst_param}[{report.worst_index}], {report.n_checked} entries)"
    )
    return 0 if report.max_rel_err < 1e-4 else 2


def cmd_inspect_mask(args) -> int:
    cfg = _config(args)
    vocab = Vocab()
    row = make_row(cfg.data, args.row, vocab, cfg.model.patch_k)
    kinds = collate([row], context_len=len(row)).kinds[0]
    spans = [(s, n) for s, n in row.spans]
    allow = build_mask(kinds, spans, causal_only=args.causal_only)
    print(mask_to_text(allow))
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = CliParser(prog="mixgen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic corpus")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the joint model")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None, help="override step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-baseline", help="train the discrete-token baseline")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("sample", help="generate text and images from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="text; use <image> to request an image")
    p.add_argument("--out", default="out", help="output prefix")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="run the evaluation suite on a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.add_argument("--max-per-tensor", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("inspect-mask", help="print the attention mask for a corpus row")
    _add_common(p)
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--causal-only", action="store_true")
    p.set_defaults(func=cmd_inspect_mask)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit:
        raise
    except UsageError as e:
        log.error("usage error: %s", e)
        return 1
    except Exception as e:  # runtime failure contract: exit 2
        log.error("%s: %s", type(e).__name__, e)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
