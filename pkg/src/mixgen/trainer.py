"""Optimization loop, RNG streams, checkpointing, and the gradient-check harness."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field

import torch

from .corpus import derive_seed
from .errors import NonFiniteLoss
from .model import (
    Batch,
    LossReport,
    MixedModalTransformer,
    ModelConfig,
    build_batch_mask,
    build_model,
    collate,
    compute_losses,
)
from .schedule import DiffusionDraw, NoiseSchedule, make_cosine_schedule, make_draw, sample_timestep
from .sequence import MixedSequence


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 3e-4
    lr_final: float = 1.5e-5
    warmup_steps: int = 100
    total_steps: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    batch_tokens: int = 1024  # rows per batch = batch_tokens // context_len
    lam: float = 5.0
    timesteps: int = 1000
    noise_limit: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup must be shorter than the run")

    def to_dict(self) -> dict:
        return asdict(self)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def parity_hash(model_cfg: ModelConfig, train_cfg: TrainConfig, data_seed: int) -> str:
    """Hash of the components a controlled comparison must share: data seed,
    transformer dims, and optimizer settings. Codec choice, mask mode, lambda,
    and vocab extensions are deliberately excluded."""
    shared = {
        "data_seed": data_seed,
        "dim": model_cfg.dim,
        "n_layers": model_cfg.n_layers,
        "n_heads": model_cfg.n_heads,
        "context_len": model_cfg.context_len,
        "patch_k": model_cfg.patch_k,
        "image_hw": model_cfg.image_hw,
        "lr_peak": train_cfg.lr_peak,
        "lr_final": train_cfg.lr_final,
        "warmup_steps": train_cfg.warmup_steps,
        "total_steps": train_cfg.total_steps,
        "adam_betas": [train_cfg.adam_beta1, train_cfg.adam_beta2],
        "adam_eps": train_cfg.adam_eps,
        "weight_decay": train_cfg.weight_decay,
        "grad_clip": train_cfg.grad_clip,
        "batch_tokens": train_cfg.batch_tokens,
    }
    return config_hash(shared)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> final."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < cfg.warmup_steps:
        return cfg.lr_peak * step / cfg.warmup_steps
    if step >= cfg.total_steps:
        return cfg.lr_final
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_final + 0.5 * (cfg.lr_peak - cfg.lr_final) * (1 + math.cos(math.pi * frac))


# --- RNG streams -------------------------------------------------------------


STREAM_NAMES = ("data", "time", "noise", "sample")


@dataclass
class RngStreams:
    data: torch.Generator
    time: torch.Generator
    noise: torch.Generator
    sample: torch.Generator

    @staticmethod
    def from_seed(seed: int) -> "RngStreams":
        streams = {}
        for name in STREAM_NAMES:
            g = torch.Generator()
            g.manual_seed(derive_seed(seed, f"stream/{name}"))
            streams[name] = g
        return RngStreams(**streams)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        return {f"rng.{n}": getattr(self, n).get_state() for n in STREAM_NAMES}

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        for n in STREAM_NAMES:
            getattr(self, n).set_state(tensors[f"rng.{n}"].to(torch.uint8))


# --- one optimization step ---------------------------------------------------


@dataclass
class StepStats:
    step: int
    lr: float
    report: LossReport
    grad_norm: float  # global norm after clipping
    image_draws: list[tuple[str, int]] = field(default_factory=list)  # (layout, t)


def make_optimizer(model: MixedModalTransformer, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.lr_peak,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def draw_for_batch(
    batch: Batch, schedule: NoiseSchedule, streams: RngStreams, noise_limit: bool
) -> list[DiffusionDraw]:
    draws = []
    for img, span in zip(batch.images, batch.spans):
        t = sample_timestep(streams.time, span.layout, schedule, noise_limit)
        draws.append(make_draw(img, t, streams.noise, schedule))
    return draws


def global_grad_norm(model: torch.nn.Module) -> float:
    total = 0.0
    for p in model.parameters():
        if p.grad is not None:
            total += float(p.grad.pow(2).sum().item())
    return math.sqrt(total)


def train_step(
    model: MixedModalTransformer,
    optimizer: torch.optim.Optimizer,
    batch: Batch,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    streams: RngStreams,
    step: int,
) -> StepStats:
    draws = draw_for_batch(batch, schedule, streams, cfg.noise_limit)
    allow = build_batch_mask(batch, causal_only=model.cfg.causal_only)
    loss, report = compute_losses(model, batch, draws, allow, cfg.lam)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"step {step}: loss={loss.item()} report={report}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    lr = lr_at(step, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()
    return StepStats(
        step=step,
        lr=lr,
        report=report,
        grad_norm=global_grad_norm(model),
        image_draws=[(s.layout.value, d.t) for s, d in zip(batch.spans, draws)],
    )


# --- training loop ------------------------------------------------------------


LOG_FIELDS = ("step", "lr", "lm_loss", "ddpm_loss", "total", "grad_norm")


def log_row(stats: StepStats) -> list[str]:
    return [
        str(stats.step),
        f"{stats.lr:.10e}",
        f"{stats.report.lm_loss:.10e}",
        f"{stats.report.ddpm_loss:.10e}",
        f"{stats.report.total:.10e}",
        f"{stats.grad_norm:.10e}",
    ]


def run_training(
    model: MixedModalTransformer,
    rows: list[MixedSequence],
    cfg: TrainConfig,
    out_dir: str | None = None,
    schedule: NoiseSchedule | None = None,
    streams: RngStreams | None = None,
    optimizer: torch.optim.Optimizer | None = None,
    start_step: int = 0,
    steps: int | None = None,
    run_config: dict | None = None,
) -> list[StepStats]:
    """Train for `steps` (default: cfg.total_steps - start_step) on batches
    sampled (with replacement) from `rows`; optionally writes CSV logs, the
    resolved config, and a final checkpoint under out_dir."""
    schedule = schedule or make_cosine_schedule(cfg.timesteps)
    streams = streams or RngStreams.from_seed(cfg.seed)
    optimizer = optimizer or make_optimizer(model, cfg)
    rows_per_batch = max(1, cfg.batch_tokens // model.cfg.context_len)
    steps = cfg.total_steps - start_step if steps is None else steps

    history: list[StepStats] = []
    log_f = time_f = None
    log_writer = time_writer = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        payload = run_config or {
            "model": model.cfg.to_dict(),
            "train": cfg.to_dict(),
        }
        with open(os.path.join(out_dir, "config.json"), "w") as f:
            json.dump({**payload, "config_hash": config_hash(payload)}, f, indent=2, sort_keys=True)
            f.write("\n")
        log_f = open(os.path.join(out_dir, "train_log.csv"), "w", newline="")
        log_writer = csv.writer(log_f)
        log_writer.writerow(LOG_FIELDS)
        time_f = open(os.path.join(out_dir, "timesteps.csv"), "w", newline="")
        time_writer = csv.writer(time_f)
        time_writer.writerow(["step", "image", "layout", "t"])
    try:
        for step in range(start_step, start_step + steps):
            idx = torch.randint(len(rows), (rows_per_batch,), generator=streams.data)
            batch = collate([rows[i] for i in idx.tolist()], model.cfg.context_len)
            stats = train_step(model, optimizer, batch, schedule, cfg, streams, step)
            history.append(stats)
            if log_writer is not None:
                log_writer.writerow(log_row(stats))
                for i, (layout, t) in enumerate(stats.image_draws):
                    time_writer.writerow([step, i, layout, t])
    finally:
        if log_f is not None:
            log_f.close()
            time_f.close()
    if out_dir is not None:
        save_checkpoint(
            os.path.join(out_dir, "checkpoint"),
            model,
            optimizer,
            streams,
            cfg,
            start_step + steps,
            run_config=run_config,
        )
    return history


# --- checkpointing -------------------------------------------------------------

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "uint8": torch.uint8,
}


def _dtype_name(t: torch.Tensor) -> str:
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {name}")
    return name


def save_checkpoint(
    path: str,
    model: MixedModalTransformer,
    optimizer: torch.optim.Optimizer | None,
    streams: RngStreams | None,
    train_cfg: TrainConfig,
    step: int,
    run_config: dict | None = None,
    metrics: list[dict] | None = None,
) -> None:
    """Directory checkpoint: manifest.json (config, step, named-tensor index)
    plus params.bin (little-endian raw tensor bytes, concatenated in index
    order; model parameters are float32)."""
    os.makedirs(path, exist_ok=True)
    tensors: dict[str, torch.Tensor] = {}
    for name, p in model.state_dict().items():
        tensors[f"model.{name}"] = p.detach().to(torch.float32)
    if optimizer is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        names = [n for n, _ in model.named_parameters()]
        for pname, p in zip(names, params):
            state = optimizer.state.get(p, {})
            for key, val in state.items():
                if isinstance(val, torch.Tensor):
                    tensors[f"opt.{pname}.{key}"] = val.detach().to(torch.float32)
    if streams is not None:
        tensors.update(streams.state_tensors())

    index = []
    offset = 0
    blob = bytearray()
    for name in sorted(tensors):
        t = tensors[name].contiguous()
        data = t.numpy().tobytes()
        index.append(
            {
                "name": name,
                "dtype": _dtype_name(t),
                "shape": list(t.shape),
                "offset": offset,
            }
        )
        blob.extend(data)
        offset += len(data)
    payload = run_config or {"model": model.cfg.to_dict(), "train": train_cfg.to_dict()}
    manifest = {
        "step": step,
        "config": payload,
        "config_hash": config_hash(payload),
        "metrics": metrics or [],
        "index": index,
    }
    with open(os.path.join(path, "params.bin"), "wb") as f:
        f.write(bytes(blob))
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def read_checkpoint_tensors(path: str) -> tuple[dict, dict[str, torch.Tensor]]:
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    with open(os.path.join(path, "params.bin"), "rb") as f:
        blob = f.read()
    tensors = {}
    for entry in manifest["index"]:
        dtype = _DTYPES[entry["dtype"]]
        t = torch.empty(entry["shape"], dtype=dtype)
        n = t.numel() * t.element_size()
        t.view(-1).copy_(
            torch.frombuffer(bytearray(blob[entry["offset"] : entry["offset"] + n]), dtype=dtype)
        )
        tensors[entry["name"]] = t
    return manifest, tensors


def load_checkpoint(
    path: str,
    model: MixedModalTransformer,
    optimizer: torch.optim.Optimizer | None = None,
    streams: RngStreams | None = None,
) -> dict:
    """Restore state in place; returns the manifest."""
    manifest, tensors = read_checkpoint_tensors(path)
    state = {
        name.removeprefix("model."): t
        for name, t in tensors.items()
        if name.startswith("model.")
    }
    model.load_state_dict(state)
    if optimizer is not None:
        params = [p for g in optimizer.param_groups for p in g["params"]]
        names = [n for n, _ in model.named_parameters()]
        for pname, p in zip(names, params):
            entries = {
                key.removeprefix(f"opt.{pname}."): t
                for key, t in tensors.items()
                if key.startswith(f"opt.{pname}.")
            }
            if entries:
                optimizer.state[p] = {k: v.clone() for k, v in entries.items()}
    if streams is not None:
        streams.load_state_tensors(tensors)
    return manifest


def load_model(path: str, seed: int = 0) -> tuple[MixedModalTransformer, dict]:
    """Build a model from a checkpoint's recorded config and load its weights."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    model = build_model(ModelConfig(**manifest["config"]["model"]), seed=seed)
    load_checkpoint(path, model)
    model.eval()
    return model, manifest


# --- gradient check ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    worst_index: int
    n_checked: int
    per_tensor: dict[str, float]


def grad_check(
    model: MixedModalTransformer,
    batch: Batch,
    draws: list[DiffusionDraw],
    allow: torch.Tensor,
    lam: float,
    h: float = 1e-4,
    max_per_tensor: int | None = None,
    sample_seed: int = 0,
) -> GradCheckReport:
    """Central finite differences vs autograd, in 64-bit arithmetic.

    Checks every parameter entry unless max_per_tensor caps the per-tensor
    sample (every tensor is always covered). The relative-error denominator is
    floored at 1e-4: central differences carry ~h^2 (1e-8) absolute truncation
    noise, so near-zero gradients are compared at that absolute scale instead
    of an ill-defined ratio.
    """
    model = model.double()
    draws = [
        DiffusionDraw(t=d.t, epsilon=d.epsilon.double(), x_t=d.x_t.double()) for d in draws
    ]

    def loss_fn() -> torch.Tensor:
        total, _ = compute_losses(model, batch, draws, allow, lam)
        return total

    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    grads = {n: p.grad.detach().clone() for n, p in model.named_parameters()}

    g = torch.Generator().manual_seed(sample_seed)
    max_rel, worst_param, worst_index, checked = 0.0, "", -1, 0
    per_tensor: dict[str, float] = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            n = flat.numel()
            if max_per_tensor is not None and n > max_per_tensor:
                idxs = torch.randperm(n, generator=g)[:max_per_tensor].tolist()
            else:
                idxs = range(n)
            tensor_worst = 0.0
            for i in idxs:
                orig = flat[i].item()
                flat[i] = orig + h
                f_plus = loss_fn().item()
                flat[i] = orig - h
                f_minus = loss_fn().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2 * h)
                an = grads[name].view(-1)[i].item()
                rel = abs(fd - an) / max(abs(fd), abs(an), 1e-4)
                checked += 1
                tensor_worst = max(tensor_worst, rel)
                if rel > max_rel:
                    max_rel, worst_param, worst_index = rel, name, i
            per_tensor[name] = tensor_worst
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_param=worst_param,
        worst_index=worst_index,
        n_checked=checked,
        per_tensor=per_tensor,
    )
