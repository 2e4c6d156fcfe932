"""Joint next-token + diffusion training of one transformer over mixed
text/image sequences, with mixed-mode decoding."""

from .vocab import BOI, BOS, EOI, EOS, PAD, Vocab, decode, tokenize
from .scenes import SceneSpec, all_specs, parse_caption, render_scene
from .sequence import (
    DiscreteToken,
    Image,
    ImageRef,
    Layout,
    MixedSequence,
    Text,
    build_sequence,
    make_edit_triple,
    sample_layout,
)
from .corpus import CorpusSpec, build_corpus
from .schedule import (
    DiffusionDraw,
    NoiseSchedule,
    add_noise,
    cfg_combine,
    ddpm_step,
    make_cosine_schedule,
    sample_timestep,
)
from .patches import PatchConfig, patchify, timestep_embedding, unpatchify
from .codec import LinearCodec, UNetCodec
from .mask import build_mask
from .model import (
    LossReport,
    MixedModalTransformer,
    ModelConfig,
    build_model,
    collate,
    compute_losses,
    ddpm_loss,
    joint_loss,
    lm_loss,
)
from .trainer import TrainConfig, grad_check, load_checkpoint, lr_at, run_training, save_checkpoint, train_step
from .generate import GenerationParams, diffuse_image, generate
from .evalsuite import EvalReport, estimate_flops, generation_accuracy, perplexity, scene_check
from .baseline import Codebook, dequantize, fit_codebook, quantize

__all__ = [name for name in dir() if not name.startswith("_")]
