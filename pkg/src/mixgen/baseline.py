"""Discrete-token baseline: quantize image patches with a k-means codebook and
train the same transformer with the LM loss only (fully causal attention)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch

from .errors import InsufficientData
from .model import MixedModalTransformer, build_batch_mask, collate
from .patches import patchify, unpatchify
from .sequence import DiscreteToken, MixedSequence
from .vocab import Vocab


@dataclass(frozen=True)
class Codebook:
    centroids: torch.Tensor  # (K, patch_dim) float32

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_dists(patches: torch.Tensor, centroids: torch.Tensor) -> torch.Tensor:
    diff = patches.double()[:, None, :] - centroids.double()[None, :, :]
    return (diff * diff).sum(-1)


def quantize(patches: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    """Nearest centroid by Euclidean distance; ties break to the lowest index."""
    single = patches.dim() == 1
    p = patches.reshape(-1, codebook.dim)
    idx = np.argmin(_sq_dists(p, codebook.centroids).numpy(), axis=1)
    out = torch.from_numpy(idx.astype(np.int64))
    return out[0] if single else out.reshape(patches.shape[:-1])


def dequantize(indices: torch.Tensor, codebook: Codebook) -> torch.Tensor:
    return codebook.centroids[indices]


def fit_codebook(
    patches: torch.Tensor, k: int, iters: int = 25, seed: int = 0
) -> Codebook:
    """Plain Lloyd's k-means with a fixed seed; empty clusters are re-seeded
    from the points farthest from their assigned centroids."""
    patches = patches.reshape(-1, patches.shape[-1]).float()
    distinct = torch.unique(patches, dim=0)
    if distinct.shape[0] < k:
        raise InsufficientData(
            f"need at least {k} distinct patches, got {distinct.shape[0]}"
        )
    g = torch.Generator().manual_seed(seed)
    order = torch.randperm(patches.shape[0], generator=g).tolist()
    centroids: list[torch.Tensor] = []
    seen = set()
    for i in order:
        key = patches[i].numpy().tobytes()
        if key not in seen:
            seen.add(key)
            centroids.append(patches[i])
        if len(centroids) == k:
            break
    c = torch.stack(centroids)

    assign = None
    for _ in range(iters):
        d = _sq_dists(patches, c)
        new_assign = torch.from_numpy(np.argmin(d.numpy(), axis=1))
        nearest_d = d.gather(1, new_assign[:, None]).squeeze(1)
        for j in range(k):
            sel = new_assign == j
            if sel.any():
                c[j] = patches[sel].mean(0)
            else:
                far = int(torch.argmax(nearest_d).item())
                c[j] = patches[far]
                new_assign[far] = j
                nearest_d[far] = 0.0
        if assign is not None and torch.equal(new_assign, assign):
            break
        assign = new_assign
    return Codebook(centroids=c.clone())


def save_codebook(path, codebook: Codebook) -> None:
    """Binary format: little-endian uint32 (K, dim) header + float32 centroids."""
    with open(path, "wb") as f:
        f.write(struct.pack("<II", codebook.size, codebook.dim))
        f.write(codebook.centroids.numpy().astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as f:
        k, dim = struct.unpack("<II", f.read(8))
        data = np.frombuffer(f.read(4 * k * dim), dtype="<f4").reshape(k, dim)
    return Codebook(centroids=torch.from_numpy(data.copy()))


def collect_patches(rows: list[MixedSequence], k: int) -> torch.Tensor:
    """All patch vectors across all images in the rows."""
    chunks = [patchify(img, k) for row in rows for img in row.images]
    if not chunks:
        raise InsufficientData("no images in the training rows")
    return torch.cat(chunks, dim=0)


def image_token_id(index: int, vocab: Vocab) -> int:
    return vocab.size + index


def to_discrete_row(seq: MixedSequence, codebook: Codebook, vocab: Vocab, k: int) -> MixedSequence:
    """Replace each patch span with quantized image tokens occupying vocab
    slots beyond the text vocabulary. The per-image element count is unchanged."""
    elements = list(seq.elements)
    for (start, length), img in zip(seq.spans, seq.images):
        codes = quantize(patchify(img, k), codebook)
        for j in range(length):
            elements[start + j] = DiscreteToken(image_token_id(int(codes[j]), vocab))
    return MixedSequence(elements=tuple(elements))


def sample_baseline_image(
    model: MixedModalTransformer,
    prefix_tokens: list[int],
    codebook: Codebook,
    vocab: Vocab,
    rng: torch.Generator,
    temperature: float = 0.0,
) -> torch.Tensor:
    """Sample n image tokens after the prefix and dequantize them to pixels."""
    pc = model.cfg.patch_config
    lo, hi = vocab.size, vocab.size + codebook.size
    tokens = list(prefix_tokens)
    codes = []
    with torch.no_grad():
        for _ in range(pc.n_patches):
            seq = MixedSequence(elements=tuple(DiscreteToken(t) for t in tokens))
            batch = collate([seq], context_len=len(seq))
            allow = build_batch_mask(batch, causal_only=True)
            logits = model(batch, [], allow).logits[0, -1, lo:hi]
            if temperature == 0.0:
                code = int(np.argmax(logits.numpy()))
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                code = int(torch.multinomial(probs, 1, generator=rng).item())
            codes.append(code)
            tokens.append(image_token_id(code, vocab))
    patches = dequantize(torch.tensor(codes), codebook)
    return unpatchify(patches, pc.k, pc.channels, pc.height, pc.width)
