import pytest
import torch

from mixgen.model import ModelConfig, build_model
from mixgen.vocab import Vocab


@pytest.fixture(scope="session")
def vocab() -> Vocab:
    return Vocab()


def tiny_model_config(**overrides) -> ModelConfig:
    base = dict(
        vocab_size=Vocab().size,
        dim=32,
        n_layers=2,
        n_heads=2,
        context_len=64,
        patch_k=4,
        image_hw=16,
        codec="linear",
        unet_base_channels=8,
        time_dim=16,
    )
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture()
def tiny_model():
    return build_model(tiny_model_config(), seed=0)


def rand_image(shape=(3, 16, 16), seed=0) -> torch.Tensor:
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g) * 2 - 1
