import numpy as np
import pytest
import torch

from lumen.core import ImageTensor
from lumen.transforms import LowLightCodec, ModelConfig


def make_image(rng: np.random.Generator, h: int, w: int) -> ImageTensor:
    return ImageTensor.from_array(rng.random((3, h, w), dtype=np.float32))


def tiny_config(quality: int = 3) -> ModelConfig:
    return ModelConfig(
        stage0_channels=16,
        latent_channels=16,
        hyper_channels=16,
        quality_index=quality,
    )


@pytest.fixture(scope="session")
def small_model() -> LowLightCodec:
    torch.manual_seed(0)
    model = LowLightCodec(tiny_config())
    model.update_tables()
    model.eval()
    return model


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
