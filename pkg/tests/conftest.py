import numpy as np
import pytest

from lunardem.model import ModelConfig
from lunardem.synthgen import DatasetRanges, make_dataset
from lunardem.preprocess import read_tile_store


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    """Small, dropout-free model config for deterministic forward tests."""
    return ModelConfig(
        backbone="tiny_unet",
        decoder_channels=(64, 48, 32, 16),
        se_reduction=8,
        dropout_p=0.0,
    )


@pytest.fixture(scope="session")
def small_store(tmp_path_factory):
    """A 12-tile synthetic store shared by read-only tests."""
    root = tmp_path_factory.mktemp("store")
    make_dataset(
        n_pairs=12,
        out_dir=root,
        seed=7,
        tile_size=64,
        ranges=DatasetRanges(albedo_noise_std=0.0),
    )
    return read_tile_store(root)
