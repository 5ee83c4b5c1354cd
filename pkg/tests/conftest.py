"""Shared fixtures: tiny volumes, tiny synthetic specs and a small encoder"""
import numpy as np
import pytest

from adnet import ADNetModel
from models import ClassShape, EncoderConfig, HeadConfig, SyntheticSpec
from volumes import Volume


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    """Four 8x32x32 volumes with two classes"""
    return SyntheticSpec(
        volume_count=4,
        dims=(8, 32, 32),
        spacing=(2.0, 1.0, 1.0),
        classes=[
            ClassShape(class_id=1, family="ellipsoid", radii=(2.5, 6.0, 6.0), level=1.0),
            ClassShape(class_id=2, family="box", radii=(2.0, 4.0, 4.0), level=-1.0),
        ],
        noise_sigma=0.02,
        seed=3,
    )


@pytest.fixture
def two_block_volume() -> Volume:
    """4x4x4 volume: z < 2 at 0.0, z >= 2 at 10.0"""
    data = np.zeros((4, 4, 4), dtype=np.float32)
    data[2:] = 10.0
    return Volume(data=data, spacing=(1.0, 1.0, 1.0))


@pytest.fixture
def small_encoder_config() -> EncoderConfig:
    """Two stages, one of them strided"""
    return EncoderConfig(in_channels=1, stage_widths=[3, 4], feature_dim=4, downsample=2)


@pytest.fixture
def small_model(small_encoder_config) -> ADNetModel:
    return ADNetModel.initialize(small_encoder_config, HeadConfig(), seed=7)


@pytest.fixture
def blob_slice():
    """16x16 image with a bright 6x6 square and its mask"""
    image = np.zeros((16, 16), dtype=np.float32)
    mask = np.zeros((16, 16), dtype=np.uint8)
    image[5:11, 5:11] = 1.0
    mask[5:11, 5:11] = 1
    return image, mask
