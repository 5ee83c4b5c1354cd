"""Small strided convolutional feature extractor"""
import math
from typing import Dict, List

import numpy as np

import tensor as tn
from models import EncoderConfig
from tensor import Tensor
import logging

logger = logging.getLogger(__name__)


class EncoderError(Exception):
    """Encoder input or parameter problems"""
    pass


class EncoderParams:
    """Named kernel and bias tensors for one encoder"""

    def __init__(self, config: EncoderConfig, tensors: Dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        expected = expected_shapes(config)
        for name, shape in expected.items():
            if name not in tensors:
                raise EncoderError(f"missing encoder tensor {name}")
            if tensors[name].shape != shape:
                raise EncoderError(f"{name}: shape {tensors[name].shape} != expected {shape}")
        extra = set(tensors) - set(expected)
        if extra:
            raise EncoderError(f"unexpected encoder tensors: {sorted(extra)}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def parameters(self) -> List[Tensor]:
        return list(self.tensors.values())

    @property
    def num_strided(self) -> int:
        return int(math.log2(self.config.downsample))


def expected_shapes(config: EncoderConfig) -> Dict[str, tuple]:
    shapes = {}
    channels = config.in_channels
    for i, width in enumerate(config.stage_widths):
        shapes[f"stage{i}.weight"] = (width, channels, 3, 3)
        shapes[f"stage{i}.bias"] = (width,)
        channels = width
    shapes["proj.weight"] = (config.feature_dim, channels, 1, 1)
    shapes["proj.bias"] = (config.feature_dim,)
    return shapes


def init_encoder(config: EncoderConfig, seed: int) -> EncoderParams:
    """He-normal kernels (variance 2 / fan_in), zero biases"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return EncoderParams(config, tensors)


def encode(params: EncoderParams, image: Tensor) -> Tensor:
    """[1, Cin, H, W] -> [1, d, H/s, W/s]"""
    config = params.config
    if image.ndim != 4 or image.shape[1] != config.in_channels:
        raise EncoderError(f"expected [N, {config.in_channels}, H, W] input, got {image.shape}")
    height, width = image.shape[2:]
    s = config.downsample
    if height % s or width % s:
        raise EncoderError(f"image {height}x{width} is not divisible by the downsampling factor {s}")

    first_strided = len(config.stage_widths) - params.num_strided
    x = image
    for i in range(len(config.stage_widths)):
        stride = 2 if i >= first_strided else 1
        x = tn.relu(tn.conv2d(x, params[f"stage{i}.weight"], params[f"stage{i}.bias"],
                              stride=stride, padding=1))
    return tn.conv2d(x, params["proj.weight"], params["proj.bias"])
