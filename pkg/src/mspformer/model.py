# model.py

"""UNet-shaped encoder/decoder of parallel MSP/LCB stages with a full-resolution refinement stage."""

import copy
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import blocks, cost, nnops
from . import tensor as T
from .attention import VARIANTS
from .errors import ConfigError, ShapeError
from .nnops import Conv2dParams, ParamFactory
from .tensor import Tensor

logger = logging.getLogger(__name__)

INPUT_MULTIPLE = 32


@dataclass
class ModelConfig:
    stage_dims: List[int] = field(default_factory=lambda: [32, 64, 128, 256])
    encoder_depths: List[int] = field(default_factory=lambda: [2, 3, 4, 6])
    decoder_depths: List[int] = field(default_factory=lambda: [4, 3, 2])
    r1: List[int] = field(default_factory=lambda: [16, 8, 4, 2])
    r2: List[int] = field(default_factory=lambda: [8, 4, 2, 1])
    heads: List[int] = field(default_factory=lambda: [2, 2, 4, 8])
    refine_depth: int = 1
    refine_r1: int = 16
    refine_r2: int = 8
    ffn_expansion: int = 4
    attention: str = "AA"
    use_lcb: bool = True
    channel_attention: bool = True
    channel_shuffle: bool = True
    global_residual: bool = True
    pad_mode: str = "zeros"

    @classmethod
    def tiny(cls):
        """Desk-scale configuration used by tests and quick training runs."""
        return cls(stage_dims=[8, 16, 32, 64], encoder_depths=[1, 1, 1, 1], decoder_depths=[1, 1, 1],
                   heads=[2, 2, 2, 2], ffn_expansion=1)

    def validate(self):
        n = len(self.stage_dims)
        if n != 4 or len(self.encoder_depths) != n or len(self.r1) != n or len(self.r2) != n or len(self.heads) != n:
            raise ConfigError("stage_dims, encoder_depths, r1, r2 and heads must all have 4 entries")
        if len(self.decoder_depths) != n - 1:
            raise ConfigError("decoder_depths must have 3 entries")
        if any(d % 2 for d in self.stage_dims):
            raise ConfigError(f"stage_dims must be even, got {self.stage_dims}")
        if any(b <= a for a, b in zip(self.stage_dims, self.stage_dims[1:])):
            raise ConfigError(f"stage_dims must be strictly increasing, got {self.stage_dims}")
        if min(self.encoder_depths + self.decoder_depths + [self.refine_depth]) < 1:
            raise ConfigError("every stage depth must be >= 1")
        if min(self.r1 + self.r2 + [self.refine_r1, self.refine_r2]) < 1:
            raise ConfigError("pool strides must be >= 1")
        for dim, heads in zip(self.stage_dims, self.heads):
            if heads < 2 or heads % 2 or (dim // 2) % heads:
                raise ConfigError(f"heads={heads} must be even and divide the MSP half of width {dim}")
        if self.ffn_expansion < 1:
            raise ConfigError("ffn_expansion must be >= 1")
        if self.attention not in VARIANTS:
            raise ConfigError(f"attention must be one of {', '.join(VARIANTS)}")
        if self.pad_mode not in nnops.PAD_MODES:
            raise ConfigError(f"pad_mode must be one of {', '.join(nnops.PAD_MODES)}")
        return self


@dataclass
class DecoderLevel:
    up: Conv2dParams
    fuse: Conv2dParams
    stage: blocks.StageParams


class MSPFormer:
    """Holds the parameter registry and architecture graph of one restoration network."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg.validate()
        self.seed = seed
        factory = ParamFactory(seed)
        dims = cfg.stage_dims

        def stage(name, dim, depth, heads, pools):
            return blocks.init_stage(
                factory, name, dim, depth, heads, pools, cfg.ffn_expansion, cfg.attention,
                cfg.use_lcb, cfg.channel_attention, cfg.channel_shuffle,
            )

        self.stem = factory.conv("stem", 3, dims[0], 3, stride=2, padding=1, pad_mode=cfg.pad_mode)
        self.encoder = []
        self.downs = []
        for i, dim in enumerate(dims):
            self.encoder.append(stage(f"enc{i}", dim, cfg.encoder_depths[i], cfg.heads[i], (cfg.r1[i], cfg.r2[i])))
            if i + 1 < len(dims):
                self.downs.append(factory.conv(f"down{i}", dim, dims[i + 1], 3, stride=2, padding=1,
                                               pad_mode=cfg.pad_mode))
        self.decoder = []
        for j, i in enumerate(range(len(dims) - 2, -1, -1)):
            with factory.scope(f"dec{i}"):
                up = factory.conv("up", dims[i + 1], dims[i], 1)
                fuse = factory.conv("fuse", 2 * dims[i], dims[i], 1)
            level_stage = stage(f"dec{i}", dims[i], cfg.decoder_depths[j], cfg.heads[i], (cfg.r1[i], cfg.r2[i]))
            self.decoder.append(DecoderLevel(up, fuse, level_stage))
        self.bridge = factory.conv("bridge", dims[0], dims[0], 3, padding=1, pad_mode="reflect")
        self.refine = stage("refine", dims[0], cfg.refine_depth, cfg.heads[0], (cfg.refine_r1, cfg.refine_r2))
        self.head = factory.conv("head", dims[0], 3, 3, padding=1, pad_mode="reflect")
        self.params = factory.registry
        logger.debug("model built params=%d tensors=%d seed=%d", self.count_params(), len(self.params), seed)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def count_params(self):
        return int(sum(t.size for t in self.params.values()))

    def count_macs(self, height, width):
        return cost.count_macs(self, height, width)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def load_state(self, tensors):
        """Copies named arrays into the registry; names and shapes must match exactly."""
        missing = [name for name in self.params if name not in tensors]
        unknown = [name for name in tensors if name not in self.params]
        if missing or unknown:
            raise ShapeError(f"parameter names differ (missing={missing[:3]}, unknown={unknown[:3]})")
        for name, t in self.params.items():
            data = np.asarray(tensors[name])
            if data.shape != t.shape:
                raise ShapeError(f"parameter {name} has shape {list(data.shape)}, expected {list(t.shape)}")
            t.data[...] = data

    def state(self):
        return {name: t.data.copy() for name, t in self.params.items()}

    def forward(self, image):
        return forward(self, image)

    def __call__(self, image):
        return forward(self, image)

    def copy(self):
        """Creates a deep copy of the model instance."""
        return copy.deepcopy(self)


def build_model(cfg: ModelConfig, seed=0):
    return MSPFormer(cfg, seed)


def count_params(model):
    return model.count_params()


def count_macs(model, height, width):
    return cost.count_macs(model, height, width)


def forward(model: MSPFormer, image):
    """Restores an N x 3 x H x W image; H and W must be multiples of 32."""
    if image.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"expected an N x 3 x H x W image, got {list(image.shape)}")
    h, w = image.shape[2], image.shape[3]
    if h % INPUT_MULTIPLE or w % INPUT_MULTIPLE:
        raise ShapeError(f"input {h}x{w} is not a multiple of {INPUT_MULTIPLE}; use pad_to_multiple first")

    x = nnops.conv2d(image, model.stem)
    skips = []
    for i, stage in enumerate(model.encoder):
        if T.debug_enabled() and x.shape[2:] != (h >> (i + 1), w >> (i + 1)):
            raise ShapeError(f"encoder stage {i} sees {list(x.shape[2:])}")
        x = blocks.run_stage(x, stage)
        if i < len(model.downs):
            skips.append(x)
            x = nnops.conv2d(x, model.downs[i])

    for level, skip in zip(model.decoder, reversed(skips)):
        x = nnops.conv2d(nnops.upsample_nn(x, 2), level.up)
        x = nnops.conv2d(nnops.channel_concat(x, skip), level.fuse)
        x = blocks.run_stage(x, level.stage)

    x = nnops.conv2d(nnops.upsample_nn(x, 2), model.bridge)
    x = blocks.run_stage(x, model.refine)
    out = nnops.conv2d(x, model.head)
    if model.cfg.global_residual:
        out = T.add(out, image)
    return out


def pad_to_multiple(image, m=INPUT_MULTIPLE):
    """Reflect-pads the right and bottom edges up to the next multiple of ``m``."""
    if m < 1:
        raise ShapeError(f"pad multiple must be >= 1, got {m}")
    h, w = image.shape[2], image.shape[3]
    pad_h, pad_w = -h % m, -w % m
    if pad_h == 0 and pad_w == 0:
        return image, (h, w)
    data = np.pad(image.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="reflect")
    return Tensor(data), (h, w)


def crop_to(image, extents):
    h, w = extents
    return Tensor(image.data[:, :, :h, :w])


def restore(model, image):
    """Pads, runs the network without recording gradients, and crops back."""
    with T.no_grad():
        padded, extents = pad_to_multiple(image)
        return crop_to(forward(model, padded), extents)
