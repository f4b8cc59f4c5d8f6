# attention.py

"""Multi-scale projection self-attention and its ablation variants.

Queries come from the full-resolution tokens. Keys and values come from two
pooled copies of the feature map; half of the heads attend to each copy and
the head outputs are concatenated and mixed by an output projection.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import nnops
from . import tensor as T
from .errors import ConfigError, ShapeError
from .nnops import Conv2dParams, LinearParams

logger = logging.getLogger(__name__)

VARIANTS = ("AA", "MA", "SRA", "SSP")


@dataclass
class AttentionConfig:
    channels: int
    heads: int
    branch1: Tuple[int, int]  # (kernel, stride)
    branch2: Tuple[int, int]
    variant: str = "AA"

    def __post_init__(self):
        self.branch1 = tuple(int(v) for v in self.branch1)
        self.branch2 = tuple(int(v) for v in self.branch2)
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant '{self.variant}'")
        if self.heads < 2 or self.heads % 2:
            raise ConfigError(f"heads must be even and >= 2, got {self.heads}")
        if self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} not divisible by heads {self.heads}")
        for kernel, stride in (self.branch1, self.branch2):
            if kernel != stride or stride < 1:
                raise ConfigError(f"pool kernel must equal stride, got K={kernel} R={stride}")

    @property
    def head_dim(self):
        return self.channels // self.heads

    @property
    def branches(self):
        return (self.branch1,) if self.variant == "SSP" else (self.branch1, self.branch2)

    @property
    def max_stride(self):
        return max(stride for _, stride in self.branches)


@dataclass
class BranchParams:
    key: LinearParams
    value: LinearParams
    dw_value: Conv2dParams
    reduce: Optional[Conv2dParams] = None  # SRA only


@dataclass
class AttentionParams:
    query: LinearParams
    branches: list
    out: LinearParams


def init_attention(factory, name, cfg: AttentionConfig):
    c = cfg.channels
    width = c if cfg.variant == "SSP" else c // 2
    with factory.scope(name):
        query = factory.linear("q", c, c)
        branches = []
        for i, (kernel, stride) in enumerate(cfg.branches, start=1):
            with factory.scope(f"b{i}"):
                reduce = None
                if cfg.variant == "SRA":
                    reduce = factory.conv("sr", c, c, kernel, stride=stride, bias=False)
                key = factory.linear("k", c, width)
                value = factory.linear("v", c, width)
                dw_value = factory.depthwise("dw_v", c)
            branches.append(BranchParams(key, value, dw_value, reduce))
        out = factory.linear("o", c, c)
    return AttentionParams(query, branches, out)


def reduce_spatial(x, kernel, stride, variant="AA", reduce=None):
    """Spatial aggregation feeding a key/value branch."""
    if variant == "SRA":
        return nnops.conv2d(x, reduce)
    if kernel == 1 and stride == 1:
        return x
    if variant == "MA":
        return nnops.maxpool2d(x, kernel, stride)
    return nnops.avgpool2d(x, kernel, stride)


def pooled_projection(x, kernel, stride, key, value, dw_value, variant="AA", reduce=None):
    """Returns key and value tokens [N, HW/stride^2, C'] of one pooled branch."""
    h, w = x.shape[2], x.shape[3]
    if h % stride or w % stride:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by pool stride {stride}")
    pooled = reduce_spatial(x, kernel, stride, variant, reduce)
    if T.debug_enabled():
        expected = (h // stride) * (w // stride)
        got = pooled.shape[2] * pooled.shape[3]
        if got != expected:
            raise ShapeError(f"pooled token count {got} != {expected}")
    k = nnops.dense(nnops.to_tokens(pooled), key)
    v = nnops.dense(nnops.to_tokens(nnops.conv2d(pooled, dw_value)), value)
    return k, v


def scaled_dot_product(q, k, v):
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention extents disagree: q{list(q.shape)} k{list(k.shape)} v{list(v.shape)}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    logits = T.scale(T.matmul(q, T.permute(k, axes)), 1.0 / np.sqrt(q.shape[-1]))
    return T.matmul(nnops.softmax(logits, axis=-1), v)


def _split_heads(t, heads):
    n, tokens, c = t.shape
    return T.permute(T.reshape(t, (n, tokens, heads, c // heads)), (0, 2, 1, 3))


def _merge_heads(t):
    n, heads, tokens, d = t.shape
    return T.reshape(T.permute(t, (0, 2, 1, 3)), (n, tokens, heads * d))


def msp_self_attention(x, params: AttentionParams, cfg: AttentionConfig):
    """Attention over NCHW ``x``; the output has the input's shape."""
    n, c, h, w = x.shape
    if c != cfg.channels:
        raise ShapeError(f"attention built for {cfg.channels} channels, got {c}")
    if h % cfg.max_stride or w % cfg.max_stride:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by pool stride {cfg.max_stride}")

    q = nnops.dense(nnops.to_tokens(x), params.query)
    heads_per_branch = cfg.heads // len(cfg.branches)
    width = c // len(cfg.branches)
    outputs = []
    for i, ((kernel, stride), branch) in enumerate(zip(cfg.branches, params.branches)):
        k, v = pooled_projection(x, kernel, stride, branch.key, branch.value, branch.dw_value,
                                 cfg.variant, branch.reduce)
        q_b = q if len(cfg.branches) == 1 else T.narrow(q, 2, i * width, (i + 1) * width)
        out = scaled_dot_product(
            _split_heads(q_b, heads_per_branch),
            _split_heads(k, heads_per_branch),
            _split_heads(v, heads_per_branch),
        )
        outputs.append(_merge_heads(out))

    merged = outputs[0] if len(outputs) == 1 else T.concat(outputs, axis=2)
    return nnops.to_spatial(nnops.dense(merged, params.out), h, w)


def attention_variant(x, params, cfg):
    """Runs the MA, SRA or SSP form selected by ``cfg.variant``."""
    if cfg.variant == "AA":
        raise ConfigError("attention_variant expects one of MA, SRA, SSP")
    return msp_self_attention(x, params, cfg)
