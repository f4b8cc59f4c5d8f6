# blocks.py

"""Transformer block, ConvFFN, local capture block and the parallel stage."""

from dataclasses import dataclass, field
from typing import Optional

from . import nnops
from . import tensor as T
from .attention import AttentionConfig, AttentionParams, init_attention, msp_self_attention
from .errors import ShapeError
from .nnops import Conv2dParams, LayerNormParams, LinearParams, SEParams


@dataclass
class ConvFFNParams:
    fc1: LinearParams
    dw: Conv2dParams
    fc2: LinearParams
    expansion: int = 4


@dataclass
class LCBParams:
    dw: Conv2dParams
    pw: Conv2dParams
    se: Optional[SEParams] = None  # None drops the channel gate


@dataclass
class MSPBlockParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    ffn: ConvFFNParams
    cfg: AttentionConfig


@dataclass
class StageParams:
    msp_blocks: list
    lcb_blocks: list = field(default_factory=list)
    shuffle: bool = True


# --- Construction ---

def init_conv_ffn(factory, name, channels, expansion):
    hidden = channels * expansion
    with factory.scope(name):
        fc1 = factory.linear("fc1", channels, hidden)
        dw = factory.depthwise("dw", hidden)
        fc2 = factory.linear("fc2", hidden, channels)
    return ConvFFNParams(fc1, dw, fc2, expansion)


def init_lcb(factory, name, channels, channel_attention=True):
    with factory.scope(name):
        dw = factory.depthwise("dw", channels)
        pw = factory.conv("pw", channels, channels, 1)
        se = factory.se("ca", channels) if channel_attention else None
    return LCBParams(dw, pw, se)


def init_msp_block(factory, name, cfg: AttentionConfig, expansion):
    c = cfg.channels
    with factory.scope(name):
        norm1 = factory.layernorm("norm1", c)
        attn = init_attention(factory, "attn", cfg)
        norm2 = factory.layernorm("norm2", c)
        ffn = init_conv_ffn(factory, "ffn", c, expansion)
    return MSPBlockParams(norm1, attn, norm2, ffn, cfg)


def init_stage(factory, name, dim, depth, heads, pools, expansion, variant="AA",
               use_lcb=True, channel_attention=True, shuffle=True):
    """Builds ``depth`` MSP blocks on one channel half and ``depth`` LCBs on the other."""
    half = dim // 2
    cfg = AttentionConfig(half, heads, (pools[0], pools[0]), (pools[1], pools[1]), variant)
    with factory.scope(name):
        msp = [init_msp_block(factory, f"msp{i}", cfg, expansion) for i in range(depth)]
        lcbs = [init_lcb(factory, f"lcb{i}", half, channel_attention) for i in range(depth)] if use_lcb else []
    return StageParams(msp, lcbs, shuffle)


# --- Forward ---

def conv_ffn(x, p: ConvFFNParams, spatial):
    """fc1, depthwise 3x3 on the token grid, GELU, fc2."""
    h, w = spatial
    if x.shape[1] != h * w:
        raise ShapeError(f"{x.shape[1]} tokens do not match spatial {h}x{w}")
    hidden = nnops.dense(x, p.fc1)
    hidden = nnops.conv2d(nnops.to_spatial(hidden, h, w), p.dw)
    hidden = nnops.activation(nnops.to_tokens(hidden), "gelu")
    return nnops.dense(hidden, p.fc2)


def msp_block(x, p: MSPBlockParams):
    """Pre-norm residual attention followed by pre-norm residual ConvFFN."""
    _, _, h, w = x.shape
    tokens = nnops.to_tokens(x)
    normed = nnops.layer_norm(tokens, p.norm1)
    attended = msp_self_attention(nnops.to_spatial(normed, h, w), p.attn, p.cfg)
    tokens = T.add(tokens, nnops.to_tokens(attended))
    tokens = T.add(tokens, conv_ffn(nnops.layer_norm(tokens, p.norm2), p.ffn, (h, w)))
    return nnops.to_spatial(tokens, h, w)


def lcb(x, p: LCBParams):
    y = nnops.conv2d(nnops.conv2d(x, p.dw), p.pw)
    if p.se is None:
        return y
    return nnops.channel_attention(y, p.se)


def parallel_stage(x, msp_blocks, lcb_blocks, shuffle=True):
    """Split channels, run both branches, concatenate and shuffle with two groups.

    An empty ``lcb_blocks`` list passes the second half through unchanged.
    """
    a, b = nnops.channel_split(x)
    for block in msp_blocks:
        a = msp_block(a, block)
    for block in lcb_blocks:
        b = lcb(b, block)
    y = nnops.channel_concat(a, b)
    return nnops.channel_shuffle(y, 2) if shuffle else y


def run_stage(x, stage: StageParams):
    return parallel_stage(x, stage.msp_blocks, stage.lcb_blocks, stage.shuffle)
