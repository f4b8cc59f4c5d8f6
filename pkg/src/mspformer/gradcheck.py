# gradcheck.py

"""Finite-difference suites over every differentiable op, the composite blocks and a tiny model."""

import logging

import numpy as np
import pandas as pd

from . import attention, blocks, nnops
from . import tensor as T
from .analysis import charbonnier
from .errors import ConfigError
from .model import ModelConfig, MSPFormer, forward
from .nnops import ParamFactory
from .tensor import Tensor

logger = logging.getLogger(__name__)

SCOPES = ("ops", "blocks", "model")
# Central-difference step per scope; deeper objectives accumulate more round-off.
STEPS = {"ops": 1e-6, "blocks": 1e-5, "model": 5e-5}
REPORT_COLUMNS = ["scope", "case", "instance", "max_rel_error", "coords", "passed"]


def _weighted_sum(out, rng):
    """Scalar objective with random weights so no gradient cancels by symmetry."""
    return T.sum(T.mul(out, Tensor(rng.normal(size=out.shape))))


def _leaf(rng, *shape, low=None):
    data = rng.normal(size=shape)
    if low is not None:
        data = np.abs(data) + low
    return Tensor(data)


# --- Ops ---

def _op_cases():
    def matmul(rng):
        w = rng.normal(size=(2, 3, 2))
        return lambda a, b: T.sum(T.mul(T.matmul(a, b), Tensor(w))), [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)]

    def elementwise(kind):
        def build(rng):
            w = rng.normal(size=(3, 4))
            if kind in ("add", "sub", "mul"):
                return (lambda a, b: T.sum(T.mul(T.elementwise(kind, a, b), Tensor(w))),
                        [_leaf(rng, 3, 4), _leaf(rng, 3, 4)])
            if kind == "scale":
                return lambda a: T.sum(T.mul(T.scale(a, 1.7), Tensor(w))), [_leaf(rng, 3, 4)]
            low = 0.5 if kind == "sqrt" else None
            return lambda a: T.sum(T.mul(T.elementwise(kind, a), Tensor(w))), [_leaf(rng, 3, 4, low=low)]
        return build

    def reductions(rng):
        w = rng.normal(size=(2, 1, 4))
        return (lambda x: T.add(T.sum(T.mul(T.mean(x, axis=1, keepdims=True), Tensor(w))), T.sum(T.square(x))),
                [_leaf(rng, 2, 3, 4)])

    def layout(rng):
        w = rng.normal(size=(4, 2, 6))
        return (lambda x, y: T.sum(T.mul(T.permute(T.reshape(T.concat([x, y], axis=0), (2, 6, 4)), (2, 0, 1)),
                                         Tensor(w))),
                [_leaf(rng, 1, 3, 8), _leaf(rng, 1, 3, 8)])

    def narrow_expand(rng):
        w = rng.normal(size=(3, 4))
        return (lambda x: T.sum(T.mul(T.expand(T.narrow(x, 0, 1, 2), (3, 4)), Tensor(w))),
                [_leaf(rng, 3, 4)])

    def pad(mode):
        def build(rng):
            return lambda x: _weighted_sum(nnops.pad2d(x, 2, mode), np.random.default_rng(1)), [_leaf(rng, 1, 2, 4, 5)]
        return build

    def conv(stride, groups, pad_mode, bias):
        def build(rng):
            c_in, c_out = 4, 4
            w = _leaf(rng, c_out, c_in // groups, 3, 3)
            b = _leaf(rng, c_out) if bias else None

            def fn(x, w, *rest):
                p = nnops.Conv2dParams(w, rest[0] if rest else None, stride, 1, pad_mode, groups)
                return _weighted_sum(nnops.conv2d(x, p), np.random.default_rng(2))

            return fn, [_leaf(rng, 1, c_in, 5, 5), w] + ([b] if bias else [])
        return build

    def pool(kind, kernel, stride):
        op = nnops.avgpool2d if kind == "avg" else nnops.maxpool2d

        def build(rng):
            return lambda x: _weighted_sum(op(x, kernel, stride), np.random.default_rng(3)), [_leaf(rng, 1, 2, 6, 6)]
        return build

    def layernorm(rng):
        return (lambda x, g, b: _weighted_sum(nnops.layernorm(x, g, b, 1e-5), np.random.default_rng(4)),
                [_leaf(rng, 2, 3, 5), _leaf(rng, 5), _leaf(rng, 5)])

    def softmax(rng):
        return lambda x: _weighted_sum(nnops.softmax(x, axis=-1), np.random.default_rng(5)), [_leaf(rng, 3, 5)]

    def linear(rng):
        return (lambda x, w, b: _weighted_sum(nnops.linear(x, w, b), np.random.default_rng(6)),
                [_leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)])

    def activation(kind):
        def build(rng):
            data = rng.normal(size=(3, 4))
            if kind == "relu":
                data = np.where(np.abs(data) < 0.1, 0.5, data)
            return lambda x: _weighted_sum(nnops.activation(x, kind), np.random.default_rng(7)), [Tensor(data)]
        return build

    def shuffle(rng):
        return lambda x: _weighted_sum(nnops.channel_shuffle(x, 2), np.random.default_rng(8)), [_leaf(rng, 1, 4, 3, 3)]

    def split_concat(rng):
        def fn(x):
            a, b = nnops.channel_split(x)
            return _weighted_sum(nnops.channel_concat(T.square(a), b), np.random.default_rng(9))
        return fn, [_leaf(rng, 1, 4, 3, 3)]

    def channel_attention(rng):
        factory = ParamFactory(int(rng.integers(1 << 30)))
        se = factory.se("ca", 8)
        params = [se.reduce.weight, se.reduce.bias, se.expand.weight, se.expand.bias]
        for p in params:
            p.data[...] = rng.normal(scale=0.5, size=p.shape)

        def fn(x, *ps):
            return _weighted_sum(nnops.channel_attention(x, se), np.random.default_rng(10))
        return fn, [_leaf(rng, 1, 8, 4, 4)] + params

    def upsample(rng):
        return lambda x: _weighted_sum(nnops.upsample_nn(x, 2), np.random.default_rng(11)), [_leaf(rng, 1, 2, 3, 3)]

    def sdpa(rng):
        return (lambda q, k, v: _weighted_sum(attention.scaled_dot_product(q, k, v), np.random.default_rng(12)),
                [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4), _leaf(rng, 2, 5, 4)])

    def loss(rng):
        return lambda p, g: charbonnier(p, g, 1e-3), [_leaf(rng, 2, 3, 4), _leaf(rng, 2, 3, 4)]

    cases = {
        "matmul": matmul,
        "add": elementwise("add"), "sub": elementwise("sub"), "mul": elementwise("mul"),
        "scale": elementwise("scale"), "sqrt": elementwise("sqrt"), "square": elementwise("square"),
        "sum_mean": reductions, "reshape_permute_concat": layout, "narrow_expand": narrow_expand,
        "pad2d_zeros": pad("zeros"), "pad2d_reflect": pad("reflect"),
        "conv2d": conv(1, 1, "zeros", True), "conv2d_stride2": conv(2, 1, "zeros", True),
        "conv2d_depthwise_reflect": conv(1, 4, "reflect", True), "conv2d_grouped_nobias": conv(1, 2, "zeros", False),
        "avgpool2d": pool("avg", 2, 2), "avgpool2d_overlap": pool("avg", 3, 1), "maxpool2d": pool("max", 2, 2),
        "layernorm": layernorm, "softmax": softmax, "linear": linear,
        "gelu": activation("gelu"), "relu": activation("relu"), "sigmoid": activation("sigmoid"),
        "channel_shuffle": shuffle, "channel_split_concat": split_concat,
        "channel_attention": channel_attention, "upsample_nn": upsample,
        "scaled_dot_product": sdpa, "charbonnier": loss,
    }
    return cases


# --- Blocks ---

def _condition(named, rng, spread=0.5):
    """Redraws parameters at unit-variance scale so every tensor carries a well-resolved gradient.

    Linear weights get std 1/sqrt(fan_in); biases and norm shifts get ``spread``;
    norm scales sit around one. Conv weights keep their 1/sqrt(fan_in) init.
    """
    params = []
    for name, p in named:
        if name.endswith(("bias", "beta")):
            p.data[...] = rng.normal(scale=spread, size=p.shape)
        elif name.endswith("gamma"):
            p.data[...] = 1.0 + rng.normal(scale=0.2, size=p.shape)
        elif p.data.ndim == 2:
            p.data[...] = rng.normal(scale=1.0 / np.sqrt(p.shape[0]), size=p.shape)
        params.append(p)
    return params


def _block_cases():
    def attention_case(variant):
        def build(rng):
            factory = ParamFactory(int(rng.integers(1 << 30)))
            cfg = attention.AttentionConfig(8, 2, (2, 2), (1, 1), variant)
            p = attention.init_attention(factory, "attn", cfg)
            params = _condition(factory.registry.items(), rng)
            return (lambda x, *ps: _weighted_sum(attention.msp_self_attention(x, p, cfg), np.random.default_rng(20)),
                    [_leaf(rng, 1, 8, 4, 4)] + params)
        return build

    def ffn(rng):
        factory = ParamFactory(int(rng.integers(1 << 30)))
        p = blocks.init_conv_ffn(factory, "ffn", 4, 2)
        params = _condition(factory.registry.items(), rng)
        return (lambda x, *ps: _weighted_sum(blocks.conv_ffn(x, p, (3, 3)), np.random.default_rng(21)),
                [_leaf(rng, 1, 9, 4)] + params)

    def msp(rng):
        factory = ParamFactory(int(rng.integers(1 << 30)))
        cfg = attention.AttentionConfig(8, 2, (2, 2), (1, 1))
        p = blocks.init_msp_block(factory, "blk", cfg, 2)
        params = _condition(factory.registry.items(), rng)
        return (lambda x, *ps: _weighted_sum(blocks.msp_block(x, p), np.random.default_rng(22)),
                [_leaf(rng, 1, 8, 4, 4)] + params)

    def local(channel_attention):
        def build(rng):
            factory = ParamFactory(int(rng.integers(1 << 30)))
            p = blocks.init_lcb(factory, "lcb", 8, channel_attention)
            params = _condition(factory.registry.items(), rng)
            return (lambda x, *ps: _weighted_sum(blocks.lcb(x, p), np.random.default_rng(23)),
                    [_leaf(rng, 1, 8, 6, 6)] + params)
        return build

    def stage(rng):
        factory = ParamFactory(int(rng.integers(1 << 30)))
        p = blocks.init_stage(factory, "stage", 16, 1, 2, (2, 1), 1)
        params = _condition(factory.registry.items(), rng)
        return (lambda x, *ps: _weighted_sum(blocks.run_stage(x, p), np.random.default_rng(24)),
                [_leaf(rng, 1, 16, 4, 4)] + params)

    return {
        "msp_self_attention": attention_case("AA"),
        "attention_ma": attention_case("MA"),
        "attention_sra": attention_case("SRA"),
        "attention_ssp": attention_case("SSP"),
        "conv_ffn": ffn,
        "msp_block": msp,
        "lcb": local(True),
        "lcb_no_ca": local(False),
        "parallel_stage": stage,
    }


# --- Model ---

def _model_cases(tensors_per_instance=12, coords=2):
    def build(rng):
        model = MSPFormer(ModelConfig.tiny(), seed=int(rng.integers(1 << 30)))
        params = _condition(model.params.items(), rng)
        chosen = [params[i] for i in np.sort(rng.choice(len(params), size=min(tensors_per_instance, len(params)),
                                                        replace=False))]
        image = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, 32, 32)))
        weights = rng.normal(size=(1, 3, 32, 32))

        def fn(x, *ps):
            return T.sum(T.mul(forward(model, x), Tensor(weights)))

        return fn, [image] + chosen
    return {"tiny_model": build}, coords


def run_suite(scope, instances=20, seed=0, tol=1e-6):
    """Runs one scope in 64-bit mode and returns a per-instance DataFrame."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown gradcheck scope '{scope}'")
    max_coords, step = 16, STEPS[scope]
    if scope == "ops":
        cases = _op_cases()
    elif scope == "blocks":
        cases = _block_cases()
        max_coords = 8
    else:
        cases, max_coords = _model_cases()

    rows = []
    with T.precision(np.float64):
        for name, build in cases.items():
            for instance in range(instances):
                rng = np.random.default_rng([seed, instance, len(rows)])
                fn, inputs = build(rng)
                report = T.finite_diff_check(fn, inputs, step=step, tol=tol, max_coords=max_coords,
                                             seed=instance, name=name)
                rows.append({"scope": scope, "case": name, "instance": instance,
                             "max_rel_error": report.max_rel_error, "coords": report.coords_checked,
                             "passed": report.passed})
            worst = max(r["max_rel_error"] for r in rows if r["case"] == name)
            logger.info("gradcheck scope=%s case=%s instances=%d worst=%.3e", scope, name, instances, worst)
    return pd.DataFrame(rows, columns=REPORT_COLUMNS)
