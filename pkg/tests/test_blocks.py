import numpy as np
import pytest

from mspformer import blocks, nnops
from mspformer.attention import AttentionConfig
from mspformer.errors import ShapeError
from mspformer.nnops import ParamFactory
from mspformer.tensor import Tensor


def test_conv_ffn_shape_and_hidden_width(rng):
    factory = ParamFactory(0)
    p = blocks.init_conv_ffn(factory, "ffn", 4, 3)
    assert p.fc1.weight.shape == (4, 12)
    assert p.dw.groups == 12
    out = blocks.conv_ffn(Tensor(rng.normal(size=(2, 12, 4))), p, (3, 4))
    assert out.shape == (2, 12, 4)
    with pytest.raises(ShapeError):
        blocks.conv_ffn(Tensor(rng.normal(size=(2, 12, 4))), p, (3, 3))


def test_msp_block_preserves_shape(rng):
    factory = ParamFactory(1)
    cfg = AttentionConfig(8, 2, (2, 2), (1, 1))
    p = blocks.init_msp_block(factory, "blk", cfg, 2)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    assert blocks.msp_block(x, p).shape == x.shape


def test_lcb_without_gate_is_two_convs(float64, rng):
    p = blocks.init_lcb(ParamFactory(2), "lcb", 6, channel_attention=False)
    assert p.se is None
    x = Tensor(rng.normal(size=(1, 6, 5, 5)))
    expected = nnops.conv2d(nnops.conv2d(x, p.dw), p.pw).data
    np.testing.assert_allclose(blocks.lcb(x, p).data, expected)


def test_lcb_with_gate_adds_se_parameters():
    factory = ParamFactory(3)
    blocks.init_lcb(factory, "lcb", 8)
    assert "lcb.ca.reduce.weight" in factory.registry
    assert "lcb.ca.expand.bias" in factory.registry


def test_stage_names_and_depth():
    factory = ParamFactory(4)
    stage = blocks.init_stage(factory, "enc0", 16, 2, 2, (4, 2), 1)
    assert len(stage.msp_blocks) == len(stage.lcb_blocks) == 2
    assert "enc0.msp1.attn.o.weight" in factory.registry
    assert "enc0.lcb0.pw.weight" in factory.registry
    assert stage.msp_blocks[0].cfg.channels == 8
    no_lcb = blocks.init_stage(ParamFactory(4), "enc0", 16, 2, 2, (4, 2), 1, use_lcb=False)
    assert no_lcb.lcb_blocks == []


def test_empty_lcb_list_passes_second_half_through(float64, rng):
    stage = blocks.init_stage(ParamFactory(5), "s", 8, 1, 2, (2, 1), 1, use_lcb=False, shuffle=False)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    out = blocks.run_stage(x, stage).data
    np.testing.assert_array_equal(out[:, 4:], x.data[:, 4:])


def test_shuffle_is_applied_after_concat(float64, rng):
    plain = blocks.init_stage(ParamFactory(6), "s", 8, 1, 2, (2, 1), 1, shuffle=False)
    shuffled = blocks.init_stage(ParamFactory(6), "s", 8, 1, 2, (2, 1), 1, shuffle=True)
    x = Tensor(rng.normal(size=(1, 8, 4, 4)))
    a = blocks.run_stage(x, plain).data
    b = blocks.run_stage(x, shuffled).data
    np.testing.assert_array_equal(b, a[:, nnops.shuffle_permutation(8, 2)])


def test_stage_rejects_odd_channels(rng):
    stage = blocks.init_stage(ParamFactory(7), "s", 8, 1, 2, (2, 1), 1)
    with pytest.raises(ShapeError):
        blocks.run_stage(Tensor(rng.normal(size=(1, 7, 4, 4))), stage)


def randomize(registry, rng, scale=0.5):
    for t in registry.values():
        t.data[...] = rng.normal(scale=scale, size=t.shape)


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def test_zeroed_branch_outputs_make_msp_block_identity(float64, rng):
    factory = ParamFactory(8)
    cfg = AttentionConfig(8, 2, (2, 2), (1, 1))
    p = blocks.init_msp_block(factory, "blk", cfg, 2)
    randomize(factory.registry, rng)
    for t in (p.attn.out.weight, p.attn.out.bias, p.ffn.fc2.weight, p.ffn.fc2.bias):
        t.data[...] = 0.0
    x = Tensor(rng.normal(size=(2, 8, 4, 4)))
    np.testing.assert_array_equal(blocks.msp_block(x, p).data, x.data)


def test_conv_ffn_with_centre_tap_is_mlp(float64, rng):
    factory = ParamFactory(9)
    p = blocks.init_conv_ffn(factory, "ffn", 4, 3)
    randomize(factory.registry, rng)
    p.dw.weight.data[...] = 0.0
    p.dw.weight.data[:, 0, 1, 1] = 1.0
    p.dw.bias.data[...] = 0.0
    x = rng.normal(size=(2, 12, 4))
    hidden = gelu(x @ p.fc1.weight.data + p.fc1.bias.data)
    expected = hidden @ p.fc2.weight.data + p.fc2.bias.data
    np.testing.assert_allclose(blocks.conv_ffn(Tensor(x), p, (3, 4)).data, expected, atol=1e-12)


def test_lcb_with_gate_matches_stepwise_reference(float64, rng):
    factory = ParamFactory(10)
    p = blocks.init_lcb(factory, "lcb", 8)
    randomize(factory.registry, rng)
    x = rng.normal(size=(2, 8, 5, 6))

    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="reflect")
    dw = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            dw += padded[:, :, a:a + 5, b:b + 6] * p.dw.weight.data[None, :, 0, a, b, None, None]
    dw += p.dw.bias.data[None, :, None, None]
    y = np.einsum("oc,nchw->nohw", p.pw.weight.data[:, :, 0, 0], dw) + p.pw.bias.data[None, :, None, None]
    squeezed = y.mean(axis=(2, 3))
    hidden = np.maximum(squeezed @ p.se.reduce.weight.data[:, :, 0, 0].T + p.se.reduce.bias.data, 0.0)
    gate = 1.0 / (1.0 + np.exp(-(hidden @ p.se.expand.weight.data[:, :, 0, 0].T + p.se.expand.bias.data)))
    expected = y * gate[:, :, None, None]

    np.testing.assert_allclose(blocks.lcb(Tensor(x), p).data, expected, atol=1e-12)
