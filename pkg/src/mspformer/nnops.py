# nnops.py

"""Structured neural-network operations on NCHW tensors with backward rules."""

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from scipy.special import softmax as _softmax
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor, _result

PAD_MODES = ("zeros", "reflect")
GELU_COEFF = 0.044715
_SQRT_2_OVER_PI = float(np.sqrt(2.0 / np.pi))


# --- Parameter records ---

@dataclass
class Conv2dParams:
    weight: Tensor  # [C_out, C_in / groups, kH, kW]
    bias: Optional[Tensor] = None
    stride: int = 1
    padding: int = 0
    pad_mode: str = "zeros"
    groups: int = 1

    def __post_init__(self):
        c_out, c_in_g, kh, kw = self.weight.shape
        if kh != kw:
            raise ShapeError("only square kernels are supported")
        if c_out % self.groups:
            raise ShapeError(f"C_out={c_out} not divisible by groups={self.groups}")
        if self.pad_mode not in PAD_MODES:
            raise ContractError(f"unknown pad mode '{self.pad_mode}'")
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be positive and padding non-negative")

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1] * self.groups

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def output_extent(self, size):
        return (size + 2 * self.padding - self.kernel_size) // self.stride + 1


@dataclass
class SEParams:
    reduce: Conv2dParams  # 1x1, C -> max(C / r, 4)
    expand: Conv2dParams  # 1x1, back to C
    reduction: int = 4


@dataclass
class LinearParams:
    weight: Tensor  # [C_in, C_out]
    bias: Optional[Tensor] = None


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


def se_width(channels, reduction=4):
    return max(channels // reduction, 4)


# --- Padding and convolution ---

def pad2d(x, n, mode="zeros"):
    """Pads both spatial axes by ``n`` on every side."""
    if n == 0:
        return x
    if mode not in PAD_MODES:
        raise ContractError(f"unknown pad mode '{mode}'")
    data = x.data
    _, _, h, w = data.shape
    if mode == "zeros":
        out = np.pad(data, ((0, 0), (0, 0), (n, n), (n, n)))
        return _result("pad2d", out, (x,), lambda g: (g[:, :, n:n + h, n:n + w],))

    rows = np.pad(np.arange(h), n, mode="reflect")
    cols = np.pad(np.arange(w), n, mode="reflect")
    out = data[:, :, rows][:, :, :, cols]

    def grad_fn(g):
        g = _fold_reflect(g, cols, w, n, axis=3)
        g = _fold_reflect(g, rows, h, n, axis=2)
        return (g,)

    return _result("pad2d", out, (x,), grad_fn)


def _fold_reflect(grad, index, size, n, axis):
    """Adds gradients of reflected border cells back onto their source cells."""
    keep = [slice(None)] * grad.ndim
    keep[axis] = slice(n, n + size)
    folded = grad[tuple(keep)].copy()
    border = np.concatenate([np.arange(n), np.arange(n + size, n + size + n)])
    np.add.at(np.moveaxis(folded, axis, 0), index[border], np.moveaxis(np.take(grad, border, axis=axis), axis, 0))
    return folded


def conv2d(x, p: Conv2dParams):
    """Cross-correlation with optional padding, stride and channel groups."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got {list(x.shape)}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(f"conv2d expects {p.in_channels} channels, got {x.shape[1]}")
    h_out, w_out = p.output_extent(x.shape[2]), p.output_extent(x.shape[3])
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"conv2d output extent < 1 for input {list(x.shape)}")
    x = pad2d(x, p.padding, p.pad_mode)
    return _conv_core(x, p.weight, p.bias, p.stride, p.groups)


def _conv_core(x, weight, bias, stride, groups):
    data, w = x.data, weight.data
    n, c, _, _ = data.shape
    c_out, c_in_g, k, _ = w.shape
    windows = sliding_window_view(data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    h_out, w_out = windows.shape[2], windows.shape[3]
    cols = windows.reshape(n, groups, c_in_g, h_out, w_out, k, k)
    kernels = w.reshape(groups, c_out // groups, c_in_g, k, k)

    out = np.einsum("ngchwij,gocij->ngohw", cols, kernels, optimize=True).reshape(n, c_out, h_out, w_out)
    if bias is not None:
        out = out + bias.data.reshape(1, c_out, 1, 1)

    def grad_fn(g):
        gg = g.reshape(n, groups, c_out // groups, h_out, w_out)
        grad_w = np.einsum("ngchwij,ngohw->gocij", cols, gg, optimize=True).reshape(w.shape)
        grad_cols = np.einsum("ngohw,gocij->ngchwij", gg, kernels, optimize=True).reshape(n, c, h_out, w_out, k, k)
        grad_x = np.zeros_like(data)
        for i in range(k):
            for j in range(k):
                grad_x[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride] += \
                    grad_cols[..., i, j]
        grads = [grad_x, grad_w]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("conv2d", out, inputs, grad_fn)


# --- Pooling ---

def _pool_extent(x, kernel, stride):
    if x.ndim != 4:
        raise ShapeError(f"pooling expects NCHW input, got {list(x.shape)}")
    if kernel < 1 or stride < 1:
        raise ContractError("kernel and stride must be positive")
    h, w = x.shape[2], x.shape[3]
    if kernel > h or kernel > w:
        raise ShapeError(f"pooling kernel {kernel} exceeds spatial extent {h}x{w}")
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def avgpool2d(x, kernel, stride):
    """Mean over kernel x kernel windows."""
    h_out, w_out = _pool_extent(x, kernel, stride)
    data = x.data
    n, c, h, w = data.shape
    area = kernel * kernel
    if kernel == stride and h == h_out * kernel and w == w_out * kernel:
        # Tiled case: summing one axis at a time keeps powers of two exact.
        out = data.reshape(n, c, h_out, kernel, w_out, kernel).sum(axis=5).sum(axis=3) / area

        def grad_fn(g):
            return (np.repeat(np.repeat(g / area, kernel, axis=2), kernel, axis=3),)

        return _result("avgpool2d", out, (x,), grad_fn)

    windows = sliding_window_view(data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    out = windows.mean(axis=(-2, -1))

    def grad_fn(g):
        grad_x = np.zeros_like(data)
        share = g / area
        for i in range(kernel):
            for j in range(kernel):
                grad_x[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride] += share
        return (grad_x,)

    return _result("avgpool2d", out, (x,), grad_fn)


def maxpool2d(x, kernel, stride):
    """Max over kernel x kernel windows; ties route the gradient to the first maximum."""
    h_out, w_out = _pool_extent(x, kernel, stride)
    data = x.data
    n, c = data.shape[:2]
    windows = sliding_window_view(data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = windows.reshape(n, c, h_out, w_out, kernel * kernel)
    winner = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        grad_x = np.zeros_like(data)
        for i in range(kernel):
            for j in range(kernel):
                grad_x[:, :, i:i + stride * (h_out - 1) + 1:stride, j:j + stride * (w_out - 1) + 1:stride] += \
                    g * (winner == i * kernel + j)
        return (grad_x,)

    return _result("maxpool2d", out, (x,), grad_fn)


def global_avg_pool(x):
    return T.mean(x, axis=(2, 3), keepdims=True)


# --- Normalisation, softmax, linear, activations ---

def layernorm(x, gamma, beta, eps=1e-5):
    """Normalises over the last axis, then applies the affine gamma/beta."""
    if not eps > 0:
        raise ContractError("layernorm eps must be positive")
    channels = x.shape[-1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"layernorm affine extents must be [{channels}]")
    data = x.data
    mu = data.mean(axis=-1, keepdims=True)
    centered = data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std
    out = normed * gamma.data + beta.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        grad_gamma = (g * normed).sum(axis=lead)
        grad_beta = g.sum(axis=lead)
        gn = g * gamma.data
        grad_x = inv_std * (
            gn - gn.mean(axis=-1, keepdims=True) - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        return grad_x, grad_gamma, grad_beta

    return _result("layernorm", out, (x, gamma, beta), grad_fn)


def layer_norm(x, p: LayerNormParams):
    return layernorm(x, p.gamma, p.beta, p.eps)


def softmax(x, axis=-1):
    """Max-subtracted softmax along ``axis``."""
    axis = axis % x.ndim
    out = _softmax(x.data, axis=axis)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result("softmax", out, (x,), grad_fn)


def linear(x, weight, bias=None):
    """Affine map over the last axis: x @ W + b, with W stored [C_in, C_out]."""
    c_in, c_out = weight.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"linear expects trailing extent {c_in}, got {x.shape[-1]}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"linear bias must be [{c_out}]")
    flat = x.data.reshape(-1, c_in)
    out = flat @ weight.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        g2 = g.reshape(-1, c_out)
        grads = [(g2 @ weight.data.T).reshape(x.shape), flat.T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result("linear", out.reshape(x.shape[:-1] + (c_out,)), inputs, grad_fn)


def dense(x, p: LinearParams):
    return linear(x, p.weight, p.bias)


def activation(x, kind):
    """Pointwise gelu (tanh approximation), relu or sigmoid."""
    data = x.data
    if kind == "relu":
        mask = data > 0
        return _result("relu", data * mask, (x,), lambda g: (g * mask,))
    if kind == "sigmoid":
        out = expit(data)
        return _result("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))
    if kind == "gelu":
        inner = _SQRT_2_OVER_PI * (data + GELU_COEFF * data ** 3)
        t = np.tanh(inner)
        out = 0.5 * data * (1.0 + t)

        def grad_fn(g):
            d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEFF * data * data)
            return (g * (0.5 * (1.0 + t) + 0.5 * data * (1.0 - t * t) * d_inner),)

        return _result("gelu", out, (x,), grad_fn)
    raise ContractError(f"unknown activation '{kind}'")


# --- Channel manipulation ---

def channel_shuffle(x, groups):
    """Reshape channels to [groups, C/groups], transpose, flatten."""
    n, c, h, w = x.shape
    if groups < 1 or c % groups:
        raise ShapeError(f"channels {c} not divisible by groups {groups}")
    if groups == 1:
        return x
    y = T.reshape(x, (n, groups, c // groups, h, w))
    y = T.permute(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (n, c, h, w))


def shuffle_permutation(channels, groups):
    """Source channel index for each output channel of :func:`channel_shuffle`."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


def channel_split(x):
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"cannot split an odd channel count {c}")
    return T.narrow(x, 1, 0, c // 2), T.narrow(x, 1, c // 2, c)


def channel_concat(a, b):
    if a.ndim != 4 or b.ndim != 4 or (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"channel_concat needs matching N,H,W: {list(a.shape)} vs {list(b.shape)}")
    return T.concat([a, b], axis=1)


def channel_attention(x, p: SEParams):
    """Squeeze-and-excitation gate: x * sigmoid(expand(relu(reduce(gap(x)))))."""
    if x.shape[1] != p.reduce.in_channels or p.expand.out_channels != x.shape[1]:
        raise ShapeError(f"channel attention built for {p.reduce.in_channels} channels, got {x.shape[1]}")
    s = global_avg_pool(x)
    s = activation(conv2d(s, p.reduce), "relu")
    gate = activation(conv2d(s, p.expand), "sigmoid")
    return T.mul(x, T.expand(gate, x.shape))


def upsample_nn(x, factor):
    """Nearest-neighbour block replication."""
    if factor < 1:
        raise ContractError("upsample factor must be >= 1")
    if factor == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def grad_fn(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _result("upsample_nn", out, (x,), grad_fn)


# --- Token layout ---

def to_tokens(x):
    """NCHW -> [N, H*W, C]."""
    n, c, h, w = x.shape
    return T.reshape(T.permute(x, (0, 2, 3, 1)), (n, h * w, c))


def to_spatial(t, h, w):
    """[N, H*W, C] -> NCHW."""
    n, tokens, c = t.shape
    if tokens != h * w:
        raise ShapeError(f"{tokens} tokens do not form a {h}x{w} map")
    return T.permute(T.reshape(t, (n, h, w, c)), (0, 3, 1, 2))


# --- Initialisation ---

class ParamFactory:
    """Draws initial parameters from one seeded generator and registers them by name.

    Linear weights use a truncated normal (std 0.02, cut at two deviations),
    conv weights a fan-in scaled uniform, biases zeros, norm gamma/beta
    ones/zeros. Draw order follows construction order, so a fixed seed and
    config reproduce the registry bit for bit.
    """

    def __init__(self, seed=0):
        self.rng = np.random.default_rng(seed)
        self.registry = {}
        self._prefix = []

    @contextmanager
    def scope(self, name):
        self._prefix.append(str(name))
        try:
            yield self
        finally:
            self._prefix.pop()

    def register(self, name, data):
        full = ".".join(self._prefix + [name])
        if full in self.registry:
            raise ContractError(f"duplicate parameter name '{full}'")
        t = Tensor(data, requires_grad=True)
        self.registry[full] = t
        return t

    def linear(self, name, c_in, c_out, bias=True):
        with self.scope(name):
            w = truncnorm.rvs(-2.0, 2.0, scale=0.02, size=(c_in, c_out), random_state=self.rng)
            weight = self.register("weight", w)
            b = self.register("bias", np.zeros(c_out)) if bias else None
        return LinearParams(weight, b)

    def conv(self, name, c_in, c_out, kernel, stride=1, padding=0, pad_mode="zeros", groups=1, bias=True):
        fan_in = (c_in // groups) * kernel * kernel
        bound = 1.0 / np.sqrt(fan_in)
        with self.scope(name):
            w = self.rng.uniform(-bound, bound, size=(c_out, c_in // groups, kernel, kernel))
            weight = self.register("weight", w)
            b = self.register("bias", np.zeros(c_out)) if bias else None
        return Conv2dParams(weight, b, stride, padding, pad_mode, groups)

    def depthwise(self, name, channels, kernel=3):
        return self.conv(name, channels, channels, kernel, padding=kernel // 2, pad_mode="reflect", groups=channels)

    def layernorm(self, name, channels, eps=1e-5):
        with self.scope(name):
            gamma = self.register("gamma", np.ones(channels))
            beta = self.register("beta", np.zeros(channels))
        return LayerNormParams(gamma, beta, eps)

    def se(self, name, channels, reduction=4):
        hidden = se_width(channels, reduction)
        with self.scope(name):
            reduce = self.conv("reduce", channels, hidden, 1)
            expand = self.conv("expand", hidden, channels, 1)
        return SEParams(reduce, expand, reduction)
