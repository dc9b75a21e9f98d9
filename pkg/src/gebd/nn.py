"""Neural building blocks: dilated 1D convolutions, layer norm, GELU, sigmoid.

All operate on T x d sequence tensors, preserve the frame count ("same"
length, zero padding outside the sequence), and are differentiable through
the autodiff graph. Convolution tap j of a width 2m+1 kernel multiplies
frame t + dilation*j; `weights[..., j + m]` holds that tap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .autodiff import Tensor, _accumulate, _require_2d

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class Conv1dKernel:
    """Dense 1D convolution: weights (out_channels, in_channels, width), odd width."""

    weights: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if self.weights.data.ndim != 3:
            raise ValueError(f"conv weights must be 3-D, got shape {self.weights.data.shape}")
        out_ch, _, width = self.weights.data.shape
        if width % 2 != 1:
            raise ValueError(f"conv width must be odd, got {width}")
        if self.bias.data.shape != (out_ch,):
            raise ValueError(f"conv bias shape {self.bias.data.shape} does not match {out_ch} outputs")
        if int(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        self.dilation = int(self.dilation)

    @property
    def out_channels(self) -> int:
        return self.weights.data.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.data.shape[1]

    @property
    def width(self) -> int:
        return self.weights.data.shape[2]


@dataclass
class DepthwiseKernel:
    """Per-channel 1D convolution: weights (channels, width), odd width."""

    weights: Tensor
    bias: Tensor
    dilation: int = 1

    def __post_init__(self):
        if self.weights.data.ndim != 2:
            raise ValueError(f"depthwise weights must be 2-D, got shape {self.weights.data.shape}")
        ch, width = self.weights.data.shape
        if width % 2 != 1:
            raise ValueError(f"depthwise width must be odd, got {width}")
        if self.bias.data.shape != (ch,):
            raise ValueError(f"depthwise bias shape {self.bias.data.shape} does not match {ch} channels")
        if int(self.dilation) < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")
        self.dilation = int(self.dilation)

    @property
    def channels(self) -> int:
        return self.weights.data.shape[0]

    @property
    def width(self) -> int:
        return self.weights.data.shape[1]


@dataclass
class LayerNormAffine:
    """Per-frame normalization affine: gamma/beta of length d."""

    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5

    def __post_init__(self):
        if self.gamma.data.ndim != 1 or self.gamma.data.shape != self.beta.data.shape:
            raise ValueError("layer norm gamma/beta must be equal-length 1-D arrays")
        if self.eps <= 0:
            raise ValueError("layer norm eps must be positive")


def _shift_rows(a: np.ndarray, offset: int) -> np.ndarray:
    """out[t] = a[t + offset], zero outside [0, T)."""
    if offset == 0:
        return a
    out = np.zeros_like(a)
    if offset > 0:
        out[:-offset] = a[offset:]
    else:
        out[-offset:] = a[:offset]
    return out


def conv1d(x: Tensor, k: Conv1dKernel) -> Tensor:
    """Dilated 1D convolution with zero padding, output T x out_channels."""
    _require_2d(x, "conv1d")
    if x.data.shape[1] != k.in_channels:
        raise ValueError(f"conv1d: input has {x.data.shape[1]} channels, kernel expects {k.in_channels}")
    m = k.width // 2
    w = k.weights.data
    shifted = [_shift_rows(x.data, k.dilation * j) for j in range(-m, m + 1)]
    out = np.tile(k.bias.data, (x.data.shape[0], 1))
    for tap, sx in enumerate(shifted):
        out += sx @ w[:, :, tap].T

    def backward(g):
        if k.weights.requires_grad:
            dw = np.empty_like(w)
            for tap, sx in enumerate(shifted):
                dw[:, :, tap] = g.T @ sx
            _accumulate(k.weights, dw)
        _accumulate(k.bias, g.sum(axis=0))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for tap in range(k.width):
                j = tap - m
                dx += _shift_rows(g @ w[:, :, tap], -k.dilation * j)
            _accumulate(x, dx)

    return Tensor(out, parents=(x, k.weights, k.bias), backward=backward, validate=False)


def depthwise_conv1d(x: Tensor, k: DepthwiseKernel) -> Tensor:
    """Per-channel dilated 1D convolution; channel c depends only on channel c."""
    _require_2d(x, "depthwise_conv1d")
    if x.data.shape[1] != k.channels:
        raise ValueError(f"depthwise_conv1d: input has {x.data.shape[1]} channels, kernel expects {k.channels}")
    m = k.width // 2
    w = k.weights.data
    shifted = [_shift_rows(x.data, k.dilation * j) for j in range(-m, m + 1)]
    out = np.tile(k.bias.data, (x.data.shape[0], 1))
    for tap, sx in enumerate(shifted):
        out += sx * w[None, :, tap]

    def backward(g):
        if k.weights.requires_grad:
            dw = np.empty_like(w)
            for tap, sx in enumerate(shifted):
                dw[:, tap] = (g * sx).sum(axis=0)
            _accumulate(k.weights, dw)
        _accumulate(k.bias, g.sum(axis=0))
        if x.requires_grad:
            dx = np.zeros_like(x.data)
            for tap in range(k.width):
                j = tap - m
                dx += _shift_rows(g * w[None, :, tap], -k.dilation * j)
            _accumulate(x, dx)

    return Tensor(out, parents=(x, k.weights, k.bias), backward=backward, validate=False)


def layer_norm(x: Tensor, a: LayerNormAffine) -> Tensor:
    """Normalize each frame to zero mean / unit variance, then apply gamma/beta."""
    _require_2d(x, "layer_norm")
    d = x.data.shape[1]
    if a.gamma.data.shape[0] != d:
        raise ValueError(f"layer_norm: affine sized {a.gamma.data.shape[0]}, input has {d} channels")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + a.eps)
    xhat = centered * inv
    out = xhat * a.gamma.data + a.beta.data

    def backward(g):
        _accumulate(a.beta, g.sum(axis=0))
        _accumulate(a.gamma, (g * xhat).sum(axis=0))
        if x.requires_grad:
            dxhat = g * a.gamma.data
            dx = inv * (
                dxhat
                - dxhat.mean(axis=1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
            )
            _accumulate(x, dx)

    return Tensor(out, parents=(x, a.gamma, a.beta), backward=backward, validate=False)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))

    def backward(g):
        pdf = np.exp(-0.5 * x.data ** 2) * _INV_SQRT_2PI
        _accumulate(x, g * (phi_cdf + x.data * pdf))

    return Tensor(x.data * phi_cdf, parents=(x,), backward=backward, validate=False)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, numerically stable for large |x|."""
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z))

    def backward(g):
        _accumulate(x, g * s * (1.0 - s))

    return Tensor(s, parents=(x,), backward=backward, validate=False)


def init_conv1d(rng: np.random.Generator, in_channels: int, out_channels: int,
                width: int, dilation: int = 1) -> Conv1dKernel:
    """Fan-in uniform weights, zero bias."""
    bound = (1.0 / (in_channels * width)) ** 0.5
    w = rng.uniform(-bound, bound, size=(out_channels, in_channels, width))
    return Conv1dKernel(
        Tensor(w, requires_grad=True),
        Tensor(np.zeros(out_channels), requires_grad=True),
        dilation,
    )


def init_depthwise(rng: np.random.Generator, channels: int, width: int,
                   dilation: int = 1) -> DepthwiseKernel:
    bound = (1.0 / width) ** 0.5
    w = rng.uniform(-bound, bound, size=(channels, width))
    return DepthwiseKernel(
        Tensor(w, requires_grad=True),
        Tensor(np.zeros(channels), requires_grad=True),
        dilation,
    )


def init_layer_norm(channels: int, eps: float = 1e-5) -> LayerNormAffine:
    return LayerNormAffine(
        Tensor(np.ones(channels), requires_grad=True),
        Tensor(np.zeros(channels), requires_grad=True),
        eps,
    )
