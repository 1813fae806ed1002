"""Convolution, pooling, up-sampling, batch norm and dropout with backward passes.

Activations are laid out N x C x H x W.  ``conv2d`` also accepts a single
C x H x W image.  All ops record themselves on the gradient tape through
:func:`mcdseg.tensor.record`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor, record, reshape

MODES = ("train", "inference", "mc_active")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


@dataclass(eq=False)
class ConvLayer:
    weight: Tensor  # out_ch x in_ch x kH x kW
    bias: Tensor  # out_ch
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-D, got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal the output channel count")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @classmethod
    def create(cls, in_ch: int, out_ch: int, kernel: int = 3, *, rng: np.random.Generator,
               stride: int = 1, padding: int | None = None) -> "ConvLayer":
        """He-normal weights, zero bias; padding defaults to 'same' for odd kernels."""
        fan_in = in_ch * kernel * kernel
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(out_ch), requires_grad=True),
                   stride=stride, padding=kernel // 2 if padding is None else padding)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel_size(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_extent(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel_size
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        return ho, wo

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


@dataclass(eq=False)
class BatchNormLayer:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def create(cls, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> "BatchNormLayer":
        return cls(Tensor(np.ones(channels), requires_grad=True),
                   Tensor(np.zeros(channels), requires_grad=True),
                   np.zeros(channels), np.ones(channels), momentum, eps)

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


@dataclass(eq=False)
class DropoutLayer:
    rate: float
    mode: str = field(default="train")

    def __post_init__(self) -> None:
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")
        _check_mode(self.mode)


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(N, C, Hp, Wp) -> (C*kh*kw, N*ho*wo), rows ordered (channel, kernel row, kernel col)."""
    n, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, n, ho, wo))
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    return cols.reshape(c * kh * kw, n * ho * wo)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int, stride: int,
            ho: int, wo: int) -> np.ndarray:
    n, c, hp, wp = shape
    dcols = dcols.reshape(c, kh, kw, n, ho, wo)
    dxp = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def _conv_input_grad(g: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    """Input gradient of a stride-1 conv as a full correlation with the flipped kernel.

    Cheaper than col2im when the layer has fewer output than input channels.
    """
    n, o, ho, wo = g.shape
    _, c, kh, kw = weight.shape
    qh, qw = kh - 1 - pad, kw - 1 - pad
    gp = np.pad(g, ((0, 0), (0, 0), (qh, qh), (qw, qw)))
    h, w = ho + kh - 1 - 2 * pad, wo + kw - 1 - 2 * pad
    cols = _im2col(gp, kh, kw, 1, h, w)
    wflip = weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, -1)
    return (wflip @ cols).reshape(c, n, h, w).transpose(1, 0, 2, 3)


def conv2d(x: Tensor, layer: ConvLayer) -> Tensor:
    """Cross-correlation plus bias with symmetric zero padding."""
    single = x.ndim == 3
    data = x.data[None] if single else x.data
    if data.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W or N x C x H x W, got {x.shape}")
    n, c, h, w = data.shape
    if c != layer.in_channels:
        raise ShapeError(f"input has {c} channels, layer expects {layer.in_channels}")
    kh, kw = layer.kernel_size
    s, p = layer.stride, layer.padding
    if h + 2 * p < kh or w + 2 * p < kw:
        raise ShapeError(f"padded extent {(h + 2 * p, w + 2 * p)} smaller than kernel {(kh, kw)}")
    ho, wo = layer.output_extent(h, w)

    xp = np.pad(data, ((0, 0), (0, 0), (p, p), (p, p))) if p else data
    cols = _im2col(xp, kh, kw, s, ho, wo)
    o = layer.out_channels
    wmat = layer.weight.data.reshape(o, -1)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)
    out = out + layer.bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (gm @ cols.T).reshape(layer.weight.shape)
        db = gm.sum(axis=1)
        dx = None
        if x.requires_grad:
            if s == 1 and p <= min(kh, kw) - 1 and o < c:
                dx = _conv_input_grad(g4, layer.weight.data, p)
            else:
                dxp = _col2im(wmat.T @ gm, xp.shape, kh, kw, s, ho, wo)
                dx = dxp[:, :, p:p + h, p:p + w] if p else dxp
            if single:
                dx = dx[0]
        return dx, dw, db

    return record("conv2d", np.ascontiguousarray(out), (x, layer.weight, layer.bias), backward)


def conv2d_reference(x: np.ndarray, weight: np.ndarray, bias: np.ndarray,
                     stride: int = 1, padding: int = 0) -> np.ndarray:
    """Nested-loop cross-correlation of one C x H x W image; kernel summed row-major."""
    c, h, w = x.shape
    o, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for r in range(ho):
            for col in range(wo):
                acc = 0.0
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            acc += weight[oc, ic, i, j] * xp[ic, r * stride + i, col * stride + j]
                out[oc, r, col] = acc + bias[oc]
    return out


# --------------------------------------------------------------------------
# pooling and up-sampling


def max_pool(x: Tensor, window: int = 2, return_indices: bool = False):
    """Non-overlapping max pooling; ties go to the first element in row-major order."""
    if x.ndim == 3:
        res = max_pool(reshape(x, (1,) + x.shape), window, return_indices)
        if return_indices:
            return reshape(res[0], x.shape[:1] + res[0].shape[2:]), res[1][0]
        return reshape(res, x.shape[:1] + res.shape[2:])
    if x.ndim != 4:
        raise ShapeError(f"max_pool expects C x H x W or N x C x H x W, got {x.shape}")
    n, c, h, w = x.shape
    k = window
    if h % k or w % k:
        raise ShapeError(f"max_pool needs extents divisible by {k}, got {(h, w)}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    res = record("max_pool", out, (x,), backward)
    return (res, idx) if return_indices else res


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    f = factor
    *lead, h, w = x.shape
    out = np.repeat(np.repeat(x.data, f, axis=-2), f, axis=-1)

    def backward(g):
        return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)

    return record("upsample_nearest", out, (x,), backward)


# --------------------------------------------------------------------------
# normalization and dropout


def batchnorm(x: Tensor, layer: BatchNormLayer, mode: str = "train") -> Tensor:
    """Per-channel normalization.

    ``train`` normalizes with batch statistics and updates the running
    estimates in place; ``inference`` and ``mc_active`` use the running
    estimates only.
    """
    _check_mode(mode)
    if x.ndim != 4 or x.shape[1] != layer.channels:
        raise ShapeError(f"batchnorm expects N x {layer.channels} x H x W, got {x.shape}")
    n_, c, h, w = x.shape
    gamma = layer.gamma.data[None, :, None, None]
    beta = layer.beta.data[None, :, None, None]
    axes = (0, 2, 3)

    if mode == "train":
        n = n_ * h * w
        if n < 2:
            raise ShapeError("train-mode batchnorm needs at least two values per channel")
        mu = x.data.mean(axis=axes, keepdims=True)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes, keepdims=True)
        inv = 1.0 / np.sqrt(var + layer.eps)
        xhat = xc * inv
        m = layer.momentum
        layer.running_mean = (1 - m) * layer.running_mean + m * mu.reshape(c)
        layer.running_var = (1 - m) * layer.running_var + m * var.reshape(c) * (n / (n - 1))

        def backward(g):
            dgamma = (g * xhat).sum(axis=axes)
            dbeta = g.sum(axis=axes)
            dxhat = g * gamma
            dx = (inv / n) * (n * dxhat - dxhat.sum(axis=axes, keepdims=True)
                              - xhat * (dxhat * xhat).sum(axis=axes, keepdims=True))
            return dx, dgamma, dbeta
    else:
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)[None, :, None, None]
        xhat = (x.data - layer.running_mean[None, :, None, None]) * inv

        def backward(g):
            return g * gamma * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record("batchnorm", gamma * xhat + beta, (x, layer.gamma, layer.beta), backward)


def dropout(x: Tensor, layer: DropoutLayer, rng: np.random.Generator | None = None,
            mode: str | None = None) -> Tensor:
    """Inverted dropout: identity at inference, ``mask * x / (1 - p)`` otherwise."""
    mode = layer.mode if mode is None else mode
    _check_mode(mode)
    p = layer.rate
    if mode == "inference" or p == 0.0:
        return x
    if rng is None:
        raise ValueError("active dropout needs a random generator")
    mask = (rng.random(x.shape) >= p) * (1.0 / (1.0 - p))
    return record("dropout", x.data * mask, (x,), lambda g: (g * mask,))
