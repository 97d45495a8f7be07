"""Parameterized layers: convolutions, the learnable Gaussian-initialized
blur kernel of the holistic attention module, and map normalization."""

from typing import Optional, Union

import numpy as np

from .tensor import Tensor, ShapeError, conv2d, pad_replicate, record_op

RngLike = Union[int, np.random.Generator, None]


def _as_rng(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class ConvLayer:
    """Convolution weights plus the stride/padding/dilation they are applied with."""

    def __init__(self, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
                 padding: tuple = (0, 0, 0, 0), dilation: int = 1):
        if dilation < 1:
            raise ShapeError(f"dilation must be >= 1, got {dilation}")
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} does not match {weight.shape[0]} filters")
        self.weight = weight
        self.bias = bias
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def parameters(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def init_conv(out_ch: int, in_ch: int, kh: int, kw: int,
              scheme: str = "fan_in_scaled_normal", rng: RngLike = None,
              stride: int = 1, padding: Optional[tuple] = None, dilation: int = 1,
              bias: bool = True, dtype=np.float32) -> ConvLayer:
    """Build a ConvLayer.  ``fan_in_scaled_normal`` draws weights from
    N(0, 2/(in*kh*kw)); biases start at zero.  Deterministic under a seed.

    ``padding=None`` means same-padding for odd kernels at dilation d:
    (d*(k-1)/2 on each side).
    """
    if min(out_ch, in_ch, kh, kw) < 1:
        raise ShapeError(f"conv dims must be positive, got {(out_ch, in_ch, kh, kw)}")
    gen = _as_rng(rng)
    if scheme == "fan_in_scaled_normal":
        std = np.sqrt(2.0 / (in_ch * kh * kw))
        w = gen.normal(0.0, std, size=(out_ch, in_ch, kh, kw))
    elif scheme == "zeros":
        w = np.zeros((out_ch, in_ch, kh, kw))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    if padding is None:
        py, px = dilation * (kh - 1) // 2, dilation * (kw - 1) // 2
        padding = (py, py, px, px)
    weight = Tensor(w.astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True) if bias else None
    return ConvLayer(weight, b, stride=stride, padding=padding, dilation=dilation)


def even_same_padding(size: int) -> tuple:
    """Asymmetric same-padding for an even kernel (e.g. 32 -> (15,16,15,16))."""
    return (size // 2 - 1, size // 2, size // 2 - 1, size // 2)


class GaussianBlurLayer:
    """Single-channel blur with a learnable kernel, zero fixed bias, and
    replicate-edge padding so a constant map stays constant at init."""

    def __init__(self, kernel: Tensor, size: int, sigma: float):
        self.kernel = kernel
        self.size = size
        self.sigma = sigma

    def __call__(self, x: Tensor) -> Tensor:
        if self.size % 2 == 0:
            pad = even_same_padding(self.size)
        else:
            p = (self.size - 1) // 2
            pad = (p, p, p, p)
        padded = pad_replicate(x, pad)
        return conv2d(padded, self.kernel, None, stride=1, padding=(0, 0, 0, 0), dilation=1)

    def parameters(self) -> list[Tensor]:
        return [self.kernel]


def init_gaussian_kernel(size: int, sigma: float, dtype=np.float32) -> GaussianBlurLayer:
    """Discrete 2-D Gaussian, centered at (size-1)/2, normalized to sum 1."""
    if size < 2:
        raise ShapeError(f"gaussian kernel size must be >= 2, got {size}")
    if sigma <= 0:
        raise ShapeError(f"gaussian sigma must be > 0, got {sigma}")
    c = (size - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    k = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2.0 * sigma ** 2))
    k /= k.sum()
    kernel = Tensor(k.reshape(1, 1, size, size).astype(dtype), requires_grad=True)
    return GaussianBlurLayer(kernel, size, sigma)


def blur_geometry_for_side(side: int) -> tuple[int, float]:
    """Kernel size/sigma scaled to the input resolution: size = round(side/11)
    forced even (min 2), sigma = size/8.  352 -> (32, 4.0), 64 -> (6, 0.75)."""
    size = int(round(side / 11.0))
    if size % 2:
        size += 1
    size = max(size, 2)
    return size, size / 8.0


def minmax_normalize(m: Tensor) -> Tensor:
    """Per-sample (x - min)/(max - min) on a 1-channel map.

    A sample whose range is below 1e-12 maps to all zeros.  The backward is
    the exact almost-everywhere derivative: range scaling plus corrective
    terms routed to the first argmin/argmax positions.
    """
    if m.data.ndim != 4 or m.shape[1] != 1:
        raise ShapeError(f"minmax_normalize needs an (n,1,h,w) map, got {m.shape}")
    n = m.shape[0]
    flat = m.data.reshape(n, -1)
    mn = flat.min(axis=1)
    mx = flat.max(axis=1)
    rng_ = mx - mn
    degenerate = rng_ < 1e-12
    inv = np.where(degenerate, 0.0, 1.0 / np.where(degenerate, 1.0, rng_)).astype(m.dtype)
    out = (m.data - mn.reshape(n, 1, 1, 1)) * inv.reshape(n, 1, 1, 1)
    argmin = flat.argmin(axis=1)
    argmax = flat.argmax(axis=1)

    def bwd(g: np.ndarray) -> tuple:
        gm = g * inv.reshape(n, 1, 1, 1)
        gm_flat = gm.reshape(n, -1).copy()
        gflat = g.reshape(n, -1)
        oflat = out.reshape(n, -1)
        s1 = gflat.sum(axis=1)
        s2 = (gflat * oflat).sum(axis=1)
        for b in range(n):
            if degenerate[b]:
                gm_flat[b, :] = 0.0
                continue
            gm_flat[b, argmin[b]] -= (s1[b] - s2[b]) * inv[b]
            gm_flat[b, argmax[b]] -= s2[b] * inv[b]
        return (gm_flat.reshape(m.shape),)

    return record_op(out, (m,), bwd)
