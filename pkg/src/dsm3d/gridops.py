"""Dense numeric-grid primitives.

A "grid" is a plain ``numpy.ndarray`` of float64 values in row-major layout.
Every operation here is a pure function: inputs are never mutated, outputs
are freshly allocated, and the accumulation order is fixed so repeated calls
are bit-identical. float64 is used throughout the verification and gradient
paths; inference callers may down-convert at their own tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Grid = np.ndarray


@dataclass(frozen=True)
class Shape2D:
    """Spatial extents of a feature grid (height, width, channels)."""

    height: int
    width: int
    channels: int = 1

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError(f"all extents must be >= 1, got {self}")


@dataclass
class Conv2dKernel:
    """Weights of one same-padding 2-D convolution layer.

    weights has shape (kh, kw, cin, cout) with odd kh, kw; bias has shape
    (cout,).
    """

    weights: Grid
    bias: Grid

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 4:
            raise ValueError("kernel weights must have shape (kh, kw, cin, cout)")
        kh, kw, _, cout = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.bias.shape != (cout,):
            raise ValueError("bias shape must match output channels")


def flatten(g: Grid) -> Grid:
    """Stretch an (H, W, C) grid into (H*W, C), y-major row order.

    Row y*W + x of the output is the channel vector at pixel (y, x).
    """
    if g.ndim != 3:
        raise ValueError(f"flatten expects rank 3, got rank {g.ndim}")
    h, w, c = g.shape
    return g.reshape(h * w, c).copy()


def unflatten(g: Grid, height: int, width: int) -> Grid:
    """Inverse of :func:`flatten`: (H*W, C) back to (H, W, C)."""
    if g.ndim != 2:
        raise ValueError(f"unflatten expects rank 2, got rank {g.ndim}")
    n, c = g.shape
    if n != height * width:
        raise ValueError(f"cannot reshape {n} rows to {height}x{width}")
    return g.reshape(height, width, c).copy()


def matmul(a: Grid, b: Grid) -> Grid:
    """Matrix product with the fixed accumulation order of numpy's GEMM."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects two rank-2 grids")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def softmax_rows(a: Grid) -> Grid:
    """Row-wise softmax with per-row max subtraction to guard overflow."""
    if a.ndim != 2:
        raise ValueError("softmax_rows expects a rank-2 grid")
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def layernorm(a: Grid, gamma: Grid, beta: Grid, eps: float = 1e-5) -> Grid:
    """Per-row normalization followed by the (gamma, beta) affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    if a.ndim != 2:
        raise ValueError("layernorm expects a rank-2 grid")
    mean = a.mean(axis=1, keepdims=True)
    var = ((a - mean) ** 2).mean(axis=1, keepdims=True)
    normed = (a - mean) / np.sqrt(var + eps)
    return normed * gamma + beta


def relu(a: Grid) -> Grid:
    return np.maximum(a, 0.0)


def conv2d(g: Grid, k: Conv2dKernel) -> Grid:
    """Same-padding cross-correlation of an (H, W, Cin) grid.

    Zero padding preserves the spatial extents. Implemented as one im2col
    gather plus a single matrix product, so accumulation order is fixed.
    """
    if g.ndim != 3:
        raise ValueError("conv2d expects an (H, W, Cin) grid")
    kh, kw, cin, cout = k.weights.shape
    h, w, gc = g.shape
    if gc != cin:
        raise ValueError(f"input has {gc} channels, kernel expects {cin}")
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=np.float64)
    padded[ph:ph + h, pw:pw + w, :] = g
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    # windows: (H, W, cin, kh, kw) -> columns (H*W, kh*kw*cin) in kernel order
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * cin)
    wmat = k.weights.reshape(kh * kw * cin, cout)
    out = cols @ wmat + k.bias
    return out.reshape(h, w, cout)


def _resize_axis_coords(n_in: int, n_out: int):
    """Source coordinates for align-corners interpolation along one axis."""
    if n_out == 1:
        return np.zeros(1, dtype=np.float64)
    return np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)


def bilinear_resize(g: Grid, out: Shape2D) -> Grid:
    """Bilinear resampling under the align-corners convention.

    Corner pixels of the output replicate the corner pixels of the input
    exactly; constant grids stay constant; affine ramps are reproduced
    to rounding error.
    """
    if g.ndim != 3:
        raise ValueError("bilinear_resize expects an (H, W, C) grid")
    h_in, w_in, c = g.shape
    h_out, w_out = out.height, out.width
    ys = _resize_axis_coords(h_in, h_out)
    xs = _resize_axis_coords(w_in, w_out)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.minimum(y0, h_in - 1)
    x0 = np.minimum(x0, w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = g[y0][:, x0] * (1.0 - fx) + g[y0][:, x1] * fx
    bot = g[y1][:, x0] * (1.0 - fx) + g[y1][:, x1] * fx
    return top * (1.0 - fy) + bot * fy


def bilinear_resize_backward(upstream: Grid, in_shape: Shape2D) -> Grid:
    """Transpose of :func:`bilinear_resize`: scatter upstream to the source."""
    h_out, w_out, c = upstream.shape
    h_in, w_in = in_shape.height, in_shape.width
    ys = _resize_axis_coords(h_in, h_out)
    xs = _resize_axis_coords(w_in, w_out)
    y0 = np.minimum(np.floor(ys).astype(np.intp), h_in - 1)
    x0 = np.minimum(np.floor(xs).astype(np.intp), w_in - 1)
    y1 = np.minimum(y0 + 1, h_in - 1)
    x1 = np.minimum(x0 + 1, w_in - 1)
    fy = ys - y0
    fx = xs - x0
    grad = np.zeros((h_in, w_in, c), dtype=np.float64)
    wy0 = (1.0 - fy)[:, None, None]
    wy1 = fy[:, None, None]
    wx0 = (1.0 - fx)[None, :, None]
    wx1 = fx[None, :, None]
    np.add.at(grad, np.ix_(y0, x0), upstream * wy0 * wx0)
    np.add.at(grad, np.ix_(y0, x1), upstream * wy0 * wx1)
    np.add.at(grad, np.ix_(y1, x0), upstream * wy1 * wx0)
    np.add.at(grad, np.ix_(y1, x1), upstream * wy1 * wx1)
    return grad


def concat_channels(a: Grid, b: Grid) -> Grid:
    """Stack two grids along the channel axis; a occupies channels [0, C1)."""
    if a.ndim != 3 or b.ndim != 3:
        raise ValueError("concat_channels expects rank-3 grids")
    if a.shape[:2] != b.shape[:2]:
        raise ValueError(f"spatial shapes disagree: {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=2)


def max_pool2(g: Grid) -> Grid:
    """2x2 max pooling with stride 2; spatial extents must be even."""
    if g.ndim != 3:
        raise ValueError("max_pool2 expects an (H, W, C) grid")
    h, w, c = g.shape
    if h % 2 or w % 2:
        raise ValueError(f"extents must be even for 2x2 pooling, got {h}x{w}")
    return g.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))
