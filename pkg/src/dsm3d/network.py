"""Forward computation of the elevation network.

The network turns an (H, W, 3) image into an (H, W) elevation map in three
stages: a small convolutional encoder yields a high-resolution local feature
and a low-resolution feature; the low-resolution feature is given a global
receptive field by full-pairwise attention over its pixels; and a learned
per-pixel flow field warps the globalized feature back onto the local one so
the two can be fused by element-wise addition. A reverse-Huber loss drives
training.

All tensors are float64 numpy arrays; every function is pure and
deterministic, so forward passes are bit-reproducible and safe to run on
tiles in parallel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .gridops import (
    Conv2dKernel,
    Grid,
    Shape2D,
    bilinear_resize,
    concat_channels,
    conv2d,
    flatten,
    layernorm,
    matmul,
    max_pool2,
    relu,
    softmax_rows,
    unflatten,
)


@dataclass
class AttentionParams:
    """Projection weights of the globalization stage.

    w_q, w_k, w_v map the C input channels to D embedding channels; the
    embedding is split into ``heads`` contiguous slices, attended per head,
    re-concatenated, and mapped through w_out (D x D).
    """

    w_q: Grid
    w_k: Grid
    w_v: Grid
    w_out: Grid
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[1]
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if d % self.heads:
            raise ValueError(f"embed dim {d} not divisible by {self.heads} heads")
        for name in ("w_q", "w_k", "w_v", "w_out"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")


@dataclass
class ProjectionParams:
    """Post-attention feature projection: relu(layernorm(x @ fc))."""

    fc: Grid
    gamma: Grid
    beta: Grid
    eps: float = 1e-5


@dataclass
class FlowField:
    """Per-pixel 2-vector field of semantic displacements, in pixels.

    Channel 0 is the x displacement, channel 1 the y displacement; shape
    matches the high-resolution feature grid the flow registers onto.
    """

    s: Grid

    def __post_init__(self):
        if self.s.ndim != 3 or self.s.shape[2] != 2:
            raise ValueError("flow field must have shape (H, W, 2)")
        if not np.all(np.isfinite(self.s)):
            raise ValueError("flow field contains non-finite values")

    @property
    def shape(self):
        return self.s.shape[:2]


def pixel_lattice(height: int, width: int) -> Grid:
    """Integer pixel coordinates as an (H, W, 2) grid with coords(y, x) = (x, y)."""
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    return np.stack([xs, ys], axis=2)


@dataclass
class BerHuConfig:
    """Threshold rule of the reverse-Huber loss: c = c_fraction * max|residual|."""

    c_fraction: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.c_fraction <= 1.0:
            raise ValueError("c_fraction must lie in (0, 1]")


@dataclass
class RegistrationWeights:
    """Weights of the local-to-global registration block.

    conv_high / conv_low are 1x1 kernels mapping both features to the same
    channel count; conv_flow is the 3x3 kernel predicting the 2-channel flow
    from their concatenation.
    """

    conv_high: Conv2dKernel
    conv_low: Conv2dKernel
    conv_flow: Conv2dKernel


@dataclass
class EncoderParams:
    """Small convolutional stand-in for a deep backbone.

    Four 3x3 conv blocks with three 2x2 max-pool stages produce a local
    feature at 1/4 resolution (after block 2) and a deeper feature at 1/8
    resolution (after block 4). ``head`` is the 3x3 prediction kernel that
    maps the fused feature to one elevation channel.
    """

    convs: list[Conv2dKernel]
    head: Conv2dKernel

    def __post_init__(self):
        if len(self.convs) != 4:
            raise ValueError("encoder expects exactly 4 conv blocks")


@dataclass
class ModelConfig:
    heads: int = 4
    embed_dim: int = 32
    encoder_widths: tuple[int, int] = (32, 64)
    c_fraction: float = 0.2
    layernorm_eps: float = 1e-5

    def to_dict(self) -> dict:
        return {
            "heads": self.heads,
            "embed_dim": self.embed_dim,
            "encoder_widths": list(self.encoder_widths),
            "c_fraction": self.c_fraction,
            "layernorm_eps": self.layernorm_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls()
        return cls(
            heads=int(d.get("heads", cfg.heads)),
            embed_dim=int(d.get("embed_dim", cfg.embed_dim)),
            encoder_widths=tuple(d.get("encoder_widths", cfg.encoder_widths)),
            c_fraction=float(d.get("c_fraction", cfg.c_fraction)),
            layernorm_eps=float(d.get("layernorm_eps", cfg.layernorm_eps)),
        )


@dataclass
class ModelParams:
    config: ModelConfig
    encoder: EncoderParams
    attention: AttentionParams
    projection: ProjectionParams
    registration: RegistrationWeights


# ---------------------------------------------------------------------------
# globalization


def qkv_project(f: Grid, p: AttentionParams):
    """Three parallel linear maps of the flattened feature: Q, K, V."""
    if f.ndim != 2:
        raise ValueError("qkv_project expects an (N, C) grid")
    if f.shape[1] != p.w_q.shape[0]:
        raise ValueError(f"feature has {f.shape[1]} channels, weights expect {p.w_q.shape[0]}")
    return matmul(f, p.w_q), matmul(f, p.w_k), matmul(f, p.w_v)


def attend(q: Grid, k: Grid, v: Grid) -> Grid:
    """Global attention: softmax_rows(Q K^T) V.

    Deliberately unscaled: no 1/sqrt(d) factor is applied to the logits, so
    each output row is exactly a convex combination of the V rows under the
    raw dot-product weights.

    The reduction runs in a canonical row order (lexicographic over the
    concatenated q/k/v rows), which makes the output bit-exactly invariant
    to any permutation of the input rows, not just invariant up to rounding.
    """
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise ValueError("q, k, v row counts must agree and q, k shapes match")
    n = q.shape[0]
    if n <= 1:
        weights = softmax_rows(matmul(q, k.T))
        return matmul(weights, v)
    key = np.concatenate([q, k, v], axis=1)
    order = np.lexsort(key.T[::-1])
    inverse = np.empty(n, dtype=np.intp)
    inverse[order] = np.arange(n)
    weights = softmax_rows(matmul(q[order], k[order].T))
    return matmul(weights, v[order])[inverse]


def multi_head_attend(f: Grid, p: AttentionParams) -> Grid:
    """Per-head attention on contiguous channel slices, concat, output map."""
    q, k, v = qkv_project(f, p)
    d = q.shape[1]
    dh = d // p.heads
    outs = []
    for i in range(p.heads):
        sl = slice(i * dh, (i + 1) * dh)
        outs.append(attend(q[:, sl], k[:, sl], v[:, sl]))
    return matmul(np.concatenate(outs, axis=1), p.w_out)


def project_features(f_out: Grid, fc: Grid, gamma: Grid, beta: Grid,
                     eps: float = 1e-5) -> Grid:
    """Feature projection relu(layernorm(f_out @ fc)); caller reshapes."""
    return relu(layernorm(matmul(f_out, fc), gamma, beta, eps))


def globalize(f_low: Grid, attention: AttentionParams,
              projection: ProjectionParams) -> Grid:
    """Full globalization of an (H, W, C) feature: attention + projection."""
    h, w, _ = f_low.shape
    flat = flatten(f_low)
    out = multi_head_attend(flat, attention)
    out = project_features(out, projection.fc, projection.gamma,
                           projection.beta, projection.eps)
    return unflatten(out, h, w)


# ---------------------------------------------------------------------------
# flow generation and registration


def _registration_parts(f_high: Grid, f_low: Grid, w: RegistrationWeights):
    """Shared staging: channel-mapped branches, upsampled low branch, flow."""
    hh, wh, _ = f_high.shape
    if f_low.shape[0] > hh or f_low.shape[1] > wh:
        raise ValueError("low-resolution feature larger than high-resolution one")
    mapped_h = conv2d(f_high, w.conv_high)
    mapped_l = conv2d(f_low, w.conv_low)
    up_l = bilinear_resize(mapped_l, Shape2D(hh, wh, mapped_l.shape[2]))
    s = conv2d(concat_channels(up_l, mapped_h), w.conv_flow)
    if s.shape[2] != 2:
        raise ValueError("flow conv must produce exactly 2 channels")
    return mapped_h, up_l, s


def generate_flow(f_high: Grid, f_low: Grid, w: RegistrationWeights) -> FlowField:
    """Predict the displacement field between two feature resolutions.

    Both features are mapped to the same channel count by 1x1 convs, the low
    branch is bilinearly upsampled to the high resolution, and a 3x3 conv on
    their concatenation yields the 2-channel flow.
    """
    _, _, s = _registration_parts(f_high, f_low, w)
    return FlowField(s)


def _corner_indices(coord: Grid, extent: int):
    """Left corner index and weight for bilinear sampling along one axis.

    Uses ceil(x) - 1 as the left corner so the weight of the right corner is
    in (0, 1]; sampling values are unchanged but the implied derivative at
    integer coordinates is the left-continuous subgradient.
    """
    i0 = np.ceil(coord).astype(np.intp) - 1
    frac = coord - i0
    valid0 = (i0 >= 0) & (i0 < extent)
    valid1 = (i0 + 1 >= 0) & (i0 + 1 < extent)
    return i0, frac, valid0, valid1


def sample_bilinear(source: Grid, flow: FlowField):
    """Sample ``source`` at the flow-offset lattice; outside taps contribute 0.

    Returns the sampled grid plus the per-axis corner geometry needed by the
    backward pass.
    """
    h, w, c = source.shape
    if flow.shape != (h, w):
        raise ValueError("flow shape must match the source grid")
    lat = pixel_lattice(h, w)
    x = lat[:, :, 0] + flow.s[:, :, 0]
    y = lat[:, :, 1] + flow.s[:, :, 1]
    x0, fx, vx0, vx1 = _corner_indices(x, w)
    y0, fy, vy0, vy1 = _corner_indices(y, h)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    w00 = ((1.0 - fy) * (1.0 - fx) * vy0 * vx0)[:, :, None]
    w01 = ((1.0 - fy) * fx * vy0 * vx1)[:, :, None]
    w10 = (fy * (1.0 - fx) * vy1 * vx0)[:, :, None]
    w11 = (fy * fx * vy1 * vx1)[:, :, None]
    out = (source[y0c, x0c] * w00 + source[y0c, x1c] * w01
           + source[y1c, x0c] * w10 + source[y1c, x1c] * w11)
    geom = (x0c, x1c, y0c, y1c, fx, fy, vx0, vx1, vy0, vy1)
    return out, geom


def warp(f_low: Grid, flow: FlowField, out: Shape2D) -> Grid:
    """Register a low-resolution feature onto the flow's lattice.

    The feature is first bilinearly upsampled to the output extents, then
    each output pixel gathers the upsampled values around its displaced
    coordinate with bilinear weights; samples landing fully outside the grid
    contribute zero.
    """
    if flow.shape != (out.height, out.width):
        raise ValueError("flow shape must match the output extents")
    up = bilinear_resize(f_low, Shape2D(out.height, out.width, f_low.shape[2]))
    sampled, _ = sample_bilinear(up, flow)
    return sampled


def register_features(f_high: Grid, f_low: Grid, w: RegistrationWeights) -> Grid:
    """Warp the low branch onto the high branch and fuse by addition."""
    mapped_h, up_l, s = _registration_parts(f_high, f_low, w)
    sampled, _ = sample_bilinear(up_l, FlowField(s))
    return sampled + mapped_h


# ---------------------------------------------------------------------------
# loss


def berhu_loss(pred: Grid, gt: Grid, cfg: BerHuConfig = BerHuConfig(),
               valid: Grid | None = None) -> float:
    """Reverse-Huber loss, averaged over valid pixels.

    Per pixel, with x = pred - gt: |x| when |x| <= c, else (x^2 + c^2)/(2c),
    where c = c_fraction * max|x| over the valid set of this image. Both
    branches evaluate to c at |x| = c, so the loss is continuous. A perfect
    prediction gives c = 0, which degenerates to plain L1 (zero).
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    x = pred - gt
    if valid is not None:
        if valid.shape != pred.shape:
            raise ValueError("valid mask shape must match prediction")
        x = x[valid.astype(bool)]
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("no valid pixels to compute the loss over")
    ax = np.abs(x)
    c = cfg.c_fraction * ax.max()
    if c == 0.0:
        return float(ax.mean())
    per_px = np.where(ax <= c, ax, (x * x + c * c) / (2.0 * c))
    return float(per_px.mean())


# ---------------------------------------------------------------------------
# encoder and full forward pass


def encoder_forward(image: Grid, enc: EncoderParams):
    """Run the conv stack; returns (f_high at 1/4, f_low at 1/8)."""
    if image.ndim != 3:
        raise ValueError("encoder expects an (H, W, C) image grid")
    h, w, _ = image.shape
    if h % 8 or w % 8:
        raise ValueError(f"image extents must be divisible by 8, got {h}x{w}")
    t = max_pool2(relu(conv2d(image, enc.convs[0])))
    f_high = max_pool2(relu(conv2d(t, enc.convs[1])))
    t = max_pool2(relu(conv2d(f_high, enc.convs[2])))
    f_low = relu(conv2d(t, enc.convs[3]))
    return f_high, f_low


def predict_elevation(image: Grid, params: ModelParams) -> Grid:
    """Full forward pass: image (H, W, 3) to elevation (H, W)."""
    f_high, f_low = encoder_forward(image, params.encoder)
    g_low = globalize(f_low, params.attention, params.projection)
    fused = register_features(f_high, g_low, params.registration)
    head = conv2d(fused, params.encoder.head)
    h, w = image.shape[:2]
    return bilinear_resize(head, Shape2D(h, w, 1))[:, :, 0]


# ---------------------------------------------------------------------------
# initialization and serialization


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Seeded random initialization; the flow conv starts at zero so
    registration begins as the identity."""
    rng = np.random.default_rng(seed)
    w1, w2 = config.encoder_widths
    d = config.embed_dim

    def conv(kh, kw, cin, cout, scale=None, zero=False):
        if zero:
            weights = np.zeros((kh, kw, cin, cout))
        else:
            std = scale if scale is not None else np.sqrt(2.0 / (kh * kw * cin))
            weights = rng.normal(0.0, std, size=(kh, kw, cin, cout))
        return Conv2dKernel(weights, np.zeros(cout))

    encoder = EncoderParams(
        convs=[conv(3, 3, 3, w1), conv(3, 3, w1, w1),
               conv(3, 3, w1, w2), conv(3, 3, w2, w2)],
        head=conv(3, 3, d, 1, scale=0.1),
    )
    attention = AttentionParams(
        w_q=rng.normal(0.0, 1.0 / np.sqrt(w2), size=(w2, d)),
        w_k=rng.normal(0.0, 1.0 / np.sqrt(w2), size=(w2, d)),
        w_v=rng.normal(0.0, 1.0 / np.sqrt(w2), size=(w2, d)),
        w_out=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
        heads=config.heads,
    )
    projection = ProjectionParams(
        fc=rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, d)),
        gamma=np.ones(d),
        beta=np.zeros(d),
        eps=config.layernorm_eps,
    )
    registration = RegistrationWeights(
        conv_high=conv(1, 1, w1, d),
        conv_low=conv(1, 1, d, d),
        conv_flow=conv(3, 3, 2 * d, 2, zero=True),
    )
    return ModelParams(config, encoder, attention, projection, registration)


def named_tensors(params: ModelParams) -> list[tuple[str, Grid]]:
    """Stable (name, array) listing of every weight tensor in the model."""
    out = []
    for i, k in enumerate(params.encoder.convs):
        out.append((f"encoder.conv{i+1}.weights", k.weights))
        out.append((f"encoder.conv{i+1}.bias", k.bias))
    out.append(("head.weights", params.encoder.head.weights))
    out.append(("head.bias", params.encoder.head.bias))
    a = params.attention
    out += [("attention.w_q", a.w_q), ("attention.w_k", a.w_k),
            ("attention.w_v", a.w_v), ("attention.w_out", a.w_out)]
    p = params.projection
    out += [("projection.fc", p.fc), ("projection.gamma", p.gamma),
            ("projection.beta", p.beta)]
    r = params.registration
    for tag, kernel in (("high", r.conv_high), ("low", r.conv_low),
                        ("flow", r.conv_flow)):
        out.append((f"register.{tag}.weights", kernel.weights))
        out.append((f"register.{tag}.bias", kernel.bias))
    return out


def save_weights(params: ModelParams, path) -> None:
    """Write the weights file: one JSON manifest line, then the raw buffer.

    The manifest records each tensor's name, shape, dtype, and byte offset
    into the little-endian row-major buffer that follows, plus the model
    hyperparameter config.
    """
    tensors = named_tensors(params)
    entries = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "f8", "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format": "dsm3d-weights",
        "version": 1,
        "byte_order": "little",
        "config": params.config.to_dict(),
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for blob in blobs:
            fh.write(blob)


def load_weights(path) -> ModelParams:
    """Read a weights file written by :func:`save_weights`."""
    with open(path, "rb") as fh:
        header = fh.readline()
        buffer = fh.read()
    manifest = json.loads(header.decode("utf-8"))
    if manifest.get("format") != "dsm3d-weights":
        raise ValueError(f"{path}: not a weights file")
    config = ModelConfig.from_dict(manifest["config"])
    arrays = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(buffer, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).astype(np.float64)
    params = init_params(config, seed=0)
    for name, target in named_tensors(params):
        if name not in arrays:
            raise ValueError(f"{path}: missing tensor {name}")
        if arrays[name].shape != target.shape:
            raise ValueError(f"{path}: tensor {name} has shape "
                             f"{arrays[name].shape}, expected {target.shape}")
        target[...] = arrays[name]
    return params
