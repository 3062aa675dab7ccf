"""Hand-derived backward passes and their finite-difference verification.

No autodiff graph exists here: each backward function is the exact
reverse-mode gradient of the matching forward op, derived by hand and
checked against central differences on seeded instances. The training loop
wires them together explicitly for the trainable tail of the network (the
registration block and the prediction head; encoder and attention weights
stay frozen).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gridops import (
    Conv2dKernel,
    Grid,
    Shape2D,
    bilinear_resize,
    bilinear_resize_backward,
    concat_channels,
    conv2d,
    matmul,
    softmax_rows,
)
from .network import (
    BerHuConfig,
    FlowField,
    ModelConfig,
    ModelParams,
    attend,
    encoder_forward,
    globalize,
    init_params,
    sample_bilinear,
    warp,
)


# ---------------------------------------------------------------------------
# backward passes


def berhu_backward(pred: Grid, gt: Grid, cfg: BerHuConfig = BerHuConfig(),
                   valid: Grid | None = None) -> Grid:
    """Gradient of the mean reverse-Huber loss w.r.t. the prediction.

    With x = pred - gt and N valid pixels: sign(x)/N on the L1 branch,
    x/(c*N) on the quadratic branch. The threshold c is treated as a
    constant during differentiation.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    x = pred - gt
    if valid is not None:
        mask = valid.astype(bool)
    else:
        mask = np.ones(pred.shape, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("no valid pixels to compute the loss over")
    ax = np.abs(x[mask])
    c = cfg.c_fraction * ax.max()
    grad = np.zeros_like(x)
    if c == 0.0:
        return grad
    grad[mask] = np.where(np.abs(x[mask]) <= c,
                          np.sign(x[mask]) / n,
                          x[mask] / (c * n))
    return grad


def attend_backward(q: Grid, k: Grid, v: Grid, upstream: Grid):
    """Exact reverse-mode gradients of softmax_rows(Q K^T) V."""
    weights = softmax_rows(matmul(q, k.T))
    dv = matmul(weights.T, upstream)
    dw = matmul(upstream, v.T)
    # softmax Jacobian applied row-wise: P * (dP - sum(dP * P))
    da = weights * (dw - (dw * weights).sum(axis=1, keepdims=True))
    dq = matmul(da, k)
    dk = matmul(da.T, q)
    return dq, dk, dv


def conv2d_backward(g: Grid, k: Conv2dKernel, upstream: Grid):
    """Gradients of same-padding cross-correlation w.r.t. input, weights, bias."""
    kh, kw, cin, cout = k.weights.shape
    h, w, _ = g.shape
    ph, pw = kh // 2, kw // 2
    padded = np.zeros((h + 2 * ph, w + 2 * pw, cin), dtype=np.float64)
    padded[ph:ph + h, pw:pw + w, :] = g
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(0, 1))
    cols = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, kh * kw * cin)
    up_mat = upstream.reshape(h * w, cout)

    d_weights = (cols.T @ up_mat).reshape(kh, kw, cin, cout)
    d_bias = up_mat.sum(axis=0)

    d_cols = (up_mat @ k.weights.reshape(kh * kw * cin, cout).T)
    d_cols = d_cols.reshape(h, w, kh, kw, cin)
    d_padded = np.zeros_like(padded)
    for dy in range(kh):
        for dx in range(kw):
            d_padded[dy:dy + h, dx:dx + w, :] += d_cols[:, :, dy, dx, :]
    d_input = d_padded[ph:ph + h, pw:pw + w, :]
    return d_input, d_weights, d_bias


def sample_backward(source: Grid, flow: FlowField, upstream: Grid):
    """Gradients of bilinear sampling w.r.t. the source grid and the flow.

    The source gradient is the transposed scatter of the sampling weights;
    the flow gradient uses the piecewise-linear weight derivatives, which at
    integer coordinates take the left-continuous subgradient (the corner
    convention in :func:`dsm3d.network.sample_bilinear` makes this implicit).
    """
    _, geom = sample_bilinear(source, flow)
    x0c, x1c, y0c, y1c, fx, fy, vx0, vx1, vy0, vy1 = geom

    w00 = (1.0 - fy) * (1.0 - fx) * vy0 * vx0
    w01 = (1.0 - fy) * fx * vy0 * vx1
    w10 = fy * (1.0 - fx) * vy1 * vx0
    w11 = fy * fx * vy1 * vx1

    d_source = np.zeros_like(source)
    np.add.at(d_source, (y0c, x0c), upstream * w00[:, :, None])
    np.add.at(d_source, (y0c, x1c), upstream * w01[:, :, None])
    np.add.at(d_source, (y1c, x0c), upstream * w10[:, :, None])
    np.add.at(d_source, (y1c, x1c), upstream * w11[:, :, None])

    s00 = source[y0c, x0c] * (vy0 * vx0)[:, :, None]
    s01 = source[y0c, x1c] * (vy0 * vx1)[:, :, None]
    s10 = source[y1c, x0c] * (vy1 * vx0)[:, :, None]
    s11 = source[y1c, x1c] * (vy1 * vx1)[:, :, None]

    d_dx = ((1.0 - fy)[:, :, None] * (s01 - s00)
            + fy[:, :, None] * (s11 - s10))
    d_dy = ((1.0 - fx)[:, :, None] * (s10 - s00)
            + fx[:, :, None] * (s11 - s01))
    d_flow = np.zeros_like(flow.s)
    d_flow[:, :, 0] = (upstream * d_dx).sum(axis=2)
    d_flow[:, :, 1] = (upstream * d_dy).sum(axis=2)
    return d_source, d_flow


def warp_backward(f_low: Grid, flow: FlowField, out: Shape2D, upstream: Grid):
    """Gradients of :func:`dsm3d.network.warp` w.r.t. the source and the flow."""
    up = bilinear_resize(f_low, Shape2D(out.height, out.width, f_low.shape[2]))
    d_up, d_flow = sample_backward(up, flow, upstream)
    d_low = bilinear_resize_backward(d_up, Shape2D(f_low.shape[0], f_low.shape[1],
                                                   f_low.shape[2]))
    return d_low, d_flow


# ---------------------------------------------------------------------------
# finite-difference verification


def central_difference(fn, x: Grid, h: float = 1e-5,
                       where: Grid | None = None) -> Grid:
    """Per-element central finite differences of a scalar function.

    ``where``, when given, restricts which elements are perturbed; the rest
    stay zero in the returned gradient.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.ndindex(x.shape)
    for idx in it:
        if where is not None and not where[idx]:
            continue
        orig = x[idx]
        x[idx] = orig + h
        hi = fn(x)
        x[idx] = orig - h
        lo = fn(x)
        x[idx] = orig
        grad[idx] = (hi - lo) / (2.0 * h)
    return grad


def max_relative_error(analytic: Grid, numeric: Grid,
                       where: Grid | None = None) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), optionally over a subset."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    err = np.abs(a - n) / denom
    if where is not None:
        err = err[where.astype(bool)]
    if err.size == 0:
        return 0.0
    return float(err.max())


@dataclass
class GradCheckReport:
    op: str
    max_rel_err: float
    tolerance: float
    passed: bool
    per_param: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"op": self.op, "max_rel_err": self.max_rel_err,
                "tolerance": self.tolerance, "passed": self.passed,
                "per_param": self.per_param}


def _safe_flow(rng, h, w, lo=-1.6, hi=1.6) -> Grid:
    """Random flow whose displaced coordinates stay away from integers.

    Keeps every fractional part in [0.1, 0.9] so finite differences never
    straddle a kink of the bilinear weight function.
    """
    s = rng.uniform(lo, hi, size=(h, w, 2))
    lat_x, lat_y = np.meshgrid(np.arange(w, dtype=np.float64),
                               np.arange(h, dtype=np.float64))
    coords = np.stack([lat_x + s[:, :, 0], lat_y + s[:, :, 1]], axis=2)
    frac = coords - np.floor(coords)
    s = np.where(frac < 0.1, s + 0.15, s)
    s = np.where(frac > 0.9, s - 0.15, s)
    return s


def _check_berhu(seed: int, h: float):
    rng = np.random.default_rng(seed)
    pred = rng.normal(0.0, 2.0, size=(5, 6))
    gt = rng.normal(0.0, 2.0, size=(5, 6))
    cfg = BerHuConfig()
    from .network import berhu_loss

    analytic = berhu_backward(pred, gt, cfg)
    x = np.abs(pred - gt)
    c = cfg.c_fraction * x.max()
    # perturbing the max-attaining pixel moves c itself; perturbing pixels at
    # the branch threshold straddles the kink: exclude both from the check
    where = (np.abs(x - c) > 1e-3) & (x < x.max())
    numeric = central_difference(lambda p: berhu_loss(p, gt, cfg), pred, h,
                                 where=where)
    return {"pred": max_relative_error(analytic, numeric, where=where)}


def _check_attention(seed: int, h: float):
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(3, 4))
    k = rng.normal(size=(3, 4))
    v = rng.normal(size=(3, 5))
    upstream = rng.normal(size=(3, 5))

    dq, dk, dv = attend_backward(q, k, v, upstream)
    probe = lambda a, b, c: float((attend(a, b, c) * upstream).sum())
    errs = {
        "q": max_relative_error(dq, central_difference(lambda t: probe(t, k, v), q, h)),
        "k": max_relative_error(dk, central_difference(lambda t: probe(q, t, v), k, h)),
        "v": max_relative_error(dv, central_difference(lambda t: probe(q, k, t), v, h)),
    }
    return errs


def _check_warp(seed: int, h: float):
    rng = np.random.default_rng(seed)
    f_low = rng.normal(size=(3, 3, 2))
    out = Shape2D(4, 4, 2)
    s = _safe_flow(rng, 4, 4)
    flow = FlowField(s)
    upstream = rng.normal(size=(4, 4, 2))

    d_low, d_flow = warp_backward(f_low, flow, out, upstream)
    probe_low = lambda t: float((warp(t, flow, out) * upstream).sum())
    probe_s = lambda t: float((warp(f_low, FlowField(t), out) * upstream).sum())
    errs = {
        "source": max_relative_error(d_low, central_difference(probe_low, f_low, h)),
        "flow": max_relative_error(d_flow, central_difference(probe_s, s, h)),
    }
    return errs


def _check_conv2d(seed: int, h: float):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(4, 5, 2))
    k = Conv2dKernel(rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3))
    upstream = rng.normal(size=(4, 5, 3))

    dg, dw, db = conv2d_backward(g, k, upstream)
    probe_g = lambda t: float((conv2d(t, k) * upstream).sum())
    probe_w = lambda t: float((conv2d(g, Conv2dKernel(t, k.bias)) * upstream).sum())
    probe_b = lambda t: float((conv2d(g, Conv2dKernel(k.weights, t)) * upstream).sum())
    errs = {
        "input": max_relative_error(dg, central_difference(probe_g, g, h)),
        "weights": max_relative_error(dw, central_difference(probe_w, k.weights, h)),
        "bias": max_relative_error(db, central_difference(probe_b, k.bias, h)),
    }
    return errs


def _check_resize(seed: int, h: float):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(3, 4, 2))
    out = Shape2D(7, 6, 2)
    upstream = rng.normal(size=(7, 6, 2))

    analytic = bilinear_resize_backward(upstream, Shape2D(3, 4, 2))
    probe = lambda t: float((bilinear_resize(t, out) * upstream).sum())
    return {"input": max_relative_error(analytic, central_difference(probe, g, h))}


# op -> (check, tolerance, finite-difference step). The piecewise ops use
# h = 1e-5; conv2d and resize are exactly linear, so a larger step simply
# suppresses cancellation noise without truncation error.
_CHECKS = {
    "berhu": (_check_berhu, 1e-6, 1e-5),
    "attention": (_check_attention, 1e-6, 1e-5),
    "warp": (_check_warp, 1e-5, 1e-5),
    "conv2d": (_check_conv2d, 1e-6, 1e-3),
    "resize": (_check_resize, 1e-6, 1e-3),
}


def registered_ops() -> list[str]:
    return sorted(_CHECKS)


def grad_check(op: str, seed: int = 0, tol: float | None = None,
               h: float | None = None) -> GradCheckReport:
    """Compare one op's analytic gradient against central differences."""
    if op not in _CHECKS:
        raise KeyError(f"unknown op {op!r}; registered: {registered_ops()}")
    fn, default_tol, default_h = _CHECKS[op]
    tolerance = default_tol if tol is None else tol
    per_param = fn(seed, default_h if h is None else h)
    worst = max(per_param.values())
    return GradCheckReport(op=op, max_rel_err=worst, tolerance=tolerance,
                           passed=worst <= tolerance, per_param=per_param)


# ---------------------------------------------------------------------------
# trainable tail: forward with caches, backward, SGD loop


TRAINABLE = (
    "head.weights", "head.bias",
    "register.high.weights", "register.high.bias",
    "register.low.weights", "register.low.bias",
    "register.flow.weights", "register.flow.bias",
)


def tail_forward(image: Grid, params: ModelParams):
    """Run the full forward pass, caching the trainable-tail intermediates."""
    reg = params.registration
    f_high, f_low = encoder_forward(image, params.encoder)
    g_low = globalize(f_low, params.attention, params.projection)

    mapped_h = conv2d(f_high, reg.conv_high)
    mapped_l = conv2d(g_low, reg.conv_low)
    hh, wh = f_high.shape[:2]
    d = mapped_l.shape[2]
    up_l = bilinear_resize(mapped_l, Shape2D(hh, wh, d))
    cat = concat_channels(up_l, mapped_h)
    s = conv2d(cat, reg.conv_flow)
    flow = FlowField(s)
    sampled, _ = sample_bilinear(up_l, flow)
    fused = sampled + mapped_h
    head_out = conv2d(fused, params.encoder.head)
    h_img, w_img = image.shape[:2]
    pred = bilinear_resize(head_out, Shape2D(h_img, w_img, 1))[:, :, 0]
    cache = {"f_high": f_high, "g_low": g_low, "mapped_l_shape": mapped_l.shape,
             "up_l": up_l, "cat": cat, "flow": flow, "fused": fused}
    return pred, cache


def tail_backward(cache: dict, d_pred: Grid, params: ModelParams):
    """Backpropagate d(loss)/d(pred) to the trainable tensors.

    Encoder and attention weights are constants; gradients come back keyed
    by the tensor names of :func:`dsm3d.network.named_tensors`.
    """
    reg = params.registration
    up_l = cache["up_l"]
    hh, wh = cache["f_high"].shape[:2]
    d = up_l.shape[2]

    d_head_out = bilinear_resize_backward(d_pred[:, :, None], Shape2D(hh, wh, 1))
    d_fused, d_w_head, d_b_head = conv2d_backward(cache["fused"],
                                                  params.encoder.head, d_head_out)
    d_mapped_h = d_fused.copy()
    d_up_l, d_s = sample_backward(up_l, cache["flow"], d_fused)
    d_cat, d_w_flow, d_b_flow = conv2d_backward(cache["cat"], reg.conv_flow, d_s)
    d_up_l += d_cat[:, :, :d]
    d_mapped_h += d_cat[:, :, d:]
    ml_shape = cache["mapped_l_shape"]
    d_mapped_l = bilinear_resize_backward(d_up_l, Shape2D(ml_shape[0], ml_shape[1], d))
    _, d_w_low, d_b_low = conv2d_backward(cache["g_low"], reg.conv_low, d_mapped_l)
    _, d_w_high, d_b_high = conv2d_backward(cache["f_high"], reg.conv_high, d_mapped_h)

    return {
        "head.weights": d_w_head, "head.bias": d_b_head,
        "register.high.weights": d_w_high, "register.high.bias": d_b_high,
        "register.low.weights": d_w_low, "register.low.bias": d_b_low,
        "register.flow.weights": d_w_flow, "register.flow.bias": d_b_flow,
    }


def loss_and_gradients(image: Grid, target: Grid, params: ModelParams,
                       cfg: BerHuConfig | None = None,
                       valid: Grid | None = None):
    """Loss plus gradients of the loss for the trainable tensors."""
    cfg = cfg or BerHuConfig(c_fraction=params.config.c_fraction)
    pred, cache = tail_forward(image, params)
    from .network import berhu_loss
    loss = berhu_loss(pred, target, cfg, valid=valid)
    d_pred = berhu_backward(pred, target, cfg, valid=valid)
    grads = tail_backward(cache, d_pred, params)
    return loss, pred, grads


def trainable_tensors(params: ModelParams) -> dict[str, Grid]:
    from .network import named_tensors
    by_name = dict(named_tensors(params))
    return {name: by_name[name] for name in TRAINABLE}


@dataclass
class TrainTrace:
    """Loss per iteration of one deterministic training run.

    ``params`` carries the trained model for callers that want to persist
    it; it is not part of the JSON serialization.
    """

    seed: int
    losses: list = field(default_factory=list)
    params: ModelParams | None = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "iterations": len(self.losses),
                "losses": self.losses}


@dataclass
class TrainToyConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    learning_rate: float = 0.01
    momentum: float = 0.9
    scene_size: int = 32
    n_scenes: int = 6
    n_prisms: int = 2
    height_range: tuple[float, float] = (3.0, 9.0)
    size_range: tuple[int, int] = (6, 12)


def sgd_momentum_step(tensors: dict[str, Grid], grads: dict[str, Grid],
                      velocity: dict[str, Grid], lr: float, momentum: float):
    """Classic momentum update, in place: v = mu*v + g; theta -= lr*v."""
    for name, theta in tensors.items():
        v = velocity[name]
        v *= momentum
        v += grads[name]
        theta -= lr * v


def train_toy(config: TrainToyConfig | None = None, seed: int = 42,
              iters: int = 200) -> TrainTrace:
    """Fit the trainable tail on synthetic prism heightfields.

    Momentum SGD (0.9) against the reverse-Huber loss over a small pool of
    seeded synthetic scenes; returns the loss trace. Non-finite losses raise
    rather than being swallowed.
    """
    from .synthetic import make_synthetic_scene, render_scene_image

    config = config or TrainToyConfig()
    trace = TrainTrace(seed=seed, params=init_params(config.model, seed=seed))
    if iters == 0:
        return trace

    scenes = []
    for i in range(config.n_scenes):
        scene = make_synthetic_scene(
            seed=seed + 1000 * i,
            extent=(config.scene_size, config.scene_size),
            n_prisms=config.n_prisms,
            height_range=config.height_range,
            size_range=config.size_range,
        )
        image = render_scene_image(scene)
        scenes.append((image, scene.dsm.data))

    params = trace.params
    tensors = trainable_tensors(params)
    velocity = {name: np.zeros_like(t) for name, t in tensors.items()}
    cfg = BerHuConfig(c_fraction=config.model.c_fraction)

    for it in range(iters):
        image, target = scenes[it % len(scenes)]
        loss, _, grads = loss_and_gradients(image, target, params, cfg)
        if not np.isfinite(loss):
            raise RuntimeError(f"training diverged at iteration {it}: loss={loss}")
        trace.losses.append(loss)
        sgd_momentum_step(tensors, grads, velocity, config.learning_rate,
                          config.momentum)
    return trace
