"""Naive straight-line reimplementations used as independent test oracles.

Everything here is written with explicit per-element loops against the
documented math, sharing no code with the library, so a bug in the
vectorized implementations cannot hide in its own oracle.
"""

import math

import numpy as np


def naive_matmul(a, b):
    m, kk = a.shape
    k2, p = b.shape
    assert kk == k2
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def naive_softmax_rows(a):
    out = np.zeros_like(a, dtype=np.float64)
    for i in range(a.shape[0]):
        row = a[i] - a[i].max()
        e = np.array([math.exp(v) for v in row])
        out[i] = e / e.sum()
    return out


def naive_layernorm(a, gamma, beta, eps):
    out = np.zeros_like(a, dtype=np.float64)
    for i in range(a.shape[0]):
        mu = a[i].mean()
        var = ((a[i] - mu) ** 2).mean()
        out[i] = (a[i] - mu) / math.sqrt(var + eps) * gamma + beta
    return out


def naive_attend(q, k, v):
    logits = naive_matmul(q, k.T)
    weights = naive_softmax_rows(logits)
    return naive_matmul(weights, v)


def naive_multi_head(f, w_q, w_k, w_v, w_out, heads):
    q = naive_matmul(f, w_q)
    k = naive_matmul(f, w_k)
    v = naive_matmul(f, w_v)
    dh = q.shape[1] // heads
    parts = []
    for i in range(heads):
        sl = slice(i * dh, (i + 1) * dh)
        parts.append(naive_attend(q[:, sl], k[:, sl], v[:, sl]))
    return naive_matmul(np.concatenate(parts, axis=1), w_out)


def naive_conv2d(g, weights, bias):
    h, w, cin = g.shape
    kh, kw, _, cout = weights.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((h, w, cout))
    for y in range(h):
        for x in range(w):
            for co in range(cout):
                acc = bias[co]
                for dy in range(kh):
                    for dx in range(kw):
                        yy = y + dy - ph
                        xx = x + dx - pw
                        if 0 <= yy < h and 0 <= xx < w:
                            for ci in range(cin):
                                acc += g[yy, xx, ci] * weights[dy, dx, ci, co]
                out[y, x, co] = acc
    return out


def naive_bilinear_resize(g, h_out, w_out):
    h_in, w_in, c = g.shape
    out = np.zeros((h_out, w_out, c))
    for y in range(h_out):
        sy = 0.0 if h_out == 1 else y * (h_in - 1) / (h_out - 1)
        y0 = min(int(math.floor(sy)), h_in - 1)
        y1 = min(y0 + 1, h_in - 1)
        fy = sy - y0
        for x in range(w_out):
            sx = 0.0 if w_out == 1 else x * (w_in - 1) / (w_out - 1)
            x0 = min(int(math.floor(sx)), w_in - 1)
            x1 = min(x0 + 1, w_in - 1)
            fx = sx - x0
            for ch in range(c):
                top = g[y0, x0, ch] * (1 - fx) + g[y0, x1, ch] * fx
                bot = g[y1, x0, ch] * (1 - fx) + g[y1, x1, ch] * fx
                out[y, x, ch] = top * (1 - fy) + bot * fy
    return out


def naive_warp(f_low, s, h_out, w_out):
    """Literal double-sum sampling: weights max(0, 1 - |offset coord - index|)."""
    up = naive_bilinear_resize(f_low, h_out, w_out)
    c = f_low.shape[2]
    out = np.zeros((h_out, w_out, c))
    for a in range(h_out):
        for b in range(w_out):
            lx = b + s[a, b, 0]
            ly = a + s[a, b, 1]
            for m in range(h_out):
                wy = max(0.0, 1.0 - abs(ly - m))
                if wy == 0.0:
                    continue
                for n in range(w_out):
                    wx = max(0.0, 1.0 - abs(lx - n))
                    if wx == 0.0:
                        continue
                    for ch in range(c):
                        out[a, b, ch] += up[m, n, ch] * wy * wx
    return out


def naive_register(f_high, f_low, w_high, b_high, w_low, b_low, w_flow, b_flow):
    """Step-by-step registration: map, upsample, flow, warp, add."""
    mapped_h = naive_conv2d(f_high, w_high, b_high)
    mapped_l = naive_conv2d(f_low, w_low, b_low)
    hh, wh = f_high.shape[:2]
    up_l = naive_bilinear_resize(mapped_l, hh, wh)
    cat = np.concatenate([up_l, mapped_h], axis=2)
    s = naive_conv2d(cat, w_flow, b_flow)
    # warp the already-upsampled mapped feature (upsample of up_l is identity)
    reg = naive_warp(up_l, s, hh, wh)
    return reg + mapped_h


def naive_berhu(pred, gt, c_fraction=0.2):
    xs = [p - g for p, g in zip(pred.ravel(), gt.ravel())]
    c = c_fraction * max(abs(x) for x in xs)
    total = 0.0
    for x in xs:
        if c == 0.0 or abs(x) <= c:
            total += abs(x)
        else:
            total += (x * x + c * c) / (2 * c)
    return total / len(xs)


def naive_metrics(pred, gt):
    """Per-pixel loop over the positive-valued set; returns a plain dict."""
    rel_sum = 0.0
    sq_sum = 0.0
    log_sq_sum = 0.0
    d1 = d2 = d3 = 0
    n = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        if p <= 0 or g <= 0:
            continue
        n += 1
        rel_sum += abs(p - g) / g
        sq_sum += (p - g) ** 2
        log_sq_sum += (math.log(p) - math.log(g)) ** 2
        ratio = max(p / g, g / p)
        d1 += ratio < 1.25
        d2 += ratio < 1.25 ** 2
        d3 += ratio < 1.25 ** 3
    return {
        "rel": rel_sum / n,
        "rmse": math.sqrt(sq_sum / n),
        "rmse_log": math.sqrt(log_sq_sum / n),
        "delta1": d1 / n,
        "delta2": d2 / n,
        "delta3": d3 / n,
        "n_valid": n,
    }


def naive_maxpool2(g):
    h, w, c = g.shape
    out = np.zeros((h // 2, w // 2, c))
    for y in range(h // 2):
        for x in range(w // 2):
            for ch in range(c):
                out[y, x, ch] = max(g[2 * y, 2 * x, ch], g[2 * y, 2 * x + 1, ch],
                                    g[2 * y + 1, 2 * x, ch], g[2 * y + 1, 2 * x + 1, ch])
    return out


def naive_relu(g):
    return np.where(g > 0, g, 0.0)


def naive_forward(image, params):
    """Full straight-line forward pass mirroring the documented staging."""
    enc = params.encoder
    t = naive_maxpool2(naive_relu(naive_conv2d(image, enc.convs[0].weights,
                                               enc.convs[0].bias)))
    f_high = naive_maxpool2(naive_relu(naive_conv2d(t, enc.convs[1].weights,
                                                    enc.convs[1].bias)))
    t = naive_maxpool2(naive_relu(naive_conv2d(f_high, enc.convs[2].weights,
                                               enc.convs[2].bias)))
    f_low = naive_relu(naive_conv2d(t, enc.convs[3].weights, enc.convs[3].bias))

    hl, wl, _ = f_low.shape
    flat = f_low.reshape(hl * wl, f_low.shape[2])
    att = params.attention
    out = naive_multi_head(flat, att.w_q, att.w_k, att.w_v, att.w_out, att.heads)
    proj = params.projection
    out = naive_relu(naive_layernorm(naive_matmul(out, proj.fc),
                                     proj.gamma, proj.beta, proj.eps))
    g_low = out.reshape(hl, wl, -1)

    reg = params.registration
    fused = naive_register(f_high, g_low,
                           reg.conv_high.weights, reg.conv_high.bias,
                           reg.conv_low.weights, reg.conv_low.bias,
                           reg.conv_flow.weights, reg.conv_flow.bias)
    head = naive_conv2d(fused, enc.head.weights, enc.head.bias)
    h, w = image.shape[:2]
    return naive_bilinear_resize(head, h, w)[:, :, 0]
