"""Vectorised NumPy implementations of the convolution and pooling kernels.

Every function works on C-contiguous float64 arrays with a leading batch axis,
laid out as ``(batch, day, slot, channel)``. These are the fallback used when
the compiled extension is missing, and the reference the compiled kernels are
benchmarked against.
"""

import numpy as np


def _pad(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)))


def _im2col(x, kh, kw):
    B, D, T, C = x.shape
    xp = _pad(x, kh, kw)
    cols = np.empty((B, D, T, kh, kw, C))
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xp[:, a:a + D, b:b + T, :]
    return cols.reshape(B * D * T, kh * kw * C)


def conv2d_forward(x, w, bias):
    """Return the output and the patch matrix, which the backward pass reuses."""
    B, D, T, _ = x.shape
    co, kh, kw, _ = w.shape
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(co, -1).T
    out += bias
    return out.reshape(B, D, T, co), cols


def conv2d_backward(cols, x_shape, w, gout, input_grad=True):
    """Input, weight and bias gradients; ``gx`` is None when ``input_grad`` is false."""
    B, D, T, C = x_shape
    co, kh, kw, _ = w.shape
    g = gout.reshape(-1, co)
    gw = (g.T @ cols).reshape(w.shape)
    gb = g.sum(axis=0)
    if not input_grad:
        return None, gw, gb
    gcols = (g @ w.reshape(co, -1)).reshape(B, D, T, kh, kw, C)
    ph, pw = kh // 2, kw // 2
    gxp = np.zeros((B, D + 2 * ph, T + 2 * pw, C))
    for a in range(kh):
        for b in range(kw):
            gxp[:, a:a + D, b:b + T, :] += gcols[:, :, :, a, b, :]
    gx = np.ascontiguousarray(gxp[:, ph:ph + D, pw:pw + T, :])
    return gx, gw, gb


def depthwise_forward(x, w, bias):
    B, D, T, C = x.shape
    _, kh, kw = w.shape
    xp = _pad(x, kh, kw)
    out = np.empty_like(x)
    out[...] = bias
    for a in range(kh):
        for b in range(kw):
            out += xp[:, a:a + D, b:b + T, :] * w[:, a, b]
    return out


def depthwise_backward(x, w, gout):
    B, D, T, C = x.shape
    _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = _pad(x, kh, kw)
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for a in range(kh):
        for b in range(kw):
            gw[:, a, b] = np.einsum("ndtc,ndtc->c", gout, xp[:, a:a + D, b:b + T, :])
            gxp[:, a:a + D, b:b + T, :] += gout * w[:, a, b]
    gb = gout.sum(axis=(0, 1, 2))
    gx = np.ascontiguousarray(gxp[:, ph:ph + D, pw:pw + T, :])
    return gx, gw, gb


def maxpool2d_forward(x, pd, pt):
    """Return pooled values and, per output cell, the flat input offset of the winner."""
    B, D, T, C = x.shape
    Do, To = D // pd, T // pt
    win = (x[:, :Do * pd, :To * pt, :]
           .reshape(B, Do, pd, To, pt, C)
           .transpose(0, 1, 3, 2, 4, 5)
           .reshape(B, Do, To, pd * pt, C))
    arg = win.argmax(axis=3)
    out = np.take_along_axis(win, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    da, ta = np.divmod(arg, pt)
    n = np.arange(B)[:, None, None, None]
    i = np.arange(Do)[None, :, None, None] * pd + da
    j = np.arange(To)[None, None, :, None] * pt + ta
    c = np.arange(C)[None, None, None, :]
    flat = ((n * D + i) * T + j) * C + c
    return np.ascontiguousarray(out), flat.astype(np.intp)


def maxpool2d_backward(gout, winners, x_shape):
    gx = np.zeros(int(np.prod(x_shape)))
    # winners never collide: pooling windows do not overlap
    gx[winners.ravel()] = gout.ravel()
    return gx.reshape(x_shape)


def relu_backward(g, out):
    """Upstream gradient masked by ``out > 0`` (flat arrays)."""
    return g * (out > 0)


# Fused ReLU + squeeze + scale over a (B, P, L, Q) view whose middle axis is
# the attended one.

def relu_squeeze(z):
    """``h = relu(z)`` and the per-sample mean of ``h`` over P and Q, shape (B, L)."""
    h = np.maximum(z, 0.0)
    return h, np.einsum("bplq->bl", h) / (z.shape[1] * z.shape[3])


def scale_grad(g, h):
    """Per-sample sum of ``g * h`` over P and Q, shape (B, L)."""
    return np.einsum("bplq,bplq->bl", g, h)


def relu_squeeze_scale_grad(g, h, a, gd):
    """Gradient at the ReLU input: ``(h > 0) * (g * a + gd / (P * Q))``."""
    count = g.shape[1] * g.shape[3]
    return (h > 0) * (g * a[:, None, :, None] + (gd / count)[:, None, :, None])


def adam_update(p, g, m, v, lr, beta1, beta2, eps, t):
    """Bias-corrected Adam step on flat arrays, updating ``p``, ``m``, ``v`` in place."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * g * g
    p -= lr * (m / (1.0 - beta1 ** t)) / (np.sqrt(v / (1.0 - beta2 ** t)) + eps)
